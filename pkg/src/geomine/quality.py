"""Ordered-attribute scoring and gradient-based meta-task selection/fitting.

The regression model is linear, ``y_hat = w . x + b``, trained on mean
squared error. Gradients are ordered ``(w_1, ..., w_m, b)``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class QualityError(ValueError):
    pass


class FitDivergenceError(QualityError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"joint gradient fit diverged at step {step} (loss={loss})")
        self.step = step


@dataclass(frozen=True, eq=False)
class EvalMatrix:
    d: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64)
        p = np.array(self.p, dtype=np.float64).ravel()
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise QualityError(f"evaluation matrix must be square, got shape {d.shape}")
        if p.size != d.shape[0]:
            raise QualityError(f"weight vector has length {p.size}, expected {d.shape[0]}")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(p))):
            raise QualityError("evaluation matrix and weights must be finite")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "p", p)

    @property
    def k(self) -> int:
        return self.d.shape[0]


def ordered_attribute_eval(e: EvalMatrix) -> np.ndarray:
    """Score vector ``x = D p``."""
    return e.d @ e.p


@dataclass(frozen=True, eq=False)
class MetaTask:
    id: str
    inputs: np.ndarray  # (n, m)
    targets: np.ndarray  # (n,)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.targets, dtype=np.float64).ravel()
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] == 0:
            raise QualityError(f"task {self.id!r}: inputs must be a non-empty (n, m) array")
        if y.size != x.shape[0]:
            raise QualityError(f"task {self.id!r}: {x.shape[0]} inputs but {y.size} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise QualityError(f"task {self.id!r}: non-finite data")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True, eq=False)
class RegressionModel:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise QualityError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, m: int) -> "RegressionModel":
        return cls(np.zeros(m), 0.0)

    def params(self) -> np.ndarray:
        return np.append(self.weights, self.bias)


def _residuals(t: MetaTask, m: RegressionModel) -> np.ndarray:
    if t.n_features != m.weights.size:
        raise QualityError(
            f"task {t.id!r} has {t.n_features} features, model expects {m.weights.size}"
        )
    return t.inputs @ m.weights + m.bias - t.targets


def task_loss(t: MetaTask, m: RegressionModel) -> float:
    r = _residuals(t, m)
    return float(np.mean(r * r))


def task_gradient(t: MetaTask, m: RegressionModel) -> np.ndarray:
    """Gradient of the task's MSE with respect to ``(weights, bias)``."""
    r = _residuals(t, m)
    n = r.size
    return np.append(2.0 / n * (t.inputs.T @ r), 2.0 / n * np.sum(r))


def gradient_cosine(g1: Sequence[float], g2: Sequence[float]) -> float:
    a = np.asarray(g1, dtype=np.float64)
    b = np.asarray(g2, dtype=np.float64)
    if a.shape != b.shape:
        raise QualityError(f"gradient lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise QualityError("cosine similarity is undefined for a zero gradient")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class Selection:
    ids: list[str]
    scores: dict[str, float] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    anchor_excluded: bool = False

    @property
    def flagged(self) -> bool:
        return self.anchor_excluded or bool(self.excluded)


def select_meta_tasks(
    tasks: Sequence[MetaTask], anchor: MetaTask, model: RegressionModel, n: int
) -> Selection:
    """Top ``n`` tasks by gradient-direction similarity to the anchor.

    Ranking is by cosine descending, ties by id ascending. Tasks with a zero
    gradient are excluded and flagged; a zero anchor gradient excludes
    everything.
    """
    if n < 0 or n > len(tasks):
        raise QualityError(f"n must lie in [0, {len(tasks)}], got {n}")
    g_anchor = task_gradient(anchor, model)
    if not np.any(g_anchor):
        log.warning("anchor task %r has a zero gradient; nothing can be ranked", anchor.id)
        return Selection([], excluded=[t.id for t in tasks], anchor_excluded=True)
    sel = Selection([])
    for t in tasks:
        g = task_gradient(t, model)
        if not np.any(g):
            log.warning("task %r has a zero gradient and is excluded", t.id)
            sel.excluded.append(t.id)
            continue
        sel.scores[t.id] = gradient_cosine(g, g_anchor)
    ranked = sorted(sel.scores, key=lambda tid: (-sel.scores[tid], tid))
    sel.ids = ranked[:n]
    return sel


@dataclass
class FitResult:
    model: RegressionModel
    losses: list[float]  # mean-over-tasks MSE after each step


def joint_loss(tasks: Sequence[MetaTask], m: RegressionModel) -> float:
    return float(np.mean([task_loss(t, m) for t in tasks]))


def joint_gradient_fit(tasks: Sequence[MetaTask], steps: int, lr: float) -> FitResult:
    """Gradient descent from zeros on the unweighted mean of per-task gradients."""
    if not tasks:
        raise QualityError("need at least one task")
    if not lr > 0:
        raise QualityError("lr must be > 0")
    if steps < 0:
        raise QualityError("steps must be >= 0")
    m = tasks[0].n_features
    params = np.zeros(m + 1)
    losses = []
    for step in range(1, steps + 1):
        model = RegressionModel(params[:-1], params[-1])
        with np.errstate(over="ignore", invalid="ignore"):
            grad = np.mean([task_gradient(t, model) for t in tasks], axis=0)
            params = params - lr * grad
        if not np.all(np.isfinite(params)):
            raise FitDivergenceError(step, float("nan"))
        with np.errstate(over="ignore", invalid="ignore"):
            loss = joint_loss(tasks, RegressionModel(params[:-1], params[-1]))
        if not np.isfinite(loss):
            raise FitDivergenceError(step, loss)
        losses.append(loss)
    return FitResult(RegressionModel(params[:-1], params[-1]), losses)


# --------------------------------------------------------------------------
# CSV formats
# --------------------------------------------------------------------------

def _rows(buf: bytes):
    try:
        text = bytes(buf).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise QualityError(f"invalid UTF-8: {exc.reason}") from None
    try:
        rows = list(csv.reader(io.StringIO(text, newline="")))
    except csv.Error as exc:
        raise QualityError(f"malformed CSV: {exc}") from None
    for lineno, row in enumerate(rows, start=1):
        if row and any(c.strip() for c in row):
            yield lineno, [c.strip() for c in row]


def _floats(cells: list[str], lineno: int) -> list[float]:
    try:
        return [float(c) for c in cells]
    except ValueError:
        raise QualityError(f"line {lineno}: unparsable number") from None


def parse_tasks_csv(buf: bytes) -> list[MetaTask]:
    """Rows ``task_id,y,x1,...,xm``; an optional header starts with ``task_id``.

    Tasks are returned in order of first appearance.
    """
    grouped: dict[str, tuple[list, list]] = {}
    width = None
    for lineno, cells in _rows(buf):
        if lineno == 1 and cells[0] == "task_id":
            continue
        if len(cells) < 3:
            raise QualityError(f"line {lineno}: need task_id, y and at least one feature")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise QualityError(f"line {lineno}: expected {width} columns, got {len(cells)}")
        y, *x = _floats(cells[1:], lineno)
        xs, ys = grouped.setdefault(cells[0], ([], []))
        xs.append(x)
        ys.append(y)
    return [MetaTask(tid, xs, ys) for tid, (xs, ys) in grouped.items()]


def parse_matrix_csv(buf: bytes) -> np.ndarray:
    rows = [_floats(cells, lineno) for lineno, cells in _rows(buf)]
    if not rows:
        raise QualityError("empty matrix")
    if len({len(r) for r in rows}) != 1:
        raise QualityError("matrix rows have different lengths")
    return np.array(rows)


def parse_vector_csv(buf: bytes) -> np.ndarray:
    """All numbers in the file, row-major (a row or a column both work)."""
    values = [v for lineno, cells in _rows(buf) for v in _floats(cells, lineno)]
    if not values:
        raise QualityError("empty vector")
    return np.array(values)
