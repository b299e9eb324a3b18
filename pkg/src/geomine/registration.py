"""Variational image registration, backward warping, and atlas building.

Displacements follow the pull-back convention: ``u(x)`` maps a point of the
fixed grid to ``x + u(x)`` in the moving image, so ``warp(moving, u)``
resembles ``fixed`` after registration.

The registration energy, with intensities divided by ``max_value``, is::

    E(u) = sum_x (M(x + u(x)) - F(x))**2 + smooth_weight * sum_x |grad u(x)|**2

where ``grad u`` uses forward differences (no term across the border) and
``M`` is sampled bilinearly with border clamping. It is minimised by
gradient descent on a 2x area-mean pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .imgcore import Image, VectorField

log = logging.getLogger(__name__)

MAX_HALVINGS = 10
MIN_PYRAMID_SIDE = 8


class RegistrationError(ValueError):
    pass


class DivergenceError(RegistrationError):
    def __init__(self, level: int, iteration: int, energy: float):
        super().__init__(
            f"registration diverged at level {level}, iteration {iteration} (energy={energy})"
        )
        self.level = level
        self.iteration = iteration


@dataclass(frozen=True)
class RegParams:
    levels: int = 3
    iters_per_level: int = 200
    step: float = 0.5
    smooth_weight: float = 1.0
    tol: float = 1e-5

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if not self.smooth_weight >= 0:
            raise ValueError("smooth_weight must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")


@dataclass
class LevelTrace:
    level: int
    shape: tuple[int, int]
    energies: list[float] = field(default_factory=list)


@dataclass
class RegistrationResult:
    field: VectorField
    levels: list[LevelTrace]
    initial_energy: float
    final_energy: float


# --------------------------------------------------------------------------
# sampling helpers
# --------------------------------------------------------------------------

def _cell(coord: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Clamp coordinates and return (lower index, upper index, fraction, unclamped mask)."""
    inside = (coord >= 0) & (coord <= size - 1)
    c = np.clip(coord, 0, size - 1)
    lo = np.minimum(np.floor(c).astype(np.intp), max(size - 2, 0))
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, c - lo, inside


def bilinear_sample(
    arr: np.ndarray, xs: np.ndarray, ys: np.ndarray, with_grad: bool = False
):
    """Sample ``arr`` at real (column, row) coordinates with border clamping.

    With ``with_grad`` the partial derivatives of the interpolant with respect
    to the sample coordinates are returned as well; they vanish where a
    coordinate is clamped.
    """
    h, w = arr.shape
    x0, x1, fx, in_x = _cell(xs, w)
    y0, y1, fy, in_y = _cell(ys, h)
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = (1.0 - fx) * v00 + fx * v01
    bottom = (1.0 - fx) * v10 + fx * v11
    out = (1.0 - fy) * top + fy * bottom
    if not with_grad:
        return out
    dx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * in_x
    dy = (bottom - top) * in_y
    return out, dx, dy


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _check_field(img: Image, fld: VectorField) -> None:
    if fld.channels != 2:
        raise RegistrationError(f"warp needs a 2-channel field, got {fld.channels}")
    if fld.shape != img.shape:
        raise RegistrationError(f"field shape {fld.shape} does not match image shape {img.shape}")
    if not np.all(np.isfinite(fld.data)):
        raise RegistrationError("field contains non-finite components")


def warp(img: Image, fld: VectorField) -> Image:
    """Backward-warp ``img``: ``out(x) = img(x + u(x))`` by bilinear sampling."""
    _check_field(img, fld)
    xs, ys = _grid(img.height, img.width)
    out = bilinear_sample(img.data, xs + fld.data[..., 0], ys + fld.data[..., 1])
    return Image(np.clip(out, 0, img.max_value), img.max_value)


def downsample2(arr: np.ndarray) -> np.ndarray:
    """2x area-mean reduction; odd sizes are edge-padded first."""
    h, w = arr.shape
    padded = np.pad(arr, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (padded[0::2, 0::2] + padded[0::2, 1::2] + padded[1::2, 0::2] + padded[1::2, 1::2])


def resample_field(u: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resample a displacement array to a new grid, rescaling components."""
    h, w, c = u.shape
    sy, sx = h / height, w / width
    xs, ys = _grid(height, width)
    src_x = (xs + 0.5) * sx - 0.5
    src_y = (ys + 0.5) * sy - 0.5
    out = np.empty((height, width, c))
    for k in range(c):
        out[..., k] = bilinear_sample(u[..., k], src_x, src_y)
    out[..., 0] /= sx
    out[..., 1] /= sy
    return out


# --------------------------------------------------------------------------
# energy
# --------------------------------------------------------------------------

def _smoothness(u: np.ndarray) -> float:
    dx = np.diff(u, axis=1)
    dy = np.diff(u, axis=0)
    return float(np.sum(dx * dx) + np.sum(dy * dy))


def energy(fixed: np.ndarray, moving: np.ndarray, u: np.ndarray, smooth_weight: float) -> float:
    """Registration energy of displacement array ``u`` (shape ``(h, w, 2)``)."""
    xs, ys = _grid(*fixed.shape)
    warped = bilinear_sample(moving, xs + u[..., 0], ys + u[..., 1])
    r = warped - fixed
    return float(np.sum(r * r)) + smooth_weight * _smoothness(u)


def energy_gradient(
    fixed: np.ndarray, moving: np.ndarray, u: np.ndarray, smooth_weight: float
) -> tuple[float, np.ndarray]:
    """Energy and its analytic gradient with respect to every displacement component."""
    xs, ys = _grid(*fixed.shape)
    warped, dmx, dmy = bilinear_sample(moving, xs + u[..., 0], ys + u[..., 1], with_grad=True)
    r = warped - fixed
    grad = np.empty_like(u)
    grad[..., 0] = 2.0 * r * dmx
    grad[..., 1] = 2.0 * r * dmy

    dx = np.diff(u, axis=1)
    dy = np.diff(u, axis=0)
    reg = np.zeros_like(u)
    reg[:, 1:] += dx
    reg[:, :-1] -= dx
    reg[1:] += dy
    reg[:-1] -= dy
    grad += 2.0 * smooth_weight * reg

    e = float(np.sum(r * r)) + smooth_weight * float(np.sum(dx * dx) + np.sum(dy * dy))
    return e, grad


def _descend(
    fixed: np.ndarray, moving: np.ndarray, u: np.ndarray, p: RegParams, level: int, trace: LevelTrace
) -> np.ndarray:
    e, g = energy_gradient(fixed, moving, u, p.smooth_weight)
    if not np.isfinite(e):
        raise DivergenceError(level, 0, e)
    trace.energies.append(e)
    step = p.step
    for it in range(1, p.iters_per_level + 1):
        if e == 0.0 or not np.any(g):
            break
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = u - step * g
            e_new, g_new = energy_gradient(fixed, moving, cand, p.smooth_weight)
            if not np.isfinite(e_new):
                raise DivergenceError(level, it, e_new)
            if e_new < e:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel = (e - e_new) / e
        u, e, g = cand, e_new, g_new
        trace.energies.append(e)
        if rel < p.tol:
            break
        step = min(p.step, 2.0 * step)
    return u


def _pyramid(arr: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [arr]
    while len(pyr) < levels and min(pyr[-1].shape) >= MIN_PYRAMID_SIDE:
        pyr.append(downsample2(pyr[-1]))
    return pyr


def register_with_trace(fixed: Image, moving: Image, p: RegParams | None = None) -> RegistrationResult:
    """Register ``moving`` onto ``fixed`` and return the field with its energy traces.

    Levels are processed coarse to fine; the coarsest level is the one
    with index ``len(levels) - 1``. A pyramid level is only added while the
    current level's shorter side is at least 8 pixels.
    """
    p = p or RegParams()
    if fixed.shape != moving.shape:
        raise RegistrationError(f"image shapes differ: {fixed.shape} vs {moving.shape}")
    f0 = fixed.data / fixed.max_value
    m0 = moving.data / moving.max_value
    fixed_pyr = _pyramid(f0, p.levels)
    moving_pyr = _pyramid(m0, p.levels)

    zero = np.zeros(fixed.shape + (2,))
    e_zero = energy(f0, m0, zero, p.smooth_weight)

    traces: list[LevelTrace] = []
    u = np.zeros(fixed_pyr[-1].shape + (2,))
    for level in range(len(fixed_pyr) - 1, -1, -1):
        f, m = fixed_pyr[level], moving_pyr[level]
        if u.shape[:2] != f.shape:
            u = resample_field(u, *f.shape)
        trace = LevelTrace(level, f.shape)
        u = _descend(f, m, u, p, level, trace)
        traces.append(trace)
        log.debug("level %d %s: %d accepted steps, energy %.6g", level, f.shape,
                  len(trace.energies) - 1, trace.energies[-1])

    e_final = energy(f0, m0, u, p.smooth_weight)
    if not e_final <= e_zero:
        u, e_final = zero, e_zero
    return RegistrationResult(VectorField(u), traces, e_zero, e_final)


def register(fixed: Image, moving: Image, p: RegParams | None = None) -> VectorField:
    """Displacement field aligning ``moving`` to ``fixed`` (see module docstring)."""
    return register_with_trace(fixed, moving, p).field


def pixelwise_mean(images: list[Image]) -> Image:
    stack = np.stack([im.data for im in images])
    return Image(np.mean(stack, axis=0), images[0].max_value)


def build_atlas(images: list[Image], p: RegParams | None = None, rounds: int = 1) -> Image:
    """Iterative group-wise template.

    Starts from the pixelwise mean, then for each round registers every image
    to the current template, warps it, and averages the warped images.
    """
    if not images:
        raise RegistrationError("atlas needs at least one image")
    if rounds < 1:
        raise RegistrationError("rounds must be >= 1")
    shape, max_value = images[0].shape, images[0].max_value
    for i, im in enumerate(images):
        if im.shape != shape or im.max_value != max_value:
            raise RegistrationError(f"image {i} does not match the first image's dimensions")
    p = p or RegParams()
    template = pixelwise_mean(images)
    for k in range(rounds):
        warped = [warp(im, register(template, im, p)) for im in images]
        template = pixelwise_mean(warped)
        log.debug("atlas round %d done", k + 1)
    return template
