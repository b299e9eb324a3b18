"""Image-quality, classification, and detection metrics plus their input parsers."""

from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .imgcore import Image, mean_squared_difference


class MetricError(ValueError):
    pass


class AnnotationError(ValueError):
    """VOC-XML annotation could not be parsed or validated.

    ``element`` names the missing/bad element when known, ``index`` the
    zero-based object index.
    """

    def __init__(self, message: str, element: str | None = None, index: int | None = None):
        super().__init__(message)
        self.element = element
        self.index = index


class DetectionParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# --------------------------------------------------------------------------
# image quality
# --------------------------------------------------------------------------

class QualityReport(NamedTuple):
    mse: float
    psnr: float
    ssim: float


def psnr_from_mse(mse: float, max_value: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def global_ssim(x: np.ndarray, y: np.ndarray, max_value: float) -> float:
    """SSIM over the whole image as one window, population (1/N) statistics."""
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    mu_x = float(np.mean(x))
    mu_y = float(np.mean(y))
    dx = x - mu_x
    dy = y - mu_y
    var_x = float(np.mean(dx * dx))
    var_y = float(np.mean(dy * dy))
    cov = float(np.mean(dx * dy))
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def image_quality(x: Image, y: Image) -> QualityReport:
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.max_value != y.max_value:
        raise MetricError(f"max values differ: {x.max_value} vs {y.max_value}")
    mse = mean_squared_difference(x.data, y.data)
    return QualityReport(mse, psnr_from_mse(mse, x.max_value), global_ssim(x.data, y.data, x.max_value))


# --------------------------------------------------------------------------
# classification rates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise MetricError(f"{name} must be a non-negative integer, got {v}")


class Rates(NamedTuple):
    """``None`` marks a rate whose denominator is zero."""

    precision: float | None
    recall: float | None
    specificity: float | None


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def classification_rates(c: ConfusionCounts) -> Rates:
    return Rates(
        _ratio(c.tp, c.tp + c.fp),
        _ratio(c.tp, c.tp + c.fn),
        _ratio(c.tn, c.tn + c.fp),
    )


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        coords = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(c) for c in coords):
            raise MetricError(f"box coordinates must be finite: {coords}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise MetricError(f"box needs xmin < xmax and ymin < ymax: {coords}")

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Detection:
    image_id: str
    label: str
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise MetricError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    label: str
    box: BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class DetectionEvaluation:
    ap: dict[str, float]
    mean_ap: float | None
    pr_points: dict[str, list[tuple[float, float]]]  # (recall, precision) after each detection
    warnings: list[str] = field(default_factory=list)


def average_precision(pr_points: Sequence[tuple[float, float]]) -> float:
    """All-point interpolated area under the precision envelope."""
    if not pr_points:
        return 0.0
    recall = np.array([0.0] + [r for r, _ in pr_points])
    precision = np.array([0.0] + [p for _, p in pr_points] + [0.0])
    # envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * env[1:-1]))


def _sort_key(d: Detection):
    return (-d.score, d.image_id, d.box.astuple())


def evaluate_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> DetectionEvaluation:
    """VOC-style per-class AP with greedy matching and all-point interpolation.

    Each detection, in descending score order, claims the still-unmatched
    ground truth of the same class and image with the highest IoU, provided
    that IoU reaches ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise MetricError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    labels = sorted({d.label for d in dets} | {g.label for g in gts})
    result = DetectionEvaluation({}, None, {})
    for label in labels:
        class_gts: dict[str, list[BoundingBox]] = {}
        for g in gts:
            if g.label == label:
                class_gts.setdefault(g.image_id, []).append(g.box)
        n_gt = sum(len(v) for v in class_gts.values())
        class_dets = sorted((d for d in dets if d.label == label), key=_sort_key)
        if n_gt == 0:
            result.warnings.append(f"class {label!r} has detections but no ground truth; AP=0")
            result.ap[label] = 0.0
            result.pr_points[label] = []
            continue
        taken = {img: [False] * len(boxes) for img, boxes in class_gts.items()}
        tp = 0
        points = []
        for i, d in enumerate(class_dets, start=1):
            best, best_j = -1.0, -1
            for j, box in enumerate(class_gts.get(d.image_id, [])):
                if taken[d.image_id][j]:
                    continue
                o = iou(d.box, box)
                if o > best:
                    best, best_j = o, j
            if best_j >= 0 and best >= iou_thresh:
                taken[d.image_id][best_j] = True
                tp += 1
            points.append((tp / n_gt, tp / i))
        result.pr_points[label] = points
        result.ap[label] = average_precision(points)
    if labels:
        result.mean_ap = sum(result.ap[k] for k in labels) / len(labels)
    return result


# --------------------------------------------------------------------------
# reduced task proportion
# --------------------------------------------------------------------------

def rtp(per_model_predictions: Sequence[Mapping[str, str] | Sequence[str]]) -> float:
    """Fraction of images on which every model gives the same label.

    Each model's predictions are a mapping ``image_id -> label``, or a
    sequence of labels indexed by image position.
    """
    if len(per_model_predictions) < 2:
        raise MetricError("RTP needs at least two models")
    models = [
        dict(p) if isinstance(p, Mapping) else dict(enumerate(p)) for p in per_model_predictions
    ]
    images = set(models[0])
    for i, m in enumerate(models[1:], start=1):
        if set(m) != images:
            raise MetricError(f"model {i} covers a different image set than model 0")
    if not images:
        raise MetricError("RTP needs at least one image")
    agreed = sum(1 for img in images if len({m[img] for m in models}) == 1)
    return agreed / len(images)


# --------------------------------------------------------------------------
# parsers
# --------------------------------------------------------------------------

def _child_text(node: ET.Element, tag: str, where: str, index: int | None = None) -> str:
    child = node.find(tag)
    if child is None or child.text is None or not child.text.strip():
        raise AnnotationError(f"missing <{tag}> in {where}", element=tag, index=index)
    return child.text.strip()


def _coord(node: ET.Element, tag: str, index: int) -> float:
    text = _child_text(node, tag, f"bndbox of object {index}", index)
    try:
        v = float(text)
    except ValueError:
        raise AnnotationError(f"<{tag}> of object {index} is not a number: {text!r}",
                              element=tag, index=index) from None
    if not math.isfinite(v):
        raise AnnotationError(f"<{tag}> of object {index} is not finite", element=tag, index=index)
    return v


def parse_voc_xml(buf: bytes) -> list[GroundTruth]:
    """Parse a LabelImg / Pascal-VOC annotation file.

    Only ``filename`` and each object's ``name`` and ``bndbox`` are read;
    other elements are ignored. Raises AnnotationError on any problem.
    """
    try:
        root = ET.fromstring(bytes(buf))
    except (ET.ParseError, ValueError, UnicodeError) as exc:
        raise AnnotationError(f"not well-formed XML: {exc}") from None
    if root.tag != "annotation":
        raise AnnotationError(f"root element is <{root.tag}>, expected <annotation>",
                              element="annotation")
    image_id = _child_text(root, "filename", "annotation")
    out = []
    for i, obj in enumerate(root.findall("object")):
        label = _child_text(obj, "name", f"object {i}", i)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError(f"missing <bndbox> in object {i}", element="bndbox", index=i)
        xmin, ymin, xmax, ymax = (_coord(bnd, t, i) for t in ("xmin", "ymin", "xmax", "ymax"))
        if not (xmin < xmax and ymin < ymax):
            raise AnnotationError(
                f"object {i}: invalid box ({xmin}, {ymin}, {xmax}, {ymax})", element="bndbox", index=i
            )
        out.append(GroundTruth(image_id, label, BoundingBox(xmin, ymin, xmax, ymax)))
    return out


def _decode_text(buf: bytes, err) -> str:
    try:
        return bytes(buf).decode("utf-8")
    except UnicodeDecodeError as exc:
        line = bytes(buf)[: exc.start].count(b"\n") + 1
        raise err(f"invalid UTF-8: {exc.reason}", line) from None


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _csv_rows(text: str) -> list[list[str]]:
    try:
        return list(csv.reader(io.StringIO(text, newline="")))
    except csv.Error as exc:
        raise DetectionParseError(f"malformed CSV: {exc}") from None


def parse_detections_csv(buf: bytes) -> list[Detection]:
    """Parse ``image_id,label,score,xmin,ymin,xmax,ymax`` rows.

    A first row whose score column is not numeric is taken as a header.
    Blank lines are skipped. Errors carry the 1-based line number.
    """
    text = _decode_text(buf, DetectionParseError)
    out = []
    for lineno, row in enumerate(_csv_rows(text), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 7:
            raise DetectionParseError(f"expected 7 columns, got {len(row)}", lineno)
        cells = [c.strip() for c in row]
        if not out and lineno == 1 and not _is_number(cells[2]):
            continue
        try:
            score, *coords = (float(c) for c in cells[2:])
        except ValueError as exc:
            raise DetectionParseError(f"unparsable number ({exc})", lineno) from None
        if not 0.0 <= score <= 1.0:
            raise DetectionParseError(f"score {cells[2]} outside [0, 1]", lineno)
        try:
            box = BoundingBox(*coords)
        except MetricError as exc:
            raise DetectionParseError(f"invalid box: {exc}", lineno) from None
        out.append(Detection(cells[0], cells[1], score, box))
    return out


def parse_label_csv(buf: bytes) -> dict[str, str]:
    """Per-image predictions ``image_id,label`` (optional ``image_id,label`` header)."""
    text = _decode_text(buf, DetectionParseError)
    out: dict[str, str] = {}
    for lineno, row in enumerate(_csv_rows(text), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise DetectionParseError(f"expected 2 columns, got {len(row)}", lineno)
        image_id, label = (c.strip() for c in row)
        if lineno == 1 and (image_id, label) == ("image_id", "label"):
            continue
        if image_id in out:
            raise DetectionParseError(f"duplicate image id {image_id!r}", lineno)
        out[image_id] = label
    return out


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------

MANIFEST_COLUMNS = ("split", "benign", "malignant", "normal")


@dataclass(frozen=True)
class SplitCounts:
    benign: int
    malignant: int
    normal: int

    @property
    def lesion(self) -> int:
        return self.benign + self.malignant

    @property
    def total(self) -> int:
        return self.lesion + self.normal


def parse_manifest(buf: bytes) -> dict[str, SplitCounts]:
    """Dataset manifest CSV with header ``split,benign,malignant,normal``."""
    text = _decode_text(buf, DetectionParseError)
    rows = [r for r in _csv_rows(text) if r]
    if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_COLUMNS:
        raise DetectionParseError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}", 1)
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DetectionParseError(f"expected 4 columns, got {len(row)}", lineno)
        name = row[0].strip()
        try:
            counts = [int(c) for c in row[1:]]
        except ValueError:
            raise DetectionParseError("counts must be integers", lineno) from None
        if any(c < 0 for c in counts):
            raise DetectionParseError("counts must be non-negative", lineno)
        if name in out:
            raise DetectionParseError(f"duplicate split {name!r}", lineno)
        out[name] = SplitCounts(*counts)
    return out


def manifest_totals(splits: Mapping[str, SplitCounts]) -> SplitCounts:
    return SplitCounts(
        sum(s.benign for s in splits.values()),
        sum(s.malignant for s in splits.values()),
        sum(s.normal for s in splits.values()),
    )
