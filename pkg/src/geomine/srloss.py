"""Super-resolution loss evaluators: adversarial objective, feature loss, curl loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .geometry import curl
from .imgcore import Image, ScalarField, mean_squared_difference
from .registration import RegParams, register

EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.size == 0:
            raise LossError(f"feature map must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise LossError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


class FeatureExtractor(Protocol):
    def __call__(self, img: Image) -> FeatureMap: ...


class IdentityExtractor:
    """Raw pixel intensities as features."""

    def __call__(self, img: Image) -> FeatureMap:
        return FeatureMap(img.data)


class ConvExtractor:
    """Stack of single-channel 3x3 valid convolutions, each followed by ReLU.

    Kernel ``k`` is ``rng.standard_normal((depth, 3, 3))[k] / 3`` with
    ``rng = numpy.random.default_rng(seed)``; the correlation form (no
    kernel flip) is used. Input is the raw intensity array.
    """

    def __init__(self, seed: int = 42, depth: int = 2):
        if depth < 1:
            raise LossError("depth must be >= 1")
        self.seed = seed
        self.depth = depth
        self.kernels = np.random.default_rng(seed).standard_normal((depth, 3, 3)) / 3.0

    def __call__(self, img: Image) -> FeatureMap:
        x = img.data
        for k in self.kernels:
            h, w = x.shape
            if h < 3 or w < 3:
                raise LossError(f"image too small for {self.depth} valid 3x3 convolutions")
            out = np.zeros((h - 2, w - 2))
            for dy in range(3):
                for dx in range(3):
                    out += k[dy, dx] * x[dy:dy + h - 2, dx:dx + w - 2]
            x = np.maximum(out, 0.0)
        return FeatureMap(x)


def downsample4x(img: Image) -> Image:
    """Mean of each 4x4 block."""
    h, w = img.shape
    if h % 4 or w % 4:
        raise LossError(f"width and height must be divisible by 4, got {w}x{h}")
    blocks = img.data.reshape(h // 4, 4, w // 4, 4)
    return Image(blocks.sum(axis=(1, 3)) / 16.0, img.max_value)


def _probabilities(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise LossError(f"{name} must be non-empty")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise LossError(f"{name} values must lie in [0, 1]")
    return arr


def adversarial_objective(d_real: Sequence[float], d_fake: Sequence[float]) -> float:
    """``mean(ln D(real)) + mean(ln(1 - D(fake)))`` with arguments clamped to ``[1e-12, 1]``."""
    real = _probabilities(d_real, "d_real")
    fake = _probabilities(d_fake, "d_fake")
    a = math.fsum(np.log(np.clip(real, EPS, 1.0))) / real.size
    b = math.fsum(np.log(np.clip(1.0 - fake, EPS, 1.0))) / fake.size
    return a + b


def feature_loss(hr: Image, sr: Image, phi: FeatureExtractor | None = None) -> float:
    """Mean squared distance between the feature maps of ``hr`` and ``sr``."""
    if hr.shape != sr.shape:
        raise LossError(f"image shapes differ: {hr.shape} vs {sr.shape}")
    phi = phi or IdentityExtractor()
    fa, fb = phi(hr), phi(sr)
    if fa.data.shape != fb.data.shape:
        raise LossError(f"feature maps differ in shape: {fa.data.shape} vs {fb.data.shape}")
    return mean_squared_difference(fa.data, fb.data)


def curl_map(img: Image, reference: Image, p: RegParams | None = None) -> ScalarField:
    """Scalar curl of the field registering ``img`` (moving) onto ``reference`` (fixed)."""
    return curl(register(reference, img, p))


def cv_loss(hr: Image, sr: Image, reference: Image, p: RegParams | None = None) -> float:
    """Mean squared difference of the curl maps of ``hr`` and ``sr``."""
    if not hr.shape == sr.shape == reference.shape:
        raise LossError("hr, sr and reference must have identical dimensions")
    return mean_squared_difference(curl_map(hr, reference, p).data, curl_map(sr, reference, p).data)
