"""Generate / evaluate / penalise loop and the run report it produces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .imgcore import Image
from .metrics import image_quality

Producer = Callable[[Image, float], Image]
MetricValue = float | int | str | None

ACCEPTED = "accepted"
REJECTED = "rejected"


class ProducerError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"candidate producer failed at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class CoupledConfig:
    max_iters: int = 5
    psnr_min: float = 30.0
    ssim_min: float = 0.9
    penalty_scale: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.penalty_scale <= 1.0:
            raise ValueError("penalty_scale must lie in (0, 1]")


def format_value(v: MetricValue) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunReport:
    command: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    metrics: dict[str, MetricValue] = field(default_factory=dict)
    status: str = ACCEPTED
    iterations: int = 1

    def lines(self) -> list[str]:
        """``key=value`` lines, keys sorted lexicographically.

        Report fields and metrics share one namespace; lists are joined
        with commas, undefined values print as ``undefined``.
        """
        entries = {
            "command": self.command,
            "inputs": ",".join(self.inputs),
            "outputs": ",".join(self.outputs),
            "status": self.status,
            "iterations": self.iterations,
        }
        for key, value in self.metrics.items():
            if key in entries:
                raise ValueError(f"metric name {key!r} clashes with a report field")
            entries[key] = value
        return [f"{k}={format_value(entries[k])}" for k in sorted(entries)]

    def serialize(self) -> str:
        return "\n".join(self.lines()) + "\n"


def coupled_run(
    input_image: Image,
    producer: Producer,
    reference: Image,
    cfg: CoupledConfig | None = None,
    param: float = 1.0,
) -> RunReport:
    """Produce a candidate, gate it on PSNR/SSIM against ``reference``, retry.

    On each rejection the producer's parameter is multiplied by
    ``cfg.penalty_scale``. The producer is called at most ``cfg.max_iters``
    times.
    """
    cfg = cfg or CoupledConfig()
    report = RunReport("coupled", status=REJECTED, iterations=0)
    for it in range(1, cfg.max_iters + 1):
        try:
            candidate = producer(input_image, param)
        except Exception as exc:
            raise ProducerError(it, exc) from exc
        q = image_quality(candidate, reference)
        report.iterations = it
        report.metrics = {"mse": q.mse, "psnr": q.psnr, "ssim": q.ssim, "param": param}
        if q.psnr >= cfg.psnr_min and q.ssim >= cfg.ssim_min:
            report.status = ACCEPTED
            return report
        param *= cfg.penalty_scale
    return report


def identity_producer(img: Image, param: float) -> Image:
    return img


def checkerboard_pattern(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.where((ys + xs) % 2 == 0, 1.0, -1.0)


def checkerboard_noise_producer(img: Image, amplitude: float) -> Image:
    """Adds ``+amplitude`` / ``-amplitude`` in a checkerboard, clamped to the valid range."""
    noisy = img.data + amplitude * checkerboard_pattern(*img.shape)
    return Image(np.clip(noisy, 0, img.max_value), img.max_value)

