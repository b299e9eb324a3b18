"""Jacobian determinant, curl, and visual renderings of displacement fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import Image, ScalarField, VectorField, round_half_up
from .registration import resample_field, warp


class GeometryError(ValueError):
    pass


def _partials(component: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dy) with central differences inside, one-sided on the border.

    An axis of length 1 has zero derivative.
    """
    h, w = component.shape
    ddx = np.gradient(component, axis=1, edge_order=1) if w > 1 else np.zeros_like(component)
    ddy = np.gradient(component, axis=0, edge_order=1) if h > 1 else np.zeros_like(component)
    return ddx, ddy


def jacobian_determinant(fld: VectorField) -> ScalarField:
    """det(I + grad u) of the map x -> x + u(x), per pixel."""
    if fld.channels != 2:
        raise GeometryError(f"Jacobian determinant needs a 2-channel field, got {fld.channels}")
    dux_dx, dux_dy = _partials(fld.data[..., 0])
    duy_dx, duy_dy = _partials(fld.data[..., 1])
    return ScalarField((1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx)


def curl(fld: VectorField) -> ScalarField | VectorField:
    """Curl of a planar field.

    A 2-channel field gives the scalar curl ``duy/dx - dux/dy`` as a
    ScalarField. A 3-channel field (components depending on x, y only, so
    d/dz = 0) gives the 3-vector ``(duz/dy, -duz/dx, duy/dx - dux/dy)``.
    """
    if fld.channels not in (2, 3):
        raise GeometryError(f"curl needs 2 or 3 channels, got {fld.channels}")
    _, dux_dy = _partials(fld.data[..., 0])
    duy_dx, _ = _partials(fld.data[..., 1])
    z = duy_dx - dux_dy
    if fld.channels == 2:
        return ScalarField(z)
    duz_dx, duz_dy = _partials(fld.data[..., 2])
    return VectorField(np.stack([duz_dy, -duz_dx, z], axis=-1))


def curl_vector(fld: VectorField) -> VectorField:
    """Curl as a 3-channel field; a 2-channel input is embedded as (ux, uy, 0)."""
    c = curl(fld)
    if isinstance(c, VectorField):
        return c
    zeros = np.zeros(c.shape)
    return VectorField(np.stack([zeros, zeros, c.data], axis=-1))


@dataclass(frozen=True)
class GridRenderParams:
    spacing: int = 8
    line_value: float = 0.0
    background_value: float | None = None  # None: the image max_value
    max_value: int = 255

    def __post_init__(self):
        if self.spacing < 2:
            raise GeometryError(f"grid spacing must be >= 2, got {self.spacing}")


def grid_image(height: int, width: int, p: GridRenderParams) -> Image:
    background = p.max_value if p.background_value is None else p.background_value
    ys, xs = np.mgrid[0:height, 0:width]
    on_line = (ys % p.spacing == 0) | (xs % p.spacing == 0)
    return Image(np.where(on_line, p.line_value, background), p.max_value)


def render_grid(
    fld: VectorField, p: GridRenderParams | None = None, out_dims: tuple[int, int] | None = None
) -> Image:
    """Deformed-grid picture: a regular grid warped by ``fld``.

    ``out_dims`` is ``(height, width)``; when it differs from the field's
    shape the field is resampled (components rescaled) before warping.
    """
    p = p or GridRenderParams()
    if fld.channels != 2:
        raise GeometryError(f"grid rendering needs a 2-channel field, got {fld.channels}")
    if out_dims is not None and tuple(out_dims) != fld.shape:
        h, w = out_dims
        if h < 1 or w < 1:
            raise GeometryError(f"invalid output dimensions {out_dims}")
        fld = VectorField(resample_field(fld.data, h, w))
    return warp(grid_image(fld.height, fld.width, p), fld)


def field_to_image(f: ScalarField, max_value: int = 255) -> Image:
    """Min-max normalise to ``[0, max_value]`` with half-up rounding.

    A constant map becomes ``max_value // 2`` everywhere.
    """
    lo, hi = float(f.data.min()), float(f.data.max())
    if hi == lo:
        return Image(np.full(f.shape, float(max_value // 2)), max_value)
    scaled = (f.data - lo) / (hi - lo) * max_value
    return Image(np.clip(round_half_up(scaled), 0, max_value), max_value)
