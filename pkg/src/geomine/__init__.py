"""Geometric analysis of images through displacement fields, with quality metrics and loss evaluators."""

from .imgcore import (
    FormatError,
    Image,
    ScalarField,
    TruncationError,
    VectorField,
    decode_field,
    decode_image,
    decode_scalar,
    encode_field,
    encode_image,
    encode_scalar,
)

__version__ = "0.1.0"
