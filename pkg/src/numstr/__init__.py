"""Handwritten numeral-string recognition by treating each digit as a detectable object."""

from .core import BoundingBox, Detection, DigitAnnotation, StringSample, iou, nms
from .inference import StringReading, assemble_string, predict_string, predict_strings, target_input_width

__all__ = [
    "BoundingBox",
    "Detection",
    "DigitAnnotation",
    "StringSample",
    "StringReading",
    "assemble_string",
    "iou",
    "nms",
    "predict_string",
    "predict_strings",
    "target_input_width",
]
__version__ = "0.1.0"
