"""Stitching of light fields into one with an extended angular baseline."""

from .core import EPI, Intrinsics, LightField, extract_epi, load_light_field, save_light_field
from .errors import LightFieldError
from .stitch import StitchConfig, stitch, stitch_with_report

__version__ = "0.1.0"
