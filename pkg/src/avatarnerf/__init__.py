"""Animatable neural radiance fields for full-body humans."""

__version__ = "0.1.0"
