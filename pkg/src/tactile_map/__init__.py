"""Tactile shape mapping and in-hand localization with a simulated vision-based tactile sensor."""

__version__ = "0.1.0"
