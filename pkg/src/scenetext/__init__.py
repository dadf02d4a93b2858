"""Scene-text detection, recognition and ICDAR Challenge-4 style evaluation in numpy."""

__version__ = "0.1.0"
