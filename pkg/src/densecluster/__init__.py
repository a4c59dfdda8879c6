"""Dense-feature deep clustering of volumetric images."""

__version__ = "0.1.0"
FORMAT_VERSION = 1
