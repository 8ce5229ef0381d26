"""Single-image stylized radiance fields from a preoperative volume."""

__version__ = "0.1.0"
