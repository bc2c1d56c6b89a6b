"""Self-supervised audio representations from clip-level, frame-level and pitch-shift sampling."""

__version__ = "0.1.0"
