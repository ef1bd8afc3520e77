"""Reference-based restoration of digitized analog videotapes."""

__version__ = "0.1.0"
