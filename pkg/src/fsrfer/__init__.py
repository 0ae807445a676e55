"""Feature-level super-resolution for low-resolution facial expression recognition."""

__version__ = "0.1.0"
