"""Small-target infrared detector built on a minimal numpy autograd engine."""

__version__ = "0.1.0"
