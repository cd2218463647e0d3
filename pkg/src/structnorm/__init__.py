"""Structure-name standardization with a multi-scale crop-and-vote 3-D non-local network."""

__version__ = "0.1.0"
