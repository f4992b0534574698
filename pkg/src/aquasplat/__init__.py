"""Hybrid underwater scene representation: explicit Gaussian splats for the
objects, an implicit direction-dependent water field for the medium, joined by
a physics-based image formation model and trained with depth-guided losses."""

__version__ = "0.1.0"
