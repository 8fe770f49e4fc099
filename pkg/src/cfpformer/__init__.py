"""Cross feature-pyramid transformer decoder with axial Gaussian-decay attention."""

__version__ = "0.1.0"
