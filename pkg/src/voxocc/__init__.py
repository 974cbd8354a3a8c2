"""Camera-based 3D semantic occupancy prediction on miniature synthetic scenes."""

__version__ = "0.1.0"
