"""splatsurf: joint 3D Gaussian splatting + neural SDF surface reconstruction (CPU)."""

__version__ = "0.1.0"
