"""pixpoint: desk-scale dual-branch 2D-3D alignment on procedural shapes."""

__version__ = "0.1.0"
