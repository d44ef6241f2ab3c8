"""Joint pose and shape-latent flow matching for 3D fragment reassembly."""

__version__ = "0.1.0"
