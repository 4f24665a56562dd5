"""Scarce-label raster classification from stitched autoencoder activations."""

from .grid import LabelMap, PatchSpec, Raster

__all__ = ["LabelMap", "PatchSpec", "Raster"]
__version__ = "0.1.0"
