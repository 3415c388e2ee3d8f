"""Source-free pinhole-to-panorama segmentation adaptation on a numpy autodiff core."""

__version__ = "0.1.0"
