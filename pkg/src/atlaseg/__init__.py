"""Atlas-prompted segmentation pipeline.

Multi-atlas registration produces spatial priors that prompt a 2D
encoder/decoder segmentation network; per-orientation predictions are fused
into 3D with STAPLE and scored with overlap and surface-distance metrics.
"""

__version__ = "0.1.0"
