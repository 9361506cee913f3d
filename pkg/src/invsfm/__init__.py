"""Invert sparse SfM reconstructions into images.

Pipeline: COLMAP model -> per-view feature map -> visibility culling ->
coarse image -> refined image.
"""

__version__ = "0.1.0"
