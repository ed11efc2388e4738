"""Desk-scale LiDAR-camera occupancy prediction toolkit.

Depth-estimation-free fusion: voxel point preprocessing, point-to-point
deformable-attention feature fusion, entropy-gated coarse-to-fine decoding
and hard-example active training, on deterministic synthetic scenes.
"""

__version__ = "0.1.0"
