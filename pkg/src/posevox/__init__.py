"""Multi-camera volumetric 3D human pose estimation.

The pipeline turns per-view 2D joint heatmaps into 3D poses in three
stages: per-view heatmaps are fused into a voxelized feature volume,
a proposal stage localizes person roots in that volume, and a
regression stage refines one fine-grained volume per person into a
full 3D pose.  Everything runs on plain numpy arrays; the hot loops
have numba-accelerated kernels with a pure-numpy fallback (see
``posevox.kernels``).

Units are millimeters throughout.
"""

__version__ = "0.1.0"
