"""Voxel-level material fraction regression from simulated airborne LiDAR.

Submodules: ``scenegen`` (synthetic forest meshes), ``voxelizer`` (per-voxel
material areas), ``lidarsim`` (waveform simulation and intensity),
``relevance`` (imbalance weights), ``objective`` (losses), ``kpnet`` (point
network), ``metrics`` (stratified errors) and ``pipeline`` (orchestration).
"""

__version__ = "0.1.0"
