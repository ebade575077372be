"""occatlas: localizing occluded internal structures from single-view
surface point clouds with a multi-class occupancy + SDF network.

Pipeline: phantom generation -> lattice deformation + virtual depth camera
-> revised SortSample training targets -> occupancy network training ->
hierarchical volumetric inference -> AABB metrics, with an ICP template-
matching baseline.
"""

__version__ = "0.1.0"

from . import baseline, cli, deform, infer, metrics, occnet, phantom, sensor, sortsample, volume

__all__ = [
    "volume",
    "phantom",
    "deform",
    "sensor",
    "sortsample",
    "occnet",
    "infer",
    "metrics",
    "baseline",
    "cli",
    "__version__",
]
