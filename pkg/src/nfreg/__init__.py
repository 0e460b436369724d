"""Non-rigid registration of a triangle mesh onto full or partial point clouds.

Correspondences come from a pluggable feature layer and are checked with
functional-map algebra; the deformation is an embedded deformation graph
optimized under correspondence, Chamfer and as-rigid-as-possible energies.
"""

__version__ = "0.1.0"

from .errors import NFRError  # noqa: E402
from .geometry import Mesh, PointCloud  # noqa: E402

__all__ = ["Mesh", "PointCloud", "NFRError", "__version__"]
