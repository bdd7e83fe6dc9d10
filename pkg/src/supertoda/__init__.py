"""Numerical laboratory for the super Toda system on hyperbolic surfaces."""

__version__ = "0.1.0"

from .hypmesh import (
    MeshError,
    MeshReport,
    SurfaceMesh,
    build_fuchsian_mesh,
    laplace_pair,
    load_mesh,
    mesh_report,
    save_mesh,
)

__all__ = [
    "__version__",
    "MeshError",
    "MeshReport",
    "SurfaceMesh",
    "build_fuchsian_mesh",
    "laplace_pair",
    "load_mesh",
    "mesh_report",
    "save_mesh",
]
