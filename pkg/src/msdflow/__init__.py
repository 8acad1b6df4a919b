"""Coupled Stokes-Darcy solver with multiscale basis functions in the porous region."""

from .mesh import (Mesh, Rect, Region, SubMesh, Tag, build_interface_coupling,
                   build_rect_mesh, build_submesh, extract_interface,
                   locate_point, locate_points)
from .msfem import MsSpace, build_ms_space, compute_cell_basis, ms_evaluate, ms_load
from .solver import (EnergyLog, ImExSolver, MsDarcySpace, P1DarcySpace,
                     PhysParams, SchemeConfig, StateVector, check_stability)

__all__ = [
    "Mesh", "Rect", "Region", "SubMesh", "Tag",
    "build_rect_mesh", "build_submesh", "extract_interface",
    "build_interface_coupling", "locate_point", "locate_points",
    "MsSpace", "build_ms_space", "compute_cell_basis", "ms_evaluate", "ms_load",
    "PhysParams", "SchemeConfig", "StateVector", "EnergyLog",
    "ImExSolver", "MsDarcySpace", "P1DarcySpace", "check_stability",
]

__version__ = "0.1.0"
