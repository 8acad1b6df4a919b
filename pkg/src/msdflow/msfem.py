"""Offline multiscale basis construction for the porous region.

For each coarse triangle K, three basis functions are computed by solving
the local conductivity-harmonic problem on a fine submesh of K, with linear
boundary data pinned to the Kronecker property at the coarse vertices.  The
coarse-space stiffness and mass matrices are then exact integrals of the
fine-grid basis representation, so the online stage never touches the fine
grids again.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed

from . import fem
from .linalg import factor_spd, from_triplets
from .mesh import Mesh, Region, SubMesh, build_submesh, locate_points, submesh_locate


@dataclass
class MsBasis:
    """Per-cell multiscale basis: three fine-grid nodal vectors and local matrices."""
    cell: int
    sub: SubMesh
    eta: np.ndarray        # (3, nfv) fine nodal values
    local_A1: np.ndarray   # (3, 3)  ∫_K K grad η_i · grad η_j
    local_A2: np.ndarray   # (3, 3)  ∫_K η_i η_j
    local_H1: np.ndarray   # (3, 3)  ∫_K grad η_i · grad η_j
    moment: np.ndarray     # (3,)    ∫_K η_i


@dataclass
class MsSpace:
    """Multiscale space over the coarse porous mesh vertices."""
    mesh: Mesh
    nsplit: int
    bases: list[MsBasis]
    A1_global: sp.csr_matrix
    A2_global: sp.csr_matrix
    H1_global: sp.csr_matrix
    # fine quadrature cache for time-dependent loads: B(t) = W @ f(X, Y, t)
    quad_xy: np.ndarray = field(default=None, repr=False)    # (nqp, 2)
    quad_W: sp.csr_matrix = field(default=None, repr=False)  # (nv, nqp)

    @property
    def ndof(self) -> int:
        return self.mesh.num_vertices


def compute_cell_basis(mesh: Mesh, cell: int, kfield, nsplit: int,
                       eps_hint: float | None = None) -> MsBasis:
    """Solve the three local fine-grid problems on one coarse cell."""
    if nsplit < 1:
        raise ValueError("nsplit must be at least 1")
    if eps_hint is not None:
        # the basis only resolves the oscillation if h_fine is well below eps
        h = np.sqrt(2.0 * float(np.max(mesh.areas())))
        if h / nsplit > eps_hint / 4.0:
            warnings.warn(
                f"fine mesh size {h / nsplit:.3g} is not small against "
                f"eps={eps_hint:.3g}; basis may under-resolve the oscillation",
                stacklevel=2)
    sub = build_submesh(mesh, cell, nsplit)
    S = fem.p1_stiffness(sub.fine, kfield, fem.tri_rule(2))
    bnodes = np.nonzero(sub.boundary_mask)[0]
    ds = fem.DirichletSystem(S, bnodes)
    handle = factor_spd(ds.matrix)

    eta = np.empty((3, sub.fine.num_vertices))
    theta = sub.fine_bary[bnodes]  # linear boundary data = barycentric coords
    for i in range(3):
        rhs = ds.rhs(np.zeros(sub.fine.num_vertices), theta[:, i])
        eta[i] = handle.solve(rhs)

    M = fem.p1_mass(sub.fine)
    H = fem.p1_stiffness(sub.fine, 1.0, fem.tri_rule(1))
    local_A1 = eta @ (S @ eta.T)
    local_A2 = eta @ (M @ eta.T)
    local_H1 = eta @ (H @ eta.T)
    moment = eta @ (M @ np.ones(sub.fine.num_vertices))
    return MsBasis(cell=cell, sub=sub, eta=eta, local_A1=local_A1,
                   local_A2=local_A2, local_H1=local_H1, moment=moment)


def _assemble_global(mesh: Mesh, bases: list[MsBasis]):
    nv = mesh.num_vertices
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    A1 = from_triplets(rows, cols,
                       np.array([b.local_A1 for b in bases]).ravel(), (nv, nv))
    A2 = from_triplets(rows, cols,
                       np.array([b.local_A2 for b in bases]).ravel(), (nv, nv))
    H1 = from_triplets(rows, cols,
                       np.array([b.local_H1 for b in bases]).ravel(), (nv, nv))
    return A1, A2, H1


def _quad_cache(mesh: Mesh, bases: list[MsBasis]):
    """Sparse quadrature operator mapping fine-point samples to coarse loads."""
    rule = fem.tri_rule(2)
    xs, rows, cols, vals = [], [], [], []
    offset = 0
    for b in bases:
        pts, w = fem.quad_points(b.sub.fine, rule)
        npts = pts.shape[0] * pts.shape[1]
        xs.append(pts.reshape(npts, 2))
        # values of each coarse-vertex basis restriction at the fine points
        etaq = np.einsum("ktj,qj->ktq", b.eta[:, b.sub.fine.triangles], rule.points)
        wq = w[None, :, :] * etaq  # (3, nt_f, nq)
        gcols = offset + np.arange(npts)
        for k in range(3):
            rows.append(np.full(npts, mesh.triangles[b.cell, k]))
            cols.append(gcols)
            vals.append(wq[k].ravel())
        offset += npts
    W = from_triplets(np.concatenate(rows), np.concatenate(cols),
                      np.concatenate(vals), (mesh.num_vertices, offset))
    return np.vstack(xs), W


def build_ms_space(mesh: Mesh, kfield, nsplit: int, workers: int = 1,
                   eps_hint: float | None = None) -> MsSpace:
    """Compute all cell bases (data-parallel) and assemble the coarse matrices.

    Results are merged in cell order, so the output is independent of the
    worker count.
    """
    if mesh.region is not Region.POROUS:
        raise ValueError("multiscale space is built on the porous mesh")
    cells = range(mesh.num_triangles)
    if workers == 1:
        bases = [compute_cell_basis(mesh, c, kfield, nsplit, eps_hint)
                 for c in cells]
    else:
        bases = Parallel(n_jobs=workers)(
            delayed(compute_cell_basis)(mesh, c, kfield, nsplit, eps_hint)
            for c in cells)
    A1, A2, H1 = _assemble_global(mesh, bases)
    xy, W = _quad_cache(mesh, bases)
    return MsSpace(mesh=mesh, nsplit=nsplit, bases=bases,
                   A1_global=A1, A2_global=A2, H1_global=H1,
                   quad_xy=xy, quad_W=W)


def ms_load(space: MsSpace, f_p, t: float) -> np.ndarray:
    """Load vector (f_p(., t), η_i) integrated on the fine submesh quadrature."""
    vals = f_p(space.quad_xy[:, 0], space.quad_xy[:, 1], t)
    return space.quad_W @ np.asarray(vals, dtype=float)


def ms_evaluate(space: MsSpace, coeffs: np.ndarray,
                points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multiscale field values and gradients at arbitrary points of Ω_p."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, lam = locate_points(space.mesh, pts)
    vals = np.empty(len(pts))
    grads = np.empty((len(pts), 2))
    order = np.argsort(tri, kind="stable")
    sorted_tri = tri[order]
    bounds = np.searchsorted(sorted_tri, np.arange(space.mesh.num_triangles + 1))
    for cell in np.unique(sorted_tri):
        idx = order[bounds[cell]:bounds[cell + 1]]
        b = space.bases[cell]
        nodal = coeffs[space.mesh.triangles[cell]] @ b.eta  # fine nodal values
        ftri = submesh_locate(b.sub, lam[idx])
        flam = _fine_bary(b.sub, lam[idx], ftri)
        v, g = fem.p1_evaluate(b.sub.fine, nodal, ftri, flam)
        vals[idx] = v
        grads[idx] = g
    return vals, grads


def _fine_bary(sub: SubMesh, lam_parent: np.ndarray, ftri: np.ndarray) -> np.ndarray:
    """Barycentric coords within the located fine triangles."""
    fverts_bary = sub.fine_bary[sub.fine.triangles[ftri]]  # (np, 3, 3)
    # solve 3x3 (affine in barycentric space): lam_parent = Σ mu_k vert_bary_k
    A = np.transpose(fverts_bary, (0, 2, 1))
    return np.linalg.solve(A, lam_parent[..., None])[..., 0]


# ---------------------------------------------------------------------------
# basis archive

ARCHIVE_VERSION = 1


def space_fingerprint(mesh: Mesh, kfield_id: str, nsplit: int) -> str:
    h = hashlib.sha256()
    r = mesh.rect
    h.update(repr((r.x0, r.x1, r.y0, r.y1, mesh.nx, mesh.ny,
                   mesh.region.value, kfield_id, nsplit)).encode())
    return h.hexdigest()


def save_ms_space(path, space: MsSpace, kfield_id: str) -> None:
    payload = {
        "version": np.array(ARCHIVE_VERSION),
        "fingerprint": np.array(
            space_fingerprint(space.mesh, kfield_id, space.nsplit)),
        "nsplit": np.array(space.nsplit),
        "eta": np.array([b.eta for b in space.bases]),
        "local_A1": np.array([b.local_A1 for b in space.bases]),
        "local_A2": np.array([b.local_A2 for b in space.bases]),
        "local_H1": np.array([b.local_H1 for b in space.bases]),
        "moment": np.array([b.moment for b in space.bases]),
    }
    with open(path, "wb") as fh:
        # write through a handle so numpy does not append its own suffix
        np.savez_compressed(fh, **payload)


class StaleArchiveError(RuntimeError):
    pass


def load_ms_space(path, mesh: Mesh, kfield_id: str) -> MsSpace:
    """Rebuild an MsSpace from an archive; refuses mismatched configurations."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != ARCHIVE_VERSION:
            raise StaleArchiveError(f"archive version {z['version']} unsupported")
        nsplit = int(z["nsplit"])
        expect = space_fingerprint(mesh, kfield_id, nsplit)
        if str(z["fingerprint"]) != expect:
            raise StaleArchiveError(
                "archive fingerprint mismatch (mesh, permeability or nsplit changed)")
        eta = z["eta"]
        la1, la2, lh1 = z["local_A1"], z["local_A2"], z["local_H1"]
        mom = z["moment"]
    bases = []
    for c in range(mesh.num_triangles):
        sub = build_submesh(mesh, c, nsplit)
        bases.append(MsBasis(cell=c, sub=sub, eta=eta[c], local_A1=la1[c],
                             local_A2=la2[c], local_H1=lh1[c], moment=mom[c]))
    A1, A2, H1 = _assemble_global(mesh, bases)
    xy, W = _quad_cache(mesh, bases)
    return MsSpace(mesh=mesh, nsplit=nsplit, bases=bases,
                   A1_global=A1, A2_global=A2, H1_global=H1,
                   quad_xy=xy, quad_W=W)
