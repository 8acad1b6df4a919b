"""Element shape functions, quadrature, and global assembly.

Scalar fields live in P1 on the mesh vertices.  The fluid velocity uses the
MINI enrichment: per component, P1 vertex functions plus one cubic bubble
per triangle, with dof ordering [ux vertices, ux bubbles, uy vertices,
uy bubbles].  Pressure is P1 on the fluid vertices.

Coefficient fields (permeability, forcing) are sampled pointwise at the
quadrature nodes; nothing is element-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import from_triplets
from .mesh import InterfaceCoupling, Mesh, Tag


# ---------------------------------------------------------------------------
# quadrature

@dataclass(frozen=True)
class TriRule:
    """Barycentric points and weights summing to one (reference measure)."""
    degree: int
    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)


def tri_rule(degree: int) -> TriRule:
    if degree <= 1:
        pts = np.array([[1 / 3, 1 / 3, 1 / 3]])
        w = np.array([1.0])
        return TriRule(1, pts, w)
    if degree == 2:
        pts = np.array([
            [2 / 3, 1 / 6, 1 / 6],
            [1 / 6, 2 / 3, 1 / 6],
            [1 / 6, 1 / 6, 2 / 3],
        ])
        w = np.full(3, 1 / 3)
        return TriRule(2, pts, w)
    if degree <= 5:
        # 7-point Radon rule, exact through degree 5.
        s15 = np.sqrt(15.0)
        a1 = (6 - s15) / 21
        a2 = (6 + s15) / 21
        w1 = (155 - s15) / 1200
        w2 = (155 + s15) / 1200
        pts = [[1 / 3, 1 / 3, 1 / 3]]
        w = [9 / 40]
        for a, wa in ((a1, w1), (a2, w2)):
            b = 1 - 2 * a
            pts += [[b, a, a], [a, b, a], [a, a, b]]
            w += [wa] * 3
        return TriRule(5, np.array(pts), np.array(w))
    raise ValueError(f"no triangle rule of degree {degree}")


def edge_rule(npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1]; exact through degree 2n-1."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# element geometry

def p1_gradients(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Constant P1 shape gradients (nt, 3, 2) and triangle areas (nt,)."""
    v = mesh.vertices[mesh.triangles]
    x, y = v[..., 0], v[..., 1]
    det = ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
           - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    area = 0.5 * det
    G = np.empty((len(v), 3, 2))
    G[:, 0, 0] = y[:, 1] - y[:, 2]
    G[:, 0, 1] = x[:, 2] - x[:, 1]
    G[:, 1, 0] = y[:, 2] - y[:, 0]
    G[:, 1, 1] = x[:, 0] - x[:, 2]
    G[:, 2, 0] = y[:, 0] - y[:, 1]
    G[:, 2, 1] = x[:, 1] - x[:, 0]
    G /= det[:, None, None]
    return G, area


def quad_points(mesh: Mesh, rule: TriRule) -> tuple[np.ndarray, np.ndarray]:
    """Physical quadrature points (nt, nq, 2) and weights*area (nt, nq)."""
    v = mesh.vertices[mesh.triangles]
    pts = np.einsum("qi,tid->tqd", rule.points, v)
    _, area = p1_gradients(mesh)
    w = rule.weights[None, :] * area[:, None]
    return pts, w


def _as_coeff(coeff):
    if callable(coeff):
        return coeff
    c = float(coeff)
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), c)


# ---------------------------------------------------------------------------
# scalar P1 assembly

def p1_stiffness(mesh: Mesh, coeff=1.0, rule: TriRule | None = None) -> sp.csr_matrix:
    """Assemble (coeff * grad u, grad v); coeff sampled at quadrature points."""
    rule = rule or tri_rule(2)
    cf = _as_coeff(coeff)
    G, area = p1_gradients(mesh)
    pts, w = quad_points(mesh, rule)
    cvals = cf(pts[..., 0], pts[..., 1])
    cw = np.sum(cvals * rule.weights[None, :], axis=1) * area
    local = np.einsum("t,tid,tjd->tij", cw, G, G)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return from_triplets(rows, cols, local.ravel(),
                         (mesh.num_vertices, mesh.num_vertices))


_MASS_LOCAL = (np.ones((3, 3)) + np.eye(3)) / 12.0


def p1_mass(mesh: Mesh) -> sp.csr_matrix:
    _, area = p1_gradients(mesh)
    local = area[:, None, None] * _MASS_LOCAL[None]
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return from_triplets(rows, cols, local.ravel(),
                         (mesh.num_vertices, mesh.num_vertices))


def p1_load(mesh: Mesh, f, t: float = 0.0, rule: TriRule | None = None) -> np.ndarray:
    """(f(., t), v) for all P1 test functions v."""
    rule = rule or tri_rule(2)
    pts, w = quad_points(mesh, rule)
    fv = f(pts[..., 0], pts[..., 1], t)
    contrib = np.einsum("tq,tq,qi->ti", fv, w, rule.points)
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    return out


def p1_evaluate(mesh: Mesh, nodal: np.ndarray, tri: np.ndarray,
                lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and gradients of a P1 field at located points."""
    G, _ = p1_gradients(mesh)
    vals_v = nodal[mesh.triangles[tri]]
    vals = np.einsum("pi,pi->p", vals_v, lam)
    grads = np.einsum("pi,pid->pd", vals_v, G[tri])
    return vals, grads


# ---------------------------------------------------------------------------
# MINI velocity space

@dataclass(frozen=True)
class VelocityLayout:
    """Dof numbering of the two-component MINI velocity space."""
    nv: int
    nt: int

    @property
    def per_comp(self) -> int:
        return self.nv + self.nt

    @property
    def ndof(self) -> int:
        return 2 * self.per_comp

    def vertex_dofs(self, comp: int) -> np.ndarray:
        return comp * self.per_comp + np.arange(self.nv)

    def bubble_dofs(self, comp: int) -> np.ndarray:
        return comp * self.per_comp + self.nv + np.arange(self.nt)

    def vertex_values(self, u: np.ndarray) -> np.ndarray:
        """(nv, 2) vertex coefficients of a velocity vector."""
        return np.column_stack([u[:self.nv], u[self.per_comp:self.per_comp + self.nv]])


def velocity_layout(mesh: Mesh) -> VelocityLayout:
    return VelocityLayout(nv=mesh.num_vertices, nt=mesh.num_triangles)


def _element_dofs(mesh: Mesh, layout: VelocityLayout) -> np.ndarray:
    """Global dofs (nt, 8): x-comp [v0 v1 v2 bubble], then y-comp."""
    nt = mesh.num_triangles
    dx = np.column_stack([mesh.triangles, layout.nv + np.arange(nt)])
    return np.column_stack([dx, layout.per_comp + dx])


def _mini_grads(mesh: Mesh, rule: TriRule) -> tuple[np.ndarray, np.ndarray]:
    """Shape gradients (nt, nq, 4, 2) and areas for [λ1, λ2, λ3, bubble]."""
    G, area = p1_gradients(mesh)
    lam = rule.points
    nq = len(lam)
    nt = mesh.num_triangles
    gq = np.empty((nt, nq, 4, 2))
    gq[:, :, :3, :] = G[:, None, :, :]
    # grad b = 27 (λ2 λ3 ∇λ1 + λ1 λ3 ∇λ2 + λ1 λ2 ∇λ3)
    cof = 27.0 * np.column_stack([
        lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
    gq[:, :, 3, :] = np.einsum("qi,tid->tqd", cof, G)
    return gq, area


def _scatter_square(dofs: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return from_triplets(rows, cols, local.ravel(), (n, n))


def stokes_blocks(mesh: Mesh, nu: float) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """Viscous block 2ν(D(u), D(v)), divergence block b, and velocity mass.

    Returns (A_visc, B_div, M_vel); B_div rows are P1 pressure dofs and
    B_div @ u evaluates -(q, div u) for all pressure test functions q.
    """
    layout = velocity_layout(mesh)
    rule = tri_rule(5)
    gq, area = _mini_grads(mesh, rule)
    dofs = _element_dofs(mesh, layout)
    w = rule.weights

    # Kij[t,a,b] = ∫ g_{a,i} g_{b,j}
    K = np.einsum("q,tqai,tqbj->taibj", w, gq, gq) * area[:, None, None, None, None]
    Kdot = K[:, :, 0, :, 0] + K[:, :, 1, :, 1]

    local = np.empty((mesh.num_triangles, 8, 8))
    for a_comp in range(2):
        for b_comp in range(2):
            blk = nu * K[:, :, b_comp, :, a_comp]
            if a_comp == b_comp:
                blk = blk + nu * Kdot
            local[:, a_comp * 4:a_comp * 4 + 4, b_comp * 4:b_comp * 4 + 4] = blk
    A_visc = _scatter_square(dofs, local, layout.ndof)

    # b(v, q) = -(q, div v): rows pressure (P1 vertices), cols velocity dofs.
    lamw = np.einsum("q,qi->qi", w, rule.points)
    # local column order must match dofs: x-comp shapes then y-comp shapes
    Bloc = -np.einsum("qi,tqad->tida", lamw, gq) * area[:, None, None, None]
    prow = np.repeat(mesh.triangles, 8, axis=1).ravel()
    pcol = np.tile(dofs, (1, 3)).ravel()
    B_div = from_triplets(prow, pcol, Bloc.ravel(),
                          (mesh.num_vertices, layout.ndof))

    # Exact MINI mass: vertex-vertex A/12 pattern, vertex-bubble 3A/20,
    # bubble-bubble 81A/280.
    mloc = np.zeros((mesh.num_triangles, 8, 8))
    base = np.zeros((4, 4))
    base[:3, :3] = _MASS_LOCAL
    base[:3, 3] = base[3, :3] = 3 / 20
    base[3, 3] = 81 / 280
    for comp in range(2):
        mloc[:, comp * 4:comp * 4 + 4, comp * 4:comp * 4 + 4] = \
            area[:, None, None] * base[None]
    M_vel = _scatter_square(dofs, mloc, layout.ndof)
    return A_visc, B_div, M_vel


def velocity_grad_matrix(mesh: Mesh) -> sp.csr_matrix:
    """(grad u, grad v) over MINI velocity dofs, for H1 seminorms."""
    layout = velocity_layout(mesh)
    rule = tri_rule(5)
    gq, area = _mini_grads(mesh, rule)
    dofs = _element_dofs(mesh, layout)
    Kdot = np.einsum("q,tqad,tqbd->tab", rule.weights, gq, gq) * area[:, None, None]
    local = np.zeros((mesh.num_triangles, 8, 8))
    local[:, :4, :4] = Kdot
    local[:, 4:, 4:] = Kdot
    return _scatter_square(dofs, local, layout.ndof)


def mini_load(mesh: Mesh, f, t: float = 0.0) -> np.ndarray:
    """(f(., t), v) over MINI velocity dofs; f returns shape (..., 2)."""
    layout = velocity_layout(mesh)
    rule = tri_rule(5)
    pts, w = quad_points(mesh, rule)
    fv = np.asarray(f(pts[..., 0], pts[..., 1], t))
    lam = rule.points
    bub = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
    shp = np.column_stack([lam, bub])                      # (nq, 4)
    contrib = np.einsum("tqd,tq,qa->tad", fv, w, shp)      # (nt, 4, 2)
    out = np.zeros(layout.ndof)
    dofs = _element_dofs(mesh, layout)
    np.add.at(out, dofs[:, :4].ravel(), contrib[..., 0].ravel())
    np.add.at(out, dofs[:, 4:].ravel(), contrib[..., 1].ravel())
    return out


def mini_evaluate(mesh: Mesh, u: np.ndarray, tri: np.ndarray,
                  lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MINI velocity values (np, 2) and gradients (np, 2, 2) at located points.

    grads[p, i, j] = d u_i / d x_j.
    """
    layout = velocity_layout(mesh)
    G, _ = p1_gradients(mesh)
    bub = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
    cof = 27.0 * np.column_stack([
        lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
    gbub = np.einsum("pi,pid->pd", cof, G[tri])
    verts = mesh.triangles[tri]
    vals = np.empty((len(tri), 2))
    grads = np.empty((len(tri), 2, 2))
    for comp in range(2):
        nodal = u[layout.vertex_dofs(comp)]
        bubc = u[layout.bubble_dofs(comp)]
        vv = nodal[verts]
        vals[:, comp] = np.einsum("pi,pi->p", vv, lam) + bubc[tri] * bub
        grads[:, comp, :] = (np.einsum("pi,pid->pd", vv, G[tri])
                             + bubc[tri, None] * gbub)
    return vals, grads


def p1_evaluate_on_elements(mesh: Mesh, nodal: np.ndarray,
                            rule: TriRule) -> tuple[np.ndarray, np.ndarray]:
    """P1 values (nt, nq) and gradients (nt, nq, 2) at all quadrature points."""
    G, _ = p1_gradients(mesh)
    vv = nodal[mesh.triangles]
    vals = np.einsum("ti,qi->tq", vv, rule.points)
    grads = np.einsum("ti,tid->td", vv, G)
    return vals, np.broadcast_to(grads[:, None, :], vals.shape + (2,))


def mini_evaluate_on_elements(mesh: Mesh, u: np.ndarray,
                              rule: TriRule) -> tuple[np.ndarray, np.ndarray]:
    """MINI values (nt, nq, 2) and gradients (nt, nq, 2, 2) at quadrature points."""
    layout = velocity_layout(mesh)
    gq, _ = _mini_grads(mesh, rule)
    lam = rule.points
    bub = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
    nt, nq = mesh.num_triangles, len(lam)
    vals = np.empty((nt, nq, 2))
    grads = np.empty((nt, nq, 2, 2))
    for comp in range(2):
        nodal = u[layout.vertex_dofs(comp)][mesh.triangles]
        bubc = u[layout.bubble_dofs(comp)]
        vals[:, :, comp] = (np.einsum("ti,qi->tq", nodal, lam)
                            + bubc[:, None] * bub[None, :])
        coeffs = np.concatenate([nodal, bubc[:, None]], axis=1)  # (nt, 4)
        grads[:, :, comp, :] = np.einsum("ta,tqad->tqd", coeffs, gq)
    return vals, grads


# ---------------------------------------------------------------------------
# interface terms

def bjs_matrix(fluid: Mesh, nu: float, alpha: float, g: float,
               kfield) -> sp.csr_matrix:
    """Beavers-Joseph-Saffman tangential slip penalty on the Γ edges.

    The coefficient at x is ν α √d / sqrt(trace(Π)) with Π = K ν / g and
    d = 2, which reduces to α sqrt(ν g / K(x)) for isotropic K.
    Only P1 vertex dofs receive contributions (bubbles vanish on edges).
    """
    layout = velocity_layout(fluid)
    sel = fluid.boundary_tags == int(Tag.INTERFACE)
    edges = fluid.boundary_edges[sel]
    if alpha == 0.0 or len(edges) == 0:
        return sp.csr_matrix((layout.ndof, layout.ndof))
    kf = _as_coeff(kfield)
    s, w = edge_rule(2)  # exact through cubics in the trace product
    va = fluid.vertices[edges[:, 0]]
    vb = fluid.vertices[edges[:, 1]]
    dv = vb - va
    lengths = np.hypot(dv[:, 0], dv[:, 1])
    tau = dv / lengths[:, None]
    pts = va[:, None, :] + s[None, :, None] * dv[:, None, :]
    kv = kf(pts[..., 0], pts[..., 1])
    if np.any(kv <= 0):
        raise ValueError("permeability must be positive on the interface")
    c = alpha * np.sqrt(nu * g / kv)                       # (ne, nq)
    shp = np.column_stack([1.0 - s, s])                    # (nq, 2)
    scal = np.einsum("eq,q,qa,qb->eab", c, w, shp, shp) * lengths[:, None, None]
    tt = np.einsum("ei,ej->eij", tau, tau)
    # local dof order after the reshape: (va_x, va_y, vb_x, vb_y)
    local = np.einsum("eab,eij->eaibj", scal, tt).reshape(len(edges), 4, 4)
    dofs = np.column_stack([
        edges[:, 0], layout.per_comp + edges[:, 0],
        edges[:, 1], layout.per_comp + edges[:, 1],
    ])
    return _scatter_square(dofs, local, layout.ndof)


def _segment_quadrature(coupling: InterfaceCoupling, npts: int = 3):
    """Per-segment Gauss points with trace shape values on both sides."""
    s, w = edge_rule(npts)
    xa = coupling.seg_x[:-1]
    xb = coupling.seg_x[1:]
    seglen = xb - xa
    x = xa[:, None] + s[None, :] * seglen[:, None]          # (ns, nq)
    wx = w[None, :] * seglen[:, None]

    def trace_shapes(xext):
        t = (x - xext[:, 0:1]) / (xext[:, 1:2] - xext[:, 0:1])
        return np.stack([1.0 - t, t], axis=-1)              # (ns, nq, 2)

    Nf = trace_shapes(coupling.fluid_x)
    Np = trace_shapes(coupling.porous_x)
    return x, wx, Nf, Np


def stokes_interface_vector(coupling: InterfaceCoupling, layout: VelocityLayout,
                            phi_porous: np.ndarray) -> np.ndarray:
    """∫_Γ φ v·n_f over MINI velocity dofs, with φ the porous P1 trace."""
    _, wx, Nf, Np = _segment_quadrature(coupling)
    phi_ends = phi_porous[coupling.porous_edges]             # (ns, 2)
    phi_q = np.einsum("sqa,sa->sq", Np, phi_ends)
    contrib = np.einsum("sq,sq,sqa->sa", phi_q, wx, Nf)      # (ns, 2)
    out = np.zeros(layout.ndof)
    for comp in range(2):
        n_c = coupling.normal_nf[comp]
        if n_c != 0.0:
            np.add.at(out, comp * layout.per_comp + coupling.fluid_edges.ravel(),
                      n_c * contrib.ravel())
    return out


def darcy_interface_vector(coupling: InterfaceCoupling, nv_porous: int,
                           u_vertex: np.ndarray) -> np.ndarray:
    """∫_Γ (u·n_f) ψ over porous P1 vertex dofs.

    u_vertex holds the fluid vertex velocity values (nv_fluid, 2); bubble
    traces vanish on edges and contribute exactly zero.
    """
    _, wx, Nf, Np = _segment_quadrature(coupling)
    un_ends = u_vertex[coupling.fluid_edges] @ coupling.normal_nf  # (ns, 2)
    un_q = np.einsum("sqa,sa->sq", Nf, un_ends)
    contrib = np.einsum("sq,sq,sqa->sa", un_q, wx, Np)
    out = np.zeros(nv_porous)
    np.add.at(out, coupling.porous_edges.ravel(), contrib.ravel())
    return out


# ---------------------------------------------------------------------------
# Dirichlet conditions

class DirichletSystem:
    """Symmetric elimination of Dirichlet dofs with reusable factorization.

    The constrained matrix has zeroed rows/columns and unit diagonal at the
    constrained dofs; the right-hand side correction (moving the known-value
    columns across) is recomputed per call so time-dependent data reuses the
    same factorization.
    """

    def __init__(self, A: sp.spmatrix, nodes: np.ndarray):
        nodes = np.asarray(nodes, dtype=np.int64)
        uniq = np.unique(nodes)
        if len(uniq) != len(nodes):
            raise ValueError("duplicate Dirichlet nodes")
        self.nodes = uniq
        n = A.shape[0]
        self.columns = sp.csr_matrix(A)[:, self.nodes]
        free = np.ones(n)
        free[self.nodes] = 0.0
        Z = sp.diags(free)
        pin = np.zeros(n)
        pin[self.nodes] = 1.0
        self.matrix = (Z @ A @ Z + sp.diags(pin)).tocsr()

    def rhs(self, b: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = b - self.columns @ values
        out[self.nodes] = values
        return out


def apply_dirichlet(A: sp.spmatrix, b: np.ndarray, nodes, values):
    """One-shot symmetric Dirichlet imposition; returns (A_bc, b_bc)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    uniq, inv = np.unique(nodes, return_inverse=True)
    # reorder values to the sorted-unique node order, checking duplicates
    merged = np.full(len(uniq), np.nan)
    for k, v in zip(inv, values):
        if not np.isnan(merged[k]) and merged[k] != v:
            raise ValueError("conflicting values for duplicated Dirichlet node")
        merged[k] = v
    values = merged
    ds = DirichletSystem(A, uniq)
    return ds.matrix, ds.rhs(np.asarray(b, dtype=float), values)
