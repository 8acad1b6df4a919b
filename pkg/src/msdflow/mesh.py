"""Structured triangulations of rectangles, submesh refinement and point location.

All meshes are uniform right-triangle splits of an nx-by-ny grid of squares,
with the diagonal running from the lower-left to the upper-right corner of
each square.  Cell (i, j) owns triangles 2*(j*nx+i) (below the diagonal) and
2*(j*nx+i)+1 (above it).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Region(enum.Enum):
    FLUID = "fluid"
    POROUS = "porous"


class Tag(enum.IntEnum):
    GAMMA_F = 1
    GAMMA_P = 2
    INTERFACE = 3


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class Mesh:
    """Conforming triangulation with tagged boundary edges.

    ``boundary_edges`` rows are oriented counter-clockwise along the domain
    boundary, so the outward normal of edge (a, b) is (dy, -dx)/len.
    Structured meshes carry (rect, nx, ny) for O(1) point location; a mesh
    without them falls back to a brute-force scan.
    """

    vertices: np.ndarray          # (nv, 2)
    triangles: np.ndarray         # (nt, 3) int, CCW
    boundary_edges: np.ndarray    # (ne, 2) int
    boundary_tags: np.ndarray     # (ne,) int (Tag values)
    region: Region
    rect: Rect | None = None
    nx: int = 0
    ny: int = 0

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def triangle_vertices(self, t: int) -> np.ndarray:
        return self.vertices[self.triangles[t]]

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.abs(
            (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
            - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1])
        )

    def signed_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * (
            (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
            - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1])
        )

    def boundary_vertices(self, tag: Tag) -> np.ndarray:
        """Sorted unique vertex indices lying on edges with the given tag."""
        edges = self.boundary_edges[self.boundary_tags == int(tag)]
        return np.unique(edges)


@dataclass
class SubMesh:
    """Uniform nsplit-fold barycentric-lattice refinement of one coarse triangle."""

    parent_cell: int
    nsplit: int
    fine: Mesh
    fine_bary: np.ndarray       # (nfv, 3) barycentric coords w.r.t. parent
    boundary_mask: np.ndarray   # (nfv,) bool, True on the parent boundary

    @property
    def boundary_map(self) -> dict[int, np.ndarray]:
        idx = np.nonzero(self.boundary_mask)[0]
        return {int(i): self.fine_bary[i] for i in idx}


@dataclass
class InterfaceEdge:
    fluid_edge: tuple[int, int]
    porous_edge: tuple[int, int]
    length: float
    normal_nf: np.ndarray
    tangent: np.ndarray


@dataclass
class InterfaceCoupling:
    """Matched quadrature segments along a horizontal interface.

    Each segment lies inside exactly one fluid boundary edge and one porous
    boundary edge; the two traces may be differently refined as long as the
    break points of one side are nested in the other (or equal).
    """

    y: float
    normal_nf: np.ndarray                 # constant along a straight interface
    tangent: np.ndarray
    seg_x: np.ndarray                     # (ns+1,) break points
    fluid_edges: np.ndarray               # (ns, 2) vertex pairs in fluid mesh
    porous_edges: np.ndarray              # (ns, 2) vertex pairs in porous mesh
    fluid_x: np.ndarray                   # (ns, 2) x-coords of fluid edge ends
    porous_x: np.ndarray                  # (ns, 2) x-coords of porous edge ends

    @property
    def num_segments(self) -> int:
        return len(self.fluid_edges)


def _side_tags(tags: dict[str, Tag]) -> dict[str, Tag]:
    missing = {"bottom", "top", "left", "right"} - tags.keys()
    if missing:
        raise ValueError(f"missing boundary tags for sides: {sorted(missing)}")
    return tags


def build_rect_mesh(rect: Rect, nx: int, ny: int, region: Region,
                    tags: dict[str, Tag]) -> Mesh:
    """Structured mesh of nx*ny squares, each split into two CCW triangles."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    tags = _side_tags(tags)

    xs = np.linspace(rect.x0, rect.x1, nx + 1)
    ys = np.linspace(rect.y0, rect.y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = I.ravel(), J.ravel()
    v00, v10 = vid(i, j), vid(i + 1, j)
    v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    edges = []
    etags = []
    ii = np.arange(nx)
    jj = np.arange(ny)
    # CCW orientation: bottom left-to-right, right upward, top right-to-left,
    # left downward.
    edges.append(np.column_stack([vid(ii, 0), vid(ii + 1, 0)]))
    etags.append(np.full(nx, int(tags["bottom"])))
    edges.append(np.column_stack([vid(nx, jj), vid(nx, jj + 1)]))
    etags.append(np.full(ny, int(tags["right"])))
    edges.append(np.column_stack([vid(ii + 1, ny), vid(ii, ny)])[::-1])
    etags.append(np.full(nx, int(tags["top"])))
    edges.append(np.column_stack([vid(0, jj + 1), vid(0, jj)])[::-1])
    etags.append(np.full(ny, int(tags["left"])))

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.vstack(edges),
        boundary_tags=np.concatenate(etags),
        region=region,
        rect=rect,
        nx=nx,
        ny=ny,
    )


def _lattice_index(i: np.ndarray, j: np.ndarray, n: int) -> np.ndarray:
    # Vertices enumerated row by row in j, then by i; row j holds n+1-j entries.
    return j * (n + 1) - j * (j - 1) // 2 + i


def build_submesh(mesh: Mesh, cell: int, nsplit: int) -> SubMesh:
    """Refine one triangle into nsplit**2 similar triangles."""
    if not 0 <= cell < mesh.num_triangles:
        raise IndexError(f"cell {cell} out of range")
    if nsplit < 1:
        raise ValueError("nsplit must be at least 1")
    n = nsplit
    V = mesh.triangle_vertices(cell)

    js, i_s = [], []
    for j in range(n + 1):
        i = np.arange(n + 1 - j)
        i_s.append(i)
        js.append(np.full(n + 1 - j, j))
    i = np.concatenate(i_s)
    j = np.concatenate(js)
    lam2 = i / n
    lam3 = j / n
    lam1 = 1.0 - lam2 - lam3
    bary = np.column_stack([lam1, lam2, lam3])
    verts = bary @ V

    tris = []
    for jj in range(n):
        for ii in range(n - jj):
            a = _lattice_index(ii, jj, n)
            b = _lattice_index(ii + 1, jj, n)
            c = _lattice_index(ii, jj + 1, n)
            tris.append((a, b, c))
            if ii + jj <= n - 2:
                d = _lattice_index(ii + 1, jj + 1, n)
                tris.append((b, d, c))
    triangles = np.array(tris, dtype=np.int64)

    boundary_mask = (i == 0) | (j == 0) | (i + j == n)

    # Boundary edges of the lattice (orientation CCW around the parent).
    be = []
    for k in range(n):
        be.append((_lattice_index(k, 0, n), _lattice_index(k + 1, 0, n)))
    for k in range(n):
        be.append((_lattice_index(n - k, k, n), _lattice_index(n - k - 1, k + 1, n)))
    for k in range(n):
        be.append((_lattice_index(0, n - k, n), _lattice_index(0, n - k - 1, n)))
    fine = Mesh(
        vertices=verts,
        triangles=triangles,
        boundary_edges=np.array(be, dtype=np.int64),
        boundary_tags=np.full(3 * n, int(Tag.GAMMA_P)),
        region=mesh.region,
    )
    return SubMesh(parent_cell=cell, nsplit=n, fine=fine,
                   fine_bary=bary, boundary_mask=boundary_mask)


def submesh_locate(sub: SubMesh, bary_parent: np.ndarray) -> np.ndarray:
    """Fine-triangle indices for points given in parent barycentric coords.

    Vectorized; points must lie in the closed parent triangle.
    """
    n = sub.nsplit
    a = np.atleast_2d(bary_parent)[:, 1] * n
    b = np.atleast_2d(bary_parent)[:, 2] * n
    i = np.clip(np.floor(a).astype(np.int64), 0, n - 1)
    j = np.clip(np.floor(b).astype(np.int64), 0, n - 1)
    fa = a - i
    fb = b - j
    # Points on the lambda1=0 edge may round to a nonexistent cell.
    over = i + j > n - 1
    while np.any(over):
        pick_i = over & (fa <= fb)
        i[pick_i] -= 1
        fa[pick_i] += 1.0
        pick_j = over & ~pick_i
        j[pick_j] -= 1
        fb[pick_j] += 1.0
        over = i + j > n - 1
    upper = (fa + fb > 1.0) & (i + j <= n - 2)
    row_offset = 2 * n * j - j * j
    return row_offset + 2 * i + upper


def locate_points(mesh: Mesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized point location on a structured mesh.

    Returns (triangle indices, barycentric coordinates).  Points on shared
    edges are assigned by the floor rule (right/upper cell, lower triangle of
    the square); deterministic but intended for quadrature points, which never
    sit on edges.
    """
    if mesh.rect is None:
        raise ValueError("locate_points requires a structured mesh")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = mesh.rect
    tol = 1e-12 * max(r.width, r.height, 1.0)
    inside = (
        (pts[:, 0] >= r.x0 - tol) & (pts[:, 0] <= r.x1 + tol)
        & (pts[:, 1] >= r.y0 - tol) & (pts[:, 1] <= r.y1 + tol)
    )
    if not np.all(inside):
        bad = pts[~inside][0]
        raise ValueError(f"point {bad} outside mesh bounding rectangle")
    dx = r.width / mesh.nx
    dy = r.height / mesh.ny
    gx = (pts[:, 0] - r.x0) / dx
    gy = (pts[:, 1] - r.y0) / dy
    i = np.clip(np.floor(gx).astype(np.int64), 0, mesh.nx - 1)
    j = np.clip(np.floor(gy).astype(np.int64), 0, mesh.ny - 1)
    fx = gx - i
    fy = gy - j
    lower = fx >= fy
    tri = 2 * (j * mesh.nx + i) + ~lower
    # Barycentric coordinates on the containing triangle.
    lam = np.empty((len(pts), 3))
    # lower triangle (v00, v10, v11): lam = (1-fx, fx-fy, fy)
    lam[lower, 0] = 1.0 - fx[lower]
    lam[lower, 1] = fx[lower] - fy[lower]
    lam[lower, 2] = fy[lower]
    up = ~lower
    # upper triangle (v00, v11, v01): lam = (1-fy, fx, fy-fx)
    lam[up, 0] = 1.0 - fy[up]
    lam[up, 1] = fx[up]
    lam[up, 2] = fy[up] - fx[up]
    return tri, lam


def barycentric(tri_verts: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of p in one triangle given by its 3 vertices."""
    T = np.column_stack([tri_verts[1] - tri_verts[0], tri_verts[2] - tri_verts[0]])
    s = np.linalg.solve(T, np.asarray(p, dtype=float) - tri_verts[0])
    return np.array([1.0 - s[0] - s[1], s[0], s[1]])


def locate_point(mesh: Mesh, p: np.ndarray) -> tuple[int, np.ndarray]:
    """Single-point location; ties on shared edges go to the lowest triangle index."""
    if mesh.rect is None:
        return _locate_brute(mesh, p)
    p = np.asarray(p, dtype=float)
    r = mesh.rect
    tol = 1e-12 * max(r.width, r.height, 1.0)
    if not (r.x0 - tol <= p[0] <= r.x1 + tol and r.y0 - tol <= p[1] <= r.y1 + tol):
        raise ValueError(f"point {p} outside mesh bounding rectangle")
    dx = r.width / mesh.nx
    dy = r.height / mesh.ny
    i0 = int(np.clip(np.floor((p[0] - r.x0) / dx), 0, mesh.nx - 1))
    j0 = int(np.clip(np.floor((p[1] - r.y0) / dy), 0, mesh.ny - 1))
    candidates = []
    for j in (j0 - 1, j0, j0 + 1):
        for i in (i0 - 1, i0, i0 + 1):
            if 0 <= i < mesh.nx and 0 <= j < mesh.ny:
                c = j * mesh.nx + i
                candidates.extend((2 * c, 2 * c + 1))
    for t in sorted(candidates):
        lam = barycentric(mesh.triangle_vertices(t), p)
        if np.all(lam >= -1e-12):
            return t, lam
    raise ValueError(f"point {p} not located (outside domain)")


def _locate_brute(mesh: Mesh, p: np.ndarray) -> tuple[int, np.ndarray]:
    for t in range(mesh.num_triangles):
        lam = barycentric(mesh.triangle_vertices(t), p)
        if np.all(lam >= -1e-12):
            return t, lam
    raise ValueError(f"point {p} outside mesh")


def _interface_trace(mesh: Mesh) -> tuple[float, np.ndarray, np.ndarray]:
    """(y-level, edges, x-extents) of the Γ edges.

    Edges are sorted by x and each vertex pair is reordered so the first
    vertex has the smaller x-coordinate.
    """
    sel = mesh.boundary_tags == int(Tag.INTERFACE)
    edges = mesh.boundary_edges[sel].copy()
    if len(edges) == 0:
        raise ValueError(f"{mesh.region} mesh carries no interface edges")
    coords = mesh.vertices[edges]
    ylevels = coords[:, :, 1]
    y = ylevels.ravel()[0]
    if not np.allclose(ylevels, y, atol=1e-12):
        raise ValueError("interface is not a horizontal segment")
    xs = coords[:, :, 0]
    flip = xs[:, 0] > xs[:, 1]
    edges[flip] = edges[flip][:, ::-1]
    xs = np.sort(xs, axis=1)
    order = np.argsort(xs[:, 0])
    return y, edges[order], xs[order]


def build_interface_coupling(fluid: Mesh, porous: Mesh) -> InterfaceCoupling:
    """Segment decomposition of Γ supporting equal or nested traces."""
    yf, fe, fx = _interface_trace(fluid)
    yp, pe, px = _interface_trace(porous)
    if abs(yf - yp) > 1e-10:
        raise ValueError(f"interface levels differ: {yf} vs {yp}")
    if abs(fx[0, 0] - px[0, 0]) > 1e-10 or abs(fx[-1, 1] - px[-1, 1]) > 1e-10:
        raise ValueError("interface extents differ between fluid and porous meshes")
    breaks = np.union1d(np.round(fx.ravel(), 13), np.round(px.ravel(), 13))
    mids = 0.5 * (breaks[:-1] + breaks[1:])

    def owner(xext, m):
        k = np.searchsorted(xext[:, 0], m) - 1
        k = np.clip(k, 0, len(xext) - 1)
        if np.any(m > xext[k, 1] + 1e-10) or np.any(m < xext[k, 0] - 1e-10):
            raise ValueError("interface traces are not nested")
        return k

    kf = owner(fx, mids)
    kp = owner(px, mids)
    # n_f points out of the fluid region: downward when the porous region
    # sits below the interface.
    porous_below = porous.vertices[:, 1].mean() < yp
    normal = np.array([0.0, -1.0]) if porous_below else np.array([0.0, 1.0])
    tangent = np.array([1.0, 0.0])
    return InterfaceCoupling(
        y=yf, normal_nf=normal, tangent=tangent, seg_x=breaks,
        fluid_edges=fe[kf], porous_edges=pe[kp],
        fluid_x=fx[kf], porous_x=px[kp],
    )


def extract_interface(fluid: Mesh, porous: Mesh) -> list[InterfaceEdge]:
    """Matched one-to-one interface edges, ordered by x.

    Requires identical traces on both sides (conforming coupling); nested but
    unequal refinements must go through build_interface_coupling instead.
    """
    yf, fe, fx = _interface_trace(fluid)
    yp, pe, px = _interface_trace(porous)
    if len(fe) != len(pe) or np.max(np.abs(fx - px)) > 1e-10:
        raise ValueError("interface traces do not match vertex-for-vertex")
    if abs(yf - yp) > 1e-10:
        raise ValueError(f"interface levels differ: {yf} vs {yp}")
    coupling = build_interface_coupling(fluid, porous)
    out = []
    for k in range(len(fe)):
        out.append(InterfaceEdge(
            fluid_edge=tuple(int(v) for v in fe[k]),
            porous_edge=tuple(int(v) for v in pe[k]),
            length=float(fx[k, 1] - fx[k, 0]),
            normal_nf=coupling.normal_nf.copy(),
            tangent=coupling.tangent.copy(),
        ))
    return out


def conformity_audit(mesh: Mesh) -> None:
    """Raise if any interior edge is not shared by exactly two triangles."""
    e = np.vstack([
        mesh.triangles[:, [0, 1]],
        mesh.triangles[:, [1, 2]],
        mesh.triangles[:, [2, 0]],
    ])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise AssertionError("edge shared by more than two triangles")
    n_boundary = int(np.sum(counts == 1))
    if n_boundary != len(mesh.boundary_edges):
        raise AssertionError(
            f"{n_boundary} boundary edges found, {len(mesh.boundary_edges)} tagged")
