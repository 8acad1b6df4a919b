"""Benchmark problems, reference solutions, error norms and convergence studies."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .linalg import factor_spd
from .mesh import Mesh, Rect, Region, Tag, build_rect_mesh, locate_points
from .msfem import MsSpace, build_ms_space
from .solver import (ImExSolver, MsDarcySpace, P1DarcySpace, PhysParams,
                     SchemeConfig, StateVector)


class BudgetExceededError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# permeability fields

@dataclass(frozen=True)
class PermeabilityField:
    """Oscillatory scalar hydraulic conductivity with period eps."""
    kind: str          # "separable" | "inseparable" | "cavity_sum" | "constant"
    eps: float = 1.0
    P: float = 1.5
    value: float = 1.0  # used by the constant kind

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "constant":
            return np.full_like(x, self.value)
        wx = 2.0 * np.pi * x / self.eps
        wy = 2.0 * np.pi * y / self.eps
        if self.kind == "separable":
            return 1.0 / ((2.0 + self.P * np.sin(wx)) * (2.0 + self.P * np.cos(wy)))
        if self.kind == "inseparable":
            return 1.0 / (4.0 + self.P * (np.sin(wx) + np.sin(wy)))
        if self.kind == "cavity_sum":
            return ((2.0 + self.P * np.sin(wx)) / (2.0 + self.P * np.cos(wy))
                    + (2.0 + self.P * np.sin(wy)) / (2.0 + self.P * np.cos(wx)))
        raise ValueError(f"unknown permeability kind {self.kind!r}")

    @property
    def id(self) -> str:
        return f"{self.kind}:eps={self.eps!r}:P={self.P!r}:value={self.value!r}"

    def check_positive(self, rect: Rect, n: int = 101) -> None:
        xs = np.linspace(rect.x0, rect.x1, n)
        ys = np.linspace(rect.y0, rect.y1, n)
        X, Y = np.meshgrid(xs, ys)
        if np.min(self(X, Y)) <= 0:
            raise ValueError("permeability is not strictly positive on the domain")


# ---------------------------------------------------------------------------
# problem definitions

@dataclass(frozen=True)
class StokesDarcyProblem:
    name: str
    fluid_rect: Rect
    porous_rect: Rect
    kfield: PermeabilityField
    f_f: callable            # (x, y, t) -> (..., 2)
    f_p: callable            # (x, y, t) -> (...)
    u0: callable             # (x, y) -> (..., 2)
    phi0: callable           # (x, y) -> (...)
    u_dirichlet: callable    # (x, y, t) -> (..., 2), on Γ_f
    params: PhysParams = PhysParams()
    T: float = 1.0


def _vec(fx, fy):
    def f(x, y, t):
        x = np.asarray(x, dtype=float)
        return np.stack([fx(x, y, t), fy(x, y, t)], axis=-1)
    return f


def _zero_vec(x, y, t=0.0):
    x = np.asarray(x, dtype=float)
    return np.stack([np.zeros_like(x), np.zeros_like(x)], axis=-1)


def define_example(example_id: int, eps: float, overrides: dict | None = None
                   ) -> StokesDarcyProblem:
    """The three benchmark problems, with eps and any field overridable."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if example_id in (1, 2):
        fluid = Rect(0.0, 1.0, 1.0, 2.0)
        porous = Rect(0.0, 1.0, 0.0, 1.0)
        if example_id == 1:
            kfield = PermeabilityField("separable", eps=eps, P=1.5)
        else:
            kfield = PermeabilityField("inseparable", eps=eps, P=1.8)

        def ff1(x, y, t):
            return (1.0 - 2.0 * x) * (y - 1.0) * (math.cos(t) - math.sin(t))

        def ff2(x, y, t):
            return (-(x * (x - 1.0) + (y - 1.0) ** 2) * math.sin(t)
                    + (x * (1.0 - x) + (y + 1.0) * (y - 3.0)) * math.cos(t))

        def u_bc(x, y, t):
            x = np.asarray(x, dtype=float)
            c = math.cos(t)
            return np.stack([(1.0 - 2.0 * x) * (y - 1.0) * c,
                             (x * (x - 1.0) + (y - 1.0) ** 2) * c], axis=-1)

        problem = StokesDarcyProblem(
            name=f"example{example_id}",
            fluid_rect=fluid, porous_rect=porous, kfield=kfield,
            f_f=_vec(ff1, ff2),
            f_p=lambda x, y, t: np.full_like(np.asarray(x, dtype=float), t),
            u0=lambda x, y: u_bc(x, y, 0.0),
            phi0=lambda x, y: np.zeros_like(np.asarray(x, dtype=float)),
            u_dirichlet=u_bc,
        )
    elif example_id == 3:
        fluid = Rect(0.0, 1.0, 1.0, 1.25)
        porous = Rect(0.0, 1.0, 0.25, 1.0)
        kfield = PermeabilityField("cavity_sum", eps=eps, P=1.5)

        def lid(x, y, t):
            # sliding lid at the top wall, zero on the side walls
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            ux = np.where(np.abs(y - 1.25) < 1e-12, np.sin(np.pi * x), 0.0)
            return np.stack([ux, np.zeros_like(x)], axis=-1)

        problem = StokesDarcyProblem(
            name="example3",
            fluid_rect=fluid, porous_rect=porous, kfield=kfield,
            f_f=_zero_vec,
            f_p=lambda x, y, t: np.zeros_like(np.asarray(x, dtype=float)),
            u0=lambda x, y: np.stack([np.sin(np.pi * np.asarray(x, dtype=float)),
                                      np.zeros_like(np.asarray(x, dtype=float))],
                                     axis=-1),
            phi0=lambda x, y: np.zeros_like(np.asarray(x, dtype=float)),
            u_dirichlet=lid,
        )
    else:
        raise ValueError(f"unknown example id {example_id}")
    if overrides:
        problem = dataclasses.replace(problem, **overrides)
    return problem


def decay_variant(problem: StokesDarcyProblem) -> StokesDarcyProblem:
    """Zero forcing and zero boundary data for t > 0; initial data kept."""
    return dataclasses.replace(
        problem, name=problem.name + "-decay",
        f_f=_zero_vec,
        f_p=lambda x, y, t: np.zeros_like(np.asarray(x, dtype=float)),
        u_dirichlet=lambda x, y, t: _zero_vec(x, y, t),
    )


# ---------------------------------------------------------------------------
# mesh construction

FLUID_TAGS = {"bottom": Tag.INTERFACE, "left": Tag.GAMMA_F,
              "right": Tag.GAMMA_F, "top": Tag.GAMMA_F}
POROUS_TAGS = {"bottom": Tag.GAMMA_P, "left": Tag.GAMMA_P,
               "right": Tag.GAMMA_P, "top": Tag.INTERFACE}


def _subdivisions(extent: float, h: float) -> int:
    n = round(extent / h)
    if n < 1 or abs(n * h - extent) > 1e-10:
        raise ValueError(f"mesh size {h} does not divide extent {extent}")
    return n


def build_meshes(problem: StokesDarcyProblem, h: float) -> tuple[Mesh, Mesh]:
    fr, pr = problem.fluid_rect, problem.porous_rect
    fluid = build_rect_mesh(fr, _subdivisions(fr.width, h),
                            _subdivisions(fr.height, h), Region.FLUID, FLUID_TAGS)
    porous = build_rect_mesh(pr, _subdivisions(pr.width, h),
                             _subdivisions(pr.height, h), Region.POROUS, POROUS_TAGS)
    return fluid, porous


def build_porous_mesh(problem: StokesDarcyProblem, h: float) -> Mesh:
    pr = problem.porous_rect
    return build_rect_mesh(pr, _subdivisions(pr.width, h),
                           _subdivisions(pr.height, h), Region.POROUS, POROUS_TAGS)


# ---------------------------------------------------------------------------
# solutions and error norms

@dataclass
class Solution:
    """One terminal-time discrete solution with everything needed to evaluate it."""
    fluid_mesh: Mesh
    darcy: object            # P1DarcySpace or MsDarcySpace
    state: StateVector
    solver: ImExSolver | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class ErrorReport:
    u_l2: float
    u_h1: float          # seminorm |grad e|, the paper's ||.||_1
    phi_l2: float
    phi_h1: float
    u_h1_full: float = 0.0
    phi_h1_full: float = 0.0
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"u_l2": self.u_l2, "u_h1": self.u_h1,
                "phi_l2": self.phi_l2, "phi_h1": self.phi_h1,
                "u_h1_full": self.u_h1_full, "phi_h1_full": self.phi_h1_full,
                **self.meta}


def solve_coupled(problem: StokesDarcyProblem, h: float, config: SchemeConfig,
                  nsplit: int | None = None, ms_space: MsSpace | None = None,
                  workers: int = 1, observer=None) -> Solution:
    """Run one MsFEM-ImEx or FEM-ImEx simulation to the final time."""
    fluid, porous = build_meshes(problem, h)
    if config.darcy_space == "msfem":
        if ms_space is None:
            if nsplit is None:
                raise ValueError("msfem scheme needs nsplit or a prebuilt space")
            ms_space = build_ms_space(porous, problem.kfield, nsplit,
                                      workers=workers,
                                      eps_hint=problem.kfield.eps)
        darcy = MsDarcySpace(ms_space)
    else:
        darcy = P1DarcySpace(porous, problem.kfield)
    solver = ImExSolver(fluid, darcy, problem, problem.params, config)
    state, log = solver.run(observer=observer)
    return Solution(fluid_mesh=fluid, darcy=darcy, state=state, solver=solver,
                    meta={"h": h, "nsplit": nsplit, "scheme": config.darcy_space,
                          "dt": config.dt, "T": config.T, "log": log})


def reference_solve(problem: StokesDarcyProblem, h_ref_S: float, h_ref_D: float,
                    dt: float, dof_budget: int = 4_000_000) -> Solution:
    """FEM-ImEx reference on fine meshes, kept for later error quadrature.

    The porous mesh must resolve the oscillation: h_ref_D <= eps / 8 for
    oscillatory permeabilities.
    """
    kf = problem.kfield
    if kf.kind != "constant" and h_ref_D > kf.eps / 8 + 1e-12:
        raise ValueError(
            f"reference porous mesh h={h_ref_D} too coarse for eps={kf.eps}")
    fluid, porous = build_meshes(problem, h_ref_S)[0], build_porous_mesh(problem, h_ref_D)
    ndof = (2 * (fluid.num_vertices + fluid.num_triangles) + fluid.num_vertices
            + porous.num_vertices)
    if ndof > dof_budget:
        raise BudgetExceededError(f"reference needs {ndof} dofs > budget {dof_budget}")
    config = SchemeConfig(dt=dt, T=problem.T, darcy_space="p1")
    darcy = P1DarcySpace(porous, problem.kfield)
    solver = ImExSolver(fluid, darcy, problem, problem.params, config)
    state, _ = solver.run()
    return Solution(fluid_mesh=fluid, darcy=darcy, state=state, solver=solver,
                    meta={"h_S": h_ref_S, "h_D": h_ref_D, "dt": dt,
                          "scheme": "p1-reference"})


def compute_errors(numerical: Solution, reference: Solution,
                   meta: dict | None = None,
                   fields: tuple = ("u", "phi")) -> ErrorReport:
    """L2/H1 errors at the common terminal time, by reference-mesh quadrature."""
    if abs(numerical.state.t - reference.state.t) > 1e-10:
        raise ValueError(
            f"time mismatch: {numerical.state.t} vs {reference.state.t}")
    phi_l2_sq = phi_h1_sq = u_l2_sq = u_h1_sq = 0.0
    if "phi" in fields:
        rmesh = reference.darcy.mesh
        rule = fem.tri_rule(2)
        pts, w = fem.quad_points(rmesh, rule)
        ref_v, ref_g = fem.p1_evaluate_on_elements(rmesh, reference.state.phi,
                                                   rule)
        num_v, num_g = numerical.darcy.evaluate(
            numerical.state.phi, pts.reshape(-1, 2))
        dv = num_v.reshape(ref_v.shape) - ref_v
        dg = num_g.reshape(ref_g.shape) - ref_g
        phi_l2_sq = float(np.sum(w * dv ** 2))
        phi_h1_sq = float(np.sum(w[..., None] * dg ** 2))

    if "u" in fields:
        fmesh = reference.fluid_mesh
        vrule = fem.tri_rule(5)
        fpts, fw = fem.quad_points(fmesh, vrule)
        rv, rg = fem.mini_evaluate_on_elements(fmesh, reference.state.u, vrule)
        tri, lam = locate_points(numerical.fluid_mesh, fpts.reshape(-1, 2))
        nv, ng = fem.mini_evaluate(numerical.fluid_mesh, numerical.state.u,
                                   tri, lam)
        duv = nv.reshape(rv.shape) - rv
        dug = ng.reshape(rg.shape) - rg
        u_l2_sq = float(np.sum(fw[..., None] * duv ** 2))
        u_h1_sq = float(np.sum(fw[..., None, None] * dug ** 2))

    return ErrorReport(
        u_l2=math.sqrt(u_l2_sq), u_h1=math.sqrt(u_h1_sq),
        phi_l2=math.sqrt(phi_l2_sq), phi_h1=math.sqrt(phi_h1_sq),
        u_h1_full=math.sqrt(u_l2_sq + u_h1_sq),
        phi_h1_full=math.sqrt(phi_l2_sq + phi_h1_sq),
        meta=meta or {})


# ---------------------------------------------------------------------------
# studies

def _rates(values: list[float]) -> list[float | None]:
    out = [None]
    for a, b in zip(values, values[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else None)
    return out


def nsplit_for(h: float, policy: tuple[str, float]) -> int:
    kind, value = policy
    if kind == "fixed_hfine":
        n = round(h / value)
        if n < 1:
            raise ValueError(f"h_fine {value} coarser than h {h}")
        return n
    if kind == "fixed_nsplit":
        return int(value)
    raise ValueError(f"unknown nsplit policy {kind!r}")


def spatial_study(problem: StokesDarcyProblem, h_list: list[float], dt: float,
                  nsplit_policy: tuple[str, float], reference: Solution,
                  scheme: str = "msfem", workers: int = 1,
                  monitor: bool = False) -> list[dict]:
    """Terminal-time error table over a mesh-size sweep, with log2 rates."""
    if len(h_list) < 2:
        raise ValueError("need at least two mesh sizes for a rate table")
    rows = []
    for h in h_list:
        nsplit = nsplit_for(h, nsplit_policy) if scheme == "msfem" else None
        config = SchemeConfig(dt=dt, T=problem.T, darcy_space=scheme,
                              stability_monitor=monitor)
        sol = solve_coupled(problem, h, config, nsplit=nsplit, workers=workers)
        meta = {"h": h, "nsplit": nsplit, "eps": problem.kfield.eps}
        if monitor:
            # entry 0 is the interpolated initial state, not a scheme step
            meta["div_max"] = max(sol.meta["log"].div_residual[1:])
        rep = compute_errors(sol, reference, meta=meta)
        rows.append(rep.as_dict())
    for key in ("u_l2", "u_h1", "phi_l2", "phi_h1"):
        for row, rate in zip(rows, _rates([r[key] for r in rows])):
            row[f"rate_{key}"] = rate
    return rows


def resonance_study(problem_factory, h_list: list[float], eps_over_h: float,
                    nsplit: int, dt: float, reference_factory,
                    workers: int = 1) -> list[dict]:
    """Fixed eps/h sweep: each row gets its own eps and its own reference.

    problem_factory(eps) -> StokesDarcyProblem;
    reference_factory(problem) -> Solution.
    """
    rows = []
    for h in h_list:
        eps = eps_over_h * h
        problem = problem_factory(eps)
        reference = reference_factory(problem)
        config = SchemeConfig(dt=dt, T=problem.T, darcy_space="msfem")
        sol = solve_coupled(problem, h, config, nsplit=nsplit, workers=workers)
        rep = compute_errors(sol, reference,
                             meta={"h": h, "eps": eps, "nsplit": nsplit})
        rows.append(rep.as_dict())
    for key in ("u_l2", "u_h1", "phi_l2", "phi_h1"):
        for row, rate in zip(rows, _rates([r[key] for r in rows])):
            row[f"rate_{key}"] = rate
    return rows


def rho_ratios(diffs: list[float]) -> list[float | None]:
    """Consecutive-difference ratios; entry i is diffs[i] / diffs[i+1]."""
    out = []
    for a, b in zip(diffs, diffs[1:]):
        out.append(a / b if b > 0 else None)
    out.append(None)
    return out


def temporal_study(problem: StokesDarcyProblem, h: float, nsplit: int,
                   dt_list: list[float], scheme: str = "msfem",
                   workers: int = 1) -> list[dict]:
    """Time-step halving study: difference norms between consecutive runs.

    All runs share one mesh and one multiscale space, so differences are
    plain coefficient differences measured in the discrete L2/H1 norms.
    """
    if len(dt_list) < 3:
        raise ValueError("need at least three time steps in a halving chain")
    for a, b in zip(dt_list, dt_list[1:]):
        if abs(a / b - 2.0) > 1e-10:
            raise ValueError("dt list must halve at each entry")
    fluid, porous = build_meshes(problem, h)
    ms_space = None
    if scheme == "msfem":
        ms_space = build_ms_space(porous, problem.kfield, nsplit,
                                  workers=workers, eps_hint=problem.kfield.eps)
    sols = []
    norms_mats = None
    for dt in dt_list:
        config = SchemeConfig(dt=dt, T=problem.T, darcy_space=scheme)
        sol = solve_coupled(problem, h, config, nsplit=nsplit, ms_space=ms_space)
        if norms_mats is None:
            s = sol.solver
            norms_mats = (s.M_vel, s.G_vel, s.darcy.A2, s.darcy.H1)
        sols.append(sol)

    M_vel, G_vel, A2, H1 = norms_mats

    def norm(M, d):
        return math.sqrt(max(float(d @ (M @ d)), 0.0))

    du_l2, du_h1, dphi_l2, dphi_h1 = [], [], [], []
    for a, b in zip(sols, sols[1:]):
        du = a.state.u - b.state.u
        dphi = a.state.phi - b.state.phi
        du_l2.append(norm(M_vel, du))
        du_h1.append(norm(G_vel, du))
        dphi_l2.append(norm(A2, dphi))
        dphi_h1.append(norm(H1, dphi))

    rows = []
    for i, dt in enumerate(dt_list[:-1]):
        rows.append({
            "dt": dt,
            "du_l2": du_l2[i], "rho_u_l2": None,
            "du_h1": du_h1[i], "rho_u_h1": None,
            "dphi_l2": dphi_l2[i], "rho_phi_l2": None,
            "dphi_h1": dphi_h1[i], "rho_phi_h1": None,
        })
    for key, diffs in (("rho_u_l2", du_l2), ("rho_u_h1", du_h1),
                       ("rho_phi_l2", dphi_l2), ("rho_phi_h1", dphi_h1)):
        for row, r in zip(rows, rho_ratios(diffs)):
            row[key] = r
    return rows


# ---------------------------------------------------------------------------
# manufactured Darcy-only verification

def darcy_manufactured_errors(h: float, dt: float, T: float) -> tuple[float, float]:
    """Backward-Euler heat solve against phi = exp(-t) sin(pi x) sin(pi y).

    Returns terminal (L2, H1-seminorm) errors on the unit square with K = 1.
    """
    mesh = build_rect_mesh(Rect(0, 1, 0, 1), round(1 / h), round(1 / h),
                           Region.POROUS,
                           {"bottom": Tag.GAMMA_P, "left": Tag.GAMMA_P,
                            "right": Tag.GAMMA_P, "top": Tag.GAMMA_P})

    def exact(x, y, t):
        return math.exp(-t) * np.sin(np.pi * x) * np.sin(np.pi * y)

    def f_p(x, y, t):
        return (2.0 * np.pi ** 2 - 1.0) * exact(x, y, t)

    A1 = fem.p1_stiffness(mesh, 1.0, fem.tri_rule(1))
    A2 = fem.p1_mass(mesh)
    D = (A2 / dt + A1).tocsr()
    bnodes = np.unique(mesh.boundary_edges)
    bc = fem.DirichletSystem(D, bnodes)
    factor = factor_spd(bc.matrix)

    v = mesh.vertices
    phi = exact(v[:, 0], v[:, 1], 0.0)
    n = int(round(T / dt))
    for k in range(n):
        t_next = (k + 1) * dt
        rhs = A2 @ phi / dt + fem.p1_load(mesh, f_p, t_next, fem.tri_rule(2))
        phi = factor.solve(bc.rhs(rhs, np.zeros(len(bnodes))))

    rule = fem.tri_rule(5)
    pts, w = fem.quad_points(mesh, rule)
    num_v, num_g = fem.p1_evaluate_on_elements(mesh, phi, rule)
    ex_v = exact(pts[..., 0], pts[..., 1], T)
    c = math.exp(-T) * np.pi
    ex_gx = c * np.cos(np.pi * pts[..., 0]) * np.sin(np.pi * pts[..., 1])
    ex_gy = c * np.sin(np.pi * pts[..., 0]) * np.cos(np.pi * pts[..., 1])
    l2 = math.sqrt(float(np.sum(w * (num_v - ex_v) ** 2)))
    h1 = math.sqrt(float(np.sum(w * ((num_g[..., 0] - ex_gx) ** 2
                                     + (num_g[..., 1] - ex_gy) ** 2))))
    return l2, h1
