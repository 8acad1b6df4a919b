"""Online stage: decoupled implicit-explicit time stepping.

Each step solves the fluid saddle-point system implicitly with the porous
head trace taken from the previous time level, and the porous system
implicitly with the fluid normal flux from the previous time level.  Both
system matrices are time-independent and factored exactly once per run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .linalg import AmgHandle, factor_general, factor_spd
from .mesh import Mesh, Tag, build_interface_coupling
from .msfem import MsSpace, ms_evaluate, ms_load


class NumericalFailure(RuntimeError):
    """Raised when a step produces NaN/Inf or runaway energy growth."""


@dataclass(frozen=True)
class PhysParams:
    S0: float = 1.0
    nu: float = 1.0
    alpha: float = 1.0
    g: float = 1.0

    def __post_init__(self):
        if min(self.S0, self.nu, self.g) <= 0 or self.alpha < 0:
            raise ValueError(f"invalid physical parameters {self}")


@dataclass(frozen=True)
class SchemeConfig:
    dt: float
    T: float
    darcy_space: str = "msfem"        # "msfem" | "p1"
    stability_monitor: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.T < self.dt:
            raise ValueError("need 0 < dt <= T")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-10 * max(n, 1.0):
            raise ValueError(f"T/dt = {n} is not an integer step count")
        if self.darcy_space not in ("msfem", "p1"):
            raise ValueError(f"unknown darcy space {self.darcy_space!r}")

    @property
    def num_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class StateVector:
    u: np.ndarray            # MINI velocity coefficients
    p: np.ndarray | None     # P1 pressure (None before the first step)
    phi: np.ndarray          # coarse porous head coefficients
    t: float

    def check_finite(self):
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.phi))):
            raise NumericalFailure(
                f"non-finite state at t={self.t}; try a smaller time step")


@dataclass
class EnergyLog:
    t: list[float] = field(default_factory=list)
    u_l2_sq: list[float] = field(default_factory=list)
    phi_l2_sq: list[float] = field(default_factory=list)
    du_l2_sq: list[float] = field(default_factory=list)
    dphi_l2_sq: list[float] = field(default_factory=list)
    u_h1_sq: list[float] = field(default_factory=list)
    phi_h1_sq: list[float] = field(default_factory=list)
    div_residual: list[float] = field(default_factory=list)

    def composite(self) -> np.ndarray:
        return np.asarray(self.u_l2_sq) + np.asarray(self.phi_l2_sq)


class P1DarcySpace:
    """Plain coarse P1 discretization of the porous region (FEM-ImEx variant)."""

    def __init__(self, mesh: Mesh, kfield):
        self.mesh = mesh
        self.kfield = kfield
        self.A1 = fem.p1_stiffness(mesh, kfield, fem.tri_rule(2))
        self.A2 = fem.p1_mass(mesh)
        self.H1 = fem.p1_stiffness(mesh, 1.0, fem.tri_rule(1))

    @property
    def ndof(self) -> int:
        return self.mesh.num_vertices

    def load(self, f_p, t: float) -> np.ndarray:
        return fem.p1_load(self.mesh, f_p, t, fem.tri_rule(2))

    def evaluate(self, coeffs, points):
        from .mesh import locate_points
        tri, lam = locate_points(self.mesh, points)
        return fem.p1_evaluate(self.mesh, coeffs, tri, lam)


class MsDarcySpace:
    """Multiscale discretization backed by a precomputed MsSpace."""

    def __init__(self, space: MsSpace, f_p_cache: bool = True):
        self.space = space
        self.mesh = space.mesh
        self.A1 = space.A1_global
        self.A2 = space.A2_global
        self.H1 = space.H1_global

    @property
    def ndof(self) -> int:
        return self.mesh.num_vertices

    def load(self, f_p, t: float) -> np.ndarray:
        return ms_load(self.space, f_p, t)

    def evaluate(self, coeffs, points):
        return ms_evaluate(self.space, coeffs, points)


class ImExSolver:
    """Algorithm state shared across time steps (meshes, matrices, factors)."""

    def __init__(self, fluid_mesh: Mesh, darcy, problem, params: PhysParams,
                 config: SchemeConfig):
        self.fluid = fluid_mesh
        self.darcy = darcy
        self.problem = problem
        self.params = params
        self.config = config
        self.layout = fem.velocity_layout(fluid_mesh)
        self.coupling = build_interface_coupling(fluid_mesh, darcy.mesh)

        dt = config.dt
        pp = params
        A_visc, B_div, M_vel = fem.stokes_blocks(fluid_mesh, pp.nu)
        A_bjs = fem.bjs_matrix(fluid_mesh, pp.nu, pp.alpha, pp.g, problem.kfield)
        self.M_vel = M_vel
        self.B_div = B_div
        self.G_vel = fem.velocity_grad_matrix(fluid_mesh)
        nvel = self.layout.ndof
        npres = fluid_mesh.num_vertices
        K = (M_vel / dt + A_visc + A_bjs).tocsr()

        # Static condensation of the bubble dofs: bubbles couple only within
        # their own element, so the bubble block is invertible 2x2-blockwise.
        # The condensed vertex-velocity/pressure system is much smaller and
        # has no zero diagonal block, which keeps the LU fill-in tame.
        nv, nt = fluid_mesh.num_vertices, fluid_mesh.num_triangles
        per = self.layout.per_comp
        idx_v = np.concatenate([np.arange(nv), per + np.arange(nv)])
        idx_b = np.concatenate([nv + np.arange(nt), per + nv + np.arange(nt)])
        self._idx_v, self._idx_b = idx_v, idx_b
        Kvv = K[idx_v][:, idx_v]
        Kvb = K[idx_v][:, idx_b]
        Kbv = K[idx_b][:, idx_v]
        Kbb = K[idx_b][:, idx_b]
        a = Kbb.diagonal()[:nt]
        d = Kbb.diagonal()[nt:]
        b = Kbb[:nt, nt:].diagonal()
        c = Kbb[nt:, :nt].diagonal()
        det = a * d - b * c
        Ki = sp.bmat([[sp.diags(d / det), sp.diags(-b / det)],
                      [sp.diags(-c / det), sp.diags(a / det)]], format="csr")
        Bv = B_div[:, idx_v]
        Bb = B_div[:, idx_b]
        self._Ki, self._Kbv, self._BbT = Ki, Kbv.tocsr(), Bb.T.tocsr()
        self._KvbKi = (Kvb @ Ki).tocsr()
        self._BbKi = (Bb @ Ki).tocsr()
        saddle = sp.bmat(
            [[Kvv - self._KvbKi @ Kbv, Bv.T - self._KvbKi @ Bb.T],
             [Bv - self._BbKi @ Kbv, -self._BbKi @ Bb.T]], format="csr")

        gamma_f = fluid_mesh.boundary_vertices(Tag.GAMMA_F)
        self.dirichlet_vertices = gamma_f
        vel_nodes = np.concatenate([gamma_f, nv + gamma_f])
        self.stokes_bc = fem.DirichletSystem(saddle, vel_nodes)
        self.stokes_factor = factor_general(self.stokes_bc.matrix)
        self.nvel = nvel
        self.npres = npres

        D = (darcy.A2 / dt + darcy.A1 / pp.S0).tocsr()
        gamma_p = darcy.mesh.boundary_vertices(Tag.GAMMA_P)
        self.darcy_bc = fem.DirichletSystem(D, gamma_p)
        # beyond ~300k unknowns the LU fill no longer fits in desk-scale
        # memory; switch to multigrid CG at a tolerance far below any
        # discretization error
        if self.darcy_bc.matrix.shape[0] > 300_000:
            self.darcy_factor = AmgHandle(self.darcy_bc.matrix)
        else:
            self.darcy_factor = factor_spd(self.darcy_bc.matrix)

    def _dirichlet_values(self, t: float) -> np.ndarray:
        v = self.fluid.vertices[self.dirichlet_vertices]
        uv = np.asarray(self.problem.u_dirichlet(v[:, 0], v[:, 1], t))
        return np.concatenate([uv[:, 0], uv[:, 1]])

    def init_state(self) -> StateVector:
        u = np.zeros(self.layout.ndof)
        v = self.fluid.vertices
        u0 = np.asarray(self.problem.u0(v[:, 0], v[:, 1]))
        u[self.layout.vertex_dofs(0)] = u0[:, 0]
        u[self.layout.vertex_dofs(1)] = u0[:, 1]
        vp = self.darcy.mesh.vertices
        phi = np.asarray(self.problem.phi0(vp[:, 0], vp[:, 1]), dtype=float)
        if phi.ndim == 0:
            phi = np.full(self.darcy.ndof, float(phi))
        return StateVector(u=u, p=None, phi=phi, t=0.0)

    def stokes_step(self, state: StateVector, t_next: float):
        pp = self.params
        rhs_mom = self.M_vel @ state.u / self.config.dt
        rhs_mom += fem.mini_load(self.fluid, self.problem.f_f, t_next)
        phi_trace = state.phi  # P1 trace on Γ: basis traces are linear
        rhs_mom -= pp.g * fem.stokes_interface_vector(
            self.coupling, self.layout, phi_trace)
        f_v = rhs_mom[self._idx_v]
        f_b = rhs_mom[self._idx_b]
        rhs = np.concatenate([f_v - self._KvbKi @ f_b, -self._BbKi @ f_b])
        rhs = self.stokes_bc.rhs(rhs, self._dirichlet_values(t_next))
        sol = self.stokes_factor.solve(rhs)
        nvv = len(self._idx_v)
        u_v, p = sol[:nvv], sol[nvv:]
        u_b = self._Ki @ (f_b - self._Kbv @ u_v - self._BbT @ p)
        u = np.empty(self.nvel)
        u[self._idx_v] = u_v
        u[self._idx_b] = u_b
        return u, p

    def darcy_step(self, state: StateVector, t_next: float) -> np.ndarray:
        pp = self.params
        rhs = self.darcy.A2 @ state.phi / self.config.dt
        rhs += self.darcy.load(self.problem.f_p, t_next) / pp.S0
        u_vertex = self.layout.vertex_values(state.u)
        rhs += fem.darcy_interface_vector(
            self.coupling, self.darcy.ndof, u_vertex) / pp.S0
        rhs = self.darcy_bc.rhs(rhs, np.zeros(len(self.darcy_bc.nodes)))
        return self.darcy_factor.solve(rhs)

    def step(self, state: StateVector) -> StateVector:
        t_next = state.t + self.config.dt
        u_next, p_next = self.stokes_step(state, t_next)
        phi_next = self.darcy_step(state, t_next)
        out = StateVector(u=u_next, p=p_next, phi=phi_next, t=t_next)
        out.check_finite()
        return out

    def div_residual(self, u: np.ndarray) -> float:
        un = float(np.linalg.norm(u))
        if un == 0.0:
            return 0.0
        return float(np.linalg.norm(self.B_div @ u)) / un

    def run(self, observer=None) -> tuple[StateVector, EnergyLog]:
        state = self.init_state()
        log = EnergyLog()
        monitor = self.config.stability_monitor
        if monitor:
            self._log_step(log, state, state, first=True)
        e0 = None
        for n in range(self.config.num_steps):
            prev = state
            state = self.step(prev)
            if monitor:
                self._log_step(log, state, prev)
                e = log.u_l2_sq[-1] + log.phi_l2_sq[-1]
                e0 = e if e0 is None else e0
                if e > 1e8 * max(e0, 1.0):
                    raise NumericalFailure(
                        f"energy blow-up at t={state.t}: {e:.3e}; "
                        "reduce the time step")
            if observer is not None:
                observer(n + 1, state.t, state)
        return state, log

    def _log_step(self, log: EnergyLog, state: StateVector,
                  prev: StateVector, first: bool = False):
        du = state.u - prev.u
        dphi = state.phi - prev.phi
        log.t.append(state.t)
        log.u_l2_sq.append(float(state.u @ (self.M_vel @ state.u)))
        log.phi_l2_sq.append(float(state.phi @ (self.darcy.A2 @ state.phi)))
        log.du_l2_sq.append(0.0 if first else float(du @ (self.M_vel @ du)))
        log.dphi_l2_sq.append(0.0 if first else float(dphi @ (self.darcy.A2 @ dphi)))
        log.u_h1_sq.append(float(state.u @ (self.G_vel @ state.u)))
        log.phi_h1_sq.append(float(state.phi @ (self.darcy.H1 @ state.phi)))
        log.div_residual.append(self.div_residual(state.u))


def check_stability(log: EnergyLog, settle_steps: int = 5) -> dict:
    """Boundedness report for a monitored run.

    Fits the smallest c with E_n <= E_max(0..settle) * exp(c t_n) and flags
    whether the composite energy is non-increasing after the settling window.
    """
    E = log.composite()
    t = np.asarray(log.t)
    if len(E) == 0:
        raise ValueError("run was not monitored")
    report = {
        "finite": bool(np.all(np.isfinite(E))),
        "max_energy": float(E.max()),
        "final_energy": float(E[-1]),
    }
    settle = min(settle_steps, len(E) - 1)
    base = max(E[:settle + 1].max(), 1e-300)
    later = E[settle:]
    tl = t[settle:] - t[settle]
    with np.errstate(divide="ignore"):
        ratios = np.log(np.maximum(later, 1e-300) / base)
    pos = tl > 0
    report["fitted_growth_rate"] = float(np.max(ratios[pos] / tl[pos])) if np.any(pos) else 0.0
    diffs = np.diff(later)
    tol = 1e-12 * max(base, 1.0)
    report["nonincreasing_after_settle"] = bool(np.all(diffs <= tol))
    report["monotone_violation"] = float(max(diffs.max(), 0.0)) if len(diffs) else 0.0
    return report
