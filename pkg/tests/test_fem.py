"""Element assembly: quadrature, P1 and MINI forms, interface terms, Dirichlet."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from msdflow import fem
from msdflow.linalg import factor_spd, symmetry_defect
from msdflow.mesh import (Mesh, Rect, Region, Tag, build_interface_coupling,
                          build_rect_mesh)

P_TAGS = {"bottom": Tag.GAMMA_P, "left": Tag.GAMMA_P,
          "right": Tag.GAMMA_P, "top": Tag.INTERFACE}
F_TAGS = {"bottom": Tag.INTERFACE, "left": Tag.GAMMA_F,
          "right": Tag.GAMMA_F, "top": Tag.GAMMA_F}


def porous(nx, ny=None, rect=Rect(0, 1, 0, 1)):
    return build_rect_mesh(rect, nx, ny or nx, Region.POROUS, P_TAGS)


def fluid(nx, ny=None, rect=Rect(0, 1, 1, 2)):
    return build_rect_mesh(rect, nx, ny or nx, Region.FLUID, F_TAGS)


def unit_right_triangle():
    m = Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
             triangles=np.array([[0, 1, 2]]),
             boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
             boundary_tags=np.array([int(Tag.GAMMA_P)] * 3),
             region=Region.POROUS)
    return m


class TestQuadrature:
    @pytest.mark.parametrize("degree", [1, 2, 5])
    def test_monomial_exactness(self, degree):
        rule = fem.tri_rule(degree)
        # reference-triangle integral of x^a y^b in barycentric form
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                exact = (math.factorial(a) * math.factorial(b)
                         / math.factorial(a + b + 2))
                x = rule.points[:, 1]
                y = rule.points[:, 2]
                got = 0.5 * np.sum(rule.weights * x ** a * y ** b)
                assert abs(got - exact) < 1e-14, (degree, a, b)

    def test_weights_positive(self):
        for d in (1, 2, 5):
            assert np.all(fem.tri_rule(d).weights > 0)

    def test_edge_rule_exactness(self):
        s, w = fem.edge_rule(2)
        for k in range(4):  # 2-point Gauss is exact through cubics
            assert abs(np.sum(w * s ** k) - 1 / (k + 1)) < 1e-14


class TestP1Stiffness:
    def test_unit_triangle_hand_values(self):
        A = fem.p1_stiffness(unit_right_triangle(), 1.0).toarray()
        expect = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0],
                           [-0.5, 0.0, 0.5]])
        np.testing.assert_allclose(A, expect, atol=1e-13)

    def test_constants_in_kernel(self):
        A = fem.p1_stiffness(porous(2), 1.0)
        np.testing.assert_allclose(A @ np.ones(A.shape[0]), 0.0, atol=1e-13)

    def test_oscillatory_coeff_matches_dense_oracle(self):
        m = porous(8)
        eps = 0.5

        def k(x, y):
            return 1.0 / ((2 + 1.5 * np.sin(2 * np.pi * x / eps))
                          * (2 + 1.5 * np.cos(2 * np.pi * y / eps)))

        rule = fem.tri_rule(2)
        A = fem.p1_stiffness(m, k, rule).toarray()
        # independent dense element-by-element assembly
        dense = np.zeros_like(A)
        for t in range(m.num_triangles):
            verts = m.vertices[m.triangles[t]]
            T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
            area = 0.5 * abs(np.linalg.det(T))
            gref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            G = gref @ np.linalg.inv(T)
            pts = rule.points @ verts
            kq = k(pts[:, 0], pts[:, 1])
            loc = area * np.sum(rule.weights * kq) * (G @ G.T)
            idx = m.triangles[t]
            dense[np.ix_(idx, idx)] += loc
        np.testing.assert_allclose(A, dense, atol=1e-13)
        assert symmetry_defect(sp.csr_matrix(A)) < 1e-14


class TestP1Mass:
    def test_single_triangle_local_values(self):
        M = fem.p1_mass(unit_right_triangle()).toarray()
        A = 0.5
        np.testing.assert_allclose(
            M, (A / 12) * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]),
            atol=1e-14)

    def test_total_mass_is_area(self):
        M = fem.p1_mass(porous(4))
        ones = np.ones(M.shape[0])
        assert abs(ones @ (M @ ones) - 1.0) < 1e-12

    def test_spd(self):
        factor_spd(fem.p1_mass(porous(3)))


class TestStokesBlocks:
    def test_rigid_translation_annihilated(self):
        m = fluid(3)
        A, B, M = fem.stokes_blocks(m, 1.0)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = 1.0
        np.testing.assert_allclose(A @ u, 0.0, atol=1e-12)
        np.testing.assert_allclose(B @ u, 0.0, atol=1e-12)

    def test_divergence_free_linear(self):
        m = fluid(4)
        nu = 2.0
        A, B, M = fem.stokes_blocks(m, nu)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = m.vertices[:, 0]
        u[layout.vertex_dofs(1)] = -m.vertices[:, 1]
        np.testing.assert_allclose(B @ u, 0.0, atol=1e-12)
        # D(u) = diag(1, -1), 2 nu |D|^2 integrated over the unit-area strip
        assert abs(u @ (A @ u) - 4.0 * nu) < 1e-12

    def test_bubble_viscous_entry_matches_dense_oracle(self):
        m = fluid(1)
        nu = 1.0
        A, _, _ = fem.stokes_blocks(m, nu)
        layout = fem.velocity_layout(m)
        t = 0
        rule = fem.tri_rule(5)
        verts = m.vertices[m.triangles[t]]
        T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
        area = 0.5 * abs(np.linalg.det(T))
        G = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]) @ np.linalg.inv(T)
        lam = rule.points
        cof = 27.0 * np.column_stack([lam[:, 1] * lam[:, 2],
                                      lam[:, 0] * lam[:, 2],
                                      lam[:, 0] * lam[:, 1]])
        gb = cof @ G  # (nq, 2) bubble gradient at quad points
        # x-x entry of the viscous form: nu * int (g.g + gx*gx)
        val = nu * area * np.sum(rule.weights
                                 * ((gb ** 2).sum(axis=1) + gb[:, 0] ** 2))
        d = layout.bubble_dofs(0)[t]
        assert abs(A[d, d] - val) < 1e-13

    def test_velocity_mass_total(self):
        m = fluid(2)
        _, _, M = fem.stokes_blocks(m, 1.0)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = 1.0
        # constant-1 x-velocity: mass energy equals the domain area
        assert abs(u @ (M @ u) - 1.0) < 1e-12

    def test_symmetry(self):
        A, B, M = fem.stokes_blocks(fluid(3), 1.0)
        assert symmetry_defect(A) < 1e-12
        assert symmetry_defect(M) < 1e-12


class TestMiniInterpolation:
    def test_evaluate_linear_field(self):
        m = fluid(3)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = 2 * m.vertices[:, 0] - m.vertices[:, 1]
        u[layout.vertex_dofs(1)] = m.vertices[:, 1]
        from msdflow.mesh import locate_points
        pts = np.array([[0.3, 1.4], [0.71, 1.93]])
        tri, lam = locate_points(m, pts)
        vals, grads = fem.mini_evaluate(m, u, tri, lam)
        np.testing.assert_allclose(
            vals, np.column_stack([2 * pts[:, 0] - pts[:, 1], pts[:, 1]]),
            atol=1e-12)
        np.testing.assert_allclose(grads[:, 0, :], [[2.0, -1.0]] * 2, atol=1e-12)
        np.testing.assert_allclose(grads[:, 1, :], [[0.0, 1.0]] * 2, atol=1e-12)

    def test_element_evaluation_matches_pointwise(self):
        m = fluid(2)
        layout = fem.velocity_layout(m)
        rng = np.random.default_rng(0)
        u = rng.standard_normal(layout.ndof)
        rule = fem.tri_rule(2)
        vals, grads = fem.mini_evaluate_on_elements(m, u, rule)
        pts, _ = fem.quad_points(m, rule)
        tri = np.repeat(np.arange(m.num_triangles), len(rule.points))
        lam = np.tile(rule.points, (m.num_triangles, 1))
        v2, g2 = fem.mini_evaluate(m, u, tri, lam)
        np.testing.assert_allclose(vals.reshape(-1, 2), v2, atol=1e-13)
        np.testing.assert_allclose(grads.reshape(-1, 2, 2), g2, atol=1e-13)


class TestLoads:
    def test_zero_forcing(self):
        np.testing.assert_array_equal(
            fem.p1_load(porous(2), lambda x, y, t: np.zeros_like(x), 0.0),
            np.zeros(9))

    def test_constant_forcing_sums_to_area(self):
        b = fem.p1_load(porous(3), lambda x, y, t: np.ones_like(x), 0.0)
        assert abs(b.sum() - 1.0) < 1e-13

    def test_fluid_load_against_dense_oracle(self):
        m = fluid(2)

        def f(x, y, t):
            f1 = (1 - 2 * x) * (y - 1) * (math.cos(t) - math.sin(t))
            f2 = np.zeros_like(x)
            return np.stack([f1, f2], axis=-1)

        b = fem.mini_load(m, f, 0.0)
        layout = fem.velocity_layout(m)
        rule = fem.tri_rule(5)
        dense = np.zeros(layout.ndof)
        for t in range(m.num_triangles):
            verts = m.vertices[m.triangles[t]]
            T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
            area = 0.5 * abs(np.linalg.det(T))
            pts = rule.points @ verts
            fv = f(pts[:, 0], pts[:, 1], 0.0)
            lam = rule.points
            bub = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
            for i in range(3):
                dense[m.triangles[t, i]] += area * np.sum(
                    rule.weights * fv[:, 0] * lam[:, i])
            dense[layout.bubble_dofs(0)[t]] += area * np.sum(
                rule.weights * fv[:, 0] * bub)
        np.testing.assert_allclose(b, dense, atol=1e-13)


class TestBjsMatrix:
    def test_alpha_zero_is_empty(self):
        m = fluid(3)
        A = fem.bjs_matrix(m, 1.0, 0.0, 1.0, 1.0)
        assert A.nnz == 0

    def test_constant_k_closed_form_energy(self):
        # coefficient alpha*sqrt(nu*g/K) = 1; constant tangential velocity 1
        m = fluid(4)
        A = fem.bjs_matrix(m, 1.0, 1.0, 1.0, 1.0)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = 1.0  # tangent is +-x on the flat interface
        assert abs(u @ (A @ u) - 1.0) < 1e-12

    def test_normal_velocity_unpenalized(self):
        m = fluid(4)
        A = fem.bjs_matrix(m, 1.0, 1.0, 1.0, 1.0)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(1)] = 1.0
        assert abs(u @ (A @ u)) < 1e-13

    def test_varying_k_against_edge_oracle(self):
        m = fluid(2)
        nu, alpha, g = 2.0, 0.7, 1.5

        def k(x, y):
            return 1.0 / (2.0 + np.sin(2 * np.pi * x))

        A = fem.bjs_matrix(m, nu, alpha, g, k)
        layout = fem.velocity_layout(m)
        u = np.zeros(layout.ndof)
        u[layout.vertex_dofs(0)] = m.vertices[:, 0]  # tangential u = x on Γ
        s, w = fem.edge_rule(2)
        total = 0.0
        for e, tag in zip(m.boundary_edges, m.boundary_tags):
            if tag != int(Tag.INTERFACE):
                continue
            a, b = m.vertices[e[0]], m.vertices[e[1]]
            L = np.linalg.norm(b - a)
            x = a[0] + s * (b[0] - a[0])
            ut = a[0] + s * (b[0] - a[0])
            total += L * np.sum(w * alpha * np.sqrt(nu * g / k(x, a[1]))
                                * ut ** 2)
        assert abs(u @ (A @ u) - total) < 1e-12

    def test_positive_semidefinite_symmetric(self):
        A = fem.bjs_matrix(fluid(3), 1.0, 1.0, 1.0, 1.0)
        assert symmetry_defect(A) < 1e-13
        evals = np.linalg.eigvalsh(A.toarray())
        assert evals.min() > -1e-12


class TestInterfaceVectors:
    def test_zero_trace_gives_zero(self):
        c = build_interface_coupling(fluid(4), porous(4))
        layout = fem.velocity_layout(fluid(4))
        v = fem.stokes_interface_vector(c, layout, np.zeros(25))
        np.testing.assert_array_equal(v, 0.0)

    def test_constant_head_total_force(self):
        f, p = fluid(4), porous(4)
        c = build_interface_coupling(f, p)
        layout = fem.velocity_layout(f)
        v = fem.stokes_interface_vector(c, layout, np.ones(p.num_vertices))
        # n_f = (0,-1): total y-component force is -|Γ| = -1
        assert abs(v[layout.vertex_dofs(1)].sum() + 1.0) < 1e-12
        np.testing.assert_allclose(v[layout.vertex_dofs(0)], 0.0, atol=1e-14)

    def test_edge_mass_distribution(self):
        f, p = fluid(4), porous(4)
        c = build_interface_coupling(f, p)
        layout = fem.velocity_layout(f)
        v = fem.stokes_interface_vector(c, layout, np.ones(p.num_vertices))
        vy = v[layout.vertex_dofs(1)]
        iface = f.boundary_vertices(Tag.INTERFACE)
        inner = [n for n in iface if 0.0 < f.vertices[n, 0] < 1.0]
        for n in inner:
            assert abs(vy[n] + 0.25) < 1e-12  # two half-edges of length 1/4

    def test_constant_flux_darcy_sum(self):
        f, p = fluid(4), porous(4)
        c = build_interface_coupling(f, p)
        u_vertex = np.zeros((f.num_vertices, 2))
        u_vertex[:, 1] = -3.0  # u.n_f = 3 with n_f = (0,-1)
        v = fem.darcy_interface_vector(c, p.num_vertices, u_vertex)
        assert abs(v.sum() - 3.0) < 1e-12

    def test_nested_coupling_matches_matched_for_shared_trace(self):
        # same linear head field through equal and nested porous refinements
        f = fluid(4)
        c_eq = build_interface_coupling(f, porous(4))
        c_ne = build_interface_coupling(f, porous(8))
        layout = fem.velocity_layout(f)
        phi4 = porous(4).vertices.sum(axis=1)
        phi8 = porous(8).vertices.sum(axis=1)
        v_eq = fem.stokes_interface_vector(c_eq, layout, phi4)
        v_ne = fem.stokes_interface_vector(c_ne, layout, phi8)
        np.testing.assert_allclose(v_eq, v_ne, atol=1e-12)


class TestDirichlet:
    def test_all_nodes_identity(self):
        A = fem.p1_stiffness(porous(2), 1.0) + fem.p1_mass(porous(2))
        n = A.shape[0]
        Abc, bbc = fem.apply_dirichlet(A, np.ones(n), np.arange(n), np.zeros(n))
        np.testing.assert_allclose(Abc.toarray(), np.eye(n), atol=1e-14)
        np.testing.assert_array_equal(bbc, 0.0)

    def test_harmonic_is_linear(self):
        m = porous(4)
        A = fem.p1_stiffness(m, 1.0)
        left = np.nonzero(m.vertices[:, 0] < 1e-12)[0]
        right = np.nonzero(m.vertices[:, 0] > 1 - 1e-12)[0]
        nodes = np.concatenate([left, right])
        vals = np.concatenate([np.zeros(len(left)), np.ones(len(right))])
        Abc, bbc = fem.apply_dirichlet(A, np.zeros(A.shape[0]), nodes, vals)
        x = factor_spd(Abc).solve(bbc)
        np.testing.assert_allclose(x, m.vertices[:, 0], atol=1e-10)

    def test_idempotent(self):
        m = porous(3)
        A = fem.p1_stiffness(m, 1.0) + fem.p1_mass(m)
        nodes = m.boundary_vertices(Tag.GAMMA_P)
        vals = np.arange(len(nodes), dtype=float)
        A1, b1 = fem.apply_dirichlet(A, np.ones(A.shape[0]), nodes, vals)
        A2, b2 = fem.apply_dirichlet(A1, b1, nodes, vals)
        np.testing.assert_allclose(A1.toarray(), A2.toarray(), atol=1e-14)
        np.testing.assert_allclose(b1, b2, atol=1e-14)

    def test_conflicting_duplicates_rejected(self):
        A = fem.p1_mass(porous(2))
        with pytest.raises(ValueError):
            fem.apply_dirichlet(A, np.zeros(9), [0, 0], [1.0, 2.0])

    def test_preserves_symmetry(self):
        m = porous(3)
        A = fem.p1_stiffness(m, 1.0) + fem.p1_mass(m)
        ds = fem.DirichletSystem(A, m.boundary_vertices(Tag.GAMMA_P))
        assert symmetry_defect(ds.matrix) < 1e-14
