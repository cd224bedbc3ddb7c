import math
import random

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import linprog

from adnopt.ipm import (
    ConeDims,
    SolverNumericalError,
    cone_unit,
    in_cone,
    jordan_div,
    jordan_product,
    max_step,
    solve_conic,
)


def empty_eq(n):
    return sp.csc_matrix((0, n)), np.zeros(0)


class TestConeAlgebra:
    def test_cone_unit_is_interior(self):
        dims = ConeDims(3, (4, 2))
        assert in_cone(cone_unit(dims), dims)

    def test_jordan_product_and_division_invert(self):
        rng = np.random.default_rng(7)
        dims = ConeDims(2, (3,))
        u = cone_unit(dims) + 0.1 * rng.standard_normal(dims.total)
        d = rng.standard_normal(dims.total)
        assert in_cone(u, dims)
        w = jordan_product(u, jordan_div(u, d, dims), dims)
        assert np.allclose(w, d, atol=1e-10)

    def test_max_step_blocks_at_the_boundary(self):
        dims = ConeDims(1, (3,))
        u = np.array([2.0, 1.0, 0.5, 0.0])
        du = np.array([-1.0, -1.0, 0.0, 0.0])
        alpha = max_step(u, du, dims)
        assert alpha <= 2.0
        assert in_cone(u + 0.999 * alpha * du, dims, margin=-1e-9)

    def test_division_by_a_degenerate_point_raises(self):
        dims = ConeDims(0, (3,))
        lam = np.array([1.0, 1.0, 0.0])  # det = 1 - 1 = 0
        with pytest.raises(SolverNumericalError):
            jordan_div(lam, np.ones(3), dims)


class TestLinearPrograms:
    def test_two_variable_canary(self):
        # min -x - 2y st x + y <= 4, x <= 3, x,y >= 0 -> (0, 4), obj -8
        c = np.array([-1.0, -2.0])
        G = sp.csc_matrix(np.array([
            [1.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, -1.0],
        ]))
        h = np.array([4.0, 3.0, 0.0, 0.0])
        A, b = empty_eq(2)
        res = solve_conic(c, A, b, G, h, ConeDims(4))
        assert res.status == "optimal"
        assert res.obj == pytest.approx(-8.0, abs=1e-7)
        assert res.x[1] == pytest.approx(4.0, abs=1e-7)

    def test_equality_constrained_projection(self):
        # min x1 st x0 + x1 = 1, x >= 0 -> obj 0
        c = np.array([0.0, 1.0])
        A = sp.csc_matrix(np.array([[1.0, 1.0]]))
        b = np.array([1.0])
        G = sp.csc_matrix(-np.eye(2))
        h = np.zeros(2)
        res = solve_conic(c, A, b, G, h, ConeDims(2))
        assert res.status == "optimal"
        assert res.obj == pytest.approx(0.0, abs=1e-8)

    def test_seeded_random_lps_match_scipy(self):
        rng = random.Random(20240817)
        for trial in range(20):
            n = rng.randint(2, 6)
            m = rng.randint(n, 2 * n)
            np_rng = np.random.default_rng(trial)
            Gd = np_rng.uniform(-1, 1, size=(m, n))
            x_feas = np_rng.uniform(0.1, 1.0, size=n)
            h = Gd @ x_feas + np_rng.uniform(0.1, 1.0, size=m)
            c = np_rng.uniform(-1, 1, size=n)
            # box the variables so the problem is always bounded
            G = sp.csc_matrix(np.vstack([Gd, -np.eye(n), np.eye(n)]))
            hh = np.concatenate([h, np.zeros(n), 5.0 * np.ones(n)])
            A, b = empty_eq(n)
            mine = solve_conic(c, A, b, G, hh, ConeDims(m + 2 * n))
            ref = linprog(c, A_ub=G.toarray(), b_ub=hh, bounds=[(None, None)] * n,
                          method="highs")
            assert mine.status == "optimal", f"trial {trial}"
            assert ref.status == 0
            assert mine.obj == pytest.approx(ref.fun, abs=1e-6), f"trial {trial}"

    def test_infeasible_lp_is_certified(self):
        # x >= 1 and x <= 0 cannot hold together
        c = np.array([1.0])
        G = sp.csc_matrix(np.array([[-1.0], [1.0]]))
        h = np.array([-1.0, 0.0])
        A, b = empty_eq(1)
        res = solve_conic(c, A, b, G, h, ConeDims(2))
        assert res.status == "infeasible"
        assert res.certificate_residual is not None
        assert res.certificate_residual < 1e-6

    def test_unbounded_lp_is_certified(self):
        c = np.array([-1.0])
        G = sp.csc_matrix(np.array([[-1.0]]))
        h = np.array([0.0])
        A, b = empty_eq(1)
        res = solve_conic(c, A, b, G, h, ConeDims(1))
        assert res.status == "unbounded"

    def test_iteration_limit_reports_the_best_iterate(self):
        c = np.array([-1.0, -2.0])
        G = sp.csc_matrix(np.array([
            [1.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, -1.0],
        ]))
        h = np.array([4.0, 3.0, 0.0, 0.0])
        A, b = empty_eq(2)
        res = solve_conic(c, A, b, G, h, ConeDims(4), max_iter=2)
        assert res.status in ("iteration_limit", "optimal")
        assert res.x.shape == (2,)


class TestSecondOrderCones:
    def test_norm_bound_canary(self):
        # min t st norm(3, 4) <= t -> 5; cone row is (t, 3, 4)
        c = np.array([1.0])
        G = sp.csc_matrix(np.array([[-1.0], [0.0], [0.0]]))
        h = np.array([0.0, 3.0, 4.0])
        A, b = empty_eq(1)
        res = solve_conic(c, A, b, G, h, ConeDims(0, (3,)))
        assert res.status == "optimal"
        assert res.obj == pytest.approx(5.0, abs=1e-7)

    def test_projection_onto_a_halfspace_with_cone(self):
        # min t st norm(x - (2, 1)) <= t, x0 + x1 = 1
        # distance from (2,1) to the line x0+x1=1 is 2/sqrt(2) = sqrt(2)
        c = np.array([1.0, 0.0, 0.0])
        A = sp.csc_matrix(np.array([[0.0, 1.0, 1.0]]))
        b = np.array([1.0])
        G = sp.csc_matrix(np.array([
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, -1.0],
        ]))
        h = np.array([0.0, -2.0, -1.0])
        res = solve_conic(c, A, b, G, h, ConeDims(0, (3,)))
        assert res.status == "optimal"
        assert res.obj == pytest.approx(math.sqrt(2.0), abs=1e-7)

    def test_mixed_orthant_and_cone_blocks(self):
        # min x2 st x2 >= norm(x0, x1), x0 >= 1, x1 >= 2 -> sqrt(5)
        c = np.array([0.0, 0.0, 1.0])
        G = sp.csc_matrix(np.array([
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, -1.0],
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
        ]))
        h = np.array([-1.0, -2.0, 0.0, 0.0, 0.0])
        dims = ConeDims(2, (3,))
        A, b = empty_eq(3)
        res = solve_conic(c, A, b, G, h, dims)
        assert res.status == "optimal"
        assert res.obj == pytest.approx(math.sqrt(5.0), abs=1e-7)
        s_cone = res.s[2:]
        assert s_cone[0] == pytest.approx(np.linalg.norm(s_cone[1:]), abs=1e-6)

    def test_infeasible_cone_problem(self):
        # norm(x) <= t with t <= -1 is empty
        c = np.array([0.0, 0.0])
        G = sp.csc_matrix(np.array([
            [1.0, 0.0],
            [-1.0, 0.0],
            [0.0, -1.0],
        ]))
        h = np.array([-1.0, 0.0, 0.0])
        dims = ConeDims(1, (2,))
        A, b = empty_eq(2)
        res = solve_conic(c, A, b, G, h, dims)
        assert res.status == "infeasible"

    def test_residuals_reported_at_the_solution(self):
        c = np.array([1.0])
        G = sp.csc_matrix(np.array([[-1.0], [0.0], [0.0]]))
        h = np.array([0.0, 3.0, 4.0])
        A, b = empty_eq(1)
        res = solve_conic(c, A, b, G, h, ConeDims(0, (3,)))
        assert res.pres < 1e-8
        assert res.dres < 1e-8
        assert res.gap < 1e-6
