"""Primal-dual interior-point method for linear and second-order cone programs.

Solves the standard conic pair

    min c'x  s.t.  Ax = b,  Gx + s = h,  s in K
    max -b'y - h'z  s.t.  A'y + G'z + c = 0,  z in K

with K a product of a nonnegative orthant and second-order cones, via the
homogeneous self-dual embedding so that infeasibility and unboundedness come
out as certificates rather than failures.  Directions are Mehrotra
predictor-corrector steps under Nesterov-Todd scaling; each iteration factors
one sparse symmetric quasidefinite KKT matrix (static regularization plus
iterative refinement).  Everything is deterministic: same inputs, same
iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

REG = 1e-9  # static quasidefinite regularization
REFINE_STEPS = 2
STEP_FRACTION = 0.99
MIN_DENOM = 1e-14
INACC_FEAS = 1e-4  # acceptance thresholds when the scaling stalls at the end
INACC_GAP = 5e-5


class SolverNumericalError(RuntimeError):
    """KKT factorization broke down beyond what refinement can absorb."""


@dataclass(frozen=True)
class ConeDims:
    """Sizes of the cone product: ``l`` nonnegative rays, then SOC blocks."""

    l: int
    q: tuple[int, ...] = ()

    @property
    def total(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)

    def soc_slices(self) -> list[slice]:
        out = []
        offset = self.l
        for dim in self.q:
            out.append(slice(offset, offset + dim))
            offset += dim
        return out


@dataclass
class ConicResult:
    status: str  # optimal | infeasible | unbounded | iteration_limit
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    obj: float
    iterations: int
    pres: float
    dres: float
    gap: float
    relgap: float
    certificate_residual: float | None = None


# ---------------------------------------------------------------------------
# cone algebra
# ---------------------------------------------------------------------------


def cone_unit(dims: ConeDims) -> np.ndarray:
    e = np.zeros(dims.total)
    e[: dims.l] = 1.0
    for sl in dims.soc_slices():
        e[sl.start] = 1.0
    return e


def _soc_resid(u: np.ndarray) -> float:
    """u0 - ||u1||; positive inside the cone."""
    return u[0] - np.linalg.norm(u[1:])


def in_cone(u: np.ndarray, dims: ConeDims, margin: float = 0.0) -> bool:
    if dims.l and np.min(u[: dims.l]) <= margin:
        return False
    for sl in dims.soc_slices():
        if _soc_resid(u[sl]) <= margin:
            return False
    return True


def max_step(u: np.ndarray, du: np.ndarray, dims: ConeDims) -> float:
    """Largest alpha with u + alpha*du still in the (closed) cone."""
    alpha = math.inf
    if dims.l:
        neg = du[: dims.l] < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-u[: dims.l][neg] / du[: dims.l][neg])))
    for sl in dims.soc_slices():
        us, ds = u[sl], du[sl]
        a = ds[0] ** 2 - float(ds[1:] @ ds[1:])
        b = 2.0 * (us[0] * ds[0] - float(us[1:] @ ds[1:]))
        c = us[0] ** 2 - float(us[1:] @ us[1:])
        roots = []
        if abs(a) < 1e-16:
            if b < 0:
                roots.append(-c / b)
        else:
            disc = b * b - 4.0 * a * c
            if disc >= 0.0:
                sq = math.sqrt(disc)
                roots.extend(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
        positive = [r for r in roots if r > 0.0]
        if positive:
            alpha = min(alpha, min(positive))
        if ds[0] < 0.0:
            alpha = min(alpha, -us[0] / ds[0])
    return alpha


def jordan_product(u: np.ndarray, v: np.ndarray, dims: ConeDims) -> np.ndarray:
    out = np.empty(dims.total)
    out[: dims.l] = u[: dims.l] * v[: dims.l]
    for sl in dims.soc_slices():
        us, vs = u[sl], v[sl]
        out[sl.start] = float(us @ vs)
        out[sl.start + 1 : sl.stop] = us[0] * vs[1:] + vs[0] * us[1:]
    return out


def jordan_div(lam: np.ndarray, d: np.ndarray, dims: ConeDims) -> np.ndarray:
    """Solve lam o x = d blockwise (arrow-matrix inverse per SOC block)."""
    out = np.empty(dims.total)
    out[: dims.l] = d[: dims.l] / lam[: dims.l]
    for sl in dims.soc_slices():
        ls, ds = lam[sl], d[sl]
        det = ls[0] ** 2 - float(ls[1:] @ ls[1:])
        if abs(det) < MIN_DENOM or abs(ls[0]) < MIN_DENOM:
            raise SolverNumericalError("degenerate scaling point in Jordan division")
        x0 = (ls[0] * ds[0] - float(ls[1:] @ ds[1:])) / det
        out[sl.start] = x0
        out[sl.start + 1 : sl.stop] = (ds[1:] - x0 * ls[1:]) / ls[0]
    return out


class NTScaling:
    """Nesterov-Todd scaling for the current (s, z) pair.

    The scaling W is symmetric positive definite with W z = W^{-1} s =
    lambda.  For the orthant it is diagonal.  Per SOC block the scaling
    point is w = theta * wbar (wbar of unit hyperbolic norm), W^2 is the
    quadratic representation theta^2*(2*wbar*wbar' - J), and W itself is
    theta*(2*v*v' - J) with v the normalized Jordan square root wbar + e.
    """

    def __init__(self, s: np.ndarray, z: np.ndarray, dims: ConeDims) -> None:
        self.dims = dims
        self.lp_w = np.sqrt(s[: dims.l] / z[: dims.l]) if dims.l else np.empty(0)
        self.soc: list[tuple[float, np.ndarray, np.ndarray]] = []
        for sl in dims.soc_slices():
            ss, zs = s[sl], z[sl]
            rs = ss[0] ** 2 - float(ss[1:] @ ss[1:])
            rz = zs[0] ** 2 - float(zs[1:] @ zs[1:])
            if rs <= 0.0 or rz <= 0.0:
                raise SolverNumericalError("iterate left the cone interior")
            a, bb = math.sqrt(rs), math.sqrt(rz)
            sb, zb = ss / a, zs / bb
            gamma = math.sqrt((1.0 + float(sb @ zb)) / 2.0)
            wbar = sb.copy()
            wbar[0] += zb[0]
            wbar[1:] -= zb[1:]
            wbar /= 2.0 * gamma
            v = wbar.copy()
            v[0] += 1.0
            v /= math.sqrt(2.0 * (wbar[0] + 1.0))
            self.soc.append((math.sqrt(a / bb), wbar, v))
        self.lam = self.w_mult(z)

    @staticmethod
    def _householder(vec: np.ndarray, u: np.ndarray, scale: float) -> np.ndarray:
        """scale * (2*vec*vec' - J) @ u for a unit hyperbolic vec."""
        coef = 2.0 * float(vec @ u)
        ju = u.copy()
        ju[1:] = -ju[1:]
        return scale * (coef * vec - ju)

    def w_mult(self, u: np.ndarray) -> np.ndarray:
        dims = self.dims
        out = np.empty(dims.total)
        out[: dims.l] = self.lp_w * u[: dims.l]
        for (eta, _, v), sl in zip(self.soc, dims.soc_slices()):
            out[sl] = self._householder(v, u[sl], eta)
        return out

    def w_inv_mult(self, u: np.ndarray) -> np.ndarray:
        # W^{-1} = (1/eta) * J (2vv' - J) J = (1/eta) * (2 (Jv)(Jv)' - J)
        dims = self.dims
        out = np.empty(dims.total)
        out[: dims.l] = u[: dims.l] / self.lp_w
        for (eta, _, v), sl in zip(self.soc, dims.soc_slices()):
            jv = v.copy()
            jv[1:] = -jv[1:]
            out[sl] = self._householder(jv, u[sl], 1.0 / eta)
        return out

    def w_squared(self) -> sp.spmatrix:
        """Block-diagonal W^2 as a sparse matrix for the KKT assembly."""
        dims = self.dims
        blocks = []
        if dims.l:
            blocks.append(sp.diags(self.lp_w**2))
        for (eta, wbar, _), sl in zip(self.soc, dims.soc_slices()):
            dim = sl.stop - sl.start
            J = np.eye(dim)
            J[1:, 1:] *= -1.0
            blocks.append(sp.csc_matrix(eta**2 * (2.0 * np.outer(wbar, wbar) - J)))
        if not blocks:
            return sp.csc_matrix((0, 0))
        return sp.block_diag(blocks, format="csc")


# ---------------------------------------------------------------------------
# KKT machinery
# ---------------------------------------------------------------------------


class _KKT:
    """One factorization of the regularized quasidefinite 3x3 system."""

    def __init__(self, A: sp.spmatrix, G: sp.spmatrix, W2: sp.spmatrix) -> None:
        n = A.shape[1]
        p = A.shape[0]
        m = G.shape[0]
        self.n, self.p, self.m = n, p, m
        self.A, self.G, self.W2 = A, G, W2
        K = sp.bmat(
            [
                [sp.diags(np.full(n, REG)), A.T, G.T],
                [A, -sp.diags(np.full(p, REG)) if p else None, None],
                [G, None, -(W2 + sp.diags(np.full(m, REG))) if m else None],
            ],
            format="csc",
        )
        try:
            self.lu = splu(K)
        except RuntimeError as exc:  # singular factor
            raise SolverNumericalError(f"KKT factorization failed: {exc}") from exc

    def _apply_exact(self, u: np.ndarray) -> np.ndarray:
        """Unregularized K times u, for iterative refinement."""
        n, p, m = self.n, self.p, self.m
        x, y, z = u[:n], u[n : n + p], u[n + p :]
        top = self.A.T @ y + self.G.T @ z
        mid = self.A @ x
        bot = self.G @ x - self.W2 @ z
        return np.concatenate([top, mid, bot])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        u = self.lu.solve(rhs)
        for _ in range(REFINE_STEPS):
            resid = rhs - self._apply_exact(u)
            if np.max(np.abs(resid)) < 1e-14:
                break
            u = u + self.lu.solve(resid)
        if not np.all(np.isfinite(u)):
            raise SolverNumericalError("KKT solve produced non-finite values")
        return u


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------


def solve_conic(
    c: np.ndarray,
    A: sp.spmatrix,
    b: np.ndarray,
    G: sp.spmatrix,
    h: np.ndarray,
    dims: ConeDims,
    feastol: float = 1e-8,
    gaptol: float = 1e-8,
    max_iter: int = 200,
) -> ConicResult:
    n = c.shape[0]
    p = A.shape[0]
    m = G.shape[0]
    A = sp.csc_matrix(A) if not sp.issparse(A) else A.tocsc()
    G = sp.csc_matrix(G) if not sp.issparse(G) else G.tocsc()
    if m != dims.total:
        raise ValueError(f"G has {m} rows but the cone product has {dims.total}")

    if n == 0:
        feasible = (p == 0 or np.allclose(b, 0)) and (m == 0 or in_cone(h, dims, -1e-12))
        status = "optimal" if feasible else "infeasible"
        return ConicResult(status, np.empty(0), np.zeros(p), np.zeros(m), h.copy(), 0.0, 0, 0, 0, 0, 0)
    if m == 0:
        # equality-only problems: embed a slack orthant of size one so the
        # homogeneous machinery keeps a complementarity measure
        G = sp.csc_matrix((1, n))
        h = np.zeros(1)
        dims = ConeDims(1, ())
        m = 1

    e = cone_unit(dims)
    nu = dims.degree + 1

    # starting point: least-squares primal/dual estimates pushed inside K
    W2 = sp.identity(m, format="csc")
    kkt0 = _KKT(A, G, W2)
    sol_p = kkt0.solve(np.concatenate([np.zeros(n), b, h]))
    x = sol_p[:n]
    s_guess = h - G @ x
    alpha = -_cone_min_resid(s_guess, dims)
    s = s_guess + (1.0 + alpha) * e if alpha >= 0.0 else s_guess.copy()
    sol_d = kkt0.solve(np.concatenate([-c, np.zeros(p), np.zeros(m)]))
    y = sol_d[n : n + p]
    z_guess = sol_d[n + p :]
    alpha = -_cone_min_resid(z_guess, dims)
    z = z_guess + (1.0 + alpha) * e if alpha >= 0.0 else z_guess.copy()
    tau, kappa = 1.0, 1.0

    norm_b = max(1.0, float(np.linalg.norm(b))) if p else 1.0
    norm_h = max(1.0, float(np.linalg.norm(h))) if m else 1.0
    norm_c = max(1.0, float(np.linalg.norm(c)))

    best = None
    status = "iteration_limit"
    stall: SolverNumericalError | None = None
    iterations = 0
    for iteration in range(max_iter):
        iterations = iteration
        rx = A.T @ y + G.T @ z + c * tau
        ry = A @ x - b * tau
        rz = G @ x + s - h * tau
        rt = kappa + float(c @ x) + float(b @ y) + float(h @ z)
        mu = (float(s @ z) + tau * kappa) / nu

        # scaled convergence measures
        xhat, shat = x / tau, s / tau
        yhat, zhat = y / tau, z / tau
        pres = 0.0
        if p:
            pres = float(np.linalg.norm(A @ xhat - b)) / norm_b
        if m:
            pres = max(pres, float(np.linalg.norm(G @ xhat + shat - h)) / norm_h)
        dres = float(np.linalg.norm(A.T @ yhat + G.T @ zhat + c)) / norm_c
        gap = float(shat @ zhat)
        pcost = float(c @ xhat)
        relgap = gap / max(1.0, abs(pcost))
        best = ConicResult(
            "iteration_limit", xhat, yhat, zhat, shat, pcost, iteration, pres, dres, gap, relgap
        )
        if pres <= feastol and dres <= feastol and (gap <= gaptol or relgap <= gaptol):
            status = "optimal"
            break

        # certificates of primal/dual infeasibility
        by_hz = float(b @ y) + float(h @ z)
        if by_hz < -MIN_DENOM:
            scale = -1.0 / by_hz
            resid = float(np.linalg.norm(A.T @ (y * scale) + G.T @ (z * scale))) / norm_c
            if resid <= feastol and in_cone(z * scale + 1e-13 * e, dims, -1e-9):
                status = "infeasible"
                best = ConicResult(
                    "infeasible", xhat, y * scale, z * scale, shat, math.nan,
                    iteration, pres, dres, gap, relgap, certificate_residual=resid,
                )
                break
        cx = float(c @ x)
        if cx < -MIN_DENOM:
            scale = -1.0 / cx
            resid = 0.0
            if p:
                resid = float(np.linalg.norm(A @ (x * scale))) / norm_b
            resid = max(resid, float(np.linalg.norm(G @ (x * scale) + s * scale)) / norm_h)
            if resid <= feastol:
                status = "unbounded"
                best = ConicResult(
                    "unbounded", x * scale, yhat, zhat, s * scale, -math.inf,
                    iteration, pres, dres, gap, relgap, certificate_residual=resid,
                )
                break

        # on a degenerate optimal face the scaling can collapse right at the
        # end: complementarity keeps shrinking while the residual plateaus a
        # hair above feastol, and the next direction is no longer computable.
        # treat that as a stall and fall back to the stored iterate.
        try:
            scaling = NTScaling(s, z, dims)
            lam = scaling.lam
            kkt = _KKT(A, G, scaling.w_squared())
            w1 = kkt.solve(np.concatenate([-c, b, h]))

            def direction(sigma: float, ds_extra: np.ndarray | None, dk_extra: float):
                sbar = 1.0 - sigma
                d_s = -jordan_product(lam, lam, dims) + sigma * mu * e
                if ds_extra is not None:
                    d_s -= ds_extra
                d_kappa = -tau * kappa + sigma * mu - dk_extra
                u_x = -sbar * rx
                u_y = -sbar * ry
                u_z = -sbar * rz - scaling.w_mult(jordan_div(lam, d_s, dims))
                w2 = kkt.solve(np.concatenate([u_x, u_y, u_z]))
                cw1 = float(c @ w1[:n]) + float(b @ w1[n : n + p]) + float(h @ w1[n + p :])
                cw2 = float(c @ w2[:n]) + float(b @ w2[n : n + p]) + float(h @ w2[n + p :])
                denom = cw1 - kappa / tau
                if abs(denom) < MIN_DENOM:
                    denom = -MIN_DENOM
                dtau = (-sbar * rt - cw2 - d_kappa / tau) / denom
                delta = w2 + dtau * w1
                dx, dy, dz = delta[:n], delta[n : n + p], delta[n + p :]
                ds = scaling.w_mult(jordan_div(lam, d_s, dims) - scaling.w_mult(dz))
                dkappa = (d_kappa - kappa * dtau) / tau
                return dx, dy, dz, ds, dtau, dkappa

            # predictor
            dxa, dya, dza, dsa, dtaua, dkappaa = direction(0.0, None, 0.0)
            step_a = min(
                max_step(s, dsa, dims),
                max_step(z, dza, dims),
                (-tau / dtaua) if dtaua < 0 else math.inf,
                (-kappa / dkappaa) if dkappaa < 0 else math.inf,
            )
            alpha_a = min(1.0, step_a)
            sigma = (1.0 - alpha_a) ** 3

            # corrector
            ds_extra = jordan_product(scaling.w_inv_mult(dsa), scaling.w_mult(dza), dims)
            dk_extra = dtaua * dkappaa
            dx, dy, dz, ds, dtau, dkappa = direction(sigma, ds_extra, dk_extra)
            step = min(
                max_step(s, ds, dims),
                max_step(z, dz, dims),
                (-tau / dtau) if dtau < 0 else math.inf,
                (-kappa / dkappa) if dkappa < 0 else math.inf,
            )
            alpha = min(1.0, STEP_FRACTION * step)
            x = x + alpha * dx
            y = y + alpha * dy
            z = z + alpha * dz
            s = s + alpha * ds
            tau += alpha * dtau
            kappa += alpha * dkappa
            if tau <= 0.0 or kappa <= 0.0:
                raise SolverNumericalError("homogenizing variables left the positive ray")
        except SolverNumericalError as exc:
            stall = exc
            break
    else:
        iterations = max_iter

    if status == "iteration_limit" and best is not None:
        # stalled or out of iterations; accept the stored iterate at the
        # relaxed tolerances if it is already essentially optimal
        if (
            best.pres <= INACC_FEAS
            and best.dres <= INACC_FEAS
            and (best.gap <= INACC_GAP or best.relgap <= INACC_GAP)
        ):
            status = "optimal"
        elif stall is not None:
            raise stall
    result = best
    result.status = status
    result.iterations = iterations + (0 if status == "iteration_limit" else 1)
    return result


def _cone_min_resid(u: np.ndarray, dims: ConeDims) -> float:
    """Smallest margin to the cone boundary (negative when outside)."""
    worst = math.inf
    if dims.l:
        worst = float(np.min(u[: dims.l]))
    for sl in dims.soc_slices():
        worst = min(worst, _soc_resid(u[sl]))
    return worst if worst != math.inf else 1.0
