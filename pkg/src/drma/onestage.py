"""Maximum-likelihood linear mixed model on study contrasts.

Each study contributes ``Y_i ~ MVN(Z_i B, Z_i Psi Z_i' + S_i)`` where ``Z_i``
stacks the contrast rows ``f(x_ij) - f(x_i0)``. ``B`` is profiled out by
generalised least squares, so the optimiser only sees the variance
parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .data import EffectTable
from .splines import Transform, contrast

LOG2PI = math.log(2.0 * math.pi)


class RankError(ValueError):
    """The pooled design cannot identify every coefficient."""


class UnderidentifiedWarning(UserWarning):
    pass


@dataclass
class OneStageFit:
    B_hat: np.ndarray
    se: np.ndarray
    tau_hat: np.ndarray
    rho_hat: float
    loglik: float
    converged: bool
    iterations: int
    boundary: bool = False
    cov: np.ndarray | None = field(default=None, repr=False)
    n_studies: int = 0

    def to_dict(self) -> dict:
        out = {"B_hat": self.B_hat.tolist(), "se": self.se.tolist(), "tau_hat": self.tau_hat.tolist(),
               "rho_hat": float(self.rho_hat), "loglik": float(self.loglik), "converged": bool(self.converged),
               "iterations": int(self.iterations), "boundary": bool(self.boundary), "n_studies": self.n_studies}
        return out


class _Problem:
    """Padded contrast arrays for vectorised likelihood evaluation."""

    def __init__(self, tables, transform: Transform):
        self.p = transform.p
        self.ns = len(tables)
        J = max(t.size for t in tables)
        self.Y = np.zeros((self.ns, J))
        self.Z = np.zeros((self.ns, J, self.p))
        self.S = np.broadcast_to(np.eye(J), (self.ns, J, J)).copy()
        self.J = np.array([t.size for t in tables])
        for i, t in enumerate(tables):
            k = t.size
            self.Y[i, :k] = t.effects
            self.Z[i, :k] = contrast(t.doses, t.reference_dose, transform)
            self.S[i, :k, :k] = t.covariance

    def psi(self, tau, rho):
        if self.p == 1:
            return np.array([[tau[0] ** 2]])
        c = rho * tau[0] * tau[1]
        return np.array([[tau[0] ** 2, c], [c, tau[1] ** 2]])

    def gls(self, tau, rho):
        """Return (B_hat, cov(B_hat), profile loglik) for fixed variance parameters."""
        V = self.S + self.Z @ self.psi(tau, rho) @ np.swapaxes(self.Z, 1, 2)
        L = np.linalg.cholesky(V)
        Zw = np.linalg.solve(L, self.Z)
        Yw = np.linalg.solve(L, self.Y[..., None])[..., 0]
        A = np.einsum("ijp,ijq->pq", Zw, Zw)
        b = np.einsum("ijp,ij->p", Zw, Yw)
        cov = np.linalg.inv(A)
        B = cov @ b
        resid = Yw - Zw @ B
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
        ll = -0.5 * (self.J.sum() * LOG2PI + logdet + (resid * resid).sum())
        return B, cov, float(ll)

    def loglik(self, tau, rho):
        try:
            return self.gls(tau, rho)[2]
        except np.linalg.LinAlgError:
            return -np.inf


def _unpack(theta, p):
    tau = np.exp(np.clip(theta[:p], -40.0, 40.0))
    rho = math.tanh(theta[p]) if p == 2 else 0.0
    return tau, rho


def _pack(tau, rho, p):
    tau = np.maximum(np.asarray(tau, dtype=float), 1e-12)
    theta = list(np.log(tau))
    if p == 2:
        theta.append(math.atanh(float(np.clip(rho, -0.999999, 0.999999))))
    return np.array(theta)


def default_starts(problem: _Problem, se0: np.ndarray, n_grid: int = 3) -> list[tuple[np.ndarray, float]]:
    """Starting values scaled by the fixed-effect standard errors.

    A fixed pair of starts is followed by the ``n_grid`` best points of a
    coarse likelihood grid over (tau, rho); the grid catches optima near
    |rho| = 1 that the fixed starts can miss.
    """
    scale = np.maximum(se0 * math.sqrt(max(problem.ns, 1)), 1e-8)
    starts = [(scale * m, 0.0) for m in (0.1, 1.0)]
    mult = np.geomspace(0.01, 10.0, 7)
    if problem.p == 1:
        grid = [(scale * np.array([m]), 0.0) for m in mult]
    else:
        grid = [(scale * np.array([a, b]), r) for a in mult for b in mult for r in (-0.95, -0.5, 0.0, 0.5, 0.95)]
    ll = np.array([problem.loglik(t, r) for t, r in grid])
    for i in np.argsort(-ll, kind="stable")[:n_grid]:
        if np.isfinite(ll[i]):
            starts.append(grid[i])
    return starts


def _check_rank(problem: _Problem):
    A = np.einsum("ijp,ijq->pq", problem.Z, problem.Z)
    if np.linalg.matrix_rank(A) < problem.p:
        raise RankError(f"pooled contrast design has rank {np.linalg.matrix_rank(A)} < {problem.p}")


def fit_onestage(tables, transform: Transform, heterogeneity: bool = True,
                 drop_underidentified: bool = False, starts=None, maxiter: int = 2000) -> OneStageFit:
    """ML fit of the one-stage model.

    ``heterogeneity=False`` fixes ``Psi = 0`` (plain GLS pooling). ``starts``
    is an optional list of ``(tau, rho)`` starting points; by default a grid
    scaled by the fixed-effect standard errors is used. The best simplex
    optimum is polished by bounded quasi-Newton steps in the natural
    coordinates, which lets ``tau`` reach 0 and ``rho`` reach +-1.
    """
    tables = list(tables)
    p = transform.p
    if not tables:
        raise ValueError("no studies to fit")
    short = [t.study_id for t in tables if t.size < p]
    if short:
        if drop_underidentified:
            tables = [t for t in tables if t.size >= p]
            if not tables:
                raise RankError("every study has fewer contrasts than coefficients")
        elif len(short) == len(tables):
            warnings.warn("no study identifies its own curve; estimates rely on shrinkage only",
                          UnderidentifiedWarning, stacklevel=2)
    problem = _Problem(tables, transform)
    _check_rank(problem)
    zero = np.zeros(p)
    B0, cov0, ll0 = problem.gls(zero, 0.0)
    if not heterogeneity:
        return OneStageFit(B0, np.sqrt(np.diag(cov0)), zero, 0.0, ll0, True, 0, False, cov0, problem.ns)

    def objective(theta):
        tau, rho = _unpack(theta, p)
        return -problem.loglik(tau, rho)

    if starts is None:
        starts = default_starts(problem, np.sqrt(np.diag(cov0)))
    best, nit, converged = None, 0, True
    for tau_s, rho_s in starts:
        res = optimize.minimize(objective, _pack(tau_s, rho_s, p), method="Nelder-Mead",
                                options={"maxiter": maxiter, "xatol": 1e-7, "fatol": 1e-10})
        nit += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    converged = bool(best.success)
    tau, rho = _unpack(best.x, p)

    def natural(x):
        return -problem.loglik(x[:p], x[p] if p == 2 else 0.0)

    x0 = np.append(tau, rho) if p == 2 else tau.copy()
    bounds = [(0.0, None)] * p + ([(-1.0, 1.0)] if p == 2 else [])
    pol = optimize.minimize(natural, x0, method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 500})
    nit += int(pol.nit)
    x = pol.x if pol.fun <= natural(x0) else x0
    x = _snap_to_boundary(x, natural, p)
    tau = np.asarray(x[:p], dtype=float)
    rho = float(x[p]) if p == 2 else 0.0
    B, cov, ll = problem.gls(tau, rho)
    boundary = bool(np.any(tau == 0.0) or (p == 2 and abs(rho) == 1.0))
    return OneStageFit(B, np.sqrt(np.diag(cov)), tau, rho, ll, converged, nit, boundary, cov, problem.ns)


def _snap_to_boundary(x, f, p, tol=1e-9):
    """Move coordinates onto their bounds when that does not lower the likelihood."""
    x = np.array(x, dtype=float)
    base = f(x)
    candidates = [(k, 0.0) for k in range(p)]
    if p == 2:
        candidates.append((p, math.copysign(1.0, x[p]) if x[p] != 0 else 1.0))
    for k, value in candidates:
        y = x.copy()
        y[k] = value
        fy = f(y)
        if fy <= base + tol:
            x, base = y, min(base, fy)
    return x


def profile_loglik(tables, transform: Transform, tau, rho=0.0) -> float:
    """Profile log-likelihood at fixed variance parameters."""
    return _Problem(list(tables), transform).loglik(np.atleast_1d(np.asarray(tau, dtype=float)), float(rho))


def confint_wald(fit: OneStageFit, level: float = 0.95, allow_unconverged: bool = False) -> np.ndarray:
    """Wald intervals ``B_hat -+ z * se``, shape (p, 2)."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if not fit.converged and not allow_unconverged:
        raise ValueError("fit did not converge")
    z = stats.norm.ppf(0.5 + level / 2.0)
    return np.column_stack([fit.B_hat - z * fit.se, fit.B_hat + z * fit.se])
