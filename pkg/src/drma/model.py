"""Joint log-posterior of the hierarchical dose-response models.

Every density routine accepts parameter arrays with arbitrary leading batch
dimensions (the sampler stacks chains along axis 0), so the same code path
serves single-state evaluation and vectorised MCMC updates.

Parameter layout (``...`` is the optional batch shape):

==============  ===================  ==========================================
name            shape                meaning
==============  ===================  ==========================================
B               (..., p)             mean dose-response coefficients
beta            (..., ns, p)         study coefficients (random models)
u               (..., ns)            study baselines on the link scale
tau, rho        (...)                heterogeneity SD and correlation
Bc              (..., C, p)          cluster means (clustered model)
tau_within ...  (...)                within/between cluster SD and correlation
R0, sigma0      (...)                zero-dose summary response and its SD
==============  ===================  ==========================================
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .data import Dataset
from .splines import Transform, contrast

LOG2PI = math.log(2.0 * math.pi)
LIKELIHOODS = ("binomial", "normal")
LINKS = ("logit", "log", "identity")
COEFFICIENTS = ("common", "random")


class ModelError(ValueError):
    """Inconsistent model configuration."""


class DimensionError(ModelError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    coef_mean: float = 0.0
    coef_var: float = 1e3
    baseline_var: float = 1e3
    tau_scale: float = 1.0
    rho_bounds: tuple[float, float] = (-1.0, 1.0)
    tau0_scale: float = 1.0

    def __post_init__(self):
        for name in ("coef_var", "baseline_var", "tau_scale", "tau0_scale"):
            if not getattr(self, name) > 0:
                raise ModelError(f"prior {name} must be positive")
        lo, hi = self.rho_bounds
        if not (-1.0 <= lo < hi <= 1.0):
            raise ModelError(f"rho_bounds must lie in [-1, 1], got {self.rho_bounds}")
        object.__setattr__(self, "rho_bounds", (float(lo), float(hi)))


@dataclass(frozen=True)
class ModelSpec:
    transform: Transform
    likelihood: str = "binomial"
    link: str = "logit"
    coefficients: str = "random"
    clustered: bool = False
    include_zero_dose_block: bool = False
    correlated: bool = True
    priors: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ModelError(f"likelihood must be one of {LIKELIHOODS}")
        if self.link not in LINKS:
            raise ModelError(f"link must be one of {LINKS}")
        if self.coefficients not in COEFFICIENTS:
            raise ModelError(f"coefficients must be one of {COEFFICIENTS}")
        if self.clustered and self.coefficients != "random":
            raise ModelError("clustering requires random coefficients")
        if self.likelihood == "binomial" and self.link == "identity":
            raise ModelError("binomial likelihood needs the logit or log link")
        if self.include_zero_dose_block and self.link == "identity":
            raise ModelError("the zero-dose block needs the logit or log link")

    @property
    def p(self) -> int:
        return self.transform.p

    @property
    def has_rho(self) -> bool:
        return self.coefficients == "random" and self.correlated and self.p == 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transform"] = self.transform.to_dict()
        d["priors"]["rho_bounds"] = list(self.priors.rho_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        transform = Transform.from_dict(d.pop("transform"))
        priors = PriorSpec(**{k: (tuple(v) if k == "rho_bounds" else v) for k, v in d.pop("priors", {}).items()})
        return cls(transform=transform, priors=priors, **d)


@dataclass
class ParameterState:
    """Values of every model parameter; irrelevant fields stay ``None``."""

    B: np.ndarray
    beta: np.ndarray | None = None
    u: np.ndarray | None = None
    tau: np.ndarray | float | None = None
    rho: np.ndarray | float | None = None
    Bc: np.ndarray | None = None
    tau_within: np.ndarray | float | None = None
    rho_within: np.ndarray | float | None = None
    tau_between: np.ndarray | float | None = None
    rho_between: np.ndarray | float | None = None
    R0: np.ndarray | float | None = None
    sigma0: np.ndarray | float | None = None

    def copy(self) -> "ParameterState":
        return ParameterState(**{
            f.name: (None if getattr(self, f.name) is None else np.array(getattr(self, f.name), dtype=float))
            for f in dataclasses.fields(self)
        })


# --------------------------------------------------------------------------
# elementary log densities


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def halfnormal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = math.log(2.0) + normal_logpdf(x, 0.0, scale**2)
    return np.where(x >= 0, out, -np.inf)


def uniform_logpdf(x, lo, hi):
    x = np.asarray(x, dtype=float)
    return np.where((x > lo) & (x < hi), -math.log(hi - lo), -np.inf)


def re_logpdf(dev, tau, rho=None):
    """MVN log density of deviations ``dev`` (..., n, p) under
    ``Sigma = tau**2 * [[1, rho], [rho, 1]]`` (``rho`` ignored when p = 1).

    Returns shape (..., n). Non-positive ``tau`` or ``|rho| >= 1`` give -inf.
    """
    tau = np.asarray(tau, dtype=float)[..., None]
    p = dev.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if p == 1:
            out = -0.5 * LOG2PI - np.log(tau) - 0.5 * (dev[..., 0] / tau) ** 2
            bad = tau <= 0
        else:
            r = np.zeros_like(tau) if rho is None else np.asarray(rho, dtype=float)[..., None]
            one_m = 1.0 - r * r
            d1, d2 = dev[..., 0], dev[..., 1]
            quad = (d1 * d1 - 2.0 * r * d1 * d2 + d2 * d2) / (tau * tau * one_m)
            out = -LOG2PI - 2.0 * np.log(tau) - 0.5 * np.log(one_m) - 0.5 * quad
            bad = (tau <= 0) | (one_m <= 0)
    return np.where(bad, -np.inf, out)


def chol_factor(tau, rho, p):
    """Lower Cholesky factor of ``Sigma(tau, rho)``, shape (..., p, p)."""
    tau = np.asarray(tau, dtype=float)
    L = np.zeros(tau.shape + (p, p))
    L[..., 0, 0] = tau
    if p == 2:
        r = np.zeros_like(tau) if rho is None else np.asarray(rho, dtype=float)
        L[..., 1, 0] = tau * r
        L[..., 1, 1] = tau * np.sqrt(1.0 - r * r)
    return L


def delta(beta_i, x, x0, transform: Transform) -> float:
    """Relative effect of dose ``x`` against ``x0`` for coefficients ``beta_i``."""
    beta_i = np.atleast_1d(np.asarray(beta_i, dtype=float))
    if beta_i.shape != (transform.p,):
        raise DimensionError(f"beta has length {beta_i.size}, transform needs {transform.p}")
    return float(contrast(x, x0, transform) @ beta_i)


def inverse_link(eta, link: str):
    if link == "logit":
        return expit(eta)
    if link == "log":
        return np.exp(eta)
    return np.asarray(eta, dtype=float)


def apply_link(prob, link: str):
    prob = np.asarray(prob, dtype=float)
    if link == "logit":
        return np.log(prob) - np.log1p(-prob)
    if link == "log":
        return np.log(prob)
    return prob


def _binomial_kernel(r, n, logc, eta, link, mask=None):
    if link == "logit":
        out = r * eta - n * np.logaddexp(0.0, eta) + logc
    else:
        out = r * eta + (n - r) * np.log(-np.expm1(eta)) + logc
        out = np.where(eta < 0, out, -np.inf)
    return out if mask is None else np.where(mask, out, 0.0)


def _binomial_loglik(r, n, logc, eta, link, mask=None):
    """Elementwise binomial log pmf with success probability ``link^-1(eta)``."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _binomial_kernel(r, n, logc, eta, link, mask)


# --------------------------------------------------------------------------


class DoseResponseModel:
    """A :class:`ModelSpec` bound to a :class:`Dataset`.

    Construction precomputes padded design arrays; evaluation methods are pure
    functions of a :class:`ParameterState`.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset, correction: float = 0.5):
        self.spec = spec
        self.dataset = dataset
        self.p = spec.p
        self.ns = dataset.ns
        self.study_ids = dataset.study_ids
        tr = spec.transform

        if spec.likelihood == "binomial" and not dataset.has_counts:
            raise ModelError("binomial likelihood needs arm-level counts")
        if spec.include_zero_dose_block and not dataset.has_counts:
            raise ModelError("the zero-dose block needs reference-arm counts")

        if spec.clustered:
            labels = dataset.cluster_labels
            if any(c is None for c in labels):
                raise ModelError("clustering requested but some studies have no cluster label")
            self.cluster_names = dataset.clusters
            self.cluster_index = np.array([self.cluster_names.index(c) for c in labels], dtype=int)
            self.n_clusters = len(self.cluster_names)
            self.membership = np.zeros((self.ns, self.n_clusters))
            self.membership[np.arange(self.ns), self.cluster_index] = 1.0
        else:
            self.cluster_names = []
            self.cluster_index = np.zeros(self.ns, dtype=int)
            self.n_clusters = 0

        ns = self.ns
        if dataset.has_counts:
            A = max((len(s.arms) for s in dataset.studies), default=1)
            self.r = np.zeros((ns, A))
            self.n = np.zeros((ns, A))
            self.arm_mask = np.zeros((ns, A), dtype=bool)
            self.X = np.zeros((ns, A, self.p))
            for i, s in enumerate(dataset.studies):
                k = len(s.arms)
                self.r[i, :k] = [a.events for a in s.arms]
                self.n[i, :k] = [a.size for a in s.arms]
                self.arm_mask[i, :k] = True
                self.X[i, :k] = contrast(s.doses, s.doses[0], tr)
            self.logc = np.where(
                self.arm_mask, gammaln(self.n + 1) - gammaln(self.r + 1) - gammaln(self.n - self.r + 1), 0.0
            )
            self.ref_dose = np.array([s.doses[0] for s in dataset.studies])
            self.r0, self.n0, self.logc0 = self.r[:, 0].copy(), self.n[:, 0].copy(), self.logc[:, 0].copy()
        else:
            self.ref_dose = np.array([t.reference_dose for t in dataset.tables])

        if spec.likelihood == "normal":
            tables = dataset.effect_tables(correction)
            J = max((t.size for t in tables), default=1)
            self.Y = np.zeros((ns, J))
            self.Z = np.zeros((ns, J, self.p))
            self.Sinv = np.zeros((ns, J, J))
            self.logdetS = np.zeros(ns)
            self.J = np.zeros(ns)
            for i, t in enumerate(tables):
                k = t.size
                self.Y[i, :k] = t.effects
                self.Z[i, :k] = contrast(t.doses, t.reference_dose, tr)
                L = np.linalg.cholesky(t.covariance)
                Linv = np.linalg.inv(L)
                self.Sinv[i, :k, :k] = Linv.T @ Linv
                self.logdetS[i] = 2.0 * np.sum(np.log(np.diag(L)))
                self.J[i] = k
            self.tables = tables

        if spec.include_zero_dose_block:
            self.zero_mask = self.ref_dose == 0
            if not self.zero_mask.any():
                raise ModelError("the zero-dose block needs at least one study with a zero reference dose")
        else:
            self.zero_mask = np.zeros(ns, dtype=bool)

    # ------------------------------------------------------------------
    # structure

    @property
    def has_u(self) -> bool:
        return self.spec.likelihood == "binomial" or self.spec.include_zero_dose_block

    @property
    def u_in_likelihood(self) -> bool:
        return self.spec.likelihood == "binomial"

    def check_state(self, state: ParameterState, batch: tuple = ()) -> None:
        spec, p, ns = self.spec, self.p, self.ns

        def need(name, shape):
            v = getattr(state, name)
            if v is None:
                raise DimensionError(f"parameter {name!r} is required by this model")
            if np.shape(v) != batch + shape:
                raise DimensionError(f"parameter {name!r} has shape {np.shape(v)}, expected {batch + shape}")

        need("B", (p,))
        if self.has_u and ns:
            need("u", (ns,))
        if spec.coefficients == "random":
            if ns:
                need("beta", (ns, p))
            if spec.clustered:
                need("Bc", (self.n_clusters, p))
                need("tau_within", ())
                need("tau_between", ())
                if spec.has_rho:
                    need("rho_within", ())
                    need("rho_between", ())
            else:
                need("tau", ())
                if spec.has_rho:
                    need("rho", ())
        if spec.include_zero_dose_block:
            need("R0", ())
            need("sigma0", ())

    # ------------------------------------------------------------------
    # likelihood pieces

    def effective_beta(self, state: ParameterState) -> np.ndarray:
        if self.spec.coefficients == "random":
            return state.beta
        B = np.asarray(state.B, dtype=float)
        return np.broadcast_to(B[..., None, :], B.shape[:-1] + (self.ns, self.p))

    def study_loglik(self, beta, u=None, checked: bool = True) -> np.ndarray:
        """Per-study log likelihood, shape (..., ns).

        ``checked=False`` skips the floating-point error context; the caller
        is then responsible for suppressing warnings.
        """
        if self.spec.likelihood == "binomial":
            delta = (self.X @ beta[..., None])[..., 0]
            eta = u[..., None] + delta
            mask = None if self.spec.link == "logit" else self.arm_mask
            if checked:
                ll = _binomial_loglik(self.r, self.n, self.logc, eta, self.spec.link, mask)
            else:
                ll = _binomial_kernel(self.r, self.n, self.logc, eta, self.spec.link, mask)
            return ll.sum(axis=-1)
        mu = (self.Z @ beta[..., None])[..., 0]
        resid = self.Y - mu
        q = (resid * (self.Sinv @ resid[..., None])[..., 0]).sum(axis=-1)
        return -0.5 * (q + self.logdetS + self.J * LOG2PI)

    def loglik(self, state: ParameterState) -> np.ndarray:
        if self.ns == 0:
            return np.zeros(np.shape(state.B)[:-1])
        return self.study_loglik(self.effective_beta(state), state.u).sum(axis=-1)

    def study_random_effects(self, state: ParameterState) -> np.ndarray:
        """Per-study random-effects log density, shape (..., ns)."""
        if self.spec.clustered:
            mean = np.take(state.Bc, self.cluster_index, axis=-2)
            return re_logpdf(state.beta - mean, state.tau_within, state.rho_within if self.spec.has_rho else None)
        dev = state.beta - np.asarray(state.B)[..., None, :]
        return re_logpdf(dev, state.tau, state.rho if self.spec.has_rho else None)

    def cluster_random_effects(self, state: ParameterState) -> np.ndarray:
        dev = state.Bc - np.asarray(state.B)[..., None, :]
        return re_logpdf(dev, state.tau_between, state.rho_between if self.spec.has_rho else None)

    def log_random_effects(self, state: ParameterState) -> np.ndarray:
        if self.spec.coefficients == "common" or self.ns == 0:
            return np.zeros(np.shape(state.B)[:-1])
        out = self.study_random_effects(state).sum(axis=-1)
        if self.spec.clustered:
            out = out + self.cluster_random_effects(state).sum(axis=-1)
        return out

    def zero_dose_terms(self, u, R0, sigma0, include_binomial: bool | None = None) -> np.ndarray:
        """Per-study zero-dose block terms, shape (..., ns); zero outside the block."""
        if include_binomial is None:
            include_binomial = not self.u_in_likelihood
        R0 = np.asarray(R0, dtype=float)[..., None]
        sigma0 = np.asarray(sigma0, dtype=float)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(sigma0 > 0, normal_logpdf(u, R0, sigma0 * sigma0), -np.inf)
        if include_binomial:
            out = out + _binomial_loglik(self.r0, self.n0, self.logc0, u, self.spec.link)
        return np.where(self.zero_mask, out, 0.0)

    def log_zero_dose_block(self, state: ParameterState, include_binomial: bool | None = None) -> np.ndarray:
        if not self.spec.include_zero_dose_block:
            return np.zeros(np.shape(state.B)[:-1])
        return self.zero_dose_terms(state.u, state.R0, state.sigma0, include_binomial).sum(axis=-1)

    def u_prior_terms(self, u) -> np.ndarray:
        pr = self.spec.priors
        # every baseline keeps the vague prior, also inside the zero-dose block
        return normal_logpdf(u, 0.0, pr.baseline_var)

    def log_prior(self, state: ParameterState) -> np.ndarray:
        spec, pr = self.spec, self.spec.priors
        B = np.asarray(state.B, dtype=float)
        out = normal_logpdf(B, pr.coef_mean, pr.coef_var).sum(axis=-1)
        if self.has_u and self.ns:
            out = out + self.u_prior_terms(state.u).sum(axis=-1)
        lo, hi = pr.rho_bounds
        if spec.coefficients == "random":
            if spec.clustered:
                out = out + halfnormal_logpdf(state.tau_within, pr.tau_scale)
                out = out + halfnormal_logpdf(state.tau_between, pr.tau_scale)
                if spec.has_rho:
                    out = out + uniform_logpdf(state.rho_within, lo, hi) + uniform_logpdf(state.rho_between, lo, hi)
            else:
                out = out + halfnormal_logpdf(state.tau, pr.tau_scale)
                if spec.has_rho:
                    out = out + uniform_logpdf(state.rho, lo, hi)
        if spec.include_zero_dose_block:
            out = out + normal_logpdf(np.asarray(state.R0, dtype=float), 0.0, pr.baseline_var)
            out = out + halfnormal_logpdf(state.sigma0, pr.tau0_scale)
        return out

    def log_posterior(self, state: ParameterState) -> np.ndarray:
        lp = self.log_prior(state)
        with np.errstate(invalid="ignore"):
            lp = lp + self.log_random_effects(state)
            lp = lp + self.loglik(state)
            lp = lp + self.log_zero_dose_block(state)
        return np.where(np.isnan(lp), -np.inf, lp)

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def parameter_names(self, monitor_study: bool = False) -> list[str]:
        spec = self.spec
        names = [f"B{k + 1}" for k in range(self.p)]
        if spec.coefficients == "random":
            if spec.clustered:
                names += ["tau_within"] + (["rho_within"] if spec.has_rho else [])
                names += ["tau_between"] + (["rho_between"] if spec.has_rho else [])
                names += [f"B{k + 1}[{c}]" for c in self.cluster_names for k in range(self.p)]
            else:
                names += ["tau"] + (["rho"] if spec.has_rho else [])
        if spec.include_zero_dose_block:
            names += ["R0", "sigma0"]
        if monitor_study:
            if spec.coefficients == "random":
                names += [f"beta{k + 1}[{s}]" for s in self.study_ids for k in range(self.p)]
            if self.has_u:
                names += [f"u[{s}]" for s in self.study_ids]
        return names

    def flatten(self, state: ParameterState, monitor_study: bool = False) -> np.ndarray:
        """Stack monitored parameters along the last axis in :meth:`parameter_names` order."""
        spec = self.spec
        B = np.asarray(state.B, dtype=float)
        batch = B.shape[:-1]
        cols = [B]

        def scalar(v):
            return np.asarray(v, dtype=float).reshape(batch + (1,))

        if spec.coefficients == "random":
            if spec.clustered:
                cols.append(scalar(state.tau_within))
                if spec.has_rho:
                    cols.append(scalar(state.rho_within))
                cols.append(scalar(state.tau_between))
                if spec.has_rho:
                    cols.append(scalar(state.rho_between))
                cols.append(np.asarray(state.Bc).reshape(batch + (-1,)))
            else:
                cols.append(scalar(state.tau))
                if spec.has_rho:
                    cols.append(scalar(state.rho))
        if spec.include_zero_dose_block:
            cols += [scalar(state.R0), scalar(state.sigma0)]
        if monitor_study:
            if spec.coefficients == "random":
                cols.append(np.asarray(state.beta).reshape(batch + (-1,)))
            if self.has_u:
                cols.append(np.asarray(state.u).reshape(batch + (-1,)))
        return np.concatenate(cols, axis=-1)

    def coefficient_scale(self) -> np.ndarray:
        """Largest absolute dose contrast per coefficient (1 if no data)."""
        if self.ns == 0:
            return np.ones(self.p)
        Xc = self.Z if self.spec.likelihood == "normal" else self.X
        s = np.abs(Xc).reshape(-1, self.p).max(axis=0)
        return np.where(s > 0, s, 1.0)

    def empirical_baselines(self) -> np.ndarray:
        """Link-scale reference-arm rates with a 0.5 correction."""
        if not self.dataset.has_counts or self.ns == 0:
            return np.zeros(self.ns)
        p0 = (self.r0 + 0.5) / (self.n0 + 1.0)
        return apply_link(p0, self.spec.link if self.spec.link != "identity" else "logit")

    def initial_state(self, rng: np.random.Generator, mode: str = "jittered-zero") -> ParameterState:
        """Starting values for one chain."""
        spec, p, ns, pr = self.spec, self.p, self.ns, self.spec.priors
        scale = self.coefficient_scale()
        if mode == "prior-draw":
            return self.draw_prior(rng)
        if mode != "jittered-zero":
            raise ValueError(f"unknown init mode {mode!r}")
        jit = 0.1 / scale
        B = rng.normal(0.0, 1.0, p) * jit
        st = ParameterState(B=B)
        if self.has_u:
            st.u = self.empirical_baselines() + rng.normal(0.0, 0.1, ns)
        if spec.coefficients == "random":
            if spec.clustered:
                st.Bc = B + rng.normal(0.0, 1.0, (self.n_clusters, p)) * jit * 0.1
                st.beta = st.Bc[self.cluster_index] + rng.normal(0.0, 1.0, (ns, p)) * jit * 0.1
                st.tau_within = np.float64(0.1)
                st.tau_between = np.float64(0.1)
                if spec.has_rho:
                    st.rho_within = np.float64(0.0)
                    st.rho_between = np.float64(0.0)
            else:
                st.beta = B + rng.normal(0.0, 1.0, (ns, p)) * jit * 0.1
                st.tau = np.float64(0.1)
                if spec.has_rho:
                    st.rho = np.float64(0.0)
        if spec.include_zero_dose_block:
            u0 = st.u[self.zero_mask]
            st.R0 = np.float64(u0.mean() + rng.normal(0.0, 0.05))
            st.sigma0 = np.float64(max(u0.std(), 0.1))
        return st

    def draw_prior(self, rng: np.random.Generator) -> ParameterState:
        """One joint draw from the prior and the hierarchical layers."""
        spec, p, ns, pr = self.spec, self.p, self.ns, self.spec.priors
        lo, hi = pr.rho_bounds
        B = rng.normal(pr.coef_mean, math.sqrt(pr.coef_var), p)
        st = ParameterState(B=B)
        if spec.include_zero_dose_block:
            st.R0 = np.float64(rng.normal(0.0, math.sqrt(pr.baseline_var)))
            st.sigma0 = np.float64(abs(rng.normal(0.0, pr.tau0_scale)))
        if self.has_u:
            u = rng.normal(0.0, math.sqrt(pr.baseline_var), ns)
            if spec.include_zero_dose_block:
                u = np.where(self.zero_mask, rng.normal(st.R0, st.sigma0, ns), u)
            st.u = u
        if spec.coefficients == "random":

            def draw_sigma():
                tau = np.float64(abs(rng.normal(0.0, pr.tau_scale)))
                rho = np.float64(rng.uniform(lo, hi)) if spec.has_rho else None
                return tau, rho

            if spec.clustered:
                st.tau_between, st.rho_between = draw_sigma()
                st.tau_within, st.rho_within = draw_sigma()
                Lb = chol_factor(st.tau_between, st.rho_between, p)
                Lw = chol_factor(st.tau_within, st.rho_within, p)
                st.Bc = B + rng.normal(size=(self.n_clusters, p)) @ Lb.T
                st.beta = st.Bc[self.cluster_index] + rng.normal(size=(ns, p)) @ Lw.T
            else:
                st.tau, st.rho = draw_sigma()
                L = chol_factor(st.tau, st.rho, p)
                st.beta = B + rng.normal(size=(ns, p)) @ L.T
        return st


# --------------------------------------------------------------------------
# functional entry points


def loglik_binomial(spec: ModelSpec, dataset: Dataset, state: ParameterState) -> float:
    if spec.likelihood != "binomial":
        spec = dataclasses.replace(spec, likelihood="binomial")
    m = DoseResponseModel(spec, dataset)
    return float(m.loglik(state))


def loglik_normal(spec: ModelSpec, dataset: Dataset, state: ParameterState, correction: float = 0.5) -> float:
    if spec.likelihood != "normal":
        spec = dataclasses.replace(spec, likelihood="normal", include_zero_dose_block=False)
    m = DoseResponseModel(spec, dataset, correction)
    return float(m.loglik(state))


def log_random_effects(spec: ModelSpec, dataset: Dataset, state: ParameterState) -> float:
    """Random-effects layers; raises for a non-positive heterogeneity SD."""
    if spec.coefficients == "random":
        taus = [state.tau_within, state.tau_between] if spec.clustered else [state.tau]
        if any(t is None or not float(t) > 0 for t in taus):
            raise ModelError("random-coefficient density needs tau > 0")
    return float(DoseResponseModel(spec, dataset).log_random_effects(state))


def log_prior(spec: ModelSpec, dataset: Dataset, state: ParameterState) -> float:
    return float(DoseResponseModel(spec, dataset).log_prior(state))


def log_zero_dose_block(spec: ModelSpec, dataset: Dataset, state: ParameterState, include_binomial: bool = True) -> float:
    if not spec.include_zero_dose_block:
        spec = dataclasses.replace(spec, include_zero_dose_block=True)
    return float(DoseResponseModel(spec, dataset).log_zero_dose_block(state, include_binomial))


def log_posterior(spec: ModelSpec, dataset: Dataset, state: ParameterState) -> float:
    m = DoseResponseModel(spec, dataset)
    m.check_state(state)
    return float(m.log_posterior(state))


def absolute_response(B_draws, R0_draws, doses, transform: Transform, link: str = "logit"):
    """Absolute response per posterior draw at each dose (reference dose 0).

    Returns an array of shape ``(n_draws, n_doses)``. Under the log link a
    draw whose linear predictor is non-negative has no valid probability and
    is reported as NaN; use :func:`rejected_draws` to count them.
    """
    B = np.atleast_2d(np.asarray(B_draws, dtype=float))
    R0 = np.atleast_1d(np.asarray(R0_draws, dtype=float))
    doses = np.atleast_1d(np.asarray(doses, dtype=float))
    if np.any(doses < 0):
        raise ValueError("doses must be non-negative")
    if B.shape[-1] != transform.p:
        raise DimensionError(f"B draws have {B.shape[-1]} columns, transform needs {transform.p}")
    eta = B @ contrast(doses, 0.0, transform).T + R0[:, None]
    prob = inverse_link(eta, link)
    if link == "log":
        prob = np.where(eta < 0, prob, np.nan)
    return prob


def rejected_draws(prob) -> np.ndarray:
    return np.isnan(prob).sum(axis=0)


def summarize_curve(values) -> dict:
    """Mean and equal-tailed 95% interval over draws (axis 0), ignoring NaN."""
    v = np.asarray(values, dtype=float)
    return {
        "mean": np.nanmean(v, axis=0),
        "lower": np.nanquantile(v, 0.025, axis=0),
        "upper": np.nanquantile(v, 0.975, axis=0),
    }
