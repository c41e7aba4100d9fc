"""Adaptive random-walk Metropolis-within-Gibbs for :class:`DoseResponseModel`.

All chains advance together: parameter arrays carry a leading chain axis and
every block update is vectorised over chains (and over studies or clusters
when the block is per-study). Each chain draws its random numbers from its
own counter-based stream keyed by ``(seed, chain)``, so a chain's trajectory
does not depend on how many other chains run beside it.

Sweep order::

    beta_i (per study, vector) -> u_i (per study) -> B -> B^c -> tau -> rho
    -> tau/rho within/between -> R0 -> sigma0 -> joint moves

The joint moves are exact Metropolis steps on the same target: a common
translation of B with every study coefficient, and a rescaling / rotation of
the study deviations together with tau / rho (a non-centred move). They
mix the hierarchy when heterogeneity is small relative to the data noise.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import Dataset
from .model import (
    DoseResponseModel,
    ModelSpec,
    ParameterState,
    normal_logpdf,
    uniform_logpdf,
)

LOG2PI = math.log(2.0 * math.pi)

SCALAR_TARGET = 0.44
VECTOR_TARGET = 0.23
_CHUNK = 1 << 14


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 3
    iterations: int = 100_000
    burn_in: int = 10_000
    thin: int = 1
    seed: int = 0
    adapt_window: int | None = None
    init: str = "jittered-zero"
    monitor_study: bool = False

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("chains, iterations and thin must be positive; burn_in non-negative")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin > self.iterations - self.burn_in:
            raise ValueError("thin exceeds the number of post-burn-in iterations")
        if self.adapt_window is None:
            object.__setattr__(self, "adapt_window", self.burn_in)
        if not 0 <= self.adapt_window <= self.burn_in:
            raise ValueError("adapt_window must lie in [0, burn_in]")
        if self.init not in ("jittered-zero", "prior-draw"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PosteriorDraws:
    """Kept draws, shape ``(chains, kept, parameters)``."""

    names: list[str]
    values: np.ndarray
    acceptance: dict[str, list[float]] = field(default_factory=dict)
    config: SamplerConfig | None = None
    proposal_scales: dict[str, list] = field(default_factory=dict)
    final_proposal_scales: dict[str, list] = field(default_factory=dict)
    iterations: np.ndarray | None = None

    def __post_init__(self):
        if self.iterations is None:
            burn = self.config.burn_in if self.config else 0
            thin = self.config.thin if self.config else 1
            self.iterations = burn + thin * np.arange(1, self.values.shape[1] + 1)

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_kept(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.values[:, :, self.names.index(name)]
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def pooled(self, name: str) -> np.ndarray:
        return self[name].reshape(-1)


# --------------------------------------------------------------------------
# random streams


def chain_generator(seed: int, chain: int) -> np.random.Generator:
    """Philox stream for one chain: key from the seed, counter offset by chain."""
    key = int(seed) % (1 << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(chain)]))


class _Streams:
    """Per-chain buffers of normal and uniform variates consumed in lockstep."""

    def __init__(self, gens):
        self.gens = gens
        self._z = np.empty((len(gens), 0))
        self._u = np.empty((len(gens), 0))
        self._iz = self._iu = 0

    def normals(self, *shape):
        d = int(np.prod(shape)) if shape else 1
        if self._iz + d > self._z.shape[1]:
            rest = self._z[:, self._iz:]
            new = np.stack([g.standard_normal(_CHUNK + d) for g in self.gens])
            self._z, self._iz = np.concatenate([rest, new], axis=1), 0
        out = self._z[:, self._iz:self._iz + d]
        self._iz += d
        return out.reshape((len(self.gens),) + shape)

    def log_uniforms(self, *shape):
        d = int(np.prod(shape)) if shape else 1
        if self._iu + d > self._u.shape[1]:
            rest = self._u[:, self._iu:]
            new = np.stack([np.log(g.random(_CHUNK + d)) for g in self.gens])
            self._u, self._iu = np.concatenate([rest, new], axis=1), 0
        out = self._u[:, self._iu:self._iu + d]
        self._iu += d
        return out.reshape((len(self.gens),) + shape)


# --------------------------------------------------------------------------
# adaptation


def _chol_small(cov):
    """Batched lower Cholesky factor for 1x1 or 2x2 covariance matrices."""
    p = cov.shape[-1]
    L = np.zeros_like(cov)
    a = np.maximum(cov[..., 0, 0], 1e-300)
    L[..., 0, 0] = np.sqrt(a)
    if p == 2:
        L[..., 1, 0] = cov[..., 1, 0] / L[..., 0, 0]
        rem = cov[..., 1, 1] - L[..., 1, 0] ** 2
        L[..., 1, 1] = np.sqrt(np.maximum(rem, 1e-12 * np.maximum(cov[..., 1, 1], 1e-300)))
    return L


class _Scalar:
    """Robbins-Monro tuned random-walk scale, one per chain (and per unit)."""

    target = SCALAR_TARGET

    def __init__(self, shape, scale):
        self.log_scale = np.full(shape, math.log(scale))
        self.accepted = np.zeros(shape)
        self.tried = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    _start = 0

    def record(self, acc, t, adapting):
        if adapting:
            self.log_scale += (acc - self.target) * (t - self._start + 1.0) ** -0.6
        else:
            self.accepted += acc
            self.tried += 1

    def snapshot(self):
        return self.scale.tolist()

    def rate(self):
        r = self.accepted / max(self.tried, 1)
        return r.reshape(r.shape[0], -1).mean(axis=1).tolist()


class _Vector(_Scalar):
    """Scale plus proposal shape learnt from the block's own draws.

    The shape is re-estimated at the end of doubling windows during
    adaptation and frozen afterwards.
    """

    target = VECTOR_TARGET

    def __init__(self, shape, init_sd):
        super().__init__(shape, 1.0)
        p = len(init_sd)
        self.p = p
        self.L = np.broadcast_to(np.diag(init_sd), tuple(shape) + (p, p)).copy()
        self._reset_window(0)
        self._sum = np.zeros(tuple(shape) + (p,))
        self._sq = np.zeros(tuple(shape) + (p, p))
        self._n = 0

    def _reset_window(self, t):
        self._end = max(2 * t, 100) + 100 if t else 100
        self._n = 0

    def step(self, z):
        return self.scale[..., None] * (self.L @ z[..., None])[..., 0]

    def observe(self, x, t):
        if self._n == 0:
            self._sum = np.zeros_like(x)
            self._sq = np.zeros(x.shape + (self.p,))
        self._sum += x
        self._sq += x[..., :, None] * x[..., None, :]
        self._n += 1
        if t + 1 >= self._end:
            if self._n >= 50:
                mean = self._sum / self._n
                cov = self._sq / self._n - mean[..., :, None] * mean[..., None, :]
                # units whose draws did not move keep their previous shape
                ok = np.all(np.diagonal(cov, axis1=-2, axis2=-1) > 0, axis=-1)
                self.L = np.where(ok[..., None, None], _chol_small(cov), self.L)
                self.log_scale = np.where(ok, math.log(2.38 / math.sqrt(self.p)), self.log_scale)
                self._start = t + 1
            self._reset_window(t + 1)

    def snapshot(self):
        return (self.scale[..., None, None] * self.L).tolist()


# The kernels below skip argument checks and rely on the errstate set in
# ``_Engine.run``: tau is always positive (log-scale proposals) and a rho of
# exactly +-1 yields a non-finite ratio, which ``_accept`` rejects.


def _accept(log_ratio, log_u):
    return np.isfinite(log_ratio) & (log_u < log_ratio)


def _atanh_jac(rho):
    return np.log1p(-rho * rho)


def _halfnormal(x, scale):
    return -0.5 * (x / scale) ** 2


def _re(dev, tau, rho):
    """Per-unit random-effects log density; dev (C, n, p), tau/rho (C,)."""
    tau = tau[:, None]
    if dev.shape[-1] == 1:
        return -0.5 * LOG2PI - np.log(tau) - 0.5 * (dev[..., 0] / tau) ** 2
    d1, d2 = dev[..., 0], dev[..., 1]
    if rho is None:
        return -LOG2PI - 2.0 * np.log(tau) - 0.5 * (d1 * d1 + d2 * d2) / (tau * tau)
    r = rho[:, None]
    om = 1.0 - r * r
    return (-LOG2PI - 2.0 * np.log(tau) - 0.5 * np.log(om)
            - 0.5 * (d1 * d1 - 2.0 * r * d1 * d2 + d2 * d2) / (tau * tau * om))


def _scatter(dev):
    """Sum of outer products of deviations over units, shape (C, p, p)."""
    return np.swapaxes(dev, -1, -2) @ dev


def _re_scatter(S, n, tau, rho):
    """Summed random-effects log density from the scatter matrix ``S``."""
    if S.shape[-1] == 1:
        return n * (-0.5 * LOG2PI - np.log(tau)) - 0.5 * S[:, 0, 0] / (tau * tau)
    r = np.zeros_like(tau) if rho is None else rho
    om = 1.0 - r * r
    quad = (S[:, 0, 0] - 2.0 * r * S[:, 0, 1] + S[:, 1, 1]) / (tau * tau * om)
    return n * (-LOG2PI - 2.0 * np.log(tau) - 0.5 * np.log(om)) - 0.5 * quad


# --------------------------------------------------------------------------


class _Engine:
    def __init__(self, model: DoseResponseModel, config: SamplerConfig, chain_ids):
        self.m = model
        self.cfg = config
        self.spec = model.spec
        self.chain_ids = list(chain_ids)
        self.C = len(self.chain_ids)
        gens = [chain_generator(config.seed, c) for c in self.chain_ids]
        self.s = self._initial_states(gens)
        self.rng = _Streams(gens)
        self._setup_blocks()

    # ------------------------------------------------------------------
    def _initial_states(self, gens) -> ParameterState:
        states = []
        for c, g in zip(self.chain_ids, gens):
            for _ in range(1000):
                st = self.m.initial_state(g, self.cfg.init)
                if np.isfinite(self.m.log_posterior(st)):
                    break
            else:
                raise InitializationError(f"chain {c}: no finite starting state after 1000 attempts")
            states.append(st)
        stacked = {}
        for f in dataclasses.fields(ParameterState):
            vals = [getattr(st, f.name) for st in states]
            stacked[f.name] = None if vals[0] is None else np.stack([np.asarray(v, dtype=float) for v in vals])
        return ParameterState(**stacked)

    def _setup_blocks(self):
        m, spec, C, p = self.m, self.spec, self.C, self.m.p
        scale = m.coefficient_scale()
        coef_sd = 0.1 / scale
        self.blocks: dict[str, _Scalar] = {}
        b = self.blocks
        if spec.coefficients == "random":
            if m.ns:
                b["beta"] = _Vector((C, m.ns), coef_sd * 0.2)
            b["B"] = _Vector((C,), coef_sd * (0.2 if m.ns else 100.0))
            if m.ns:
                b["translate"] = _Vector((C,), coef_sd * 0.2)
            if spec.clustered:
                b["Bc"] = _Vector((C, m.n_clusters), coef_sd * 0.2)
                b["translate_cluster"] = _Vector((C, m.n_clusters), coef_sd * 0.2)
                for name in ("tau_within", "tau_between"):
                    b[name] = _Scalar((C,), 0.5)
                    b["scale_" + name] = _Scalar((C,), 0.2)
                if spec.has_rho:
                    for name in ("rho_within", "rho_between"):
                        b[name] = _Scalar((C,), 0.5)
                        b["rotate_" + name] = _Scalar((C,), 0.2)
            else:
                b["tau"] = _Scalar((C,), 0.5)
                if m.ns:
                    b["scale_tau"] = _Scalar((C,), 0.2)
                if spec.has_rho:
                    b["rho"] = _Scalar((C,), 0.5)
                    if m.ns:
                        b["rotate_rho"] = _Scalar((C,), 0.2)
        else:
            b["B"] = _Vector((C,), coef_sd * 0.1)
        if m.has_u and m.ns:
            b["u"] = _Scalar((C, m.ns), 0.1)
        if spec.include_zero_dose_block:
            b["R0"] = _Scalar((C,), 0.1)
            b["sigma0"] = _Scalar((C,), 0.3)
        self._refresh_ll()

    def _refresh_ll(self):
        s = self.s
        if self.m.ns:
            with np.errstate(all="ignore"):
                self.ll = self.m.study_loglik(self.m.effective_beta(s), s.u)
        else:
            self.ll = np.zeros((self.C, 0))

    # ------------------------------------------------------------------
    # helpers

    def _prior_B(self, B):
        pr = self.spec.priors
        return normal_logpdf(B, pr.coef_mean, pr.coef_var).sum(axis=-1)

    def _rho_prior(self, rho):
        lo, hi = self.spec.priors.rho_bounds
        return uniform_logpdf(rho, lo, hi)

    def _study_means(self, s=None):
        s = s or self.s
        if self.spec.clustered:
            return np.take(s.Bc, self.m.cluster_index, axis=-2)
        return s.B[:, None, :]

    def _within(self):
        s = self.s
        if self.spec.clustered:
            return s.tau_within, (s.rho_within if self.spec.has_rho else None)
        return s.tau, (s.rho if self.spec.has_rho else None)

    def _ll(self, beta, u):
        return self.m.study_loglik(beta, u, checked=False)

    def _cluster_sum(self, per_study):
        return per_study @ self.m.membership

    # ------------------------------------------------------------------
    # block updates

    def _update_beta(self, t, adapting):
        blk, s = self.blocks["beta"], self.s
        prop = s.beta + blk.step(self.rng.normals(self.m.ns, self.m.p))
        tau, rho = self._within()
        mean = self._study_means()
        ll_new = self._ll(prop, s.u)
        lr = ll_new - self.ll + _re(prop - mean, tau, rho) - _re(s.beta - mean, tau, rho)
        acc = _accept(lr, self.rng.log_uniforms(self.m.ns))
        s.beta = np.where(acc[..., None], prop, s.beta)
        self.ll = np.where(acc, ll_new, self.ll)
        blk.record(acc, t, adapting)
        if adapting:
            blk.observe(s.beta, t)

    def _u_terms(self, u, ll):
        out = self.m.u_prior_terms(u)
        if ll is not None:
            out = out + ll
        if self.spec.include_zero_dose_block:
            out = out + self.m.zero_dose_terms(u, self.s.R0, self.s.sigma0)
        return out

    def _update_u(self, t, adapting):
        blk, s, m = self.blocks["u"], self.s, self.m
        prop = s.u + blk.scale * self.rng.normals(m.ns)
        if m.u_in_likelihood:
            ll_new = self._ll(m.effective_beta(s), prop)
            lr = self._u_terms(prop, ll_new) - self._u_terms(s.u, self.ll)
        else:
            ll_new = None
            lr = self._u_terms(prop, None) - self._u_terms(s.u, None)
        acc = _accept(lr, self.rng.log_uniforms(m.ns))
        s.u = np.where(acc, prop, s.u)
        if ll_new is not None:
            self.ll = np.where(acc, ll_new, self.ll)
        blk.record(acc, t, adapting)

    def _update_B(self, t, adapting):
        blk, s, m, spec = self.blocks["B"], self.s, self.m, self.spec
        prop = s.B + blk.step(self.rng.normals(m.p))
        lr = self._prior_B(prop) - self._prior_B(s.B)
        ll_new = None
        if spec.coefficients == "common":
            if m.ns:
                ll_new = self._ll(np.broadcast_to(prop[:, None, :], (self.C, m.ns, m.p)), s.u)
                lr = lr + ll_new.sum(-1) - self.ll.sum(-1)
        elif spec.clustered or m.ns:
            units = s.Bc if spec.clustered else s.beta
            tau, rho = self._level_params("between" if spec.clustered else "within")
            dev = units - s.B[:, None, :]
            S = _scatter(dev)
            eps = prop - s.B
            cross = dev.sum(axis=1)[:, :, None] * eps[:, None, :]
            S_new = S - cross - np.swapaxes(cross, -1, -2) + units.shape[1] * eps[:, :, None] * eps[:, None, :]
            n = units.shape[1]
            lr = lr + _re_scatter(S_new, n, tau, rho) - _re_scatter(S, n, tau, rho)
        acc = _accept(lr, self.rng.log_uniforms())
        s.B = np.where(acc[:, None], prop, s.B)
        if ll_new is not None:
            self.ll = np.where(acc[:, None], ll_new, self.ll)
        blk.record(acc, t, adapting)
        if adapting:
            blk.observe(s.B, t)

    def _update_Bc(self, t, adapting):
        blk, s, m, spec = self.blocks["Bc"], self.s, self.m, self.spec
        K = m.n_clusters
        prop = s.Bc + blk.step(self.rng.normals(K, m.p))
        tw, rw = self._within()
        rb = s.rho_between if spec.has_rho else None
        idx = m.cluster_index
        within_new = self._cluster_sum(_re(s.beta - np.take(prop, idx, axis=1), tw, rw))
        within_old = self._cluster_sum(_re(s.beta - np.take(s.Bc, idx, axis=1), tw, rw))
        lr = (within_new - within_old + _re(prop - s.B[:, None, :], s.tau_between, rb)
              - _re(s.Bc - s.B[:, None, :], s.tau_between, rb))
        acc = _accept(lr, self.rng.log_uniforms(K))
        s.Bc = np.where(acc[..., None], prop, s.Bc)
        blk.record(acc, t, adapting)
        if adapting:
            blk.observe(s.Bc, t)

    def _level_scatter(self, level):
        """Scatter matrix and unit count of the deviations at one level."""
        s = self.s
        if level == "between":
            return _scatter(s.Bc - s.B[:, None, :]), self.m.n_clusters
        return _scatter(s.beta - self._study_means()), self.m.ns

    def _level_params(self, level):
        s, has_rho = self.s, self.spec.has_rho
        if level == "between":
            return s.tau_between, (s.rho_between if has_rho else None)
        return self._within()

    def _tau_name(self, level):
        return {"tau": "tau", "within": "tau_within", "between": "tau_between"}[level]

    def _rho_name(self, level):
        return {"tau": "rho", "within": "rho_within", "between": "rho_between"}[level]

    def _update_tau(self, level, t, adapting):
        tn, rn = self._tau_name(level), self._rho_name(level)
        blk, s, pr = self.blocks[tn], self.s, self.spec.priors
        tau = getattr(s, tn)
        rho = getattr(s, rn) if self.spec.has_rho else None
        step = blk.scale * self.rng.normals()
        prop = tau * np.exp(step)
        S, n = self._level_scatter("between" if level == "between" else "within")
        lr = (_re_scatter(S, n, prop, rho) - _re_scatter(S, n, tau, rho)
              + _halfnormal(prop, pr.tau_scale) - _halfnormal(tau, pr.tau_scale) + step)
        acc = _accept(lr, self.rng.log_uniforms())
        setattr(s, tn, np.where(acc, prop, tau))
        blk.record(acc, t, adapting)

    def _update_rho(self, level, t, adapting):
        tn, rn = self._tau_name(level), self._rho_name(level)
        blk, s = self.blocks[rn], self.s
        tau, rho = getattr(s, tn), getattr(s, rn)
        prop = np.tanh(np.arctanh(rho) + blk.scale * self.rng.normals())
        S, n = self._level_scatter("between" if level == "between" else "within")
        lr = (_re_scatter(S, n, tau, prop) - _re_scatter(S, n, tau, rho)
              + self._rho_prior(prop) - self._rho_prior(rho) + _atanh_jac(prop) - _atanh_jac(rho))
        acc = _accept(lr, self.rng.log_uniforms())
        setattr(s, rn, np.where(acc, prop, rho))
        blk.record(acc, t, adapting)

    def _zero_normal_total(self, R0, sigma0):
        m = self.m
        terms = normal_logpdf(self.s.u, R0[:, None], (sigma0 * sigma0)[:, None])
        return np.where(m.zero_mask, terms, 0.0).sum(-1)

    def _update_R0(self, t, adapting):
        blk, s, pr = self.blocks["R0"], self.s, self.spec.priors
        prop = s.R0 + blk.scale * self.rng.normals()
        lr = (self._zero_normal_total(prop, s.sigma0) - self._zero_normal_total(s.R0, s.sigma0)
              + normal_logpdf(prop, 0.0, pr.baseline_var) - normal_logpdf(s.R0, 0.0, pr.baseline_var))
        acc = _accept(lr, self.rng.log_uniforms())
        s.R0 = np.where(acc, prop, s.R0)
        blk.record(acc, t, adapting)

    def _update_sigma0(self, t, adapting):
        blk, s, pr = self.blocks["sigma0"], self.s, self.spec.priors
        prop = s.sigma0 * np.exp(blk.scale * self.rng.normals())
        lr = (self._zero_normal_total(s.R0, prop) - self._zero_normal_total(s.R0, s.sigma0)
              + _halfnormal(prop, pr.tau0_scale) - _halfnormal(s.sigma0, pr.tau0_scale)
              + np.log(prop) - np.log(s.sigma0))
        acc = _accept(lr, self.rng.log_uniforms())
        s.sigma0 = np.where(acc, prop, s.sigma0)
        blk.record(acc, t, adapting)

    # ------------------------------------------------------------------
    # joint moves

    def _translate(self, t, adapting):
        """Shift B, every B^c and every beta_i by the same vector."""
        blk, s, m = self.blocks["translate"], self.s, self.m
        eps = blk.step(self.rng.normals(m.p))
        beta_new = s.beta + eps[:, None, :]
        ll_new = self._ll(beta_new, s.u)
        B_new = s.B + eps
        lr = ll_new.sum(-1) - self.ll.sum(-1) + self._prior_B(B_new) - self._prior_B(s.B)
        acc = _accept(lr, self.rng.log_uniforms())
        a1 = acc[:, None]
        s.B = np.where(a1, B_new, s.B)
        s.beta = np.where(a1[..., None], beta_new, s.beta)
        if self.spec.clustered:
            s.Bc = np.where(a1[..., None], s.Bc + eps[:, None, :], s.Bc)
        self.ll = np.where(a1, ll_new, self.ll)
        blk.record(acc, t, adapting)
        if adapting:
            blk.observe(s.B, t)

    def _translate_cluster(self, t, adapting):
        """Shift each B^c together with the coefficients of its studies."""
        blk, s, m, spec = self.blocks["translate_cluster"], self.s, self.m, self.spec
        K, idx = m.n_clusters, m.cluster_index
        eps = blk.step(self.rng.normals(K, m.p))
        Bc_new = s.Bc + eps
        beta_new = s.beta + np.take(eps, idx, axis=1)
        ll_new = self._ll(beta_new, s.u)
        rb = s.rho_between if spec.has_rho else None
        lr = (self._cluster_sum(ll_new - self.ll)
              + _re(Bc_new - s.B[:, None, :], s.tau_between, rb)
              - _re(s.Bc - s.B[:, None, :], s.tau_between, rb))
        acc = _accept(lr, self.rng.log_uniforms(K))
        acc_s = np.take(acc, idx, axis=1)
        s.Bc = np.where(acc[..., None], Bc_new, s.Bc)
        s.beta = np.where(acc_s[..., None], beta_new, s.beta)
        self.ll = np.where(acc_s, ll_new, self.ll)
        blk.record(acc, t, adapting)
        if adapting:
            blk.observe(s.Bc, t)

    def _deviation_move(self, level, kind, t, adapting):
        """Rescale (``kind="scale"``) or rotate (``"rotate"``) deviations at one
        level of the hierarchy together with tau or rho.

        In the coordinates (log tau or atanh rho, deviations) the map is a
        linear change of the deviations with determinant ``det(M)**n_units``;
        that Jacobian enters the acceptance ratio.
        """
        s, m, spec, pr = self.s, self.m, self.spec, self.spec.priors
        tn, rn = self._tau_name(level), self._rho_name(level)
        blk = self.blocks[("scale_" if kind == "scale" else "rotate_") + (tn if kind == "scale" else rn)]
        step = blk.scale * self.rng.normals()
        tau = getattr(s, tn)
        rho = getattr(s, rn) if spec.has_rho else None
        if kind == "scale":
            tau_new, rho_new = tau * np.exp(step), rho
            M = np.exp(step)[:, None, None] * np.eye(m.p)
            log_det = m.p * step
            lr = _halfnormal(tau_new, pr.tau_scale) - _halfnormal(tau, pr.tau_scale) + step
        else:
            tau_new, rho_new = tau, np.tanh(np.arctanh(rho) + step)
            c, c_new = np.sqrt(1 - rho * rho), np.sqrt(1 - rho_new * rho_new)
            M = np.zeros((self.C, 2, 2))
            M[:, 0, 0] = 1.0
            M[:, 1, 0] = rho_new - c_new * rho / c
            M[:, 1, 1] = c_new / c
            log_det = np.log(c_new / c)
            lr = (self._rho_prior(rho_new) - self._rho_prior(rho)
                  + _atanh_jac(rho_new) - _atanh_jac(rho))

        new = dataclasses.replace(s)
        if level == "between":
            dev = s.Bc - s.B[:, None, :]
            new.Bc = s.B[:, None, :] + (M[:, None] @ dev[..., None])[..., 0]
            new.beta = s.beta + np.take(new.Bc - s.Bc, m.cluster_index, axis=1)
            n_units = m.n_clusters
        else:
            mean = self._study_means()
            new.beta = mean + (M[:, None] @ (s.beta - mean)[..., None])[..., 0]
            n_units = m.ns
        setattr(new, tn, tau_new)
        if spec.has_rho:
            setattr(new, rn, rho_new)
        S, _ = self._level_scatter("between" if level == "between" else "within")
        S_new = M @ S @ np.swapaxes(M, -1, -2)
        lr = lr + n_units * log_det
        lr = lr + _re_scatter(S_new, n_units, tau_new, rho_new) - _re_scatter(S, n_units, tau, rho)
        ll_new = None
        if level == "between" or m.ns:
            ll_new = self._ll(new.beta, s.u)
            lr = lr + ll_new.sum(-1) - self.ll.sum(-1)
        acc = _accept(lr, self.rng.log_uniforms())
        a1 = acc[:, None]
        s.beta = np.where(a1[..., None], new.beta, s.beta)
        if level == "between":
            s.Bc = np.where(a1[..., None], new.Bc, s.Bc)
        setattr(s, tn, np.where(acc, tau_new, tau))
        if spec.has_rho:
            setattr(s, rn, np.where(acc, rho_new, rho))
        if ll_new is not None:
            self.ll = np.where(a1, ll_new, self.ll)
        blk.record(acc, t, adapting)

    # ------------------------------------------------------------------

    def sweep(self, t):
        adapting = t < self.cfg.adapt_window
        spec, m, b = self.spec, self.m, self.blocks
        if "beta" in b:
            self._update_beta(t, adapting)
        if "u" in b:
            self._update_u(t, adapting)
        self._update_B(t, adapting)
        if spec.coefficients == "random":
            levels = ("within", "between") if spec.clustered else ("tau",)
            if spec.clustered:
                self._update_Bc(t, adapting)
            for level in levels:
                self._update_tau(level, t, adapting)
                if spec.has_rho:
                    self._update_rho(level, t, adapting)
        if spec.include_zero_dose_block:
            self._update_R0(t, adapting)
            self._update_sigma0(t, adapting)
        if spec.coefficients == "random":
            if m.ns:
                self._translate(t, adapting)
            if spec.clustered:
                self._translate_cluster(t, adapting)
            for level in levels:
                if level == "between" or m.ns:
                    self._deviation_move(level, "scale", t, adapting)
                    if spec.has_rho:
                        self._deviation_move(level, "rotate", t, adapting)

    def run(self):
        cfg, m = self.cfg, self.m
        names = m.parameter_names(cfg.monitor_study)
        out = np.empty((self.C, cfg.kept, len(names)))
        frozen = None
        k = 0
        with np.errstate(all="ignore"):
            for t in range(cfg.iterations):
                if t == cfg.adapt_window:
                    frozen = {name: blk.snapshot() for name, blk in self.blocks.items()}
                self.sweep(t)
                if t >= cfg.burn_in and (t + 1 - cfg.burn_in) % cfg.thin == 0 and k < cfg.kept:
                    out[:, k, :] = m.flatten(self.s, cfg.monitor_study)
                    k += 1
        if frozen is None:
            frozen = {name: blk.snapshot() for name, blk in self.blocks.items()}
        final = {name: blk.snapshot() for name, blk in self.blocks.items()}
        acceptance = {name: blk.rate() for name, blk in self.blocks.items()}
        return names, out, acceptance, frozen, final


def _merge_chains(dicts, perm):
    return {k: [sum((d[k] for d in dicts), [])[i] for i in perm] for k in dicts[0]}


def _run_chains(spec, dataset, config, chain_ids, correction):
    model = DoseResponseModel(spec, dataset, correction)
    return _Engine(model, config, chain_ids).run()


def run(spec: ModelSpec, dataset: Dataset, config: SamplerConfig, workers: int = 1,
        correction: float = 0.5) -> PosteriorDraws:
    """Sample the posterior of ``spec`` given ``dataset``.

    With ``workers > 1`` the chains are split across processes; the result is
    identical to a single-process run because every chain owns its stream.
    """
    model = DoseResponseModel(spec, dataset, correction)
    chains = list(range(config.chains))
    if workers > 1 and config.chains > 1:
        groups = [chains[i::workers] for i in range(min(workers, config.chains))]
        with ProcessPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(_run_chains, *zip(*[(spec, dataset, config, g, correction) for g in groups])))
        perm = np.argsort([c for g in groups for c in g])
        names = parts[0][0]
        values = np.concatenate([p[1] for p in parts])[perm]
        acceptance, frozen, final = (_merge_chains([p[i] for p in parts], perm) for i in (2, 3, 4))
    else:
        names, values, acceptance, frozen, final = _Engine(model, config, chains).run()
    return PosteriorDraws(
        names=names,
        values=values,
        acceptance=acceptance,
        config=config,
        proposal_scales=frozen,
        final_proposal_scales=final,
    )


# --------------------------------------------------------------------------
# summaries and persistence


def summarize(draws: PosteriorDraws) -> dict[str, dict[str, float]]:
    """Posterior mean, SD and equal-tailed quantiles pooled over chains."""
    if draws.n_kept * draws.n_chains < 2:
        raise ValueError("need at least 2 kept draws to summarise")
    out = {}
    for j, name in enumerate(draws.names):
        v = draws.values[:, :, j].reshape(-1)
        q = np.quantile(v, [0.025, 0.5, 0.975])
        out[name] = {
            "mean": float(v.mean()),
            "sd": float(v.std(ddof=1)),
            "q2.5": float(q[0]),
            "q50": float(q[1]),
            "q97.5": float(q[2]),
        }
    return out


def write_draws_csv(draws: PosteriorDraws, path) -> None:
    C, K, P = draws.values.shape
    frame = pd.DataFrame({
        "chain": np.repeat(np.arange(C), K * P),
        "iteration": np.tile(np.repeat(draws.iterations, P), C),
        "parameter": np.tile(np.array(draws.names, dtype=object), C * K),
        "value": draws.values.reshape(-1),
    })
    frame.to_csv(path, index=False, float_format="%.17g")


class DrawsFormatError(ValueError):
    pass


def read_draws_csv(path) -> PosteriorDraws:
    frame = pd.read_csv(path, dtype={"parameter": str}, float_precision="round_trip")
    missing = {"chain", "iteration", "parameter", "value"} - set(frame.columns)
    if missing:
        raise DrawsFormatError(f"{path}: missing columns {sorted(missing)}")
    names = list(dict.fromkeys(frame["parameter"]))
    chains = np.sort(frame["chain"].unique())
    iters = np.sort(frame["iteration"].unique())
    wide = frame.pivot_table(index=["chain", "iteration"], columns="parameter", values="value", aggfunc="first")
    wide = wide.reindex(columns=names)
    expected = pd.MultiIndex.from_product([chains, iters])
    if len(wide) != len(expected) or wide.isna().any().any():
        raise DrawsFormatError(f"{path}: every chain needs every parameter at every iteration")
    wide = wide.reindex(expected)
    values = wide.to_numpy().reshape(len(chains), len(iters), len(names))
    return PosteriorDraws(names=names, values=values, iterations=iters)


SUMMARY_SCHEMA_VERSION = 1


def summary_document(method: str, parameters: dict, extra: dict | None = None) -> dict:
    doc = {"schema_version": SUMMARY_SCHEMA_VERSION, "method": method, "parameters": parameters}
    if extra:
        doc.update(extra)
    return doc


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")
