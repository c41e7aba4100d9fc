"""Convergence diagnostics for multi-chain MCMC output."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .sampler import PosteriorDraws


class DiagnosticError(ValueError):
    pass


def gelman_rubin(chains) -> float:
    """Square root of the potential scale reduction factor.

    ``chains`` has shape (m, n): m chains of n kept draws. Returns
    ``sqrt(V / W)`` with ``V = (n - 1) / n * W + B / n``, where ``W`` is the
    mean within-chain variance and ``B / n`` the variance of chain means.
    Identical constant chains give 1; constant but different chains give inf.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise DiagnosticError("need at least 2 chains with 10 draws each")
    m, n = x.shape
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    V = (n - 1) / n * W + B / n
    return float(np.sqrt(V / W))


def _batch_means_variance(x: np.ndarray) -> float:
    """Spectral density at frequency zero via floor(sqrt(n)) non-overlapping batches."""
    n = x.size
    b = int(np.floor(np.sqrt(n)))
    size = n // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(size * means.var(ddof=1))


def geweke(chain, first_frac: float = 0.1, last_frac: float = 0.5) -> float:
    """Geweke z-score comparing the early and late parts of one chain."""
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise DiagnosticError("Geweke diagnostic needs at least 100 draws")
    if not (0 < first_frac < 1 and 0 < last_frac < 1 and first_frac + last_frac <= 1):
        raise DiagnosticError("invalid segment fractions")
    a = x[: int(np.floor(first_frac * n))]
    b = x[n - int(np.floor(last_frac * n)):]
    var = _batch_means_variance(a) / a.size + _batch_means_variance(b) / b.size
    if not var > 0:
        raise DiagnosticError("zero spectral variance; Geweke z is undefined")
    return float((a.mean() - b.mean()) / np.sqrt(var))


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] == 0:
        return np.ones(n)
    return acov / acov[0]


def effective_sample_size(chain) -> float:
    """ESS of one chain with Geyer's initial positive sequence truncation.

    Capped at the chain length; a constant chain has ESS equal to its length.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise DiagnosticError("ESS needs at least 10 draws")
    if np.all(x == x[0]):
        return float(n)
    rho = autocorrelation(x)
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0)
    return float(n / tau)


@dataclass
class ParameterDiagnostics:
    gelman_rubin: float | None
    geweke_z: list[float | None]
    ess: float
    rhat_pass: bool
    geweke_pass: bool


@dataclass
class DiagnosticsReport:
    rhat_threshold: float
    geweke_threshold: float
    parameters: dict[str, ParameterDiagnostics] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(p.rhat_pass for p in self.parameters.values())

    def to_dict(self) -> dict:
        return {
            "rhat_threshold": self.rhat_threshold,
            "geweke_threshold": self.geweke_threshold,
            "converged": self.converged,
            "parameters": {
                name: {
                    "gelman_rubin": d.gelman_rubin,
                    "geweke_z": d.geweke_z,
                    "ess": d.ess,
                    "flags": {
                        "gelman_rubin": "pass" if d.rhat_pass else "fail",
                        "geweke": "pass" if d.geweke_pass else "fail",
                    },
                }
                for name, d in self.parameters.items()
            },
        }


def diagnose(draws: PosteriorDraws, rhat_threshold: float = 1.05, geweke_threshold: float = 3.0,
             parameters=None) -> DiagnosticsReport:
    report = DiagnosticsReport(rhat_threshold, geweke_threshold)
    for name in parameters or draws.names:
        x = draws[name]
        rhat = gelman_rubin(x) if x.shape[0] >= 2 else None
        zs = []
        for chain in x:
            try:
                zs.append(geweke(chain))
            except DiagnosticError:
                zs.append(None)
        ess = float(sum(effective_sample_size(chain) for chain in x))
        report.parameters[name] = ParameterDiagnostics(
            gelman_rubin=rhat,
            geweke_z=zs,
            ess=ess,
            rhat_pass=rhat is None or rhat < rhat_threshold,
            geweke_pass=all(z is None or abs(z) < geweke_threshold for z in zs),
        )
    return report


def export_trace_histogram(draws: PosteriorDraws, parameter: str, bins: int = 30):
    """Plot-ready tables: long-format trace and fixed-bin histogram counts."""
    if parameter not in draws.names:
        raise KeyError(f"unknown parameter {parameter!r}")
    x = draws[parameter]
    C, K = x.shape
    trace = pd.DataFrame({
        "chain": np.repeat(np.arange(C), K),
        "iteration": np.tile(draws.iterations, C),
        "value": x.reshape(-1),
    })
    counts, edges = np.histogram(x.reshape(-1), bins=bins)
    hist = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})
    return trace, hist
