import dataclasses
import math

import numpy as np
import pytest

from conftest import small_dataset
from drma.data import EffectTable
from drma.onestage import (
    OneStageFit,
    RankError,
    UnderidentifiedWarning,
    confint_wald,
    fit_onestage,
    profile_loglik,
)
from drma.splines import Transform, contrast

T = Transform("rcs3", (2, 5, 8))
LIN = Transform("linear")


def tables(ns=12, seed=0, arms=3):
    return small_dataset(ns=ns, seed=seed, arms=arms).effect_tables()


def gls_oracle(tabs, transform):
    """Stacked GLS with a dense block-diagonal weight matrix."""
    Y = np.concatenate([t.effects for t in tabs])
    Z = np.vstack([contrast(t.doses, t.reference_dose, transform) for t in tabs])
    n = Y.size
    S = np.zeros((n, n))
    k = 0
    for t in tabs:
        S[k:k + t.size, k:k + t.size] = t.covariance
        k += t.size
    W = np.linalg.inv(S)
    cov = np.linalg.inv(Z.T @ W @ Z)
    return cov @ Z.T @ W @ Y, cov


def test_fixed_effect_fit_equals_gls_oracle():
    tabs = tables()
    fit = fit_onestage(tabs, T, heterogeneity=False)
    B, cov = gls_oracle(tabs, T)
    np.testing.assert_allclose(fit.B_hat, B, rtol=1e-10)
    np.testing.assert_allclose(fit.se, np.sqrt(np.diag(cov)), rtol=1e-10)
    assert list(fit.tau_hat) == [0.0, 0.0]


def test_zero_heterogeneity_profile_equals_gls():
    tabs = tables(seed=3)
    B, cov = gls_oracle(tabs, T)
    from drma.onestage import _Problem

    b, c, _ = _Problem(tabs, T).gls(np.zeros(2), 0.0)
    np.testing.assert_allclose(b, B, rtol=1e-10)
    np.testing.assert_allclose(c, cov, rtol=1e-10)


def test_single_study_saturated():
    t = EffectTable("a", [0.4], [[0.04]], [2.0], 0.0)
    fit = fit_onestage([t], LIN)
    assert fit.B_hat[0] == pytest.approx(0.2, rel=1e-12)
    assert fit.tau_hat[0] == 0.0
    assert fit.boundary


def test_loglik_matches_dense_mvn():
    from scipy import stats

    tabs = tables(ns=5, seed=2)
    tau, rho = np.array([0.05, 0.08]), -0.3
    Psi = np.array([[tau[0] ** 2, rho * tau[0] * tau[1]], [rho * tau[0] * tau[1], tau[1] ** 2]])
    fit_ll = profile_loglik(tabs, T, tau, rho)
    # profile at these variance parameters: B by GLS, then the MVN density
    Y = np.concatenate([t.effects for t in tabs])
    Z = np.vstack([contrast(t.doses, t.reference_dose, T) for t in tabs])
    V = np.zeros((Y.size, Y.size))
    k = 0
    for t in tabs:
        Zi = contrast(t.doses, t.reference_dose, T)
        V[k:k + t.size, k:k + t.size] = t.covariance + Zi @ Psi @ Zi.T
        k += t.size
    W = np.linalg.inv(V)
    B = np.linalg.solve(Z.T @ W @ Z, Z.T @ W @ Y)
    assert fit_ll == pytest.approx(stats.multivariate_normal(Z @ B, V).logpdf(Y), rel=1e-10)


def test_reorder_invariance():
    tabs = tables(ns=15, seed=4)
    a = fit_onestage(tabs, T)
    b = fit_onestage(tabs[::-1], T)
    np.testing.assert_allclose(a.B_hat, b.B_hat, rtol=1e-6, atol=1e-9)
    assert a.loglik == pytest.approx(b.loglik, rel=1e-9)


def test_scale_equivariance():
    tabs = tables(ns=10, seed=5)
    kappa = 3.7
    scaled = [dataclasses.replace(t, covariance=kappa * t.covariance) for t in tabs]
    J = sum(t.size for t in tabs)
    tau, rho = np.array([0.04, 0.02]), 0.4
    base = profile_loglik(tabs, T, tau, rho)
    other = profile_loglik(scaled, T, tau * math.sqrt(kappa), rho)
    from drma.onestage import _Problem

    b0, _, _ = _Problem(tabs, T).gls(tau, rho)
    b1, _, _ = _Problem(scaled, T).gls(tau * math.sqrt(kappa), rho)
    np.testing.assert_allclose(b1, b0, rtol=1e-9)
    # log det gains J log(kappa); the GLS quadratic form shrinks by 1 / kappa
    q = -2.0 * base - J * math.log(2 * math.pi) - logdet_V(tabs, tau, rho)
    assert other - base == pytest.approx(-0.5 * J * math.log(kappa) - 0.5 * q * (1 / kappa - 1), rel=1e-9)


def logdet_V(tabs, tau, rho):
    Psi = np.array([[tau[0] ** 2, rho * tau[0] * tau[1]], [rho * tau[0] * tau[1], tau[1] ** 2]])
    total = 0.0
    for t in tabs:
        Zi = contrast(t.doses, t.reference_dose, T)
        total += np.linalg.slogdet(t.covariance + Zi @ Psi @ Zi.T)[1]
    return total


@pytest.mark.parametrize("seed", range(4))
def test_restart_consistency(seed):
    tabs = tables(ns=20, seed=seed)
    fit = fit_onestage(tabs, T)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        start = [(rng.uniform(0.001, 0.5, 2), rng.uniform(-0.9, 0.9))]
        other = fit_onestage(tabs, T, starts=start)
        assert fit.loglik >= other.loglik - 1e-7


def test_bounds_and_to_dict():
    fit = fit_onestage(tables(ns=10, seed=7), T)
    assert np.all(fit.tau_hat >= 0) and -1 <= fit.rho_hat <= 1
    d = fit.to_dict()
    assert set(d) >= {"B_hat", "se", "tau_hat", "rho_hat", "loglik", "converged", "iterations", "boundary"}
    assert d["n_studies"] == 10


def test_rank_error():
    # every dose below the first knot: the spline column is identically zero
    tabs = [EffectTable(f"s{i}", [0.1, 0.2], np.eye(2) * 0.01, [1.0, 2.0], 0.0) for i in range(3)]
    with pytest.raises(RankError):
        fit_onestage(tabs, Transform("rcs3", (5, 10, 20)))


def test_underidentified_studies():
    tabs = tables(ns=8, seed=8, arms=2)
    with pytest.warns(UnderidentifiedWarning):
        fit_onestage(tabs, T)
    with pytest.raises(RankError):
        fit_onestage(tabs, T, drop_underidentified=True)
    mixed = tables(ns=4, seed=9, arms=3) + tables(ns=4, seed=10, arms=2)
    mixed = [dataclasses.replace(t, study_id=f"m{i}") for i, t in enumerate(mixed)]
    assert fit_onestage(mixed, T, drop_underidentified=True).n_studies == 4
    assert fit_onestage(mixed, T).n_studies == 8


def test_empty_input():
    with pytest.raises(ValueError):
        fit_onestage([], T)


def fake_fit(B, se, converged=True):
    B, se = np.atleast_1d(B).astype(float), np.atleast_1d(se).astype(float)
    return OneStageFit(B, se, np.zeros_like(B), 0.0, 0.0, converged, 0)


def test_confint_wald():
    ci = confint_wald(fake_fit(0.2, 0.05))
    np.testing.assert_allclose(ci, [[0.102, 0.298]], atol=5e-4)
    np.testing.assert_allclose(ci, [[0.2 - 1.959963984540054 * 0.05, 0.2 + 1.959963984540054 * 0.05]], rtol=1e-12)
    np.testing.assert_array_equal(confint_wald(fake_fit(0.3, 0.0)), [[0.3, 0.3]])
    for level in (0.0, 1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            confint_wald(fake_fit(0.2, 0.05), level)


def test_confint_requires_convergence():
    fit = fake_fit(0.2, 0.05, converged=False)
    with pytest.raises(ValueError):
        confint_wald(fit)
    assert confint_wald(fit, allow_unconverged=True).shape == (1, 2)


def test_iteration_cap_reports_unconverged():
    fit = fit_onestage(tables(ns=10, seed=11), T, maxiter=2)
    assert not fit.converged
    assert np.all(np.isfinite(fit.B_hat))
