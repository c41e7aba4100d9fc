"""Dose transformations: linear, quadratic and 3-knot restricted cubic splines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("linear", "quadratic", "rcs3")


class KnotError(ValueError):
    pass


@dataclass(frozen=True)
class Transform:
    """A dose transformation ``f = (f_1, ..., f_p)``.

    ``rcs3`` uses the identity as ``f_1`` and the restricted cubic spline
    term as ``f_2``; the spline term is divided by ``(t3 - t1)**2`` so that it
    lives on the dose scale.
    """

    kind: str = "rcs3"
    knots: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {KINDS}")
        knots = tuple(float(k) for k in self.knots)
        if self.kind == "rcs3":
            if len(knots) != 3:
                raise KnotError(f"rcs3 needs exactly 3 knots, got {len(knots)}")
            if not (knots[0] < knots[1] < knots[2]):
                raise KnotError(f"knots must be strictly increasing, got {knots}")
        elif knots:
            raise KnotError(f"{self.kind} transform takes no knots")
        object.__setattr__(self, "knots", knots)

    @property
    def p(self) -> int:
        return 1 if self.kind == "linear" else 2

    def basis(self, x) -> np.ndarray:
        return basis(x, self)

    def contrast(self, x, x0) -> np.ndarray:
        return contrast(x, x0, self)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        return cls(d.get("kind", "rcs3"), tuple(d.get("knots", ())))


def percentile(values, q) -> np.ndarray:
    """Type-7 percentiles: linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=float))
    h = (v.size - 1) * np.asarray(q, dtype=float) / 100.0
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, v.size - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def place_knots(doses, percentiles=(25.0, 50.0, 75.0)) -> tuple[float, float, float]:
    """Knots at percentiles of the pooled dose distribution."""
    doses = np.asarray(doses, dtype=float).ravel()
    q = np.asarray(percentiles, dtype=float)
    if q.size != 3 or np.any(q <= 0) or np.any(q >= 100) or np.any(np.diff(q) <= 0):
        raise KnotError(f"need 3 strictly increasing percentiles in (0, 100), got {tuple(q)}")
    if np.unique(doses).size < 3:
        raise KnotError("need at least 3 distinct dose values to place 3 knots")
    knots = percentile(doses, q)
    if np.any(np.diff(knots) <= 0):
        raise KnotError(f"coincident knots {tuple(knots)}; supply explicit knots")
    return tuple(float(k) for k in knots)


def _rcs_term(x: np.ndarray, t1: float, t2: float, t3: float) -> np.ndarray:
    def cube(u):
        return np.maximum(u, 0.0) ** 3

    return (
        cube(x - t1)
        - cube(x - t2) * (t3 - t1) / (t3 - t2)
        + cube(x - t3) * (t2 - t1) / (t3 - t2)
    ) / (t3 - t1) ** 2


def basis(x, transform: Transform) -> np.ndarray:
    """Transformed doses, shape ``x.shape + (p,)``."""
    x = np.asarray(x, dtype=float)
    if transform.kind == "linear":
        return x[..., None]
    if transform.kind == "quadratic":
        return np.stack([x, x * x], axis=-1)
    return np.stack([x, _rcs_term(x, *transform.knots)], axis=-1)


def contrast(x, x0, transform: Transform) -> np.ndarray:
    """``f(x) - f(x0)`` componentwise."""
    return basis(x, transform) - basis(x0, transform)
