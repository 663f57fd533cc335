"""IRLS weight functions: SIE and the robust baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_DELTA = 1e-9
DEFAULT_NU = 5.0
MIN_T_SCALE = 1e-12


class CostKind(str, enum.Enum):
    SIE = "sie"
    TRUNCATED_L2 = "truncated_l2"
    LP = "lp"
    T_DIST = "t_dist"

    @classmethod
    def parse(cls, s) -> "CostKind":
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("-", "_")
        return {"trunc_l2": cls.TRUNCATED_L2, "tdist": cls.T_DIST}.get(key) or cls(key)


@dataclass(frozen=True)
class WeightFunction:
    """Cost choice with its parameters.

    ``threshold`` is used by truncated L2, ``p`` and ``delta`` by Lp and SIE,
    ``nu`` by the Student-t cost. For SIE, ``p=None`` means "estimate p".
    """

    kind: CostKind = CostKind.SIE
    threshold: float = float("inf")
    p: float | None = 2.0
    delta: float = DEFAULT_DELTA
    nu: float = DEFAULT_NU

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind.parse(self.kind))
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.p is not None and not self.p > 0:
            raise ValueError("p must be positive")
        if self.p is None and self.kind is not CostKind.SIE:
            raise ValueError("only the SIE cost can estimate p")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @property
    def name(self) -> str:
        if self.kind is CostKind.LP:
            return f"l{self.p:g}"
        if self.kind is CostKind.SIE and self.p != 2.0:
            return "sie-est-p" if self.p is None else f"sie-l{self.p:g}"
        return self.kind.value.replace("_", "-")


def weight_truncated_l2(r_norm, threshold: float):
    r = np.asarray(r_norm, dtype=np.float64)
    return np.where(r <= threshold, 1.0, 0.0)


def weight_lp(r_norm, p: float, delta: float = DEFAULT_DELTA):
    r = np.asarray(r_norm, dtype=np.float64)
    return np.maximum(r, delta) ** (p - 2.0)


def estimate_t_scale(residual_norms, nu: float = DEFAULT_NU, rtol: float = 1e-6, max_iter: int = 100) -> float:
    """Student-t scale by fixed-point iteration, started from the RMS residual.

    sigma^2 <- mean(r^2 (nu + 1) / (nu + r^2 / sigma^2))
    """
    r2 = np.asarray(residual_norms, dtype=np.float64).reshape(-1) ** 2
    if r2.shape[0] == 0:
        raise ValueError("no residuals")
    var = float(np.mean(r2))
    if var <= 0:
        return MIN_T_SCALE
    for _ in range(max_iter):
        new = float(np.mean(r2 * (nu + 1.0) / (nu + r2 / var)))
        if new <= 0:
            return MIN_T_SCALE
        done = abs(np.sqrt(new) - np.sqrt(var)) <= rtol * np.sqrt(var)
        var = new
        if done:
            break
    return max(float(np.sqrt(var)), MIN_T_SCALE)


def weight_t_dist(r_norm, sigma: float, nu: float = DEFAULT_NU):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.asarray(r_norm, dtype=np.float64)
    return (nu + 1.0) / (nu + (r / sigma) ** 2)


def weight_sie(r_norm, sigma: float, p: float, inlier_prob, delta: float = DEFAULT_DELTA):
    """sigma^-p * max(|r|, delta)^(p - 2) * P(inlier | r)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.asarray(r_norm, dtype=np.float64)
    prob = np.asarray(inlier_prob, dtype=np.float64)
    if p == 2:
        return sigma ** -2.0 * prob * np.ones_like(r)
    return sigma ** -p * np.maximum(r, delta) ** (p - 2.0) * prob
