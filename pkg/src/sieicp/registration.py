"""ICP driver: nearest-neighbour matching alternated with IRLS refinement."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import sie
from .costs import (CostKind, WeightFunction, estimate_t_scale, weight_lp, weight_sie,
                    weight_t_dist, weight_truncated_l2)
from .histogram import EmptyHistogramError
from .geometry import (Correspondences, MatchedArrays, PointCloud, ResidualMatrix, ResidualMode,
                       RigidTransform, build_nn_index, match_nearest, transform_change)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    cost: WeightFunction = field(default_factory=WeightFunction)
    mode: ResidualMode = ResidualMode.POINT_TO_POINT
    max_matches: int = 2000
    irls_max_iters: int = 10
    icp_max_iters: int = 100
    translation_tol: float = 1e-6
    rotation_tol: float = 1e-6
    beta_stop_ratio: float = 0.01
    seed: int = 0
    sie: sie.SIEConfig = field(default_factory=sie.SIEConfig)
    beta_override: float | None = None
    refit_every_iteration: bool = True
    max_iters_per_level: int | None = 10
    resample_matches: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", ResidualMode.parse(self.mode))
        if self.translation_tol <= 0 or self.rotation_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.beta_stop_ratio < 1:
            raise ValueError("beta_stop_ratio must lie in (0, 1)")
        if self.max_matches < 1 or self.irls_max_iters < 1 or self.icp_max_iters < 1:
            raise ValueError("iteration and match limits must be at least 1")
        if self.max_iters_per_level is not None and self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be at least 1")


@dataclass
class TraceRow:
    iteration: int
    objective: float
    sigma: float
    beta: float
    inlier_prior: float
    k: float
    translation_change: float
    rotation_change: float
    inner_objectives: list[tuple[float, float]] = field(default_factory=list)


TRACE_FIELDS = ("iteration", "objective", "sigma", "beta", "inlier_prior", "k",
                "translation_change", "rotation_change")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_model: sie.InlierModel | None
    iterations: int
    converged: bool
    trace: list[TraceRow]

    def trace_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TRACE_FIELDS) + "\n")
        for row in self.trace:
            buf.write(",".join(f"{getattr(row, f):.9g}" for f in TRACE_FIELDS) + "\n")
        return buf.getvalue()


class WeightProvider:
    """Maps normalized residual values (n x m) to IRLS weights.

    ``update`` runs once per outer iteration with the freshly matched residuals.
    """

    def __init__(self, cost: WeightFunction):
        self.cost = cost

    def update(self, residuals: ResidualMatrix) -> None:
        pass

    def __call__(self, values: np.ndarray) -> np.ndarray:
        r = _row_norms(values)
        c = self.cost
        if c.kind is CostKind.TRUNCATED_L2:
            return weight_truncated_l2(r, c.threshold)
        return weight_lp(r, c.p, c.delta)

    def finished(self) -> bool:
        return True

    def on_converged(self) -> None:
        pass

    def status(self) -> tuple[float, float, float, float]:
        nan = float("nan")
        return nan, nan, nan, nan


def _row_norms(values: np.ndarray) -> np.ndarray:
    if values.shape[1] == 1:
        return np.abs(values[:, 0])
    return np.sqrt(np.einsum("ij,ij->i", values, values))


class TDistWeights(WeightProvider):
    sigma = 1.0

    def update(self, residuals):
        self.sigma = estimate_t_scale(residuals.row_norms(), self.cost.nu)

    def __call__(self, values):
        return weight_t_dist(_row_norms(values), self.sigma, self.cost.nu)

    def status(self):
        nan = float("nan")
        return self.sigma, nan, nan, nan


class SIEWeights(WeightProvider):
    """Inlier-probability weights with the halving regularizer schedule.

    Probabilities are evaluated once per outer iteration, on the residuals the
    model was fitted to, and held fixed through the IRLS solves that follow.
    The model describes the residuals at the transform it was fitted at; once
    a solve moves the transform, a peak away from zero would select a
    different set of rows.
    """

    def __init__(self, cost: WeightFunction, config: RegistrationConfig):
        super().__init__(cost)
        cfg = config.sie
        if cost.p != cfg.p:
            cfg = replace(cfg, p=cost.p)
        self.cfg = cfg
        self.config = config
        self.model: sie.InlierModel | None = None
        self.beta: np.ndarray | None = None
        self.k = cfg.k_initial
        self.halvings = 0
        self._stale = True
        self.prob: np.ndarray | None = None

    def update(self, residuals):
        if self.beta is None:
            self.beta = sie.init_beta(residuals, self.config.beta_override)
        if self.model is None or self._stale or self.config.refit_every_iteration:
            try:
                self.model = sie.fit_inlier_model(residuals, self.cfg, self.model, self.beta, self.k)
            except EmptyHistogramError:
                # The carried range lost all residuals; start the fit afresh.
                log.debug("carried histogram range is empty, refitting from scratch")
                self.model = sie.fit_inlier_model(residuals, self.cfg, None, self.beta, self.k)
            self._stale = False
        self.prob = self.model.probabilities(residuals.values)

    def __call__(self, values):
        model = self.model
        prob = self.prob
        if prob is None or prob.shape[0] != values.shape[0]:
            prob = model.probabilities(values)
        sigma = float(np.mean(model.sigma))
        return weight_sie(_row_norms(values), sigma, model.p, prob, self.cost.delta)

    @property
    def residual_independent(self) -> bool:
        return self.model is not None and self.model.p == 2

    def finished(self):
        return bool(np.all(self.beta < self.config.beta_stop_ratio * self.model.sigma))

    def on_converged(self):
        self.beta = sie.update_beta(self.beta)
        self.k = self.model.next_k
        self.halvings += 1
        self._stale = True

    def status(self):
        m = self.model
        return float(np.mean(m.sigma)), float(np.mean(self.beta)), m.inlier_prior, self.k


def make_weight_provider(config: RegistrationConfig) -> WeightProvider:
    kind = config.cost.kind
    if kind is CostKind.SIE:
        return SIEWeights(config.cost, config)
    if kind is CostKind.T_DIST:
        return TDistWeights(config.cost)
    return WeightProvider(config.cost)


def _irls(arrays: MatchedArrays, provider: Callable[[np.ndarray], np.ndarray], t0: RigidTransform,
          config: RegistrationConfig, raw: np.ndarray | None = None,
          trace: list | None = None) -> tuple[RigidTransform, np.ndarray]:
    """IRLS over pre-gathered matches; returns the transform and its raw residuals."""
    t = t0
    inv_scale = 1.0 / arrays.scale
    inv_scale2 = inv_scale ** 2
    raw = arrays.residuals(t) if raw is None else raw
    for _ in range(config.irls_max_iters):
        # Weights act on residuals divided by their noise scale.
        w = provider(raw * inv_scale[:, None]) * inv_scale2
        t_new = arrays.solve(w, initial=t)
        raw_new = arrays.residuals(t_new)
        if trace is not None:
            trace.append((_objective(raw, w), _objective(raw_new, w)))
        dt, dr = transform_change(t, t_new)
        t, raw = t_new, raw_new
        if dt < config.translation_tol and dr < config.rotation_tol:
            break
        if getattr(provider, "residual_independent", False):
            break  # a second solve with identical weights would repeat the first
    return t, raw


def _objective(raw: np.ndarray, w: np.ndarray) -> float:
    return float(w @ np.einsum("ij,ij->i", raw, raw))


def irls_refine(
    matches: Correspondences,
    source: PointCloud,
    target: PointCloud,
    weight_provider: Callable[[np.ndarray], np.ndarray],
    t0: RigidTransform,
    config: RegistrationConfig = RegistrationConfig(),
    trace: list | None = None,
) -> RigidTransform:
    """Re-weight and re-solve with the correspondences fixed.

    ``weight_provider`` maps normalized residual values (n x m) to weights.
    Each solve holds its weights constant; ``trace`` (if given) receives the
    weighted objective before and after every solve.
    """
    if len(matches) == 0:
        raise ValueError("no correspondences to refine")
    arrays = MatchedArrays.gather(matches, source, target, config.mode)
    return _irls(arrays, weight_provider, t0, config, trace=trace)[0]


def register(
    source: PointCloud,
    target: PointCloud,
    t0: RigidTransform | None = None,
    config: RegistrationConfig = RegistrationConfig(),
    matches: Correspondences | None = None,
) -> RegistrationResult:
    """Estimate the transform taking ``source`` onto ``target``.

    With ``matches`` given the correspondences are fixed and no
    nearest-neighbour search happens. SIE halves its regularizer each time the
    transform settles and stops once it is negligible next to the fitted noise;
    the other costs stop as soon as the transform settles.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("point clouds must be non-empty")
    t = t0 or RigidTransform.identity()
    index = build_nn_index(target) if matches is None else None
    rng = np.random.default_rng(config.seed) if config.resample_matches else None
    fixed = None
    if matches is not None:
        if len(matches) == 0:
            raise ValueError("empty match set")
        fixed = MatchedArrays.gather(matches, source, target, config.mode)
    provider = make_weight_provider(config)
    trace: list[TraceRow] = []
    converged = False
    level_iters = 0
    raw = None
    it = 0
    for it in range(1, config.icp_max_iters + 1):
        if fixed is None:
            # By default the same seed re-matches one fixed source subset every
            # iteration, so the transform can settle instead of jittering with
            # the sample.
            m = match_nearest(source, t, index, config.max_matches,
                              config.seed if rng is None else rng)
            if len(m) == 0:
                raise ValueError("empty match set")
            arrays = MatchedArrays.gather(m, source, target, config.mode)
            raw = arrays.residuals(t)
        else:
            arrays = fixed
            raw = arrays.residuals(t) if raw is None else raw
        provider.update(ResidualMatrix(raw / arrays.scale[:, None], config.mode))
        inner: list[tuple[float, float]] = []
        t_new, raw = _irls(arrays, provider, t, config, raw, inner)
        dt, dr = transform_change(t, t_new)
        t = t_new
        sigma, beta, prior, k = provider.status()
        trace.append(TraceRow(it, inner[-1][1], sigma, beta, prior, k, dt, dr, inner))
        level_iters += 1
        settled = dt < config.translation_tol and dr < config.rotation_tol
        if not settled and config.max_iters_per_level is not None:
            settled = level_iters >= config.max_iters_per_level
        if settled:
            if provider.finished():
                converged = True
                break
            provider.on_converged()
            level_iters = 0
    log.debug("registration stopped after %d iterations (converged=%s)", it, converged)
    model = provider.model if isinstance(provider, SIEWeights) else None
    return RegistrationResult(t, model, it, converged, trace)
