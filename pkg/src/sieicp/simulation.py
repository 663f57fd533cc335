"""Synthetic correspondence benchmark for comparing robust costs."""

from __future__ import annotations

import enum
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .costs import CostKind, WeightFunction
from .geometry import (Correspondences, DegenerateGeometryError, PointCloud, RigidTransform,
                       solve_weighted_transform)
from .registration import RegistrationConfig, register
from .sie import SIEConfig

log = logging.getLogger(__name__)

THREADS_ENV = "SIEICP_THREADS"
CUBE_CENTER = np.array([0.5, 0.5, 0.5])
CASES = {"easy": (1000, 100), "medium": (1000, 1000), "hard": (1000, 10000)}
BASELINES = ("trunc-l2", "l1", "l0.1", "t-dist")
ALL_COSTS = ("sie",) + BASELINES
P_VARIANTS = ("sie-l1", "sie-est-p", "sie-l2")
CSV_HEADER = "cost,k,n,axis,magnitude,failure_ratio,mean_error,count"


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


class Metric(str, enum.Enum):
    RMS = "rms"
    MAE = "mae"


class Axis(str, enum.Enum):
    TRANSLATION = "translation"
    ROTATION = "rotation"


@dataclass(frozen=True, eq=False)
class Instance:
    A: PointCloud
    B: PointCloud
    inlier_mask: np.ndarray
    sigma: float
    noise_kind: NoiseKind
    seed: int

    def __post_init__(self):
        mask = np.asarray(self.inlier_mask, dtype=bool)
        if len(self.A) != len(self.B) or mask.shape != (len(self.A),):
            raise ValueError("A, B and inlier_mask must have equal length")
        mask.setflags(write=False)
        object.__setattr__(self, "inlier_mask", mask)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))

    @property
    def n(self) -> int:
        return len(self.A) - self.k


def generate_instance(k: int, n: int, sigma: float = 0.01,
                      noise_kind: NoiseKind | str = NoiseKind.GAUSSIAN, seed: int = 0) -> Instance:
    """k noisy inlier pairs followed by n outlier pairs.

    Inlier B points are A plus per-axis noise with standard deviation sigma
    (Laplace scale sigma/sqrt(2) for Laplacian noise). Outlier B points are
    A + Uniform[-1, 1]^3.
    """
    if k < 0 or n < 0:
        raise ValueError("k and n must be non-negative")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kind = NoiseKind(noise_kind)
    rng = np.random.default_rng(seed)
    a_in = rng.uniform(0.0, 1.0, (k, 3))
    if kind is NoiseKind.GAUSSIAN:
        noise = rng.normal(0.0, sigma, (k, 3))
    else:
        noise = rng.laplace(0.0, sigma / math.sqrt(2.0), (k, 3))
    a_out = rng.uniform(0.0, 1.0, (n, 3))
    b_out = a_out + rng.uniform(-1.0, 1.0, (n, 3))
    A = PointCloud(np.vstack([a_in, a_out]))
    B = PointCloud(np.vstack([a_in + noise, b_out]))
    mask = np.concatenate([np.ones(k, bool), np.zeros(n, bool)])
    return Instance(A, B, mask, float(sigma), kind, int(seed))


def apply_initial_guess(inst: Instance, t0: RigidTransform) -> Instance:
    """Move A's inliers by t0; outliers stay put so they cannot help the estimate."""
    pts = inst.A.points.copy()
    m = inst.inlier_mask
    pts[m] = t0.apply(pts[m])
    return replace(inst, A=PointCloud(pts))


def guess_transform(axis: Axis | str, magnitude: float) -> RigidTransform:
    """x-translation, or rotation about the x axis through the unit-cube center."""
    if Axis(axis) is Axis.TRANSLATION:
        return RigidTransform(np.eye(3), np.array([magnitude, 0.0, 0.0]))
    R = Rotation.from_rotvec([magnitude, 0.0, 0.0]).as_matrix()
    return RigidTransform(R, CUBE_CENTER - R @ CUBE_CENTER)


def _inlier_residuals(t: RigidTransform, inst: Instance) -> np.ndarray:
    m = inst.inlier_mask
    return t.apply(inst.A.points[m]) - inst.B.points[m]


def t_mle(inst: Instance, metric: Metric | str = Metric.RMS, tol: float = 1e-13,
          max_iter: int = 500) -> RigidTransform:
    """Transform minimizing the error metric over the true inliers.

    For rms this is the least-squares fit. For mae it is the minimizer of the
    summed residual norms, found by IRLS started from the least-squares fit.
    """
    m = inst.inlier_mask
    src, dst = inst.A.points[m], inst.B.points[m]
    if src.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 inliers")
    matches = Correspondences.identity(src.shape[0])
    a, b = PointCloud(src), PointCloud(dst)
    t = solve_weighted_transform(matches, a, b, np.ones(src.shape[0]))
    if Metric(metric) is Metric.RMS:
        return t
    best = _mae(t.apply(src) - dst)
    for _ in range(max_iter):
        r = np.linalg.norm(t.apply(src) - dst, axis=1)
        t_new = solve_weighted_transform(matches, a, b, 1.0 / np.maximum(r, 1e-12), initial=t)
        val = _mae(t_new.apply(src) - dst)
        if val > best:
            break
        done = best - val <= tol * max(best, 1e-300)
        t, best = t_new, val
        if done:
            break
    return t


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def _mae(r: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(r, axis=1)))


def metric_value(r: np.ndarray, metric: Metric | str) -> float:
    return _rms(r) if Metric(metric) is Metric.RMS else _mae(r)


def test_error(t_est: RigidTransform, inst: Instance, metric: Metric | str = Metric.RMS,
               reference: RigidTransform | None = None) -> float:
    """metric(inlier residuals at t_est) - metric(inlier residuals at T_MLE)."""
    ref = t_mle(inst, metric) if reference is None else reference
    return metric_value(_inlier_residuals(t_est, inst), metric) - metric_value(
        _inlier_residuals(ref, inst), metric)


test_error.__test__ = False  # keep pytest from collecting it


def is_failure(error: float, sigma: float) -> bool:
    return bool(error > sigma)


def cost_from_name(name: str, sigma: float = 0.01) -> WeightFunction:
    """Benchmark cost names: sie, sie-l1, sie-l2, sie-est-p, trunc-l2, l<p>, t-dist."""
    key = name.strip().lower()
    if key in ("sie", "sie-l2"):
        return WeightFunction(CostKind.SIE, p=2.0)
    if key == "sie-est-p":
        return WeightFunction(CostKind.SIE, p=None)
    if key.startswith("sie-l"):
        return WeightFunction(CostKind.SIE, p=float(key[5:]))
    if key in ("trunc-l2", "truncated-l2"):
        return WeightFunction(CostKind.TRUNCATED_L2, threshold=3.0 * sigma)
    if key in ("t-dist", "tdist"):
        return WeightFunction(CostKind.T_DIST)
    if key.startswith("l"):
        try:
            return WeightFunction(CostKind.LP, p=float(key[1:]))
        except ValueError:
            pass
    raise ValueError(f"unknown cost {name!r}")


def expand_costs(names: Iterable[str]) -> list[str]:
    out: list[str] = []
    for name in names:
        group = {"all": ALL_COSTS, "p-variants": P_VARIANTS}.get(name.strip().lower(), (name.strip(),))
        for c in group:
            cost_from_name(c)
            if c not in out:
                out.append(c)
    return out


def parse_cases(text: str) -> list[tuple[int, int]]:
    """Comma-separated case names or k:n pairs, e.g. ``easy,1000:500``."""
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if part in CASES:
            out.append(CASES[part])
        elif ":" in part:
            k, n = part.split(":")
            out.append((int(k), int(n)))
        else:
            raise ValueError(f"unknown case {part!r}")
    return out


def sweep_magnitudes(axis: Axis | str, steps: int = 11) -> np.ndarray:
    if steps < 2:
        raise ValueError("a sweep needs at least 2 steps")
    top = 1.0 if Axis(axis) is Axis.TRANSLATION else math.pi
    return np.linspace(0.0, top, steps)


@dataclass(frozen=True)
class ExperimentRecord:
    cost: str
    k: int
    n: int
    axis: str
    magnitude: float
    failure_ratio: float
    mean_error: float | None
    count: int

    def __post_init__(self):
        if not 0.0 <= self.failure_ratio <= 1.0:
            raise ValueError("failure_ratio must lie in [0, 1]")
        if self.failure_ratio > 0.5 and self.mean_error is not None:
            raise ValueError("mean_error is undefined above a 0.5 failure ratio")

    def csv_row(self) -> str:
        me = "" if self.mean_error is None else f"{self.mean_error:.9g}"
        return (f"{self.cost},{self.k},{self.n},{self.axis},{self.magnitude:.9g},"
                f"{self.failure_ratio:.9g},{me},{self.count}")


def records_to_csv(records: Sequence[ExperimentRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in records:
        buf.write(r.csv_row() + "\n")
    return buf.getvalue()


@dataclass(frozen=True)
class ExperimentConfig:
    cases: tuple[tuple[int, int], ...] = tuple(CASES.values())
    axes: tuple[str, ...] = ("translation", "rotation")
    steps: int = 11
    costs: tuple[str, ...] = ALL_COSTS
    instances_per_cell: int = 100
    sigma: float = 0.01
    noise: NoiseKind = NoiseKind.GAUSSIAN
    metric: Metric | None = None
    seed: int = 0
    match: bool = False
    registration: RegistrationConfig = field(default_factory=lambda: SIM_REGISTRATION)

    @property
    def resolved_metric(self) -> Metric:
        if self.metric is not None:
            return Metric(self.metric)
        return Metric.MAE if NoiseKind(self.noise) is NoiseKind.LAPLACIAN else Metric.RMS


# Correspondences are fixed in the benchmark, so the outer loop only refits the
# noise model; a per-level cap keeps slow creeping levels from eating the budget.
SIM_REGISTRATION = RegistrationConfig(icp_max_iters=100, irls_max_iters=10, max_iters_per_level=3,
                                      sie=SIEConfig())


def instance_seed(seed: int, case: tuple[int, int], index: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(case[0], case[1], index))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def instance_pool(cfg: ExperimentConfig, case: tuple[int, int]) -> list[Instance]:
    k, n = case
    return [generate_instance(k, n, cfg.sigma, cfg.noise, instance_seed(cfg.seed, case, i))
            for i in range(cfg.instances_per_cell)]


def run_single(inst: Instance, cost: str, cfg: ExperimentConfig, seed: int,
               reference: RigidTransform | None = None) -> float:
    """Register one prepared instance; returns the test error (inf on a degenerate solve)."""
    rc = replace(cfg.registration, cost=cost_from_name(cost, inst.sigma), seed=seed)
    try:
        if cfg.match:
            result = register(inst.A, inst.B, None, rc)
        else:
            result = register(inst.A, inst.B, None, rc, matches=Correspondences.identity(len(inst.A)))
    except DegenerateGeometryError:
        return math.inf
    return test_error(result.transform, inst, cfg.resolved_metric, reference)


def run_cell(cfg: ExperimentConfig, case: tuple[int, int], axis: str, magnitude: float,
             pool: list[Instance] | None = None) -> list[ExperimentRecord]:
    """All costs on one (case, guess) cell, over the shared instance pool."""
    pool = instance_pool(cfg, case) if pool is None else pool
    t0 = guess_transform(axis, magnitude)
    metric = cfg.resolved_metric
    errors: dict[str, list[float]] = {c: [] for c in cfg.costs}
    for i, base in enumerate(pool):
        inst = apply_initial_guess(base, t0)
        ref = t_mle(inst, metric)
        seed = instance_seed(cfg.seed, case, i)
        for cost in cfg.costs:
            errors[cost].append(run_single(inst, cost, cfg, seed, ref))
    out = []
    for cost in cfg.costs:
        e = np.asarray(errors[cost])
        fails = np.array([is_failure(x, cfg.sigma) for x in e], dtype=bool)
        ratio = float(np.mean(fails)) if e.size else 0.0
        ok = e[~fails]
        mean_error = float(np.mean(ok)) if ok.size and ratio <= 0.5 else None
        out.append(ExperimentRecord(cost, case[0], case[1], Axis(axis).value, float(magnitude),
                                    ratio, mean_error, int(e.size)))
    return out


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _cell_job(args):
    cfg, case, axis, mag = args
    return run_cell(cfg, case, axis, mag)


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), workers: int | None = None) -> list[ExperimentRecord]:
    """Every (case, axis, magnitude) cell for every cost, in a fixed order.

    Instances depend only on (seed, case, index), so serial and parallel runs
    give identical records.
    """
    workers = default_workers() if workers is None else workers
    jobs = [(cfg, case, axis, float(mag))
            for case in cfg.cases for axis in cfg.axes for mag in sweep_magnitudes(axis, cfg.steps)]
    records: list[ExperimentRecord] = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            for recs in ex.map(_cell_job, jobs):
                records.extend(recs)
        return records
    pools: dict[tuple[int, int], list[Instance]] = {}
    for _, case, axis, mag in jobs:
        if case not in pools:
            pools = {case: instance_pool(cfg, case)}
        records.extend(run_cell(cfg, case, axis, mag, pools[case]))
        log.info("cell k=%d n=%d %s %.3g done", case[0], case[1], axis, mag)
    return records
