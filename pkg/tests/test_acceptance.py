"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line. The benchmark replication in
criteria 2 and 3 runs the full translation sweep once and shares the records;
set ``SIEICP_THREADS`` to spread the cells over several processes.
"""

import math
import subprocess
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from scipy import integrate
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from sieicp.cli import main
from sieicp.costs import weight_sie
from sieicp.geometry import (Correspondences, PointCloud, ResidualMatrix, ResidualMode, RigidTransform,
                             solve_weighted_transform)
from sieicp.sie import SIEConfig, combine_row, fit_inlier_model, ggd_density
from sieicp.simulation import BASELINES, CASES, ExperimentConfig, NoiseKind, run_experiment

TESTS = Path(__file__).resolve().parent
SIGMA = 0.01


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok
    return emit


# 1. noise-model recovery

@pytest.mark.parametrize("ratio", [0.1, 1.0, 10.0])
def test_noise_model_recovery(ratio, report):
    rng = np.random.default_rng(100 + int(10 * ratio))
    n = 100_000
    x = np.concatenate([rng.normal(0.0, SIGMA, n), rng.uniform(-1.0, 1.0, int(ratio * n))])
    cfg = SIEConfig(k_initial=10.0, bootstrap_adapt_k=False)
    start = time.perf_counter()
    model = fit_inlier_model(ResidualMatrix(x, ResidualMode.POINT_TO_PLANE), cfg)
    elapsed = time.perf_counter() - start
    sigma = float(model.sigma[0])
    rel = abs(sigma - SIGMA) / SIGMA
    ok = rel <= 0.15 and elapsed < 1.0
    report(1, ok, f"ratio {ratio:g}: sigma {sigma:.5g} (rel err {rel:.3f} <= 0.15), {elapsed:.3f} s < 1 s")
    assert ok


# 2 and 3. simulation replication

@pytest.fixture(scope="module")
def translation_sweep():
    cfg = ExperimentConfig(cases=tuple(CASES.values()), axes=("translation",), steps=11, instances_per_cell=100,
                           seed=0)
    start = time.perf_counter()
    records = run_experiment(cfg)
    return records, time.perf_counter() - start


def _by_cost_case(records):
    table = defaultdict(list)
    for r in records:
        table[(r.cost, (r.k, r.n))].append(r)
    return table


def test_robustness(translation_sweep, report):
    records, elapsed = translation_sweep
    table = _by_cost_case(records)
    ok = True
    for name, case in CASES.items():
        mean_fail = {c: float(np.mean([r.failure_ratio for r in table[(c, case)]])) for c in ("sie",) + BASELINES}
        sie = mean_fail["sie"]
        good = all(sie <= mean_fail[b] for b in BASELINES)
        if name == "hard":
            good &= sie < mean_fail["trunc-l2"] and sie < mean_fail["l1"]
        ok &= good
        detail = ", ".join(f"{c} {v:.3f}" for c, v in mean_fail.items())
        report(2, good, f"{name} mean failure ratio: {detail}")
    report(2, elapsed < 600, f"sweep runtime {elapsed:.0f} s (target < 600 s)")
    assert ok


def test_precision(translation_sweep, report):
    records, _ = translation_sweep
    table = _by_cost_case(records)
    ok = True
    worst = 0.0
    for case in CASES.values():
        for i, r in enumerate(table[("sie", case)]):
            others = [table[(b, case)][i].mean_error for b in BASELINES]
            others = [e for e in others if e is not None]
            if r.mean_error is None or not others:
                continue
            best = min(others)
            ratio = r.mean_error / best if best > 0 else (0.0 if r.mean_error == 0 else math.inf)
            worst = max(worst, ratio)
            ok &= r.mean_error <= 2.0 * best
    report(3, ok, f"largest SIE / best competitor error ratio over non-failure cells {worst:.3g} <= 2")

    hard = CASES["hard"]
    averages = {}
    for c in ("sie",) + BASELINES:
        errs = [r.mean_error for r in table[(c, hard)] if r.mean_error is not None]
        averages[c] = float(np.mean(errs)) if errs else math.inf
    lowest = all(averages["sie"] < averages[b] for b in BASELINES)
    detail = ", ".join(f"{c} {v:.3g}" for c, v in averages.items())
    report(3, lowest, f"hard sweep average error: {detail}")
    assert ok and lowest


def test_failure_ratio_trend(translation_sweep, report):
    records, _ = translation_sweep
    table = _by_cost_case(records)
    ok = True
    for c in ("sie",) + BASELINES:
        curve = np.mean([[r.failure_ratio for r in table[(c, case)]] for case in CASES.values()], axis=0)
        drops = np.diff(curve)
        good = bool(np.all(drops >= -0.05))
        ok &= good
        report(2, good, f"{c} failure ratio trend over magnitude, largest drop {max(0.0, -drops.min()):.3f} <= 0.05")
    assert ok


# 4 and 5. exponent variants

def _p_variant_errors(noise):
    cfg = ExperimentConfig(cases=(CASES["easy"],), axes=("translation",), steps=3,
                           costs=("sie-l1", "sie-est-p", "sie-l2"), instances_per_cell=100,
                           noise=noise, seed=0)
    errors = defaultdict(list)
    for r in run_experiment(cfg):
        errors[r.cost].append(math.inf if r.mean_error is None else r.mean_error)
    return {c: float(np.mean(v)) for c, v in errors.items()}


def test_laplacian_prefers_l1(report):
    e = _p_variant_errors(NoiseKind.LAPLACIAN)
    ok = e["sie-l1"] <= e["sie-est-p"] <= e["sie-l2"] and e["sie-l1"] < e["sie-l2"]
    report(4, ok, f"MAE: sie-l1 {e['sie-l1']:.4g} <= sie-est-p {e['sie-est-p']:.4g} <= sie-l2 {e['sie-l2']:.4g}")
    assert ok


def test_gaussian_prefers_l2(report):
    e = _p_variant_errors(NoiseKind.GAUSSIAN)
    ok = e["sie-l2"] <= e["sie-est-p"] <= e["sie-l1"] and e["sie-l2"] < e["sie-l1"]
    report(5, ok, f"RMS: sie-l2 {e['sie-l2']:.4g} <= sie-est-p {e['sie-est-p']:.4g} <= sie-l1 {e['sie-l1']:.4g}")
    assert ok


# 6. weighted transform versus brute force

def _objective(rot, trans, a, b, w):
    r = np.einsum("sij,nj->sni", rot, a) + trans[:, None, :] - b[None]
    return np.einsum("n,sn->s", w, np.sum(r * r, axis=2))


def test_weighted_transform_brute_force(report):
    rng = np.random.default_rng(6)
    samples, chunk = 1_000_000, 50_000
    worst = -math.inf
    for _ in range(20):
        n = int(rng.integers(4, 40))
        a = rng.uniform(-1.0, 1.0, (n, 3))
        truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
        b = truth.apply(a) + rng.normal(scale=0.1, size=a.shape)
        w = rng.uniform(0.0, 2.0, n)
        t = solve_weighted_transform(Correspondences.identity(n), PointCloud(a), PointCloud(b), w)
        best = float(_objective(t.rotation[None], t.translation[None], a, b, w)[0])
        for _ in range(samples // chunk):
            # Perturbation sizes spread log-uniformly from 1e-7 to 1e-1.
            size = 10.0 ** rng.uniform(-7.0, -1.0, (chunk, 1))
            dr = Rotation.from_rotvec(size * rng.normal(size=(chunk, 3))).as_matrix()
            rot = dr @ t.rotation
            trans = t.translation + size * rng.normal(size=(chunk, 3))
            values = _objective(rot, trans, a, b, w)
            worst = max(worst, float((best - values.min()) / best))
    ok = worst <= 1e-12
    report(6, ok, f"20 instances x 1e6 neighbours: best relative improvement found {worst:.2e} (none allowed)")
    assert ok


# 7. formula identities

def test_formula_identities(report):
    checks = {}
    qs = np.linspace(0.0, 1.0, 101)
    checks["combine_row m=1"] = all(combine_row([q], 1.0) == q for q in qs)
    r = np.linspace(0.0, 5.0, 101)
    checks["weight_sie p=2"] = all(weight_sie(x, s, 2.0, q) == s ** -2.0 * q
                                   for x in r for s in (0.01, 0.3, 2.0) for q in (0.0, 0.4, 1.0))
    checks["ggd(0,0,1,2)"] = abs(ggd_density(0.0, 0.0, 1.0, 2.0) - 1.0 / math.sqrt(math.pi)) <= 1e-12
    checks["ggd(0,0,1,1)"] = abs(ggd_density(0.0, 0.0, 1.0, 1.0) - 0.5) <= 1e-12
    for p in (0.5, 1.0, 2.0, 4.0):
        total = integrate.quad(lambda x: ggd_density(x, 0.0, 1.0, p), -np.inf, np.inf, limit=200)[0]
        checks[f"ggd integral p={p:g}"] = abs(total - 1.0) <= 1e-6
    for name, good in checks.items():
        report(7, good, name)
    assert all(checks.values())


# 8. property suites

def test_property_suites(report):
    examples = settings.get_profile("properties").max_examples
    files = sorted(str(p) for p in TESTS.glob("test_*.py") if p.name != "test_acceptance.py")
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "property",
                           *files], cwd=TESTS.parent, capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    ok = proc.returncode == 0 and examples >= 1000
    report(8, ok, f"{summary} ({examples} generated cases per property)")
    assert ok, proc.stdout[-4000:]


# 9. determinism

def test_simulate_is_reproducible(tmp_path, report):
    base = ["simulate", "--seed", "7", "--cases", "easy,200:400", "--steps", "3", "--instances", "4",
            "--sweep", "both"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--out", str(b)]) == 0
    ok = a.read_bytes() == b.read_bytes()
    report(9, ok, f"two runs of simulate --seed 7 give byte-identical CSVs ({len(a.read_bytes())} bytes)")
    assert ok
