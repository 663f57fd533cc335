from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_rotation
from sieicp.costs import CostKind, WeightFunction
from sieicp.geometry import Correspondences, PointCloud, RigidTransform, solve_weighted_transform
from sieicp.registration import RegistrationConfig, WeightProvider, irls_refine, register
from sieicp.sie import SIEConfig
from sieicp.geometry import DegenerateGeometryError
from sieicp.simulation import (SIM_REGISTRATION, ExperimentConfig, apply_initial_guess, cost_from_name,
                               generate_instance, guess_transform, is_failure, run_single,
                               test_error as error_of)


def _noisy_pair(rng, n, noise=0.0):
    src = rng.uniform(size=(n, 3))
    truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
    return src, truth.apply(src) + rng.normal(scale=noise, size=src.shape) if noise else truth.apply(src), truth


def _fixed(inst, cost, **kw):
    rc = replace(SIM_REGISTRATION, cost=cost_from_name(cost, inst.sigma), **kw)
    return register(inst.A, inst.B, None, rc, matches=Correspondences.identity(len(inst.A)))


# irls_refine

def test_refine_exact_data_in_one_iteration(rng):
    src, dst, truth = _noisy_pair(rng, 50)
    cfg = RegistrationConfig(irls_max_iters=1)
    t = irls_refine(Correspondences.identity(50), PointCloud(src), PointCloud(dst),
                    WeightProvider(WeightFunction(CostKind.LP, p=1.0)), RigidTransform.identity(), cfg)
    np.testing.assert_allclose(t.matrix(), truth.matrix(), atol=1e-9)


def test_refine_uniform_weights_is_least_squares(rng):
    src, dst, _ = _noisy_pair(rng, 80, 0.05)
    m, a, b = Correspondences.identity(80), PointCloud(src), PointCloud(dst)
    t = irls_refine(m, a, b, lambda v: np.full(v.shape[0], 3.0), RigidTransform.identity())
    np.testing.assert_allclose(t.matrix(), solve_weighted_transform(m, a, b, np.ones(80)).matrix(), atol=1e-9)


def test_refine_zero_weight_outliers(rng):
    src, dst, _ = _noisy_pair(rng, 100, 0.01)
    dst[50:] += rng.uniform(5.0, 10.0, size=(50, 3))
    start = solve_weighted_transform(Correspondences.identity(50), PointCloud(src[:50]), PointCloud(dst[:50]),
                                     np.ones(50))
    provider = lambda v: (np.linalg.norm(v, axis=1) < 1.0).astype(float)
    t = irls_refine(Correspondences.identity(100), PointCloud(src), PointCloud(dst), provider, start)
    np.testing.assert_allclose(t.matrix(), start.matrix(), atol=1e-9)


def test_refine_records_objectives(rng):
    src, dst, _ = _noisy_pair(rng, 60, 0.05)
    trace = []
    irls_refine(Correspondences.identity(60), PointCloud(src), PointCloud(dst),
                WeightProvider(WeightFunction(CostKind.LP, p=1.0)), RigidTransform.identity(), trace=trace)
    assert trace and all(after <= before for before, after in trace)


def test_refine_rejects_empty_matches(rng):
    c = PointCloud(rng.uniform(size=(5, 3)))
    with pytest.raises(ValueError):
        irls_refine(Correspondences.identity(0), c, c, lambda v: np.ones(len(v)), RigidTransform.identity())


# register

def test_self_registration(rng):
    c = PointCloud(rng.uniform(size=(3000, 3)))
    result = register(c, c)
    np.testing.assert_allclose(result.transform.matrix(), np.eye(4), atol=1e-9)
    assert result.converged and result.iterations <= 2


def test_easy_instance_registers_below_noise():
    inst = apply_initial_guess(generate_instance(1000, 100, seed=11), guess_transform("translation", 0.2))
    result = _fixed(inst, "sie")
    assert error_of(result.transform, inst) < 0.01
    assert result.inlier_model is not None


def test_sie_fails_less_than_truncation():
    t0 = guess_transform("translation", 0.5)
    fails = {"sie": 0, "trunc-l2": 0}
    for seed in range(100):
        inst = apply_initial_guess(generate_instance(1000, 100, seed=seed), t0)
        for cost in fails:
            # A truncation that rejects every pair counts as a failure.
            fails[cost] += is_failure(run_single(inst, cost, ExperimentConfig(), seed), inst.sigma)
    assert fails["trunc-l2"] > fails["sie"]


def test_icp_with_matching_recovers_small_motion(rng):
    pts = rng.uniform(size=(4000, 3))
    truth = RigidTransform.from_rotvec([0.02, -0.01, 0.03], [0.02, 0.01, -0.015])
    target = PointCloud(pts)
    source = PointCloud(truth.inverse().apply(pts) + rng.normal(scale=0.001, size=pts.shape))
    result = register(source, target, config=RegistrationConfig(seed=4))
    assert np.linalg.norm(result.transform.translation - truth.translation) < 5e-3


def test_point_to_plane_registration(rng):
    xy = rng.uniform(size=(3000, 2))
    pts = np.c_[xy, 0.1 * np.sin(6 * xy[:, 0]) + 0.1 * np.cos(5 * xy[:, 1])]
    grad = np.c_[-0.6 * np.cos(6 * xy[:, 0]), 0.5 * np.sin(5 * xy[:, 1]), np.ones(len(xy))]
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    truth = RigidTransform.from_rotvec([0.0, 0.0, 0.01], [0.005, -0.005, 0.002])
    source = PointCloud(truth.inverse().apply(pts))
    result = register(source, PointCloud(pts, normals), config=RegistrationConfig(mode="point_to_plane"))
    assert np.linalg.norm(result.transform.translation - truth.translation) < 2e-3


def test_trace_csv_layout():
    inst = generate_instance(300, 30, seed=2)
    result = _fixed(inst, "sie")
    lines = result.trace_csv().splitlines()
    assert lines[0] == "iteration,objective,sigma,beta,inlier_prior,k,translation_change,rotation_change"
    assert len(lines) == result.iterations + 1


def test_rejects_empty_clouds(rng):
    c = PointCloud(rng.uniform(size=(5, 3)))
    with pytest.raises(ValueError):
        register(PointCloud(np.zeros((0, 3))), c)


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(beta_stop_ratio=1.0)
    with pytest.raises(ValueError):
        RegistrationConfig(translation_tol=0.0)
    with pytest.raises(ValueError):
        RegistrationConfig(max_iters_per_level=0)


def test_resampled_matches_still_register(rng):
    pts = rng.uniform(size=(5000, 3))
    truth = RigidTransform.from_rotvec([0.0, 0.0, 0.02], [0.01, 0.0, 0.0])
    cfg = RegistrationConfig(resample_matches=True, cost=WeightFunction(CostKind.LP, p=1.0))
    result = register(PointCloud(truth.inverse().apply(pts)), PointCloud(pts), config=cfg)
    assert np.linalg.norm(result.transform.translation - truth.translation) < 5e-3


# properties

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _small_instance(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(100, 400))
    n = int(rng.integers(0, 2 * k))
    inst = generate_instance(k, n, 0.01, seed=seed)
    return apply_initial_guess(inst, guess_transform("translation", float(rng.uniform(0.0, 0.3))))


@given(seeds)
def test_property_beta_schedule_and_objective_trace(seed):
    result = _fixed(_small_instance(seed), "sie")
    r = result.transform.rotation
    assert np.max(np.abs(r.T @ r - np.eye(3))) <= 1e-9 and abs(np.linalg.det(r) - 1) <= 1e-9
    assert result.converged
    betas = [row.beta for row in result.trace]
    levels = [b for i, b in enumerate(betas) if i == 0 or b != betas[i - 1]]
    assert all(b < a for a, b in zip(levels, levels[1:]))
    final = result.trace[-1]
    assert final.beta < SIM_REGISTRATION.beta_stop_ratio * final.sigma
    for row in result.trace:
        for before, after in row.inner_objectives:
            assert after <= before * (1 + 1e-9) + 1e-300


def _outcome(inst, cost):
    try:
        r = _fixed(inst, cost)
    except DegenerateGeometryError as exc:
        return str(exc)
    return r.transform.matrix().tobytes(), r.iterations, r.trace_csv()


@given(seeds, st.sampled_from(["sie", "t-dist", "l1", "trunc-l2"]))
def test_property_registration_is_deterministic(seed, cost):
    inst = _small_instance(seed)
    assert _outcome(inst, cost) == _outcome(inst, cost)


@given(seeds)
def test_property_pinned_sie_is_plain_icp(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(int(rng.integers(100, 600)), 3))
    truth = RigidTransform.from_rotvec(rng.normal(scale=0.02, size=3), rng.normal(scale=0.02, size=3))
    source = PointCloud(truth.inverse().apply(pts) + rng.normal(scale=0.002, size=pts.shape))
    target = PointCloud(pts)
    base = RegistrationConfig(max_matches=300, seed=seed, icp_max_iters=30)
    sie_cfg = replace(base, cost=WeightFunction(CostKind.SIE, p=2.0), sie=SIEConfig(pin_probability=True))
    icp_cfg = replace(base, cost=WeightFunction(CostKind.LP, p=2.0))
    a = register(source, target, config=sie_cfg).transform
    b = register(source, target, config=icp_cfg).transform
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-9)
