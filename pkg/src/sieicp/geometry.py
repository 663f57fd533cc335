"""Point clouds, rigid transforms, matching and weighted transform solves."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

_UNIT_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Raised when correspondences do not constrain a unique transform."""


def _as_points(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional unit normals and per-point noise scales."""

    points: np.ndarray
    normals: np.ndarray | None = None
    noise_scale: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points, "points")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in length")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > _UNIT_TOL):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.noise_scale is not None:
            s = np.array(self.noise_scale, dtype=np.float64).reshape(-1)
            if s.shape[0] != pts.shape[0]:
                raise ValueError("noise_scale must match points in length")
            if not np.all(np.isfinite(s)) or np.any(s <= 0):
                raise ValueError("noise_scale entries must be strictly positive")
            s.setflags(write=False)
            object.__setattr__(self, "noise_scale", s)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.noise_scale is None else self.noise_scale[idx],
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _UNIT_TOL or abs(np.linalg.det(r) - 1.0) > _UNIT_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_params(cls, tx, ty, tz, rx, ry, rz) -> "RigidTransform":
        """Translation plus rotation vector (axis * angle, radians)."""
        rot = Rotation.from_rotvec([rx, ry, rz]).as_matrix()
        return cls(_orthonormalize(rot), [tx, ty, tz])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(_orthonormalize(Rotation.from_rotvec(rotvec).as_matrix()), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            _orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ np.ascontiguousarray(self.rotation.T) + self.translation

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    # Project onto SO(3) to remove accumulated rounding.
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def transform_change(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Translation distance and relative rotation angle between two transforms."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    rel = a.rotation.T @ b.rotation
    c = (np.trace(rel) - 1.0) / 2.0
    return dt, float(np.arccos(np.clip(c, -1.0, 1.0)))


def apply_transform(t: RigidTransform, c: PointCloud) -> PointCloud:
    normals = None if c.normals is None else c.normals @ t.rotation.T
    if normals is not None:
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(t.apply(c.points), normals, c.noise_scale)


class NNIndex:
    """Exact Euclidean nearest-neighbour index over a target cloud (kd-tree)."""

    def __init__(self, target: PointCloud):
        if len(target) == 0:
            raise ValueError("cannot index an empty point cloud")
        self.target = target
        self._tree = cKDTree(target.points)

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dist, idx = self._tree.query(np.asarray(points, dtype=np.float64), k=1)
        return np.asarray(idx, dtype=np.int64), np.asarray(dist, dtype=np.float64)


def build_nn_index(target: PointCloud) -> NNIndex:
    return NNIndex(target)


class Correspondence(NamedTuple):
    source_index: int
    target_index: int
    distance: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Struct-of-arrays view of a sequence of correspondences."""

    source_index: np.ndarray
    target_index: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        si = np.asarray(self.source_index, dtype=np.int64).reshape(-1)
        ti = np.asarray(self.target_index, dtype=np.int64).reshape(-1)
        d = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        if not (si.shape == ti.shape == d.shape):
            raise ValueError("correspondence arrays must have equal length")
        object.__setattr__(self, "source_index", si)
        object.__setattr__(self, "target_index", ti)
        object.__setattr__(self, "distance", d)

    @classmethod
    def identity(cls, n: int) -> "Correspondences":
        """Pairs ``i <-> i``, for clouds whose rows are already matched."""
        idx = np.arange(n)
        return cls(idx, idx, np.zeros(n))

    def __len__(self) -> int:
        return self.source_index.shape[0]

    def __iter__(self) -> Iterator[Correspondence]:
        for s, t, d in zip(self.source_index, self.target_index, self.distance):
            yield Correspondence(int(s), int(t), float(d))

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(int(self.source_index[i]), int(self.target_index[i]), float(self.distance[i]))


def match_nearest(
    source: PointCloud,
    t: RigidTransform,
    index: NNIndex,
    max_matches: int = 2000,
    seed: int | np.random.Generator = 0,
) -> Correspondences:
    """Match (a random subset of) transformed source points to their nearest target.

    When the source has more than ``max_matches`` points a uniform random subset
    of that size is drawn without replacement from ``seed`` (an integer or an
    existing generator, so a caller can re-randomize between iterations).
    """
    if max_matches < 1:
        raise ValueError("max_matches must be at least 1")
    n = len(source)
    if n > max_matches:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        src_idx = np.sort(rng.choice(n, size=max_matches, replace=False))
    else:
        src_idx = np.arange(n)
    tgt_idx, dist = index.query(t.apply(source.points[src_idx]))
    return Correspondences(src_idx, tgt_idx, dist)


class ResidualMode(str, enum.Enum):
    POINT_TO_POINT = "point_to_point"
    POINT_TO_PLANE = "point_to_plane"
    NORM = "norm"

    @property
    def dims(self) -> int:
        return 3 if self is ResidualMode.POINT_TO_POINT else 1

    @classmethod
    def parse(cls, s) -> "ResidualMode":
        if isinstance(s, cls):
            return s
        return cls(str(s).replace("-", "_"))


@dataclass(frozen=True, eq=False)
class ResidualMatrix:
    """n x m residuals with per-entry noise scale factors."""

    values: np.ndarray
    mode: ResidualMode = ResidualMode.POINT_TO_POINT
    scale: np.ndarray | None = None

    def __post_init__(self):
        mode = ResidualMode.parse(self.mode)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if v.ndim != 2 or v.shape[1] != mode.dims:
            raise ValueError(f"{mode.value} residuals need {mode.dims} columns, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("residuals must be finite")
        s = np.ones_like(v) if self.scale is None else np.broadcast_to(
            np.asarray(self.scale, dtype=np.float64), v.shape)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("residual scale must be strictly positive")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", s)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def row_norms(self) -> np.ndarray:
        if self.m == 1:
            return np.abs(self.values[:, 0])
        return np.linalg.norm(self.values, axis=1)


def _match_scale(matches: Correspondences, source: PointCloud, target: PointCloud) -> np.ndarray:
    # Residual of two noisy measurements: variances add.
    var = np.zeros(len(matches))
    have = False
    if source.noise_scale is not None:
        var += source.noise_scale[matches.source_index] ** 2
        have = True
    if target.noise_scale is not None:
        var += target.noise_scale[matches.target_index] ** 2
        have = True
    return np.sqrt(var) if have else np.ones(len(matches))


def _check_weights(w: np.ndarray) -> None:
    if not np.isfinite(w.sum()) or w.min() < 0:
        raise ValueError("weights must be finite and non-negative")
    if np.count_nonzero(w) < 3:
        raise DegenerateGeometryError("fewer than 3 correspondences with positive weight")


def _kabsch(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted fit on coordinate-major (3, n) arrays; returns (R, t) with b ~ R a + t."""
    w = w / w.sum()
    aw = a * w
    ca = aw.sum(axis=1)
    cb = b @ w
    h = aw @ b.T - np.outer(ca, cb)
    cov = aw @ a.T - np.outer(ca, ca)
    # Collinear sources leave rotation about their line unconstrained.
    ev = np.linalg.eigvalsh(cov)
    if ev[2] <= 0 or ev[1] <= 1e-20 * ev[2]:
        raise DegenerateGeometryError("weighted source points are collinear or coincident")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = _orthonormalize(vt.T @ np.diag([1.0, 1.0, d]) @ u.T)
    return r, cb - r @ ca


def _centered_t(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Shifting by the plain mean keeps the moment sums well conditioned.
    mean = points.mean(axis=0) if points.shape[0] else np.zeros(3)
    return np.ascontiguousarray((points - mean).T), mean


@dataclass(frozen=True, eq=False)
class MatchedArrays:
    """Arrays gathered once for a fixed correspondence set.

    Points are stored coordinate-major and mean-centred, so repeated residual
    evaluations and solves over the same matches (as in an IRLS loop) avoid
    re-indexing the clouds and stay numerically well conditioned.
    """

    src: np.ndarray
    dst: np.ndarray
    normals: np.ndarray | None
    scale: np.ndarray
    mode: ResidualMode

    def __post_init__(self):
        a, ma = _centered_t(self.src)
        b, mb = _centered_t(self.dst)
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)
        object.__setattr__(self, "_ma", ma)
        object.__setattr__(self, "_mb", mb)
        nt = None if self.normals is None else np.ascontiguousarray(self.normals.T)
        object.__setattr__(self, "_nt", nt)

    @classmethod
    def gather(cls, matches: Correspondences, source: PointCloud, target: PointCloud,
               mode=ResidualMode.POINT_TO_POINT) -> "MatchedArrays":
        mode = ResidualMode.parse(mode)
        normals = None if target.normals is None else target.normals[matches.target_index]
        if mode is ResidualMode.POINT_TO_PLANE and normals is None:
            raise ValueError("point_to_plane residuals require target normals")
        return cls(source.points[matches.source_index], target.points[matches.target_index],
                   normals, _match_scale(matches, source, target), mode)

    def __len__(self) -> int:
        return self.src.shape[0]

    def residuals(self, t: RigidTransform) -> np.ndarray:
        """Raw (unnormalized) n x m residual values at ``t``."""
        r = t.rotation
        shift = r @ self._ma + t.translation - self._mb
        diff = r @ self._a
        diff += shift[:, None]
        diff -= self._b
        if self.mode is ResidualMode.POINT_TO_POINT:
            return diff.T
        if self.mode is ResidualMode.POINT_TO_PLANE:
            if self._nt is None:
                raise ValueError("point_to_plane residuals require target normals")
            return np.einsum("ij,ij->j", diff, self._nt)[:, None]
        return np.sqrt(np.einsum("ij,ij->j", diff, diff))[:, None]

    def residual_matrix(self, t: RigidTransform) -> ResidualMatrix:
        values = self.residuals(t)
        return ResidualMatrix(values, self.mode, np.repeat(self.scale[:, None], values.shape[1], axis=1))

    def solve(self, weights, initial: RigidTransform | None = None) -> RigidTransform:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(self):
            raise ValueError("need one weight per correspondence")
        if self.mode is ResidualMode.POINT_TO_PLANE:
            return point_to_plane_fit(self.src, self.dst, self.normals, w, initial)
        _check_weights(w)
        r, t = _kabsch(self._a, self._b, w)
        return RigidTransform(r, t + self._mb - r @ self._ma)


def compute_residuals(
    matches: Correspondences,
    source: PointCloud,
    target: PointCloud,
    t: RigidTransform,
    mode=ResidualMode.POINT_TO_POINT,
) -> ResidualMatrix:
    return MatchedArrays.gather(matches, source, target, mode).residual_matrix(t)


def weighted_rigid_fit(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Closed-form minimizer of sum w_i |R src_i + t - dst_i|^2.

    Weighted centroids plus SVD of the weighted cross-covariance, with the
    reflection case fixed by flipping the weakest singular direction.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    _check_weights(w)
    a, ma = _centered_t(np.asarray(src, dtype=np.float64))
    b, mb = _centered_t(np.asarray(dst, dtype=np.float64))
    r, t = _kabsch(a, b, w)
    return RigidTransform(r, t + mb - r @ ma)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def point_to_plane_fit(
    src: np.ndarray,
    dst: np.ndarray,
    normals: np.ndarray,
    weights: np.ndarray,
    initial: RigidTransform | None = None,
    steps: int = 3,
) -> RigidTransform:
    """Gauss-Newton on the small-angle linearization of n.(R a + t - b)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    t = initial or RigidTransform.identity()
    for _ in range(steps):
        a = t.apply(src)
        r = np.einsum("ij,ij->i", a - dst, normals)
        jac = np.hstack([np.cross(a, normals), normals])
        jtw = jac.T * w
        hess = jtw @ jac
        ev = np.linalg.eigvalsh(hess)
        if ev[-1] <= 0 or ev[0] <= 1e-12 * ev[-1]:
            raise DegenerateGeometryError("point-to-plane normal equations are rank deficient")
        x = -np.linalg.solve(hess, jtw @ r)
        step = RigidTransform.from_rotvec(x[:3], x[3:])
        t = step @ t
        if np.linalg.norm(x) < 1e-15:
            break
    return t


def solve_weighted_transform(
    matches: Correspondences,
    source: PointCloud,
    target: PointCloud,
    weights,
    mode=ResidualMode.POINT_TO_POINT,
    initial: RigidTransform | None = None,
) -> RigidTransform:
    """Transform minimizing the weighted squared residuals of ``matches``.

    ``norm`` mode shares the point-to-point objective. ``initial`` is only used
    as the linearization point in point-to-plane mode.
    """
    if np.asarray(weights).reshape(-1).shape[0] != len(matches):
        raise ValueError("need one weight per correspondence")
    return MatchedArrays.gather(matches, source, target, mode).solve(weights, initial)


def weighted_objective(
    matches: Correspondences,
    source: PointCloud,
    target: PointCloud,
    t: RigidTransform,
    weights,
    mode=ResidualMode.POINT_TO_POINT,
) -> float:
    r = compute_residuals(matches, source, target, t, mode).values
    return float(np.sum(np.asarray(weights) * np.sum(r * r, axis=1)))
