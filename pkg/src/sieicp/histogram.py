"""Adaptive residual histograms."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .sie import NoiseModel


class EmptyHistogramError(ValueError):
    """No values fell inside the histogram range."""


@dataclass(frozen=True)
class HistogramConfig:
    """Knobs for range selection, binning and smoothing.

    ``epsilon`` is the curve-to-peak ratio at which the range is cut off.
    ``pool_dims`` and ``absolute`` select a joint histogram over all residual
    columns and folding residuals to their absolute value. ``clip_to_data``
    trims the range to the span of the values, so that a wide early range
    does not widen the smoothing kernel over empty space.

    The kernel std is ``smoothing_fraction`` of the range width when the range
    holds ``smoothing_reference_count`` values and shrinks as
    ``(reference / in_range) ** smoothing_exponent`` for larger samples, the
    usual kernel-density bandwidth rate.
    """

    epsilon: float = 1e-6
    bins_per_sample: float = 0.1
    smoothing_fraction: float = 0.03
    smoothing_reference_count: int = 1000
    smoothing_exponent: float = 0.2
    min_bins: int = 10
    max_bins: int = 1000
    min_width: float = 1e-12
    pool_dims: bool = False
    absolute: bool = False
    carry_tolerance: float = 0.1
    clip_to_data: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1); epsilon >= 1 gives a zero-width range")
        if self.bins_per_sample <= 0:
            raise ValueError("bins_per_sample must be positive")
        if self.smoothing_fraction < 0:
            raise ValueError("smoothing_fraction must be non-negative")
        if self.smoothing_reference_count < 1 or self.smoothing_exponent < 0:
            raise ValueError("smoothing_reference_count must be >= 1 and smoothing_exponent >= 0")
        if not 2 <= self.min_bins <= self.max_bins:
            raise ValueError("need 2 <= min_bins <= max_bins")


@dataclass(frozen=True, eq=False)
class Histogram:
    lo: float
    hi: float
    counts: np.ndarray
    total_in_range: int
    out_of_range: int = 0
    smoothed: bool = False

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if not self.hi > self.lo:
            raise ValueError("histogram needs hi > lo")
        if c.ndim != 1 or c.shape[0] < 2:
            raise ValueError("histogram needs at least 2 bins")
        if np.any(c < 0):
            raise ValueError("histogram counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.bin_width

    @property
    def total(self) -> int:
        """All values seen at build time, in range or not."""
        return self.total_in_range + self.out_of_range

    def bin_index(self, x) -> np.ndarray:
        """Bin of each x, -1 outside [lo, hi]. Bins are left-closed; the last is closed."""
        x = np.asarray(x, dtype=np.float64)
        inside = (x >= self.lo) & (x <= self.hi)
        # Truncation equals floor on the in-range (non-negative) offsets.
        idx = np.minimum(((x - self.lo) / self.bin_width).astype(np.int64), self.n_bins - 1)
        return np.where(inside, idx, -1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_center,count\n")
        for c, v in zip(self.centers, self.counts):
            buf.write(f"{c:.9g},{v:.9g}\n")
        return buf.getvalue()


def range_half_width(scale: float, p: float, c: float, epsilon: float) -> float:
    """Distance from the peak at which alpha*exp(-c (d/scale)^p) drops to epsilon*alpha."""
    return scale * (math.log(1.0 / epsilon) / c) ** (1.0 / p)


def adaptive_range(model: "NoiseModel", config: HistogramConfig = HistogramConfig()) -> tuple[float, float]:
    scale = model.sigma + model.beta
    if scale <= 0:
        raise ValueError("model scale sigma + beta must be positive")
    w = range_half_width(scale, model.p, model.exponent_coefficient, config.epsilon)
    w = max(w, 0.5 * config.min_width)
    return model.mu - w, model.mu + w


def clip_range(range_: tuple[float, float], values) -> tuple[float, float]:
    """Intersect ``range_`` with [min(values), max(values)] when that leaves a proper interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return range_
    lo, hi = max(range_[0], float(v.min())), min(range_[1], float(v.max()))
    return (lo, hi) if hi > lo else range_


def bin_count(n_in_range: int, config: HistogramConfig) -> int:
    n = int(round(config.bins_per_sample * n_in_range))
    return int(min(max(n, config.min_bins), config.max_bins))


def carry_range(new: tuple[float, float], previous: Histogram | None,
                config: HistogramConfig = HistogramConfig()) -> tuple[float, float, int | None]:
    """Keep the previous range and bin count while the new range stays close to it.

    Both endpoints must move by less than ``carry_tolerance`` times the
    previous width; otherwise the new range is used with a fresh bin count.
    """
    if previous is None or config.carry_tolerance <= 0:
        return new[0], new[1], None
    tol = config.carry_tolerance * previous.width
    if abs(new[0] - previous.lo) < tol and abs(new[1] - previous.hi) < tol:
        return previous.lo, previous.hi, previous.n_bins
    return new[0], new[1], None


def build(values, range_: tuple[float, float], config: HistogramConfig = HistogramConfig(),
          n_bins: int | None = None) -> Histogram:
    """Count ``values`` into bins over ``range_``.

    The bin count follows the in-range sample count unless ``n_bins`` is given.
    """
    lo, hi = float(range_[0]), float(range_[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError(f"invalid histogram range ({lo}, {hi})")
    if hi - lo < config.min_width:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5 * config.min_width, mid + 0.5 * config.min_width
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    inside = (v >= lo) & (v <= hi)
    n_in = int(np.count_nonzero(inside))
    if n_in == 0:
        raise EmptyHistogramError(f"no values inside [{lo:.6g}, {hi:.6g}]")
    nb = bin_count(n_in, config) if n_bins is None else int(n_bins)
    bw = (hi - lo) / nb
    idx = np.minimum(np.floor((v[inside] - lo) / bw).astype(np.int64), nb - 1)
    counts = np.bincount(idx, minlength=nb).astype(np.float64)
    return Histogram(lo, hi, counts, n_in, int(v.shape[0] - n_in), False)


def gaussian_kernel(std_bins: float) -> np.ndarray:
    half = int(math.ceil(4.0 * std_bins))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / std_bins) ** 2)
    return k / k.sum()


def smoothing_std(h: Histogram, config: HistogramConfig = HistogramConfig()) -> float:
    """Kernel std in residual units for histogram ``h``."""
    n = max(h.total_in_range, 1)
    shrink = (config.smoothing_reference_count / n) ** config.smoothing_exponent
    return config.smoothing_fraction * h.width * shrink


def smooth(h: Histogram, config: HistogramConfig = HistogramConfig(), reflect_lo: bool = False) -> Histogram:
    """Convolve with a zero-mean Gaussian whose std is proportional to the range width.

    ``reflect_lo`` mirrors the counts about ``lo`` before convolving, the right
    boundary treatment for folded (absolute) values whose density is flat at 0.
    """
    std_bins = smoothing_std(h, config) / h.bin_width
    if std_bins <= 1e-3:
        return Histogram(h.lo, h.hi, h.counts, h.total_in_range, h.out_of_range, True)
    mass = h.counts.sum()
    kern = gaussian_kernel(std_bins)
    half = kern.shape[0] // 2
    counts = h.counts
    pad = 0
    if reflect_lo:
        pad = min(half, h.n_bins)
        counts = np.concatenate([counts[pad - 1::-1], counts])
    out = np.convolve(counts, kern, mode="full")[half + pad:half + pad + h.n_bins]
    s = out.sum()
    if s > 0:
        out *= mass / s
    return Histogram(h.lo, h.hi, out, h.total_in_range, h.out_of_range, True)


def value_at(h: Histogram, x, normalized: bool = False):
    """Bin value containing x (0 outside the range).

    ``normalized`` divides by the total number of values the histogram was
    built from, so that summing over all residuals gives one.
    """
    scalar = np.ndim(x) == 0
    idx = h.bin_index(x)
    vals = np.where(idx >= 0, h.counts[np.maximum(idx, 0)], 0.0)
    if normalized:
        vals = vals / max(h.total, 1)
    return float(vals) if scalar else vals
