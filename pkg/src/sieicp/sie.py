"""Statistical inlier estimation.

The inlier noise of every residual column is modelled as an unnormalized
generalized Gaussian ``alpha * exp(-c * (|x - mu| / (sigma + beta))^p)`` that is
fitted *underneath* the residual histogram. The ratio of curve to histogram is
the per-column inlier probability; columns are then combined into one
probability per correspondence.
"""

from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from . import histogram as hist
from .geometry import ResidualMatrix
from .histogram import Histogram, HistogramConfig

MIN_SCALE = 1e-12
CURVE_CUTOFF = 50.0
UNDERFLOW = 700.0
PRIOR_CLAMP = (1e-4, 1.0 - 1e-4)
K_RANGE = (1.0, 10.0)
P_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class NoiseModel:
    """Fitted inlier curve for one residual column.

    With ``gaussian_convention`` and p == 2 the exponent carries a factor 0.5,
    so ``sigma`` is a standard deviation. Otherwise the exponent coefficient is
    1 and ``sigma`` follows the generalized Gaussian scale convention
    (sigma_ggd = sqrt(2) * sigma_std at p == 2).
    """

    alpha: float
    mu: float
    sigma: float
    p: float = 2.0
    beta: float = 0.0
    k: float = 10.0
    gaussian_convention: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.p > 0:
            raise ValueError("p must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if not self.k >= 1:
            raise ValueError("k must be at least 1")

    @property
    def exponent_coefficient(self) -> float:
        return 0.5 if (self.p == 2 and self.gaussian_convention) else 1.0

    @property
    def scale(self) -> float:
        """Regularized scale sigma + beta."""
        return self.sigma + self.beta

    def curve(self, x, regularized: bool = True):
        return unnormalized_inlier_curve(x, self, regularized)


def ggd_density(x, mu: float, sigma: float, p: float):
    """Normalized generalized Gaussian density p / (2 sigma Gamma(1/p)) exp(-(|x-mu|/sigma)^p)."""
    if sigma <= 0 or p <= 0:
        raise ValueError("sigma and p must be positive")
    z = np.abs(np.asarray(x, dtype=np.float64) - mu) / sigma
    return p / (2.0 * sigma * gamma_fn(1.0 / p)) * np.exp(-(z ** p))


def _curve(x, alpha, mu, scale, p, c):
    z = np.abs(np.asarray(x, dtype=np.float64) - mu) * (1.0 / scale)
    zp = z * z if p == 2 else (z if p == 1 else z ** p)
    zp *= -c
    # exp underflows to 0 below about -745; clamping first avoids numpy's slow
    # underflow path, and the clamped entries are zeroed explicitly.
    out = alpha * np.exp(np.maximum(zp, -UNDERFLOW))
    if np.ndim(out) == 0:
        return out if zp >= -UNDERFLOW else out * 0.0
    out[zp < -UNDERFLOW] = 0.0
    return out


def unnormalized_inlier_curve(x, model: NoiseModel, regularized: bool = True):
    scale = model.scale if regularized else model.sigma
    return _curve(x, model.alpha, model.mu, scale, model.p, model.exponent_coefficient)


def _coefficient(p: float, gaussian_convention: bool) -> float:
    return 0.5 if (p == 2 and gaussian_convention) else 1.0


def init_model(column, p: float = 2.0, bin_width: float = 1.0, gaussian_convention: bool = True,
               beta: float = 0.0, k: float = 10.0) -> NoiseModel:
    """Maximum-likelihood model treating every value as an inlier.

    ``alpha`` is the peak of the fitted density scaled to a histogram with the
    given bin width, so it is comparable with histogram counts.
    """
    x = np.asarray(column, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 values to initialize a noise model")
    c = _coefficient(p, gaussian_convention)
    mu = float(x.mean())
    # argmax of prod exp(-c (|x-mu|/s)^p) / s  =>  s^p = c p mean|x-mu|^p
    sigma = float((c * p * np.mean(np.abs(x - mu) ** p)) ** (1.0 / p))
    sigma = max(sigma, MIN_SCALE)
    peak_density = p * c ** (1.0 / p) / (2.0 * sigma * gamma_fn(1.0 / p))
    alpha = x.shape[0] * bin_width * peak_density
    return NoiseModel(alpha, mu, sigma, p, beta, k, gaussian_convention)


def fit_objective(h: Histogram, alpha: float, mu: float, sigma: float, p: float, k: float,
                  gaussian_convention: bool = True) -> float:
    """Sum over bins of F(H - G): shortfall counts 1, overshoot counts k."""
    g = _curve(h.centers, alpha, mu, sigma, p, _coefficient(p, gaussian_convention))
    d = h.counts - g
    return float(np.sum(np.where(d > 0, d, -k * d)))


def fit_sigma(h: Histogram, alpha: float, mu: float, p: float = 2.0, k: float = 10.0,
              gaussian_convention: bool = True, rtol: float = 1e-4, max_iter: int = 60) -> float:
    """Scale minimizing the asymmetric fit objective, by bisection on its slope.

    The curve grows monotonically with sigma in every bin, so the objective's
    derivative is sum_i dG_i/dsigma * (k if G_i >= H_i else -1). Bisection
    looks for its sign change inside [bin width, histogram width]; the bracket
    never depends on earlier fits, so the result is a function of the
    histogram alone.
    """
    if h.counts.sum() <= 0:
        raise hist.EmptyHistogramError("cannot fit an empty histogram")
    c = _coefficient(p, gaussian_convention)
    dist_p = np.abs(h.centers - mu) ** p
    # Bins sorted by distance from the peak: far bins, where the curve is
    # below exp(-CURVE_CUTOFF), are skipped.
    order = np.argsort(dist_p, kind="stable")
    dist_p = dist_p[order]
    ratio = h.counts[order] / alpha if alpha > 0 else np.full(dist_p.shape, np.inf)

    @functools.lru_cache(maxsize=None)
    def slope(s: float) -> float:
        # Sign-preserving: the positive factor alpha*c*p/s^(p+1) is dropped.
        sp = s ** p
        n = int(np.searchsorted(dist_p, CURVE_CUTOFF * sp / c, side="right"))
        d = dist_p[:n]
        e = np.exp(d * (-c / sp))
        return float((e * d) @ np.where(e >= ratio[:n], k, -1.0))

    lo, hi = h.bin_width, h.width
    if slope(lo) >= 0:
        return lo
    if slope(hi) <= 0:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= rtol * lo:
            break
    return 0.5 * (lo + hi)


def estimate_mu_alpha(h: Histogram) -> tuple[float, float]:
    i = int(np.argmax(h.counts))  # first maximal bin on ties
    return float(h.centers[i]), float(h.counts[i])


def refine_peak(h: Histogram, mu: float, sigma: float, tol: float = 1e-6, max_iter: int = 50) -> float:
    """Mean-shift the peak location over the histogram with a Gaussian window of width sigma.

    The maximal bin of a lightly smoothed histogram drifts by a sizeable
    fraction of sigma when only a few thousand values are binned; the local
    mode at the noise scale is far steadier and stays on the peak it starts from.
    """
    x = h.centers
    for _ in range(max_iter):
        w = h.counts * np.exp(-0.5 * ((x - mu) / sigma) ** 2)
        total = w.sum()
        if total <= 0:
            break
        new = float(w @ x / total)
        done = abs(new - mu) <= tol * sigma
        mu = new
        if done:
            break
    return mu


def inlier_prior(models: Sequence[NoiseModel], histograms: Sequence[Histogram]) -> float:
    """Fraction of all residual mass explained by the (unregularized) inlier curves."""
    explained = 0.0
    total = 0.0
    for model, h in zip(models, histograms):
        g = unnormalized_inlier_curve(h.centers, model, regularized=False)
        explained += float(np.minimum(g, h.counts).sum())
        total += h.counts.sum() + h.out_of_range
    if total <= 0:
        return PRIOR_CLAMP[0]
    return float(np.clip(explained / total, *PRIOR_CLAMP))


def inlier_prob_dim(x, model: NoiseModel, h: Histogram, prob_cap: float = 0.99,
                    epsilon: float = 1e-6):
    """Per-column inlier probability min(cap, G_reg(x) / H(x)).

    Where the histogram is empty the probability is ``prob_cap`` if the curve is
    still above ``epsilon`` times its peak there, otherwise 0.
    """
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    g = unnormalized_inlier_curve(x, model, regularized=True)
    hv = hist.value_at(h, x)
    inside = hv > 0
    prob = np.where(g > epsilon * model.alpha, prob_cap, 0.0)
    np.minimum(prob_cap, g / np.where(inside, hv, 1.0), out=prob, where=inside)
    prob[g <= 0] = 0.0
    return float(prob) if scalar else prob


def combine_row(per_dim_probs, gamma: float = 1.0):
    """Joint inlier probability of a row from its per-column probabilities.

    ``per_dim_probs`` is (m,) for one row or (n, m) for many.
    """
    p = np.asarray(per_dim_probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    num = np.prod(p, axis=1)
    den = num + gamma * np.prod(1.0 - p, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out[0]) if single else out


def prior_gamma(prior: float, m: int) -> float:
    return (prior / (1.0 - prior)) ** (m - 1)


def normalize_residuals(r: ResidualMatrix) -> ResidualMatrix:
    if np.any(r.scale <= 0):
        raise ValueError("scale entries must be positive")
    return ResidualMatrix(r.values / r.scale, r.mode, None)


def penalty_from_probability(q: float) -> float:
    """k = q^-3 clamped to [1, 10]."""
    if q <= 0:
        return K_RANGE[1]
    return float(np.clip(q ** -3.0, *K_RANGE))


def mean_inlier_probability(models: Sequence[NoiseModel], histograms: Sequence[Histogram],
                            prob_cap: float = 0.99) -> float:
    """Average per-residual inlier probability over residuals inside the histogram ranges."""
    num = 0.0
    den = 0.0
    for model, h in zip(models, histograms):
        g = unnormalized_inlier_curve(h.centers, model, regularized=False)
        num += float(np.minimum(prob_cap * h.counts, g).sum())
        den += float(h.counts.sum())
    return num / den if den > 0 else 0.0


def adapt_k(models: Sequence[NoiseModel], histograms: Sequence[Histogram], prob_cap: float = 0.99) -> float:
    return penalty_from_probability(mean_inlier_probability(models, histograms, prob_cap))


def update_beta(beta):
    if np.any(np.asarray(beta) < 0):
        raise ValueError("beta must be non-negative")
    return beta / 2.0 if np.ndim(beta) else float(beta) / 2.0


def init_beta(residuals: ResidualMatrix, override=None) -> np.ndarray:
    """Per-column spread of the initial residuals, or ``override`` when supplied."""
    m = residuals.m
    if override is not None:
        return np.broadcast_to(np.asarray(override, dtype=np.float64), (m,)).copy()
    if residuals.n == 0:
        raise ValueError("no residuals")
    return residuals.values.std(axis=0)


@dataclass(frozen=True)
class SIEConfig:
    """Settings for fitting the inlier model.

    ``p=None`` estimates the exponent from the data on every fresh fit.
    ``bootstrap_rounds`` bounds the range-refinement passes when no previous
    model is available. ``refine_peak`` moves mu from the maximal bin to the
    local mode at the fitted noise scale and refits sigma there.
    """

    p: float | None = 2.0
    prob_cap: float = 0.99
    k_initial: float = 10.0
    gaussian_convention: bool = True
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    bootstrap_rounds: int = 8
    bootstrap_rtol: float = 0.01
    bootstrap_adapt_k: bool = True
    pin_probability: bool = False
    delta: float = 1e-9
    refine_peak: bool = True

    def __post_init__(self):
        if not 0 < self.prob_cap < 1:
            raise ValueError("prob_cap must lie in (0, 1)")
        if self.p is not None and self.p <= 0:
            raise ValueError("p must be positive")


@dataclass(frozen=True, eq=False)
class InlierModel:
    per_dim: tuple[NoiseModel, ...]
    histograms: tuple[Histogram, ...]
    inlier_prior: float
    gamma: float
    prob_cap: float = 0.99
    epsilon: float = 1e-6
    next_k: float = 10.0
    pooled: bool = False
    folded: bool = False
    pinned: bool = False

    def __post_init__(self):
        if not 0 <= self.inlier_prior <= 1:
            raise ValueError("inlier prior must be a probability")
        if not self.prob_cap < 1:
            raise ValueError("prob_cap must be below 1")

    @property
    def m(self) -> int:
        return len(self.per_dim)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([d.sigma for d in self.per_dim])

    @property
    def beta(self) -> np.ndarray:
        return np.array([d.beta for d in self.per_dim])

    @property
    def p(self) -> float:
        return float(np.mean([d.p for d in self.per_dim]))

    def dim_probabilities(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if self.folded:
            v = np.abs(v)
        cols = np.ascontiguousarray(v.T)
        out = np.empty_like(cols)
        for j, col in enumerate(cols):
            d = 0 if self.pooled else j
            out[j] = inlier_prob_dim(col, self.per_dim[d], self.histograms[d], self.prob_cap, self.epsilon)
        return out.T

    def probabilities(self, values) -> np.ndarray:
        """Joint inlier probability for every residual row."""
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if self.pinned:
            return np.ones(v.shape[0])
        return combine_row(self.dim_probabilities(v), self.gamma)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"dims = {self.m}\n")
        buf.write(f"inlier_prior = {self.inlier_prior:.9g}\n")
        buf.write(f"gamma = {self.gamma:.9g}\n")
        buf.write(f"prob_cap = {self.prob_cap:.9g}\n")
        buf.write(f"next_k = {self.next_k:.9g}\n")
        for j, d in enumerate(self.per_dim):
            for name in ("alpha", "mu", "sigma", "p", "beta", "k"):
                buf.write(f"dim{j}.{name} = {getattr(d, name):.9g}\n")
        return buf.getvalue()

    def curves_csv(self, j: int = 0) -> str:
        """Histogram, noise estimate and inlier probability along column j."""
        h = self.histograms[j]
        d = self.per_dim[j]
        x = h.centers
        g = unnormalized_inlier_curve(x, d, regularized=True)
        prob = inlier_prob_dim(x, d, h, self.prob_cap, self.epsilon)
        buf = io.StringIO()
        buf.write("bin_center,count,noise_estimate,inlier_probability\n")
        for row in zip(x, h.counts, g, prob):
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()


def parse_model_text(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = float(val)
    return out


def _fit_column(values: np.ndarray, prev: NoiseModel, prev_hist: Histogram | None, beta: float,
                k: float, p: float, cfg: SIEConfig, fold: bool) -> tuple[NoiseModel, Histogram]:
    guide = replace(prev, beta=beta)
    lo, hi = hist.adaptive_range(guide, cfg.histogram)
    if fold:
        lo, hi = 0.0, max(hi, -lo, cfg.histogram.min_width)
    if cfg.histogram.clip_to_data:
        lo, hi = hist.clip_range((lo, hi), values)
        if fold:
            lo = 0.0
    lo, hi, nb = hist.carry_range((lo, hi), prev_hist, cfg.histogram)
    h = hist.smooth(hist.build(values, (lo, hi), cfg.histogram, nb), cfg.histogram, reflect_lo=fold)
    if fold:
        mu, alpha = 0.0, float(h.counts.max())
    else:
        mu, alpha = estimate_mu_alpha(h)
    sigma = fit_sigma(h, alpha, mu, p, k, cfg.gaussian_convention)
    if cfg.refine_peak and not fold:
        mu = refine_peak(h, mu, sigma)
        alpha = float(hist.value_at(h, mu)) or alpha
        sigma = fit_sigma(h, alpha, mu, p, k, cfg.gaussian_convention)
    return NoiseModel(max(alpha, MIN_SCALE), mu, sigma, p, float(beta), k, cfg.gaussian_convention), h


def _columns(values: np.ndarray, cfg: SIEConfig) -> list[np.ndarray]:
    if cfg.histogram.absolute:
        values = np.abs(values)
    if cfg.histogram.pool_dims:
        return [values.reshape(-1)]
    return list(np.ascontiguousarray(values.T))


def fit_inlier_model(
    residuals: ResidualMatrix,
    config: SIEConfig = SIEConfig(),
    previous: InlierModel | None = None,
    beta=None,
    k: float | None = None,
) -> InlierModel:
    """Fit one noise model per residual column and the joint inlier prior.

    With ``previous`` the histogram ranges follow the previous curves (one
    pass). Without it, the fit starts from the all-inlier maximum-likelihood
    model and refines the range until sigma settles.
    """
    if np.any(residuals.scale != 1.0):
        raise ValueError("residuals must be normalized before fitting")
    values = residuals.values
    fold = config.histogram.absolute or residuals.mode.value == "norm"
    cols = _columns(values, config)
    n_models = len(cols)
    k = config.k_initial if k is None else float(k)
    betas = np.zeros(n_models) if beta is None else np.broadcast_to(
        np.asarray(beta, dtype=np.float64), (values.shape[1],))
    if config.histogram.pool_dims:
        betas = np.array([float(np.mean(betas))])

    # The weights use one exponent per residual vector, so all columns share it.
    shared_p = config.p
    if shared_p is None and (previous is None or len(previous.per_dim) != n_models):
        shared_p = estimate_shared_p(cols, config)
    models: list[NoiseModel] = []
    hists: list[Histogram] = []
    for j, col in enumerate(cols):
        if previous is not None and len(previous.per_dim) == n_models:
            prev = previous.per_dim[j]
            p = prev.p if config.p is None else config.p
            model, h = _fit_column(col, prev, previous.histograms[j], betas[j], k, p, config, fold)
        else:
            p = shared_p
            prev = init_model(col, p, gaussian_convention=config.gaussian_convention, k=k)
            if fold:
                prev = replace(prev, mu=0.0)
            model, h = _fit_column(col, prev, None, betas[j], k, p, config, fold)
            for _ in range(config.bootstrap_rounds - 1):
                kb = adapt_k([model], [h], config.prob_cap) if config.bootstrap_adapt_k else k
                new, h_new = _fit_column(col, model, h, betas[j], kb, p, config, fold)
                done = abs(new.sigma - model.sigma) <= config.bootstrap_rtol * model.sigma
                model, h = new, h_new
                if done:
                    break
        models.append(model)
        hists.append(h)

    prior = inlier_prior(models, hists)
    m = values.shape[1]
    return InlierModel(
        per_dim=tuple(models),
        histograms=tuple(hists),
        inlier_prior=prior,
        gamma=prior_gamma(prior, m),
        prob_cap=config.prob_cap,
        epsilon=config.histogram.epsilon,
        next_k=adapt_k(models, hists, config.prob_cap),
        pooled=config.histogram.pool_dims,
        folded=fold,
        pinned=config.pin_probability,
    )


def _reference_histogram(x: np.ndarray, cfg: SIEConfig) -> Histogram:
    model = init_model(x, 2.0, gaussian_convention=True)
    h = None
    for _ in range(4):
        lo, hi = hist.adaptive_range(model, cfg.histogram)
        h = hist.smooth(hist.build(x, (lo, hi), cfg.histogram), cfg.histogram)
        mu, alpha = estimate_mu_alpha(h)
        sigma = fit_sigma(h, alpha, mu, 2.0, cfg.k_initial, True)
        done = abs(sigma - model.sigma) <= cfg.bootstrap_rtol * model.sigma
        model = NoiseModel(alpha, mu, sigma, 2.0)
        if done:
            break
    # Laplacian-like tails need more room than the Gaussian cut-off gives.
    lo, hi = hist.adaptive_range(replace(model, sigma=2.0 * model.sigma), cfg.histogram)
    return hist.smooth(hist.build(x, (lo, hi), cfg.histogram), cfg.histogram)


def _mixture_loglik(d: np.ndarray, p: float, width: float, a0: float, iters: int = 60) -> float:
    """Log-likelihood of |x - mu| = ``d`` under a GGD of shape p mixed with a uniform background.

    The GGD scale and mixing weight are fitted by EM from the scale ``a0``.
    """
    dp = d ** p
    norm = p / (2.0 * math.gamma(1.0 / p))
    u = 1.0 / width
    a, w_in = a0, 0.5
    ll = -math.inf
    for _ in range(iters):
        f = norm / a * np.exp(-np.minimum(dp / a ** p, UNDERFLOW))
        num = w_in * f
        den = num + (1.0 - w_in) * u
        new_ll = float(np.sum(np.log(den)))
        resp = num / den
        mass = float(resp.sum())
        if mass <= 0:
            break
        w_in = min(max(mass / d.shape[0], 1e-6), 1.0 - 1e-6)
        a = max(float((p * (resp @ dp) / mass) ** (1.0 / p)), MIN_SCALE)
        done = abs(new_ll - ll) <= 1e-9 * abs(new_ll)
        ll = new_ll
        if done:
            break
    return ll


def _p_scores(column, config: SIEConfig, grid: Sequence[float], method: str) -> np.ndarray:
    """Per-candidate badness of fit for one column (lower is better)."""
    x = np.asarray(column, dtype=np.float64).reshape(-1)
    if x.shape[0] < 100:
        raise ValueError("estimating p needs at least 100 values")
    if np.ptp(x) == 0:
        raise ValueError("constant column carries no scale information")
    h = _reference_histogram(x, config)
    mu, alpha = estimate_mu_alpha(h)
    if method == "likelihood":
        # A window twice the histogram range keeps enough heavy tail to separate p = 1 from p = 1.25.
        c, half = 0.5 * (h.lo + h.hi), h.width
        d = np.abs(x[(x >= c - half) & (x <= c + half)] - mu)
        a0 = max(float(np.median(d)), MIN_SCALE)
        return -np.array([_mixture_loglik(d, p, 2.0 * half, a0) for p in grid])
    if method == "objective":
        k = config.k_initial
        return np.array([
            fit_objective(h, alpha, mu, fit_sigma(h, alpha, mu, p, k, config.gaussian_convention),
                          p, k, config.gaussian_convention)
            for p in grid])
    raise ValueError(f"unknown method {method!r}")


def _pick(scores: np.ndarray, grid: Sequence[float]) -> float:
    best = float(scores.min())
    tied = [p for p, s in zip(grid, scores) if s <= best + 1e-12 * abs(best)]
    return min(tied, key=lambda p: abs(p - 2.0))


def estimate_p(column, config: SIEConfig = SIEConfig(), grid: Sequence[float] = P_GRID,
               method: str = "likelihood") -> float:
    """Exponent on ``grid`` that best explains the peak of the residual histogram.

    ``method="likelihood"`` models the values inside a reference histogram
    range as a generalized Gaussian of shape p around the histogram peak mixed
    with a uniform background over the range, fits scale and mixing weight per
    candidate and keeps the highest likelihood. ``method="objective"`` instead
    fits sigma beneath the histogram for each candidate and keeps the lowest
    fit objective. Ties go to p = 2.
    """
    return _pick(_p_scores(column, config, grid, method), grid)


def estimate_shared_p(columns: Sequence[np.ndarray], config: SIEConfig = SIEConfig(),
                      grid: Sequence[float] = P_GRID, method: str = "likelihood") -> float:
    """One exponent for all columns: the per-column scores are summed before picking."""
    if not len(columns):
        raise ValueError("need at least one column")
    return _pick(sum(_p_scores(c, config, grid, method) for c in columns), grid)
