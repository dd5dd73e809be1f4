"""Median/percentile randomized smoothing and L2 certification.

Smoothing replaces a model's output with a per-pixel order statistic of its
predictions under Gaussian input noise.  For a percentile p, noise level
sigma, and L2 budget epsilon, the smoothed output at any ||delta||_2 < epsilon
perturbed input is bracketed by the percentile outputs at the clean input:

    p_upper = Phi(Phi^-1(p) + epsilon / sigma)
    p_lower = Phi(Phi^-1(p) - epsilon / sigma)

with Phi the standard normal CDF.  Percentiles are estimated by plain Monte
Carlo: the empirical rank used for percentile q of n samples is ceil(n * q),
1-based, with the lower rank floored at 1.  No finite-sample confidence
correction is applied (raw empirical quantiles; the CSV emitted by the CLI
flags this).  A certificate whose upper percentile reaches 1.0 cannot be
estimated from any finite sample and raises :class:`CertificateSaturatedError`.

Noisy inputs are clamped to [0, 1] before the forward pass so the model
always sees valid images; at the sigmas used here the clamp is rarely active.
Containment checking reuses one noise block for the bound and every trial
estimator (common random numbers), which makes the epsilon = 0 containment
rate exactly 1.0 and reduces estimator variance near the bound boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import forward_many
from .rng import RngStream
from .tensor import ShapeError, Tensor

__all__ = [
    "SmoothingSpec",
    "CertBound",
    "CertificateSaturatedError",
    "std_normal_cdf",
    "std_normal_quantile",
    "cert_percentiles",
    "sample_median",
    "sample_mean",
    "median_smooth",
    "mean_smooth",
    "bound_ranks",
    "percentile_bounds_mc",
    "certify_containment",
]

SPHERE_RADIUS_FACTOR = 0.999  # the certificate is for strict ||delta||_2 < eps


class CertificateSaturatedError(ValueError):
    """The requested percentile cannot be bounded by n samples; raise n."""


@dataclass
class SmoothingSpec:
    sigma: float
    n: int = 21
    p: float = 0.5
    rng: Optional[RngStream] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ShapeError("smoothing sigma must be >= 0")
        if self.n < 1:
            raise ShapeError("smoothing n must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise ShapeError(f"percentile p must lie in (0, 1), got {self.p}")
        if self.rng is None:
            self.rng = RngStream(0)


@dataclass
class CertBound:
    p_lower: float
    p_upper: float
    rank_lower: int
    rank_upper: int
    lower_image: np.ndarray
    upper_image: np.ndarray
    epsilon: float
    sigma: float
    n: int


# ---------------------------------------------------------------------------
# Standard normal CDF and its numerical inverse
# ---------------------------------------------------------------------------

def std_normal_cdf(z: float) -> float:
    """Phi(z) via erf; absolute error below 1e-12."""
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def std_normal_quantile(p: float) -> float:
    """Numerical inverse of :func:`std_normal_cdf` by bisection.

    Accurate enough that |Phi(Phi^-1(p)) - p| < 1e-10 across (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ShapeError(f"quantile requires p in (0, 1), got {p}")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if std_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(lo)):
            break
    return 0.5 * (lo + hi)


def cert_percentiles(p: float, epsilon: float, sigma: float) -> tuple:
    """The bracketing percentiles (p_lower, p_upper) for an L2 budget."""
    if epsilon < 0:
        raise ShapeError("epsilon must be >= 0")
    if epsilon == 0.0:
        return (p, p)
    if sigma <= 0.0:
        raise CertificateSaturatedError(
            "sigma = 0 with epsilon > 0 admits no certificate")
    z = std_normal_quantile(p)
    shift = epsilon / sigma
    return (std_normal_cdf(z - shift), std_normal_cdf(z + shift))


# ---------------------------------------------------------------------------
# Monte Carlo smoothing
# ---------------------------------------------------------------------------

def sample_median(stack: np.ndarray) -> np.ndarray:
    """Per-pixel median across axis 0 (middle order statistic for odd n)."""
    return np.median(stack, axis=0)


def sample_mean(stack: np.ndarray) -> np.ndarray:
    """Per-pixel mean across axis 0."""
    return np.mean(stack, axis=0)


def _prediction_stack(model, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    noisy = np.clip(x[None] + noise, 0.0, 1.0)
    return forward_many(model, noisy)


def _base_forward(model, x: np.ndarray) -> np.ndarray:
    return model.apply(Tensor(x)).data.copy()


def median_smooth(model, x, spec: SmoothingSpec) -> np.ndarray:
    """Pixelwise median of n noisy forward passes; sigma = 0 is the identity."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if spec.n % 2 == 0:
        raise ShapeError(f"median smoothing needs odd n, got {spec.n}")
    if spec.sigma == 0.0:
        return _base_forward(model, x)
    noise = spec.rng.normal((spec.n,) + x.shape, spec.sigma)
    return sample_median(_prediction_stack(model, x, noise))


def mean_smooth(model, x, spec: SmoothingSpec) -> np.ndarray:
    """Pixelwise mean of n noisy forward passes; sigma = 0 is the identity."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if spec.n < 1:
        raise ShapeError("mean smoothing needs n >= 1")
    if spec.sigma == 0.0:
        return _base_forward(model, x)
    noise = spec.rng.normal((spec.n,) + x.shape, spec.sigma)
    return sample_mean(_prediction_stack(model, x, noise))


def bound_ranks(p_lower: float, p_upper: float, n: int) -> tuple:
    rank_upper = math.ceil(n * p_upper)
    if p_upper >= 1.0 or rank_upper > n:
        raise CertificateSaturatedError(
            f"upper percentile {p_upper:.6g} needs rank > n = {n}; "
            "draw more samples (larger n) or certify a smaller epsilon")
    rank_lower = max(1, math.ceil(n * p_lower))
    rank_upper = min(n, rank_upper)
    return rank_lower, rank_upper


def _bounds_from_stack(stack: np.ndarray, spec: SmoothingSpec,
                       epsilon: float) -> CertBound:
    p_lower, p_upper = cert_percentiles(spec.p, epsilon, spec.sigma)
    rank_lower, rank_upper = bound_ranks(p_lower, p_upper, spec.n)
    ordered = np.sort(stack, axis=0)
    return CertBound(
        p_lower=p_lower, p_upper=p_upper,
        rank_lower=rank_lower, rank_upper=rank_upper,
        lower_image=ordered[rank_lower - 1],
        upper_image=ordered[rank_upper - 1],
        epsilon=epsilon, sigma=spec.sigma, n=spec.n,
    )


def percentile_bounds_mc(model, x, spec: SmoothingSpec, epsilon: float) -> CertBound:
    """Order-statistic images bounding the smoothed output within epsilon."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if spec.sigma <= 0.0:
        raise ShapeError("percentile bounds need sigma > 0")
    if spec.n < 10:
        raise ShapeError("percentile bounds need n >= 10")
    noise = spec.rng.normal((spec.n,) + x.shape, spec.sigma)
    return _bounds_from_stack(_prediction_stack(model, x, noise), spec, epsilon)


def certify_containment(model, x, spec: SmoothingSpec, epsilon: float,
                        trials: int, delta_epsilon: Optional[float] = None) -> float:
    """Fraction of pixels whose perturbed smoothed median stays in bounds.

    Each trial perturbs x by a uniform draw on the L2 sphere of radius
    0.999 * delta_epsilon (clamping back into [0, 1] only shrinks the L2
    norm, so the perturbation stays inside the certified ball), re-estimates
    the smoothed median with the same noise block used for the bounds, and
    counts pixels inside [lower_image, upper_image].
    """
    if trials < 1:
        raise ShapeError("containment needs trials >= 1")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if spec.sigma <= 0.0:
        raise ShapeError("containment needs sigma > 0")
    if delta_epsilon is None:
        delta_epsilon = epsilon
    noise = spec.rng.derive("containment-noise").normal((spec.n,) + x.shape, spec.sigma)
    bound = _bounds_from_stack(_prediction_stack(model, x, noise), spec, epsilon)
    delta_rng = spec.rng.derive("containment-delta")
    inside = 0
    total = 0
    for _ in range(trials):
        direction = delta_rng.normal(x.shape)
        norm = float(np.sqrt(np.sum(direction * direction)))
        delta = direction / norm * (SPHERE_RADIUS_FACTOR * delta_epsilon)
        x_pert = np.clip(x + delta, 0.0, 1.0)
        med = sample_median(_prediction_stack(model, x_pert, noise))
        ok = (bound.lower_image <= med) & (med <= bound.upper_image)
        inside += int(np.count_nonzero(ok))
        total += ok.size
    return inside / total
