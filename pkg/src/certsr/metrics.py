"""Losses for training/attacks and full-reference image quality metrics.

The perceptual pieces use a tiny frozen feature extractor (two 3x3 convs,
3 -> 8 -> 16 channels, leaky ReLU) whose weights are drawn once from the fixed
seed ``FEATURE_SEED`` and never trained.  It is a stand-in for a large
pretrained feature network: reported perceptual-similarity numbers are
labelled ``proxy_lpips`` everywhere to make the substitution explicit.

PSNR is computed on the mean squared error over all three RGB channels
(documented choice; peak defaults to 1.0) and capped at 100 dB when the MSE is
exactly zero.  SSIM is the standard two-term form with an 11x11 Gaussian
window (std 1.5) and constants C1 = 1e-4, C2 = 9e-4 on unit range, averaged
over channels and valid window positions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import RngStream
from .tensor import ShapeError, Tensor, absolute, conv2d, leaky_relu, mul, sub, tmean

__all__ = [
    "FEATURE_SEED",
    "FeatureExtractor",
    "default_extractor",
    "l1_loss",
    "perceptual_loss",
    "attack_loss",
    "psnr",
    "ssim",
    "proxy_lpips",
    "EvalRow",
    "EvalReport",
    "PSNR_CAP_DB",
]

FEATURE_SEED = 1105
PSNR_CAP_DB = 100.0

_SLOPE = 0.2


class FeatureExtractor:
    """Frozen two-layer conv feature map, identical across runs."""

    def __init__(self, seed: int = FEATURE_SEED):
        rng = RngStream(seed, stream_id=0)
        self.w1 = Tensor(rng.normal((8, 3, 3, 3), sigma=1.0 / np.sqrt(27.0)))
        self.b1 = Tensor(np.zeros(8))
        self.w2 = Tensor(rng.normal((16, 8, 3, 3), sigma=1.0 / np.sqrt(72.0)))
        self.b2 = Tensor(np.zeros(16))

    def features(self, x: Tensor) -> Tensor:
        h = leaky_relu(conv2d(x, self.w1, self.b1, padding=1), _SLOPE)
        return leaky_relu(conv2d(h, self.w2, self.b2, padding=1), _SLOPE)


_default_fx: Optional[FeatureExtractor] = None


def default_extractor() -> FeatureExtractor:
    global _default_fx
    if _default_fx is None:
        _default_fx = FeatureExtractor()
    return _default_fx


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 at exact ties."""
    return tmean(absolute(sub(pred, target)))


def perceptual_loss(pred: Tensor, target: Tensor,
                    fx: Optional[FeatureExtractor] = None) -> Tensor:
    """Mean squared distance between frozen feature maps."""
    if pred.shape != target.shape:
        raise ShapeError(f"perceptual_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[0] != 3:
        raise ShapeError("perceptual_loss expects 3-channel images")
    fx = fx or default_extractor()
    d = sub(fx.features(pred), fx.features(target))
    return tmean(mul(d, d))


def attack_loss(pred: Tensor, target: Tensor,
                fx: Optional[FeatureExtractor] = None) -> Tensor:
    """Pixel L1 plus proxy-perceptual distance: the objective attacks climb."""
    return l1_loss(pred, target) + perceptual_loss(pred, target, fx)


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; exact-zero MSE maps to the 100 dB cap."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    return g / g.sum()


def _window_filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted local sums over all fully-contained window positions."""
    k = g.size
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for t in range(k):
        rows += g[t] * img[:, t:t + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for t in range(k):
        out += g[t] * rows[t:t + h - k + 1, :]
    return out


def ssim(a, b) -> float:
    """Two-term SSIM with a Gaussian window, averaged over channels."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[1] < 11 or a.shape[2] < 11:
        raise ShapeError(f"ssim: image {a.shape[1:]} smaller than the 11x11 window")
    c1, c2 = 1e-4, 9e-4
    g = _gauss_window()
    values = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        mu_x = _window_filter_valid(x, g)
        mu_y = _window_filter_valid(y, g)
        xx = _window_filter_valid(x * x, g) - mu_x * mu_x
        yy = _window_filter_valid(y * y, g) - mu_y * mu_y
        xy = _window_filter_valid(x * y, g) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def proxy_lpips(a, b, fx: Optional[FeatureExtractor] = None) -> float:
    """Channel-unit-normalized feature distance (proxy metric, lower = closer)."""
    fx = fx or default_extractor()
    fa = fx.features(Tensor(_as_array(a))).data
    fb = fx.features(Tensor(_as_array(b))).data
    na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-12)
    nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-12)
    return float(np.mean((na - nb) ** 2))


@dataclass
class EvalRow:
    dataset: str
    method: str
    psnr_db: float
    ssim: float
    proxy_lpips: float


@dataclass
class EvalReport:
    """Rows of aggregate metrics, serializable to the pinned CSV layout."""

    rows: list = field(default_factory=list)

    def add(self, dataset: str, method: str, psnr_db: float, ssim_value: float,
            lpips_value: float) -> None:
        self.rows.append(EvalRow(dataset, method, psnr_db, ssim_value, lpips_value))

    def write_csv(self, path: str, seed: int, version: str) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# seed={seed} version={version}\n")
            writer = csv.writer(f)
            writer.writerow(["dataset", "method", "psnr_db", "ssim", "proxy_lpips"])
            for r in self.rows:
                writer.writerow([r.dataset, r.method, f"{r.psnr_db:.6f}",
                                 f"{r.ssim:.6f}", f"{r.proxy_lpips:.6f}"])
