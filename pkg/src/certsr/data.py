"""Procedural image corpus, bicubic resampling, corruptions, and PNG I/O.

Images move through this module as float64 numpy arrays shaped (3, H, W) with
values in [0, 1].  Everything is driven by :class:`~certsr.rng.RngStream`
instances; per-image substreams make corpus generation order-independent.

Resampling uses the Keys cubic convolution kernel with a = -0.5 (the de facto
"bicubic"), sampled at 4 taps per output position with edge-clamped indices
and no antialias prefilter; the half-sample-centered grid ``src = (dst + 0.5)
* in/out - 0.5`` keeps content registered under scale changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .rng import RngStream
from .tensor import ShapeError

__all__ = [
    "CorpusSpec",
    "CorpusImage",
    "ImagePair",
    "Dataset",
    "keys_cubic",
    "grating_image",
    "generate_corpus",
    "cubic_axis_weights",
    "bicubic_resize",
    "corrupt_noise",
    "gaussian_kernel2d",
    "corrupt_blur",
    "png_read",
    "png_write",
    "PngFormatError",
    "make_dataset",
]


def keys_cubic(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; partition of unity over integer shifts."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    near = (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0
    far = a * s**3 - 5.0 * a * s**2 + 8.0 * a * s - 4.0 * a
    return np.where(s <= 1.0, near, np.where(s < 2.0, far, 0.0))


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass
class CorpusSpec:
    count: int
    hr_size: int = 64
    scale: int = 4
    weights: dict = field(default_factory=lambda: {
        "gratings": 1.0, "polygons": 1.0, "blobs": 1.0, "mixed": 1.0})
    rng: Optional[RngStream] = None

    def __post_init__(self):
        if self.count < 1:
            raise ShapeError("corpus count must be >= 1")
        if self.hr_size < 16:
            raise ShapeError(f"hr_size must be >= 16, got {self.hr_size}")
        if self.hr_size % self.scale != 0:
            raise ShapeError(f"hr_size {self.hr_size} not divisible by scale {self.scale}")
        if self.rng is None:
            self.rng = RngStream(0)


@dataclass
class CorpusImage:
    image: np.ndarray  # (3, S, S) in [0, 1]
    tag: str
    stream_id: int


def grating_image(size: int, kx: int, ky: int, phase: float,
                  amplitudes) -> np.ndarray:
    """Sinusoidal grating with integer cycle counts (kx, ky) across the image."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    wave = np.sin(2.0 * np.pi * (kx * xx + ky * yy) / size + phase)
    img = 0.5 + np.asarray(amplitudes)[:, None, None] * wave[None]
    return np.clip(img, 0.0, 1.0)


def _gen_grating(stream: RngStream, spec: "CorpusSpec") -> np.ndarray:
    # Stay below the LR Nyquist band so the content is recoverable after
    # downscaling; aliased gratings would be unlearnable noise for any model.
    size = spec.hr_size
    kmax = max(2, size // (2 * spec.scale) - 1)
    kx = int(stream.integers(0, kmax + 1))
    ky = int(stream.integers(1, kmax + 1))
    phase = float(stream.uniform(0.0, 2.0 * np.pi, ()))
    amps = stream.uniform(0.15, 0.45, (3,))
    return grating_image(size, kx, ky, phase, amps)


def _gen_polygons(stream: RngStream, spec: "CorpusSpec") -> np.ndarray:
    size = spec.hr_size
    ss = 4  # supersampling factor for anti-aliasing
    big = size * ss
    img = np.empty((3, big, big))
    img[:] = stream.uniform(0.1, 0.9, (3,))[:, None, None]
    yy, xx = np.meshgrid(np.arange(big) + 0.5, np.arange(big) + 0.5, indexing="ij")
    for _ in range(int(stream.integers(2, 5))):
        nv = int(stream.integers(3, 9))
        cx, cy = stream.uniform(0.15 * big, 0.85 * big, (2,))
        radius = float(stream.uniform(0.08 * big, 0.3 * big, ()))
        angles = np.sort(stream.uniform(0.0, 2.0 * np.pi, (nv,)))
        radii = radius * stream.uniform(0.8, 1.2, (nv,))
        vx = cx + radii * np.cos(angles)
        vy = cy + radii * np.sin(angles)
        inside = np.zeros((big, big), dtype=bool)
        for i in range(nv):  # even-odd crossing test per edge
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % nv], vy[(i + 1) % nv]
            crosses = (y1 > yy) != (y2 > yy)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
            inside ^= crosses & (xx < xi)
        color = stream.uniform(0.05, 0.95, (3,))
        img = np.where(inside[None], color[:, None, None], img)
    pooled = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    return np.clip(pooled, 0.0, 1.0)


def _gen_blobs(stream: RngStream, spec: "CorpusSpec") -> np.ndarray:
    size = spec.hr_size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.full((3, size, size), 0.5)
    for _ in range(int(stream.integers(3, 7))):
        cx, cy = stream.uniform(0.0, size, (2,))
        width = float(stream.uniform(size / 16.0, size / 4.0, ()))
        amp = float(stream.uniform(0.2, 0.5, ())) * (1 if stream.uniform(0, 1, ()) < 0.5 else -1)
        gains = stream.uniform(0.5, 1.0, (3,))
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width * width))
        img += amp * gains[:, None, None] * bump[None]
    return np.clip(img, 0.0, 1.0)


def _gen_mixed(stream: RngStream, spec: "CorpusSpec") -> np.ndarray:
    w = float(stream.uniform(0.3, 0.7, ()))
    img = w * _gen_grating(stream, spec) + (1.0 - w) * _gen_blobs(stream, spec)
    return np.clip(img, 0.0, 1.0)


_GENERATORS = {
    "gratings": _gen_grating,
    "polygons": _gen_polygons,
    "blobs": _gen_blobs,
    "mixed": _gen_mixed,
}


def generate_corpus(spec: CorpusSpec) -> list:
    """Deterministic procedural HR images; one derived stream per image."""
    names = [n for n in _GENERATORS if spec.weights.get(n, 0.0) > 0.0]
    if not names:
        raise ShapeError("corpus weights select no generator")
    cum = np.cumsum([spec.weights[n] for n in names])
    cum = cum / cum[-1]
    out = []
    for i in range(spec.count):
        stream = spec.rng.derive("corpus", i)
        pick = names[int(np.searchsorted(cum, stream.uniform(0.0, 1.0, ())))]
        image = _GENERATORS[pick](stream, spec)
        out.append(CorpusImage(image=image, tag=pick, stream_id=stream.stream_id))
    return out


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

def cubic_axis_weights(in_len: int, out_len: int):
    """Tap indices (out_len, 4) and Keys weights for one resampled axis.

    Weights at each output position sum to 1 (cubic partition of unity);
    indices are edge-clamped into [0, in_len).
    """
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    base = np.floor(pos).astype(int)
    phase = pos - base
    taps = np.arange(-1, 3)
    idx = np.clip(base[:, None] + taps[None, :], 0, in_len - 1)
    weights = keys_cubic(phase[:, None] - taps[None, :])
    return idx, weights


def _resample_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    idx, w = cubic_axis_weights(arr.shape[axis], out_len)
    moved = np.moveaxis(arr, axis, -1)
    gathered = moved[..., idx]  # (..., out_len, 4)
    out = np.einsum("...ot,ot->...o", gathered, w)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Keys (a = -0.5) resampling, edge-clamped, output in [0, 1]."""
    if out_h < 4 or out_w < 4:
        raise ShapeError(f"bicubic_resize: output dims ({out_h}, {out_w}) too small")
    img = np.asarray(img, dtype=np.float64)
    out = _resample_axis(img, out_h, axis=-2)
    out = _resample_axis(out, out_w, axis=-1)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Corruption models
# ---------------------------------------------------------------------------

def corrupt_noise(img: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Pixel-wise i.i.d. additive Gaussian noise, clamped back to [0, 1]."""
    if sigma < 0:
        raise ShapeError("noise sigma must be >= 0")
    return np.clip(img + rng.normal(img.shape, sigma), 0.0, 1.0)


def gaussian_kernel2d(ksize: int = 10, sigma: float = 0.3) -> np.ndarray:
    """Normalized 2-D Gaussian kernel.

    Even sizes use the half-sample-centered grid: tap t of an even kernel sits
    at offset t - ksize/2 + 0.5, so a size-10 kernel samples -4.5 .. 4.5.
    """
    if ksize < 1:
        raise ShapeError("blur ksize must be >= 1")
    offsets = np.arange(ksize) - (ksize - 1) / 2.0
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    k2 = np.outer(g, g)
    return k2 / k2.sum()


def corrupt_blur(img: np.ndarray, ksize: int = 10, sigma: float = 0.3) -> np.ndarray:
    """Per-channel Gaussian blur with edge-clamped boundaries."""
    kernel = gaussian_kernel2d(ksize, sigma)
    left = ksize // 2
    right = ksize - 1 - left
    padded = np.pad(img, ((0, 0), (left, right), (left, right)), mode="edge")
    h, w = img.shape[-2], img.shape[-1]
    out = np.zeros_like(img)
    for u in range(ksize):
        for v in range(ksize):
            out += kernel[u, v] * padded[:, u:u + h, v:v + w]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

class PngFormatError(ValueError):
    """The file is not the 8-bit RGB PNG this pipeline works with."""


def png_write(path: str, img: np.ndarray) -> None:
    """Write (3, H, W) values in [0, 1] as 8-bit RGB; rounds half up."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise PngFormatError(f"expected a (3, H, W) image, got shape {img.shape}")
    scaled = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
    bytes_hwc = np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(bytes_hwc, mode="RGB").save(path, format="PNG")


def png_read(path: str) -> np.ndarray:
    """Read an 8-bit RGB PNG into (3, H, W) float64 with values b/255."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise PngFormatError(f"{path}: not a PNG file (format={im.format})")
        if im.mode != "RGB":
            raise PngFormatError(
                f"{path}: unsupported color type/bit depth (mode={im.mode}); need 8-bit RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    tag: str


@dataclass
class Dataset:
    train: list
    val: list


def make_dataset(corpus: list, scale: int, rng: RngStream) -> Dataset:
    """Pair each HR image with its bicubic LR and split 80/20 by seeded shuffle."""
    if not corpus:
        raise ShapeError("corpus is empty")
    pairs = []
    for rec in corpus:
        hr = rec.image
        h, w = hr.shape[-2], hr.shape[-1]
        if h % scale or w % scale:
            raise ShapeError(f"HR size {(h, w)} not divisible by scale {scale}")
        lr = bicubic_resize(hr, h // scale, w // scale)
        pairs.append(ImagePair(lr=lr, hr=hr, tag=rec.tag))
    perm = rng.permutation(len(pairs))
    n_train = max(1, int(round(0.8 * len(pairs)))) if len(pairs) > 1 else 1
    n_train = min(n_train, len(pairs) - 1) if len(pairs) > 1 else 1
    train = [pairs[i] for i in perm[:n_train]]
    val = [pairs[i] for i in perm[n_train:]]
    return Dataset(train=train, val=val)
