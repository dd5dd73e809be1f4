"""Toy super-resolution networks and the model abstraction everything uses.

Attacks, training, and smoothing only ever touch three things on a model:
``scale`` (integer upscale factor), ``params`` (dict of named Tensors), and
``apply`` (map a (3, h, w) tensor to (3, scale*h, scale*w), optionally on a
recording graph with lifted parameters).  Anything providing that surface
plugs in; :class:`BicubicRefineModel` is a deliberately trivial second
implementation used to demonstrate exactly that.

``SrNet`` architecture: conv(3 -> C) -> depth x [conv(C -> C) + leaky_relu]
with an additive skip over the block stack -> conv(C -> 3*scale^2) ->
pixel_shuffle(scale), added to a fixed bicubic upsampling of the input, then
clamped to [0, 1].  The global upsampling skip is a constant (non-trainable)
Keys-kernel convolution: the network only has to learn the residual on top of
bicubic, which is what lets a desk-scale run beat the bicubic baseline within
a couple thousand iterations.  All learned convs are 3x3 with zero padding 1,
so spatial dims are preserved until the shuffle.  Weights are fan-in-scaled
Gaussian draws from a seeded stream (the head damped so the initial residual
is small); biases start at zero.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .data import keys_cubic
from .rng import RngStream
from .tensor import (
    DiffGraph,
    ShapeError,
    Tensor,
    clamp,
    conv2d,
    conv2d_many,
    leaky_relu,
    pixel_shuffle,
    replicate_pad,
)

__all__ = [
    "LEAKY_SLOPE",
    "SrNet",
    "BicubicRefineModel",
    "build_srnet",
    "build_bicubic_model",
    "forward",
    "forward_many",
    "save_model",
    "load_model",
    "checkpoint_header",
    "CheckpointError",
]

LEAKY_SLOPE = 0.2

_MAGIC = b"CSRK"
_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-mismatched checkpoint file."""


def _init_conv(rng: RngStream, cout: int, cin: int, k: int):
    fan_in = cin * k * k
    w = rng.normal((cout, cin, k, k), sigma=1.0 / np.sqrt(fan_in))
    return Tensor(w), Tensor(np.zeros(cout))


class SrNet:
    """Small residual conv net upscaling (3, h, w) -> (3, scale*h, scale*w)."""

    kind = "srnet"

    def __init__(self, channels: int, depth: int, scale: int, params: dict):
        self.channels = channels
        self.depth = depth
        self.scale = scale
        self.params = params
        self._up = Tensor(_bicubic_upsample_kernel(scale))
        self._up_bias = Tensor(np.zeros(3 * scale * scale))

    def lift_params(self, graph: DiffGraph) -> dict:
        """Register every parameter as a param-leaf on ``graph``.

        Call once per graph and reuse the returned mapping across forwards so
        gradients from repeated applications accumulate on the same leaves.
        """
        return {name: graph.leaf(t, param=True) for name, t in self.params.items()}

    def apply(self, x: Tensor, params: Optional[dict] = None) -> Tensor:
        if x.data.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"expected a (3, h, w) input, got {x.shape}")
        p = params if params is not None else self.params
        h0 = conv2d(x, p["conv_in.weight"], p["conv_in.bias"], padding=1)
        h = h0
        for i in range(self.depth):
            h = leaky_relu(conv2d(h, p[f"block{i}.weight"], p[f"block{i}.bias"], padding=1),
                           LEAKY_SLOPE)
        h = h + h0
        h = conv2d(h, p["head.weight"], p["head.bias"], padding=1)
        up = pixel_shuffle(conv2d(replicate_pad(x, 2), self._up, self._up_bias, padding=0),
                           self.scale)
        return clamp(pixel_shuffle(h, self.scale) + up, 0.0, 1.0)

    def apply_batch(self, xs: np.ndarray) -> np.ndarray:
        """Eager inference over a (N, 3, h, w) stack; no recording."""
        p = {k: v.data for k, v in self.params.items()}
        h0 = conv2d_many(xs, p["conv_in.weight"], p["conv_in.bias"], padding=1)
        h = h0
        for i in range(self.depth):
            h = conv2d_many(h, p[f"block{i}.weight"], p[f"block{i}.bias"], padding=1)
            h = np.where(h >= 0.0, h, LEAKY_SLOPE * h)
        h = h + h0
        h = conv2d_many(h, p["head.weight"], p["head.bias"], padding=1)
        up = conv2d_many(_replicate_pad_batch(xs, 2), self._up.data, self._up_bias.data,
                         padding=0)
        out = _shuffle_batch(h, self.scale) + _shuffle_batch(up, self.scale)
        return np.clip(out, 0.0, 1.0)


def _replicate_pad_batch(xs: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(xs, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")


def _shuffle_batch(xs: np.ndarray, r: int) -> np.ndarray:
    n, crr, h, w = xs.shape
    c = crr // (r * r)
    return (
        xs.reshape(n, c, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, h * r, w * r)
    )


HEAD_INIT_GAIN = 0.01  # damp the initial residual so the net starts near bicubic


def build_srnet(channels: int = 16, depth: int = 3, scale: int = 4,
                rng: Optional[RngStream] = None) -> SrNet:
    """Construct an :class:`SrNet` with seeded fan-in-scaled Gaussian weights.

    Parameter draw order is fixed (conv_in, block0..block{depth-1}, head;
    weights before biases), so a given (seed, config) always yields
    bit-identical parameters.
    """
    if scale not in (2, 4):
        raise ShapeError(f"scale must be 2 or 4, got {scale}")
    if depth < 1:
        raise ShapeError(f"depth must be >= 1, got {depth}")
    if channels < 4:
        raise ShapeError(f"channels must be >= 4, got {channels}")
    rng = rng if rng is not None else RngStream(0)
    params: dict = {}
    params["conv_in.weight"], params["conv_in.bias"] = _init_conv(rng, channels, 3, 3)
    for i in range(depth):
        params[f"block{i}.weight"], params[f"block{i}.bias"] = _init_conv(rng, channels, channels, 3)
    head_w, head_b = _init_conv(rng, 3 * scale * scale, channels, 3)
    params["head.weight"] = Tensor(HEAD_INIT_GAIN * head_w.data)
    params["head.bias"] = head_b
    return SrNet(channels, depth, scale, params)


# ---------------------------------------------------------------------------
# Trivial second model: fixed bicubic upsampling + trainable 1x1 refinement
# ---------------------------------------------------------------------------

def _bicubic_upsample_kernel(r: int) -> np.ndarray:
    """A (3*r^2, 3, 5, 5) conv kernel that reproduces x{r} bicubic upsampling.

    Phase p of the output samples the source at offset (p + 0.5)/r - 0.5; the
    per-phase 5-tap Keys filters are placed so conv2d on a replicate-padded
    input followed by pixel_shuffle(r) matches separable edge-clamped cubic
    interpolation everywhere, borders included.
    """
    taps = np.arange(-2, 3)
    kernel = np.zeros((3 * r * r, 3, 5, 5))
    for pi in range(r):
        wr = keys_cubic((pi + 0.5) / r - 0.5 - taps)
        for pj in range(r):
            wc = keys_cubic((pj + 0.5) / r - 0.5 - taps)
            patch = np.outer(wr, wc)
            for c in range(3):
                kernel[c * r * r + pi * r + pj, c] = patch
    return kernel


class BicubicRefineModel:
    """Bicubic-then-identity-conv: the minimal plug-compatible model.

    The upsampling kernel is a fixed constant; only the 1x1 refinement conv
    (initialised to the identity) carries parameters.
    """

    kind = "bicubic_refine"

    def __init__(self, scale: int, params: dict):
        self.scale = scale
        self.params = params
        self._up = Tensor(_bicubic_upsample_kernel(scale))
        self._up_bias = Tensor(np.zeros(3 * scale * scale))

    def lift_params(self, graph: DiffGraph) -> dict:
        return {name: graph.leaf(t, param=True) for name, t in self.params.items()}

    def apply(self, x: Tensor, params: Optional[dict] = None) -> Tensor:
        if x.data.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"expected a (3, h, w) input, got {x.shape}")
        p = params if params is not None else self.params
        up = pixel_shuffle(conv2d(replicate_pad(x, 2), self._up, self._up_bias, padding=0),
                           self.scale)
        out = conv2d(up, p["refine.weight"], p["refine.bias"], padding=0)
        return clamp(out, 0.0, 1.0)

    def apply_batch(self, xs: np.ndarray) -> np.ndarray:
        up = _shuffle_batch(conv2d_many(_replicate_pad_batch(xs, 2), self._up.data,
                                        self._up_bias.data, padding=0),
                            self.scale)
        out = conv2d_many(up, self.params["refine.weight"].data,
                          self.params["refine.bias"].data, padding=0)
        return np.clip(out, 0.0, 1.0)


def build_bicubic_model(scale: int = 4) -> BicubicRefineModel:
    if scale not in (2, 4):
        raise ShapeError(f"scale must be 2 or 4, got {scale}")
    eye = np.zeros((3, 3, 1, 1))
    for c in range(3):
        eye[c, c, 0, 0] = 1.0
    params = {"refine.weight": Tensor(eye), "refine.bias": Tensor(np.zeros(3))}
    return BicubicRefineModel(scale, params)


# ---------------------------------------------------------------------------
# Forward entry points
# ---------------------------------------------------------------------------

def forward(model, x: Tensor, record: bool = False):
    """Run the model on one image.

    With ``record=False`` returns the output tensor.  With ``record=True``
    returns (output, graph); the input is the graph's first leaf and the
    parameters are its param-leaves, so gradients with respect to both are
    available from ``graph.backward``.
    """
    if not record:
        return model.apply(x if isinstance(x, Tensor) else Tensor(x))
    graph = DiffGraph()
    x_leaf = graph.leaf(x)
    params = model.lift_params(graph)
    out = model.apply(x_leaf, params)
    return out, graph


def forward_many(model, xs: np.ndarray) -> np.ndarray:
    """Eager batched forward over (N, 3, h, w); falls back to a loop."""
    if hasattr(model, "apply_batch"):
        return model.apply_batch(xs)
    return np.stack([model.apply(Tensor(x)).data for x in xs], axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "CSRK" | version u32 | scale u32 | channels u32 | depth u32
#   | kind_len u32 | kind utf-8 | n_params u32
#   | n_params x (name_len u32 | name utf-8 | rank u32 | dims u32*rank
#                 | raw float64 data)

def save_model(model, path: str) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        channels = getattr(model, "channels", 0)
        depth = getattr(model, "depth", 0)
        kind = model.kind.encode()
        f.write(struct.pack("<IIII", _VERSION, model.scale, channels, depth))
        f.write(struct.pack("<I", len(kind)))
        f.write(kind)
        f.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", tensor.data.ndim))
            f.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            f.write(tensor.data.astype("<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def checkpoint_header(path: str) -> dict:
    """Read only the header fields (version, scale, channels, depth, kind)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise CheckpointError("not a CSRK checkpoint (bad magic)")
        version, scale, channels, depth = struct.unpack("<IIII", _read_exact(f, 16))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {_VERSION})")
        (kind_len,) = struct.unpack("<I", _read_exact(f, 4))
        kind = _read_exact(f, kind_len).decode()
        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
    return {"version": version, "scale": scale, "channels": channels,
            "depth": depth, "kind": kind, "n_params": n_params}


def load_model(path: str):
    header = checkpoint_header(path)
    params: dict = {}
    with open(path, "rb") as f:
        f.seek(4 + 16 + 4 + len(header["kind"]) + 4)
        for _ in range(header["n_params"]):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode()
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(dims)
            params[name] = Tensor(data)
    if header["kind"] == "srnet":
        return SrNet(header["channels"], header["depth"], header["scale"], params)
    if header["kind"] == "bicubic_refine":
        return BicubicRefineModel(header["scale"], params)
    raise CheckpointError(f"unknown model kind {header['kind']!r}")
