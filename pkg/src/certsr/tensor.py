"""Dense float64 tensors and a minimal reverse-mode autodiff tape.

The engine is deliberately small: enough primitives for little convolutional
networks, the attack objectives, and median-based losses.  Values are plain
numpy arrays; gradients come from a :class:`DiffGraph` tape that records every
primitive applied to tensors created via :meth:`DiffGraph.leaf`.  Tensors are
immutable after construction (backing arrays are frozen) and safe to share;
recording is single-threaded per graph.

Conventions baked in here and relied on elsewhere:

* images are (channels, height, width) in [0, 1];
* conv2d is cross-correlation with zero padding;
* ``sign(0) = 0`` and ``abs`` has subgradient 0 at ties;
* ``clamp`` passes gradient only inside [lo, hi] (inclusive);
* no broadcasting except the conv bias and python-scalar operands.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiffGraph",
    "ShapeError",
    "GraphError",
    "add",
    "sub",
    "mul",
    "leaky_relu",
    "tanh",
    "clamp",
    "absolute",
    "sqrt_eps",
    "conv2d",
    "conv2d_many",
    "replicate_pad",
    "pixel_shuffle",
    "pixel_unshuffle",
    "tsum",
    "tmean",
    "pixelwise_median",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes or an invalid configuration."""


class GraphError(ValueError):
    """Misuse of the recording tape (mixed graphs, non-scalar loss, ...)."""


def _freeze(data: np.ndarray) -> np.ndarray:
    # For arrays the engine itself produced; copies only if non-contiguous.
    # (np.ascontiguousarray would promote 0-d scalars to 1-d, so avoid it.)
    data = np.asarray(data, dtype=np.float64)
    if not data.flags.c_contiguous:
        data = np.array(data, dtype=np.float64, order="C")
    data.flags.writeable = False
    return data


def _copy_in(data) -> np.ndarray:
    # For caller-supplied values: always copy so freezing never touches
    # an array the caller still owns.
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable N-dimensional float64 array, optionally on a tape.

    Plain tensors compute eagerly; tensors returned by :meth:`DiffGraph.leaf`
    (and everything derived from them) are recorded so that
    :meth:`DiffGraph.backward` can produce gradients.
    """

    __slots__ = ("data", "_graph", "_idx")

    def __init__(self, data):
        arr = _copy_in(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        self.data = arr
        self._graph: Optional["DiffGraph"] = None
        self._idx: int = -1

    @staticmethod
    def _recorded(data: np.ndarray, graph: "DiffGraph", idx: int) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = _freeze(data)
        t._graph = graph
        t._idx = idx
        return t

    @staticmethod
    def _plain(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = _freeze(data)
        t._graph = None
        t._idx = -1
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self._graph is not None

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """The same values as a plain (untracked) tensor."""
        return Tensor._plain(self.data)

    def __repr__(self) -> str:
        tag = " recorded" if self.recorded else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant_like(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return clamp(self, lo, hi)


def _constant_like(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("parents", "vjp", "shape")

    def __init__(self, parents: tuple, vjp: Optional[Callable], shape: tuple):
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class DiffGraph:
    """A recorded tape of primitive operations.

    Nodes are stored in recording order, which is a topological order; the
    backward pass walks the list once in reverse.  Leaves are created with
    :meth:`leaf` and flagged as inputs or parameters.  Repeated backward
    calls accumulate into fresh buffers each time.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._param_flags: list[bool] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, param: bool = False) -> Tensor:
        """Record ``value`` as a gradient-carrying leaf on this graph."""
        src = value.data if isinstance(value, Tensor) else _copy_in(value)
        if not np.all(np.isfinite(src)):
            raise ValueError("leaf entries must be finite")
        idx = len(self._nodes)
        self._nodes.append(_Node((), None, src.shape))
        t = Tensor._recorded(src, self, idx)
        self._leaves.append(t)
        self._param_flags.append(bool(param))
        return t

    def leaves(self, params_only: bool = False) -> list[Tensor]:
        if params_only:
            return [t for t, p in zip(self._leaves, self._param_flags) if p]
        return list(self._leaves)

    def _record(self, out_data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
        idx = len(self._nodes)
        self._nodes.append(_Node(parents, vjp, out_data.shape))
        return Tensor._recorded(out_data, self, idx)

    def backward(self, loss: Tensor) -> "Gradients":
        """Gradients of a scalar ``loss`` with respect to every leaf."""
        if loss._graph is not self:
            raise GraphError("loss was not recorded on this graph")
        if loss.data.shape != ():
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss._idx] = np.ones((), dtype=np.float64)
        for idx in range(loss._idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self._nodes[idx]
            if node.vjp is None:
                continue
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = np.zeros(self._nodes[parent].shape, dtype=np.float64)
                grads[parent] += contrib
        table = {}
        for t in self._leaves:
            g = grads[t._idx]
            table[t._idx] = np.zeros(t.shape, dtype=np.float64) if g is None else g
        return Gradients(self, table)


class Gradients:
    """Result of one backward pass; indexable by leaf tensor."""

    def __init__(self, graph: DiffGraph, table: dict):
        self._graph = graph
        self._table = table

    def wrt(self, leaf: Tensor) -> np.ndarray:
        if leaf._graph is not self._graph or leaf._idx not in self._table:
            raise GraphError("tensor is not a leaf of the differentiated graph")
        return self._table[leaf._idx]

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return self.wrt(leaf)


def _graph_of(*tensors: Tensor) -> Optional[DiffGraph]:
    graph = None
    for t in tensors:
        if t._graph is None:
            continue
        if graph is None:
            graph = t._graph
        elif graph is not t._graph:
            raise GraphError("operands belong to different graphs")
    return graph


def _parent_idx(t: Tensor, graph: Optional[DiffGraph]) -> int:
    return t._idx if (graph is not None and t._graph is graph) else -1


def _finish(out: np.ndarray, inputs: Sequence[Tensor], vjp_builder) -> Tensor:
    """Wrap an op result, recording it if any input is recorded.

    ``vjp_builder`` receives the tuple of tracked-flags and returns the vjp
    callable; parents line up with the tracked inputs in order.
    """
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor._plain(out)
    parent_ids = tuple(_parent_idx(t, graph) for t in inputs)
    tracked = tuple(i >= 0 for i in parent_ids)
    vjp = vjp_builder(tracked)
    parents = tuple(i for i in parent_ids if i >= 0)

    def vjp_packed(g, _vjp=vjp, _tracked=tracked):
        full = _vjp(g)
        return tuple(c for c, keep in zip(full, _tracked) if keep)

    return graph._record(out, parents, vjp_packed)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _constant_like(b)
    if b.shape != ():
        _require_same_shape(a, b, "add")
    out = a.data + b.data

    def build(tracked):
        def vjp(g):
            gb = g if b.shape != () else np.sum(g)
            return (g, gb)
        return vjp

    return _finish(out, (a, b), build)


def sub(a: Tensor, b) -> Tensor:
    b = _constant_like(b)
    if b.shape != () and a.shape != ():
        _require_same_shape(a, b, "sub")
    out = a.data - b.data

    def build(tracked):
        def vjp(g):
            ga = g if a.shape == out.shape else np.sum(g)
            gb = -g if b.shape == out.shape else -np.sum(g)
            return (ga, gb)
        return vjp

    return _finish(out, (a, b), build)


def mul(a: Tensor, b) -> Tensor:
    b = _constant_like(b)
    if b.shape != ():
        _require_same_shape(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def build(tracked):
        def vjp(g):
            ga = g * b_data
            gb = g * a_data if b_data.shape != () else np.sum(g * a_data)
            return (ga, gb)
        return vjp

    return _finish(out, (a, b), build)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data >= 0.0, x.data, slope * x.data)
    deriv = np.where(x.data >= 0.0, 1.0, slope)

    def build(tracked):
        return lambda g: (g * deriv,)

    return _finish(out, (x,), build)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def build(tracked):
        return lambda g: (g * (1.0 - t * t),)

    return _finish(t, (x,), build)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ShapeError(f"clamp: lo={lo} exceeds hi={hi}")
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def build(tracked):
        return lambda g: (g * inside,)

    return _finish(out, (x,), build)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    s = np.sign(x.data)  # sign(0) = 0: subgradient 0 at exact ties

    def build(tracked):
        return lambda g: (g * s,)

    return _finish(out, (x,), build)


def sqrt_eps(x: Tensor, eps: float) -> Tensor:
    """sqrt(x + eps), differentiable at x = 0 for eps > 0."""
    if eps <= 0.0:
        raise ShapeError("sqrt_eps requires eps > 0")
    root = np.sqrt(x.data + eps)

    def build(tracked):
        return lambda g: (g * (0.5 / root),)

    return _finish(root, (x,), build)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data))
    shape = x.shape

    def build(tracked):
        return lambda g: (np.broadcast_to(g, shape).copy(),)

    return _finish(out, (x,), build)


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(np.mean(x.data))
    shape, n = x.shape, x.size

    def build(tracked):
        return lambda g: (np.broadcast_to(g / n, shape).copy(),)

    return _finish(out, (x,), build)


# ---------------------------------------------------------------------------
# Convolution and pixel shuffling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, ho, wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + ho, kj:kj + wo]
    return cols.reshape(cin * kh * kw, ho * wo)


def _conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray, padding: int):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, ho, wo)
    out = (k.reshape(cout, -1) @ cols).reshape(cout, ho, wo) + b[:, None, None]
    return out, cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (Cin, H, W), ``kernel`` (Cout, Cin, kH, kW), ``bias`` (Cout,).
    Output height is H + 2*padding - kH + 1 (width accordingly).
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("conv2d expects x (Cin,H,W), kernel (Cout,Cin,kH,kW), bias (Cout,)")
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding < 0:
        raise ShapeError("conv2d: padding must be non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")

    out, cols = _conv2d_forward(x.data, kernel.data, bias.data, padding)
    k_data = kernel.data
    ho, wo = out.shape[1], out.shape[2]

    def build(tracked):
        need_x, need_k, need_b = tracked

        def vjp(g):
            gf = g.reshape(cout, -1)
            gx = gk = gb = None
            if need_x:
                # col2im: scatter the kernel-transposed gradient back onto
                # the padded input, then crop the padding off.
                dcols = (k_data.reshape(cout, -1).T @ gf).reshape(cin, kh, kw, ho, wo)
                gxp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[:, ki:ki + ho, kj:kj + wo] += dcols[:, ki, kj]
                gx = gxp[:, padding:padding + h, padding:padding + w]
                if padding:
                    gx = gx.copy()
            if need_k:
                gk = (gf @ cols.T).reshape(cout, cin, kh, kw)
            if need_b:
                gb = g.sum(axis=(1, 2))
            return (gx, gk, gb)

        return vjp

    return _finish(out, (x, kernel, bias), build)


def conv2d_many(xs: np.ndarray, kernel: np.ndarray, bias: np.ndarray, padding: int = 0) -> np.ndarray:
    """Eager batched conv2d over (N, Cin, H, W); inference only, no recording.

    Uses chunked im2col with one GEMM per chunk; chunking only bounds the
    scratch buffer and does not change any output value.
    """
    n, cin, h, w = xs.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d_many: input has {cin} channels but kernel expects {kcin}")
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    kmat = kernel.reshape(cout, cin * kh * kw)
    out = np.empty((n, cout, ho, wo), dtype=np.float64)
    per_image = cin * kh * kw * ho * wo
    chunk = max(1, 4_000_000 // max(1, per_image))  # ~32 MB f64 scratch
    for s in range(0, n, chunk):
        part = xs[s:s + chunk]
        m = part.shape[0]
        xp = np.pad(part, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = np.empty((cin, kh, kw, m, ho, wo), dtype=np.float64)
        for ki in range(kh):
            for kj in range(kw):
                np.copyto(cols[:, ki, kj],
                          xp[:, :, ki:ki + ho, kj:kj + wo].transpose(1, 0, 2, 3))
        res = kmat @ cols.reshape(cin * kh * kw, m * ho * wo)
        out[s:s + chunk] = res.reshape(cout, m, ho, wo).transpose(1, 0, 2, 3)
    out += bias[None, :, None, None]
    return out


def replicate_pad(x: Tensor, pad: int) -> Tensor:
    """Edge-replicate padding of the two trailing (spatial) axes.

    The backward pass folds border gradients back onto the replicated source
    pixels, so edge-clamped resampling stays exactly differentiable.
    """
    if pad < 0:
        raise ShapeError("replicate_pad: pad must be non-negative")
    if x.data.ndim != 3:
        raise ShapeError(f"replicate_pad expects a (C, H, W) tensor, got {x.shape}")
    c, h, w = x.shape
    rows = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    cols = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    out = x.data[:, rows[:, None], cols[None, :]]

    def build(tracked):
        def vjp(g):
            folded = np.zeros((c, h, w + 2 * pad))
            np.add.at(folded, (slice(None), rows), g)
            gx = np.zeros((c, h, w))
            np.add.at(gx, (slice(None), slice(None), cols), folded)
            return (gx,)
        return vjp

    return _finish(out, (x,), build)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C*r^2, H, W) into (C, r*H, r*W).

    Output channel c at (i, j) reads input channel c*r^2 + (i%r)*r + (j%r)
    at (i//r, j//r); the map is a bijection and pixel_unshuffle inverts it.
    """
    if r < 1:
        raise ShapeError("pixel_shuffle: r must be positive")
    crr, h, w = x.shape
    if crr % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = (
        x.data.reshape(c, r, r, h, w)
        .transpose(0, 3, 1, 4, 2)
        .reshape(c, h * r, w * r)
    )

    def build(tracked):
        def vjp(g):
            gi = (
                g.reshape(c, h, r, w, r)
                .transpose(0, 2, 4, 1, 3)
                .reshape(crr, h, w)
            )
            return (gi,)
        return vjp

    return _finish(np.ascontiguousarray(out), (x,), build)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`: (C, r*H, r*W) -> (C*r^2, H, W)."""
    if r < 1:
        raise ShapeError("pixel_unshuffle: r must be positive")
    c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r
    out = (
        x.data.reshape(c, h, r, w, r)
        .transpose(0, 2, 4, 1, 3)
        .reshape(c * r * r, h, w)
    )

    def build(tracked):
        def vjp(g):
            gi = (
                g.reshape(c, r, r, h, w)
                .transpose(0, 3, 1, 4, 2)
                .reshape(c, hr, wr)
            )
            return (gi,)
        return vjp

    return _finish(np.ascontiguousarray(out), (x,), build)


# ---------------------------------------------------------------------------
# Pixelwise median across a sample of tensors
# ---------------------------------------------------------------------------

def pixelwise_median(samples: Sequence[Tensor]) -> Tensor:
    """Median across same-shaped samples, taken independently per entry.

    Odd sample counts route the gradient entirely to the sample holding the
    median (ties resolved to the lowest sample index via a stable sort).
    Even counts average the two middle order statistics and split the
    gradient equally between their source samples.
    """
    if len(samples) == 0:
        raise ShapeError("pixelwise_median: need at least one sample")
    shape = samples[0].shape
    for s in samples[1:]:
        if s.shape != shape:
            raise ShapeError("pixelwise_median: samples must share one shape")
    k = len(samples)
    stacked = np.stack([s.data for s in samples], axis=0)
    order = np.argsort(stacked, axis=0, kind="stable")
    if k % 2 == 1:
        sel = order[(k - 1) // 2]
        out = np.take_along_axis(stacked, sel[None], axis=0)[0]

        def build(tracked):
            def vjp(g):
                return tuple(g * (sel == i) for i in range(k))
            return vjp
    else:
        lo = order[k // 2 - 1]
        hi = order[k // 2]
        v_lo = np.take_along_axis(stacked, lo[None], axis=0)[0]
        v_hi = np.take_along_axis(stacked, hi[None], axis=0)[0]
        out = 0.5 * (v_lo + v_hi)

        def build(tracked):
            def vjp(g):
                half = 0.5 * g
                return tuple(half * (lo == i) + half * (hi == i) for i in range(k))
            return vjp

    return _finish(out, tuple(samples), build)
