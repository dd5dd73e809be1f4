"""Gradient-based adversarial attacks against super-resolution models.

All four attacks climb the same objective (pixel L1 + proxy-perceptual loss
between the SR output and the HR target) and work with anything exposing the
model surface (``apply`` + ``params`` + ``scale``).

Semantics pinned down here:

* FGSM is the pure one-step formula ``clamp(x + eps * sign(grad), 0, 1)``
  with ``sign(0) = 0``; no iterate selection.
* BIM/PGD take ``iters`` sign steps of size ``alpha`` (default ``eps/iters``),
  clamp to [0, 1] and then project back into the L-inf eps-ball around x
  after every step, and return the post-step iterate with the highest
  recorded attack loss (ties to the earliest).  With one step and
  ``alpha = eps`` this reduces bit-exactly to FGSM; PGD with no init stream
  reduces bit-exactly to BIM.
* CW optimizes ``|delta|_2(smoothed) - c * loss`` over the tanh
  reparameterization ``x + delta = (tanh(w) + 1) / 2`` with Adam, starting at
  ``w0 = atanh(2 * clamp(x, 1e-6, 1 - 1e-6) - 1)`` so delta starts (almost)
  at zero; outputs live in [0, 1] by construction.  The returned point is the
  evaluated iterate with the highest attack loss.

Every attack also returns the clean input's loss and a per-iteration loss
trace so callers can check loss dominance empirically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .metrics import attack_loss
from .rng import RngStream
from .tensor import DiffGraph, ShapeError, Tensor, mul, sqrt_eps, sub, tanh, tsum

__all__ = ["AttackSpec", "AttackResult", "fgsm", "bim", "pgd", "cw", "run_attack"]

L2_SMOOTHING_EPS = 1e-12
CW_INIT_MARGIN = 1e-6


@dataclass
class AttackSpec:
    """Configuration for one attack; fields map 1:1 to config keys."""

    kind: str = "fgsm"
    epsilon: float = 10.0 / 255.0
    alpha: Optional[float] = None  # BIM/PGD step size; None -> epsilon / iters
    iters: int = 1
    c: float = 0.01
    lr: float = 1e-2
    rng: Optional[RngStream] = None  # PGD init noise; None forces zero init

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim", "pgd", "cw"):
            raise ShapeError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ShapeError("attack epsilon must be >= 0")
        if self.iters < 1:
            raise ShapeError("attack iters must be >= 1")

    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.epsilon / self.iters


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trace: list = field(default_factory=list)
    linf_norm: float = 0.0
    l2_norm: float = 0.0
    clean_loss: float = 0.0

    @staticmethod
    def from_adv(x: np.ndarray, x_adv: np.ndarray, trace, clean_loss: float) -> "AttackResult":
        delta = x_adv - x
        return AttackResult(
            x_adv=x_adv,
            loss_trace=list(trace),
            linf_norm=float(np.max(np.abs(delta))) if delta.size else 0.0,
            l2_norm=float(np.sqrt(np.sum(delta * delta))),
            clean_loss=clean_loss,
        )


def _check_pair(model, x: np.ndarray, y: np.ndarray) -> None:
    if y.shape[-2] != x.shape[-2] * model.scale or y.shape[-1] != x.shape[-1] * model.scale:
        raise ShapeError(
            f"target {y.shape} does not match input {x.shape} at scale {model.scale}")


def _loss_and_input_grad(model, x: np.ndarray, y_t: Tensor, loss_fn) -> tuple:
    graph = DiffGraph()
    x_leaf = graph.leaf(x)
    loss = loss_fn(model.apply(x_leaf), y_t)
    return loss.item(), graph.backward(loss)[x_leaf]


def _loss_at(model, x: np.ndarray, y_t: Tensor, loss_fn) -> float:
    return loss_fn(model.apply(Tensor(x)), y_t).item()


def fgsm(model, x, y, spec: AttackSpec, loss_fn: Callable = attack_loss) -> AttackResult:
    """One signed-gradient step of size epsilon, clamped to a valid image."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y_t = Tensor(y) if not isinstance(y, Tensor) else y
    _check_pair(model, x, y_t.data)
    clean_loss, grad = _loss_and_input_grad(model, x, y_t, loss_fn)
    x_adv = np.clip(x + spec.epsilon * np.sign(grad), 0.0, 1.0)
    return AttackResult.from_adv(x, x_adv, [_loss_at(model, x_adv, y_t, loss_fn)], clean_loss)


def _iterated_sign_attack(model, x: np.ndarray, y_t: Tensor, spec: AttackSpec,
                          loss_fn, init: np.ndarray) -> AttackResult:
    eps, alpha = spec.epsilon, spec.step_size()
    lo, hi = x - eps, x + eps
    x_cur = np.clip(x + init, 0.0, 1.0)
    clean_loss = None
    iterates, trace = [], []
    for t in range(spec.iters):
        loss_cur, grad = _loss_and_input_grad(model, x_cur, y_t, loss_fn)
        if t == 0:
            # BIM starts at the clean image, so this is its clean loss; for a
            # random init the clean loss needs its own evaluation below.
            clean_loss = loss_cur if not init.any() else None
        else:
            trace.append(loss_cur)
        x_cur = np.clip(x_cur + alpha * np.sign(grad), 0.0, 1.0)
        x_cur = np.clip(x_cur, lo, hi)
        iterates.append(x_cur)
    trace.append(_loss_at(model, iterates[-1], y_t, loss_fn))
    if clean_loss is None:
        clean_loss = _loss_at(model, x, y_t, loss_fn)
    best = int(np.argmax(trace))
    return AttackResult.from_adv(x, iterates[best], trace, clean_loss)


def bim(model, x, y, spec: AttackSpec, loss_fn: Callable = attack_loss) -> AttackResult:
    """Iterated FGSM from the clean image; alpha defaults to epsilon/iters."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y_t = Tensor(y) if not isinstance(y, Tensor) else y
    _check_pair(model, x, y_t.data)
    return _iterated_sign_attack(model, x, y_t, spec, loss_fn, np.zeros_like(x))


def pgd(model, x, y, spec: AttackSpec, loss_fn: Callable = attack_loss) -> AttackResult:
    """BIM with a uniform random start inside the eps-ball (from spec.rng)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y_t = Tensor(y) if not isinstance(y, Tensor) else y
    _check_pair(model, x, y_t.data)
    if spec.rng is None:
        init = np.zeros_like(x)
    else:
        init = spec.rng.uniform(-spec.epsilon, spec.epsilon, x.shape)
    return _iterated_sign_attack(model, x, y_t, spec, loss_fn, init)


def cw(model, x, y, spec: AttackSpec, loss_fn: Callable = attack_loss) -> AttackResult:
    """L2-penalized optimization attack over the tanh substitution."""
    from .training import AdamState, adam_step  # late import; training uses attacks too

    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y_t = Tensor(y) if not isinstance(y, Tensor) else y
    _check_pair(model, x, y_t.data)
    x_const = Tensor(x)
    w = np.arctanh(2.0 * np.clip(x, CW_INIT_MARGIN, 1.0 - CW_INIT_MARGIN) - 1.0)
    adam = AdamState(lr=spec.lr)
    params = {"w": Tensor(w)}
    trace, candidates = [], []
    for _ in range(spec.iters):
        graph = DiffGraph()
        w_leaf = graph.leaf(params["w"], param=True)
        x_adv_t = mul(tanh(w_leaf), 0.5) + 0.5
        delta = sub(x_adv_t, x_const)
        l2 = sqrt_eps(tsum(mul(delta, delta)), L2_SMOOTHING_EPS)
        loss = loss_fn(model.apply(x_adv_t), y_t)
        objective = sub(l2, mul(loss, spec.c))
        grads = graph.backward(objective)
        trace.append(loss.item())
        candidates.append(x_adv_t.data)
        params = adam_step(adam, params, {"w": grads[w_leaf]})
    best = int(np.argmax(trace))
    clean_loss = _loss_at(model, x, y_t, loss_fn)
    return AttackResult.from_adv(x, candidates[best], trace, clean_loss)


_ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "cw": cw}


def run_attack(model, x, y, spec: AttackSpec, loss_fn: Callable = attack_loss) -> AttackResult:
    """Dispatch on ``spec.kind``."""
    return _ATTACKS[spec.kind](model, x, y, spec, loss_fn)
