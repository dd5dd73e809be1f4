"""Adam and the four fine-tuning regimes: clean, adversarial, gradient-norm
regularized, and median-smoothing (noise-replicated) training.

The training objective everywhere is pixel L1 plus the proxy-perceptual loss;
there is no GAN term at this scale.  All regimes share one mini-batch sampler
stream (``rng.derive("batches")``) so that the reduction identities hold
bit-exactly: an epsilon-0 attack or a lambda of 0 leaves the parameter
trajectory identical to clean training.  Attack and noise draws come from
separate derived streams and never touch the batch sequence.

The gradient-norm penalty follows the documented finite-difference surrogate
rather than double backward: with g = grad_x L fixed and ghat = g/|g|, the
parameter gradient of |g| is taken from the directional finite difference
(L(x + h*ghat) - L(x - h*ghat)) / (2h), h = 1e-3.  The penalty *value* is
still the exact autodiff norm.

Median-replicated training duplicates each example per configured sigma,
forwards every noisy copy, and backpropagates through the pixelwise median
(odd draws route to the median sample, even draws split across the two middle
order statistics).

Configs carry live RNG streams and are consumed by a run: build a fresh
TrainConfig for every training run you want reproduced.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import AttackSpec, run_attack
from .metrics import attack_loss, default_extractor, psnr, ssim
from .model import forward_many
from .rng import RngStream
from .tensor import DiffGraph, ShapeError, Tensor, mul, pixelwise_median

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainLog",
    "NumericError",
    "train_clean",
    "train_adversarial",
    "train_grad_reg",
    "mrs_finetune",
    "train",
]

GRAD_REG_FD_STEP = 1e-3


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p_data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p_data.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p_data)
            v = np.zeros_like(p_data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = Tensor(p_data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class TrainConfig:
    regime: str = "clean"  # clean | adversarial | grad_reg | mrs_ft
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    attack: Optional[AttackSpec] = None
    lam: float = 0.001
    sigmas: tuple = (0.03, 0.2)
    draws_per_sigma: int = 2
    include_clean: bool = True
    log_interval: int = 200
    rng: Optional[RngStream] = None

    def __post_init__(self):
        if self.regime not in ("clean", "adversarial", "grad_reg", "mrs_ft"):
            raise ShapeError(f"unknown training regime {self.regime!r}")
        if self.iterations < 1:
            raise ShapeError("iterations must be >= 1")
        if self.lam < 0:
            raise ShapeError("lambda must be >= 0")
        if any(s < 0 for s in self.sigmas):
            raise ShapeError("sigmas must all be >= 0")
        if self.regime == "mrs_ft" and (not self.sigmas or self.draws_per_sigma < 1):
            raise ShapeError("mrs_ft needs a non-empty sigma list and draws_per_sigma >= 1")
        if self.rng is None:
            self.rng = RngStream(0)

    def replicates_per_example(self) -> int:
        return len(self.sigmas) * self.draws_per_sigma + (1 if self.include_clean else 0)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, iteration: int, loss: float, val_psnr: float, val_ssim: float) -> None:
        self.rows.append((iteration, loss, val_psnr, val_ssim))

    def write_csv(self, path: str, seed: int, version: str) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# seed={seed} version={version}\n")
            for key in sorted(self.notes):
                f.write(f"# {key}={self.notes[key]}\n")
            writer = csv.writer(f)
            writer.writerow(["iter", "loss", "val_psnr", "val_ssim"])
            for it, loss, vp, vs in self.rows:
                writer.writerow([it, f"{loss:.8f}", f"{vp:.6f}", f"{vs:.6f}"])


def _pair_loss(model, x_in: Tensor, hr_t: Tensor, params, fx):
    return attack_loss(model.apply(x_in, params), hr_t, fx)


def _clean_step(model, batch, fx):
    graph = DiffGraph()
    lifted = model.lift_params(graph)
    total = None
    for pair in batch:
        loss = _pair_loss(model, Tensor(pair.lr), Tensor(pair.hr), lifted, fx)
        total = loss if total is None else total + loss
    total = mul(total, 1.0 / len(batch))
    grads = graph.backward(total)
    return total.item(), {name: grads[leaf] for name, leaf in lifted.items()}


def _adversarial_step(model, batch, fx, spec: AttackSpec):
    # Perturbations are regenerated against the current parameters each step.
    attacked = [run_attack(model, pair.lr, pair.hr, spec).x_adv for pair in batch]
    graph = DiffGraph()
    lifted = model.lift_params(graph)
    total = None
    for x_adv, pair in zip(attacked, batch):
        loss = _pair_loss(model, Tensor(x_adv), Tensor(pair.hr), lifted, fx)
        total = loss if total is None else total + loss
    total = mul(total, 1.0 / len(batch))
    grads = graph.backward(total)
    return total.item(), {name: grads[leaf] for name, leaf in lifted.items()}


def _grad_reg_step(model, batch, fx, lam: float):
    if lam == 0.0:
        return _clean_step(model, batch, fx)
    names = list(model.params)
    acc = {n: np.zeros(model.params[n].shape) for n in names}
    data_loss = 0.0
    penalty_total = 0.0
    h = GRAD_REG_FD_STEP
    for pair in batch:
        graph = DiffGraph()
        lifted = model.lift_params(graph)
        x_leaf = graph.leaf(pair.lr)
        hr_t = Tensor(pair.hr)
        loss = _pair_loss(model, x_leaf, hr_t, lifted, fx)
        grads = graph.backward(loss)
        data_loss += loss.item()
        for n in names:
            acc[n] += grads[lifted[n]]
        gx = grads[x_leaf]
        norm = float(np.sqrt(np.sum(gx * gx)))
        penalty_total += norm
        if norm == 0.0:
            continue
        ghat = gx / norm
        g2 = DiffGraph()
        lifted2 = model.lift_params(g2)
        loss_plus = _pair_loss(model, Tensor(pair.lr + h * ghat), hr_t, lifted2, fx)
        loss_minus = _pair_loss(model, Tensor(pair.lr - h * ghat), hr_t, lifted2, fx)
        directional = mul(loss_plus - loss_minus, 1.0 / (2.0 * h))
        pen_grads = g2.backward(directional)
        for n in names:
            acc[n] += lam * pen_grads[lifted2[n]]
    b = len(batch)
    value = data_loss / b + lam * penalty_total / b
    return value, {n: acc[n] / b for n in names}


def _mrs_step(model, batch, fx, sigmas, draws, include_clean, noise: RngStream):
    graph = DiffGraph()
    lifted = model.lift_params(graph)
    total = None
    for pair in batch:
        hr_t = Tensor(pair.hr)
        example = None
        for sigma in sigmas:
            preds = []
            for _ in range(draws):
                noisy = np.clip(pair.lr + noise.normal(pair.lr.shape, sigma), 0.0, 1.0)
                preds.append(model.apply(Tensor(noisy), lifted))
            med = pixelwise_median(preds)
            loss_s = attack_loss(med, hr_t, fx)
            example = loss_s if example is None else example + loss_s
        if include_clean:
            example = example + _pair_loss(model, Tensor(pair.lr), hr_t, lifted, fx)
        total = example if total is None else total + example
    total = mul(total, 1.0 / len(batch))
    grads = graph.backward(total)
    return total.item(), {name: grads[leaf] for name, leaf in lifted.items()}


def _validate(model, val_pairs):
    if not val_pairs:
        return float("nan"), float("nan")
    preds = forward_many(model, np.stack([p.lr for p in val_pairs]))
    ps = [psnr(pred, p.hr) for pred, p in zip(preds, val_pairs)]
    ss = [ssim(pred, p.hr) for pred, p in zip(preds, val_pairs)]
    return float(np.mean(ps)), float(np.mean(ss))


def _train_loop(model, dataset, config: TrainConfig, step_fn):
    if not dataset.train:
        raise ShapeError("training dataset is empty")
    batches = config.rng.derive("batches")
    adam = AdamState(lr=config.lr)
    log = TrainLog()
    log.notes["replicates_per_example"] = (
        config.replicates_per_example() if config.regime == "mrs_ft" else 1)
    n = len(dataset.train)
    for it in range(1, config.iterations + 1):
        idx = batches.integers(0, n, config.batch_size)
        batch = [dataset.train[int(i)] for i in idx]
        loss_value, grads = step_fn(batch)
        if not math.isfinite(loss_value):
            raise NumericError(f"non-finite loss at iteration {it}")
        model.params = adam_step(adam, model.params, grads)
        if it % config.log_interval == 0 or it == config.iterations:
            vp, vs = _validate(model, dataset.val)
            log.add(it, loss_value, vp, vs)
    return model, log


def train_clean(model, dataset, config: TrainConfig):
    fx = default_extractor()
    return _train_loop(model, dataset, config, lambda batch: _clean_step(model, batch, fx))


def train_adversarial(model, dataset, config: TrainConfig):
    if config.attack is None:
        raise ShapeError("adversarial training requires config.attack")
    fx = default_extractor()
    return _train_loop(model, dataset, config,
                       lambda batch: _adversarial_step(model, batch, fx, config.attack))


def train_grad_reg(model, dataset, config: TrainConfig):
    fx = default_extractor()
    return _train_loop(model, dataset, config,
                       lambda batch: _grad_reg_step(model, batch, fx, config.lam))


def mrs_finetune(model, dataset, config: TrainConfig):
    fx = default_extractor()
    noise = config.rng.derive("mrs-noise")
    return _train_loop(
        model, dataset, config,
        lambda batch: _mrs_step(model, batch, fx, config.sigmas,
                                config.draws_per_sigma, config.include_clean, noise))


_REGIMES = {
    "clean": train_clean,
    "adversarial": train_adversarial,
    "grad_reg": train_grad_reg,
    "mrs_ft": mrs_finetune,
}


def train(model, dataset, config: TrainConfig):
    """Dispatch on ``config.regime``."""
    return _REGIMES[config.regime](model, dataset, config)
