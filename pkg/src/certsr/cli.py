"""Command-line experiment harness.

Subcommands: ``train``, ``attack``, ``certify``, ``eval``, ``sweep``,
``inspect``.  All take ``--config PATH`` (INI format, see
:mod:`certsr.config`) plus optional ``--seed``, ``--out``, and ``--threads``
overrides; ``CERTSR_THREADS`` is the environment fallback for ``--threads``.

Every run derives all randomness from one global seed, so re-running a
command with the same config and seed reproduces its CSV outputs byte for
byte.  Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .attacks import AttackSpec, run_attack
from .config import ConfigError, ExperimentConfig
from .data import (
    CorpusSpec,
    corrupt_blur,
    corrupt_noise,
    generate_corpus,
    make_dataset,
    png_write,
)
from .metrics import EvalReport, proxy_lpips, psnr, ssim
from .model import (
    CheckpointError,
    build_bicubic_model,
    build_srnet,
    checkpoint_header,
    forward_many,
    load_model,
    save_model,
)
from .rng import RngStream
from .smoothing import (
    CertificateSaturatedError,
    SmoothingSpec,
    bound_ranks,
    cert_percentiles,
    certify_containment,
    median_smooth,
    percentile_bounds_mc,
)
from .tensor import ShapeError, Tensor
from .training import NumericError, TrainConfig, train

__all__ = ["main"]

_DEFAULT_ATTACK_BATTERY = (
    ("fgsm", dict(kind="fgsm", epsilon=10 / 255)),
    ("bim", dict(kind="bim", epsilon=10 / 255, iters=2)),
    ("pgd", dict(kind="pgd", epsilon=10 / 255, iters=3)),
    ("cw", dict(kind="cw", c=0.01, lr=1e-2, iters=6)),
)


# ---------------------------------------------------------------------------
# Shared setup
# ---------------------------------------------------------------------------

def _resolve_threads(flag, cfg) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("CERTSR_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"CERTSR_THREADS must be an integer, got {env!r}") from exc
    return max(1, cfg.get("run", "threads", 1))


class _Run:
    def __init__(self, cfg: ExperimentConfig, args):
        self.cfg = cfg
        self.seed = args.seed if args.seed is not None else cfg.get("run", "seed", 0)
        out = args.out or cfg.get("run", "out") or os.path.join(cfg.base_dir, "out")
        self.out_dir = os.path.abspath(out)
        self.threads = _resolve_threads(args.threads, cfg)
        self.root = RngStream(self.seed)
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, *parts) -> str:
        full = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def map(self, fn, items):
        if self.threads <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))


def _build_dataset(run: _Run):
    cfg = run.cfg
    spec = CorpusSpec(
        count=cfg.get("corpus", "count", 60),
        hr_size=cfg.get("corpus", "hr_size", 64),
        scale=cfg.get("corpus", "scale", 4),
        weights=cfg.get("corpus", "weights",
                        {"gratings": 1.0, "polygons": 1.0, "blobs": 1.0, "mixed": 1.0}),
        rng=run.root.derive("corpus"),
    )
    corpus = generate_corpus(spec)
    with open(run.path("corpus_manifest.txt"), "w") as f:
        for i, rec in enumerate(corpus):
            f.write(f"{i},{rec.tag},{rec.stream_id}\n")
    return spec, make_dataset(corpus, spec.scale, run.root.derive("split"))


def _load_checkpoint(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_model(path)


def _attack_spec_from(cfg: ExperimentConfig, name: str, rng) -> AttackSpec:
    section = cfg.attack_section(name)
    kw = {"kind": section.get("kind", name)}
    for key in ("epsilon", "alpha", "iters", "c", "lr"):
        if key in section:
            kw[key] = section[key]
    spec = AttackSpec(**kw)
    spec.rng = rng
    return spec


def _battery(run: _Run):
    """(name, spec-factory) pairs; factories take a per-image RngStream."""
    names = run.cfg.get("attack", "battery")
    out = []
    if names:
        for name in names:
            section_kw = run.cfg.attack_section(name)
            out.append((name, dict(section_kw)))
    else:
        for name, kw in _DEFAULT_ATTACK_BATTERY:
            out.append((name, dict(kw)))
    factories = []
    for name, kw in out:
        kw.setdefault("kind", name)

        def make(rng, kw=kw):
            spec = AttackSpec(**{k: v for k, v in kw.items()
                                 if k in ("kind", "epsilon", "alpha", "iters", "c", "lr")})
            spec.rng = rng
            return spec

        factories.append((name, make))
    return factories


def _image_metrics(pred: np.ndarray, hr: np.ndarray) -> tuple:
    return psnr(pred, hr), ssim(pred, hr), proxy_lpips(pred, hr)


def _mean_rows(rows) -> tuple:
    arr = np.asarray(rows)
    return tuple(float(v) for v in arr.mean(axis=0))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(run: _Run) -> int:
    cfg = run.cfg
    _, dataset = _build_dataset(run)
    init_from = cfg.get("train", "init_from")
    if init_from:
        model = _load_checkpoint(init_from)
    else:
        kind = cfg.get("model", "kind", "srnet")
        scale = cfg.get("model", "scale", cfg.get("corpus", "scale", 4))
        if kind == "srnet":
            model = build_srnet(
                channels=cfg.get("model", "channels", 16),
                depth=cfg.get("model", "depth", 3),
                scale=scale,
                rng=run.root.derive("init"),
            )
        elif kind == "bicubic_refine":
            model = build_bicubic_model(scale=scale)
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
    regime = cfg.get("train", "regime", "clean")
    attack_spec = None
    if regime == "adversarial":
        attack_name = cfg.require("train", "attack")
        attack_spec = _attack_spec_from(cfg, attack_name, run.root.derive("train-attack"))
    tc = TrainConfig(
        regime=regime,
        iterations=cfg.get("train", "iterations", 2000),
        batch_size=cfg.get("train", "batch_size", 4),
        lr=cfg.get("train", "lr", 1e-4),
        attack=attack_spec,
        lam=cfg.get("train", "lambda", 0.001),
        sigmas=tuple(cfg.get("train", "sigmas", (0.03, 0.2))),
        draws_per_sigma=cfg.get("train", "draws_per_sigma", 2),
        include_clean=cfg.get("train", "include_clean", True),
        log_interval=cfg.get("train", "log_interval", 200),
        rng=run.root.derive("train"),
    )
    model, log = train(model, dataset, tc)
    ckpt_path = run.path("model.ckpt")
    save_model(model, ckpt_path)
    log.write_csv(run.path("train_log.csv"), run.seed, __version__)
    if regime == "mrs_ft":
        print(f"replicates per example: {tc.replicates_per_example()}")
    print(f"checkpoint: {ckpt_path}")
    print(f"train log: {run.path('train_log.csv')}")
    return 0


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def cmd_attack(run: _Run) -> int:
    cfg = run.cfg
    checkpoints = cfg.get("attack", "checkpoints")
    if not checkpoints:
        raise ConfigError("cmd attack needs [attack] checkpoints = name:path, ...")
    models = {name: _load_checkpoint(path) for name, path in checkpoints.items()}
    _, dataset = _build_dataset(run)
    save_images = cfg.get("attack", "save_images", True)
    report = EvalReport()
    for model_name, model in models.items():
        preds = forward_many(model, np.stack([p.lr for p in dataset.val]))
        rows = [_image_metrics(pred, p.hr) for pred, p in zip(preds, dataset.val)]
        report.add("clean", model_name, *_mean_rows(rows))
        for attack_name, make_spec in _battery(run):
            streams = [run.root.derive(f"attack/{attack_name}/{model_name}", i)
                       for i in range(len(dataset.val))]

            def attack_one(arg):
                i, pair = arg
                spec = make_spec(streams[i])
                result = run_attack(model, pair.lr, pair.hr, spec)
                pred = model.apply(Tensor(result.x_adv)).data
                return result.x_adv, _image_metrics(pred, pair.hr)

            results = run.map(attack_one, list(enumerate(dataset.val)))
            if save_images:
                for i, (x_adv, _) in enumerate(results):
                    png_write(run.path("attacked", f"{attack_name}_{model_name}_{i:03d}.png"),
                              x_adv)
            report.add(attack_name, model_name, *_mean_rows([m for _, m in results]))
    out_csv = run.path("attack_report.csv")
    report.write_csv(out_csv, run.seed, __version__)
    print(f"attack report: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------

def cmd_certify(run: _Run) -> int:
    cfg = run.cfg
    model = _load_checkpoint(cfg.require("certify", "checkpoint"))
    _, dataset = _build_dataset(run)
    index = cfg.get("certify", "image_index", 0)
    if not 0 <= index < len(dataset.val):
        raise ConfigError(f"certify image_index {index} outside validation split")
    x = dataset.val[index].lr
    n = cfg.get("certify", "n", 21)
    p = cfg.get("certify", "p", 0.5)
    trials = cfg.get("certify", "trials", 0)
    sigmas = cfg.get("certify", "sigmas", (0.06,))
    epsilons = cfg.get("certify", "epsilons", (0.0, 0.03, 0.06))
    dump = cfg.get("certify", "dump_images", False)
    out_csv = run.path("certify.csv")
    with open(out_csv, "w", newline="") as f:
        f.write(f"# seed={run.seed} version={__version__}\n")
        f.write("# raw empirical quantiles; no finite-sample confidence level\n")
        writer = csv.writer(f)
        writer.writerow(["sigma", "epsilon", "n", "p_lower", "p_upper",
                         "containment_rate", "rank_lower", "rank_upper", "status"])
        cell = 0
        for sigma in sigmas:
            for epsilon in epsilons:
                cell += 1
                try:
                    p_lo, p_hi = cert_percentiles(p, epsilon, sigma)
                    rank_lo, rank_hi = bound_ranks(p_lo, p_hi, n)
                except CertificateSaturatedError:
                    p_lo, p_hi = cert_percentiles(p, 0.0, sigma) if sigma > 0 else (p, p)
                    writer.writerow([f"{sigma:.6g}", f"{epsilon:.6g}", n,
                                     "", "", "", "", "", "saturated"])
                    continue
                rate = ""
                if trials > 0:
                    spec = SmoothingSpec(sigma=sigma, n=n, p=p,
                                         rng=run.root.derive("certify", cell))
                    rate = f"{certify_containment(model, x, spec, epsilon, trials):.6f}"
                if dump:
                    spec_b = SmoothingSpec(sigma=sigma, n=n, p=p,
                                           rng=run.root.derive("certify-dump", cell))
                    bound = percentile_bounds_mc(model, x, spec_b, epsilon)
                    tag = f"sigma{sigma:.4g}_eps{epsilon:.4g}"
                    png_write(run.path("certify_images", f"{tag}_lower.png"), bound.lower_image)
                    png_write(run.path("certify_images", f"{tag}_upper.png"), bound.upper_image)
                    spec_m = SmoothingSpec(sigma=sigma, n=n if n % 2 else n + 1, p=p,
                                           rng=run.root.derive("certify-med", cell))
                    png_write(run.path("certify_images", f"{tag}_median.png"),
                              median_smooth(model, x, spec_m))
                writer.writerow([f"{sigma:.6g}", f"{epsilon:.6g}", n,
                                 f"{p_lo:.7f}", f"{p_hi:.7f}", rate,
                                 rank_lo, rank_hi, "ok"])
    print(f"certificates: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _smoothed_outputs(run: _Run, model, lrs, sigma: float, n: int, label: str):
    def one(arg):
        i, lr_img = arg
        spec = SmoothingSpec(sigma=sigma, n=n, rng=run.root.derive(f"smooth/{label}", i))
        return median_smooth(model, lr_img, spec)

    return run.map(one, list(enumerate(lrs)))


def cmd_eval(run: _Run) -> int:
    cfg = run.cfg
    base = _load_checkpoint(cfg.require("eval", "checkpoint"))
    mrs_path = cfg.get("eval", "checkpoint_mrs")
    mrs = _load_checkpoint(mrs_path) if mrs_path else None
    ablation = cfg.get("eval", "ablation", mrs is not None)
    if ablation and mrs is None:
        raise ConfigError("eval ablation requires checkpoint_mrs")
    _, dataset = _build_dataset(run)
    noise_sigma = cfg.get("eval", "noise_sigma", 0.03)
    blur_ksize = cfg.get("eval", "blur_ksize", 10)
    blur_sigma = cfg.get("eval", "blur_sigma", 0.3)
    smooth_sigma = cfg.get("eval", "smooth_sigma", 0.03)
    smooth_n = cfg.get("eval", "smooth_n", 21)

    noise_rng = run.root.derive("eval-noise")
    variants = [
        ("clean", [p.lr for p in dataset.val]),
        ("noisy", [corrupt_noise(p.lr, noise_sigma, noise_rng) for p in dataset.val]),
        ("blurry", [corrupt_blur(p.lr, blur_ksize, blur_sigma) for p in dataset.val]),
    ]
    if ablation:
        methods = [("base", base, None), ("mrs_ft", mrs, None),
                   ("mrs_inf", base, smooth_sigma), ("certsr", mrs, smooth_sigma)]
    else:
        methods = [("base", base, None), ("mrs_inf", base, smooth_sigma)]

    report = EvalReport()
    for variant_name, lrs in variants:
        for method_name, model, sigma in methods:
            if sigma is None:
                preds = list(forward_many(model, np.stack(lrs)))
            else:
                preds = _smoothed_outputs(run, model, lrs, sigma, smooth_n,
                                          f"{variant_name}/{method_name}")
            rows = [_image_metrics(pred, p.hr) for pred, p in zip(preds, dataset.val)]
            report.add(variant_name, method_name, *_mean_rows(rows))
    out_csv = run.path("eval_report.csv")
    report.write_csv(out_csv, run.seed, __version__)
    print(f"eval report: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_COMMANDS_FOR_SWEEP = {"eval": cmd_eval, "attack": cmd_attack, "certify": cmd_certify}
_METRIC_DIRECTION = {"psnr_db": "max", "ssim": "max", "proxy_lpips": "min",
                     "containment_rate": "max"}
_PRIMARY_CSV = {"eval": "eval_report.csv", "attack": "attack_report.csv",
                "certify": "certify.csv"}


def _override_value(cfg: ExperimentConfig, dotted: str, value: float) -> ExperimentConfig:
    parts = dotted.rsplit(".", 1)
    if len(parts) != 2:
        raise ConfigError(f"sweep parameter must be section.key, got {dotted!r}")
    section, key = parts
    clone = ExperimentConfig(copy.deepcopy(cfg.values), cfg.base_dir, cfg.path)
    target = clone.values.setdefault(section, {})
    current = target.get(key)
    if isinstance(current, tuple) or key in ("sigmas", "epsilons", "values"):
        target[key] = (value,)
    elif isinstance(current, int) and not isinstance(current, bool):
        target[key] = int(value)
    else:
        target[key] = value
    return clone


def _read_report_rows(path: str) -> list:
    rows = []
    with open(path) as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        for row in reader:
            rows.append(row)
    return rows


def cmd_sweep(run: _Run) -> int:
    cfg = run.cfg
    command = cfg.require("sweep", "command")
    if command not in _COMMANDS_FOR_SWEEP:
        raise ConfigError(f"sweep command must be one of {sorted(_COMMANDS_FOR_SWEEP)}")
    parameter = cfg.require("sweep", "parameter")
    values = cfg.require("sweep", "values")
    metric = cfg.get("sweep", "metric",
                     "containment_rate" if command == "certify" else "psnr_db")
    if metric not in _METRIC_DIRECTION:
        raise ConfigError(f"unknown sweep metric {metric!r}")
    row_dataset = cfg.get("sweep", "row_dataset")
    row_method = cfg.get("sweep", "row_method")

    collected = []
    for value in values:
        sub_cfg = _override_value(cfg, parameter, value)
        sub_args = argparse.Namespace(seed=run.seed, threads=run.threads,
                                      out=os.path.join(run.out_dir, f"sweep_{value:.6g}"))
        sub_run = _Run(sub_cfg, sub_args)
        _COMMANDS_FOR_SWEEP[command](sub_run)
        rows = _read_report_rows(os.path.join(sub_run.out_dir, _PRIMARY_CSV[command]))
        match = None
        for row in rows:
            if row_dataset and row.get("dataset") != row_dataset:
                continue
            if row_method and row.get("method") != row_method:
                continue
            if row.get(metric, "") == "":
                continue
            match = row
            break
        if match is None:
            raise ConfigError(
                f"sweep value {value:.6g}: no report row matches "
                f"dataset={row_dataset!r} method={row_method!r} with metric {metric!r}")
        collected.append((value, float(match[metric])))

    out_csv = run.path("sweep_summary.csv")
    direction = _METRIC_DIRECTION[metric]
    best_value, best_metric = collected[0]
    for value, score in collected[1:]:  # ties keep the smaller parameter value
        if (direction == "max" and score > best_metric) or \
           (direction == "min" and score < best_metric):
            best_value, best_metric = value, score
    with open(out_csv, "w", newline="") as f:
        f.write(f"# seed={run.seed} version={__version__}\n")
        writer = csv.writer(f)
        writer.writerow(["value", metric, "best"])
        for value, score in collected:
            writer.writerow([f"{value:.6g}", f"{score:.6f}",
                             "yes" if value == best_value else ""])
    print(f"sweep summary: {out_csv}")
    print(f"best {metric} ({direction}): {parameter}={best_value:.6g} -> {best_metric:.6f}")
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(checkpoint: str) -> int:
    header = checkpoint_header(checkpoint)
    for key in ("version", "kind", "scale", "channels", "depth", "n_params"):
        print(f"{key}: {header[key]}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", required=True, help="INI experiment config")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (CERTSR_THREADS fallback)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="certsr",
        description="Certified-robust super-resolution experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"train": cmd_train, "attack": cmd_attack, "certify": cmd_certify,
                "eval": cmd_eval, "sweep": cmd_sweep}
    for name in handlers:
        _add_common(sub.add_parser(name))
    inspect_parser = sub.add_parser("inspect")
    inspect_parser.add_argument("checkpoint", help="checkpoint file to describe")

    args = parser.parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.checkpoint)
        cfg = ExperimentConfig.load(args.config)
        return handlers[args.command](_Run(cfg, args))
    except (ConfigError, CheckpointError, ShapeError, CertificateSaturatedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
