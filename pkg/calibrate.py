"""Scratch calibration for the empirical acceptance targets (not shipped)."""
import time

import numpy as np

from certsr import data as D
from certsr import model as M
from certsr import metrics as MX
from certsr import smoothing as S
from certsr import training as TR
from certsr.attacks import AttackSpec, run_attack
from certsr.rng import RngStream
from certsr.tensor import Tensor

t_start = time.time()
SEED = 7
root = RngStream(SEED)

corpus = D.generate_corpus(D.CorpusSpec(count=250, hr_size=64, scale=4,
                                        rng=root.derive("corpus")))
ds = D.make_dataset(corpus, scale=4, rng=root.derive("split"))
print(f"corpus {len(ds.train)} train / {len(ds.val)} val  [{time.time()-t_start:.0f}s]")

bic_psnr = np.mean([MX.psnr(D.bicubic_resize(p.lr, 64, 64), p.hr) for p in ds.val])
print(f"bicubic baseline PSNR: {bic_psnr:.3f}")

model = M.build_srnet(16, 3, 4, root.derive("init"))
cfg = TR.TrainConfig(regime="clean", iterations=2000, batch_size=4, lr=1e-4,
                     log_interval=500, rng=root.derive("train-clean"))
_, log = TR.train_clean(model, ds, cfg)
for row in log.rows:
    print("  clean train:", row)
print(f"[{time.time()-t_start:.0f}s]")

preds = M.forward_many(model, np.stack([p.lr for p in ds.val]))
clean_psnr = np.mean([MX.psnr(pr, p.hr) for pr, p in zip(preds, ds.val)])
print(f"clean-trained model clean PSNR: {clean_psnr:.3f} (bicubic {bic_psnr:.3f})")

# --- criterion 5: attacks drop PSNR by >= 1 dB ---
eps = 10 / 255
attack_rng = root.derive("attacks")
for kind, spec_kw in [("fgsm", {}), ("bim", {"iters": 2}),
                      ("pgd", {"iters": 3, "rng": attack_rng}),
                      ("cw", {"c": 0.01, "lr": 1e-2, "iters": 6})]:
    vals = []
    for p in ds.val:
        spec = AttackSpec(kind=kind, epsilon=eps, **spec_kw)
        res = run_attack(model, p.lr, p.hr, spec)
        vals.append(MX.psnr(model.apply(Tensor(res.x_adv)).data, p.hr))
    print(f"attack {kind}: PSNR {np.mean(vals):.3f} (drop {clean_psnr-np.mean(vals):.3f} dB) [{time.time()-t_start:.0f}s]")

# --- criterion 6: noisy eval + MRS ablation ---
noise_rng = root.derive("eval-noise")
noisy_lrs = [D.corrupt_noise(p.lr, 0.03, noise_rng) for p in ds.val]
base_noisy = np.mean([MX.psnr(pr, p.hr) for pr, p in
                      zip(M.forward_many(model, np.stack(noisy_lrs)), ds.val)])
print(f"base noisy PSNR: {base_noisy:.3f}  gap {clean_psnr-base_noisy:.3f}")

mrs_model = M.load_model if False else None
import copy
mrs_model = M.SrNet(model.channels, model.depth, model.scale,
                    {k: Tensor(v.data.copy()) for k, v in model.params.items()})
cfg_mrs = TR.TrainConfig(regime="mrs_ft", iterations=2000, batch_size=4, lr=1e-4,
                         sigmas=(0.03, 0.2), draws_per_sigma=2, include_clean=True,
                         log_interval=500, rng=root.derive("train-mrs"))
_, log2 = TR.mrs_finetune(mrs_model, ds, cfg_mrs)
print(f"mrs_ft done [{time.time()-t_start:.0f}s]")

def eval_noisy(m, smooth_sigma=None):
    vals = []
    for lr_img, p in zip(noisy_lrs, ds.val):
        if smooth_sigma is None:
            out = m.apply(Tensor(lr_img)).data
        else:
            spec = S.SmoothingSpec(sigma=smooth_sigma, n=21,
                                   rng=root.derive("smooth-eval", hash(p.tag) % 1000))
            out = S.median_smooth(m, lr_img, spec)
        vals.append(MX.psnr(out, p.hr))
    return float(np.mean(vals))

cells = {
    "base": base_noisy,
    "mrs_ft_only": eval_noisy(mrs_model),
    "mrs_inf_only": eval_noisy(model, smooth_sigma=0.03),
    "certsr": eval_noisy(mrs_model, smooth_sigma=0.03),
}
print("noisy PSNR cells:", {k: round(v, 3) for k, v in cells.items()})
gap = clean_psnr - base_noisy
rec = (cells["certsr"] - base_noisy) / gap if gap > 0 else float("nan")
print(f"gap recovery: {rec:.2%}  (need >= 50%)")
print(f"certsr > mrs_ft_only: {cells['certsr'] > cells['mrs_ft_only']}")
print(f"certsr > mrs_inf_only: {cells['certsr'] > cells['mrs_inf_only']}")
print(f"TOTAL {time.time()-t_start:.0f}s")
