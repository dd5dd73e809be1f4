"""certsr: desk-scale certified-robust super-resolution.

A numpy-backed toolkit with four building blocks:

* a minimal reverse-mode autodiff tape and toy convolutional SR models,
* the FGSM / BIM / PGD / CW adversarial attacks adapted to image regression,
* four fine-tuning regimes (clean, adversarial, gradient-norm regularized,
  and median-smoothing noise replication),
* median randomized smoothing with Monte Carlo L2 certificates.

See README.md for the experiment CLI (``certsr``) and the demo scripts.
"""

__version__ = "0.1.0"

from .attacks import AttackResult, AttackSpec, bim, cw, fgsm, pgd, run_attack
from .data import (
    CorpusSpec,
    Dataset,
    ImagePair,
    bicubic_resize,
    corrupt_blur,
    corrupt_noise,
    generate_corpus,
    make_dataset,
    png_read,
    png_write,
)
from .metrics import (
    EvalReport,
    FeatureExtractor,
    attack_loss,
    l1_loss,
    perceptual_loss,
    proxy_lpips,
    psnr,
    ssim,
)
from .model import (
    BicubicRefineModel,
    SrNet,
    build_bicubic_model,
    build_srnet,
    forward,
    forward_many,
    load_model,
    save_model,
)
from .rng import RngStream
from .smoothing import (
    CertBound,
    SmoothingSpec,
    cert_percentiles,
    certify_containment,
    mean_smooth,
    median_smooth,
    percentile_bounds_mc,
    std_normal_cdf,
    std_normal_quantile,
)
from .tensor import DiffGraph, Tensor
from .training import (
    AdamState,
    TrainConfig,
    TrainLog,
    adam_step,
    mrs_finetune,
    train,
    train_adversarial,
    train_clean,
    train_grad_reg,
)
