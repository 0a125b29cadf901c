"""Finite-difference checks of every objective term, run in float64.

Used by the ``gradcheck`` command. Each check builds its graph from fixed
random inputs so the same seed always probes the same entries.
"""
from __future__ import annotations

from typing import Dict

import numpy as np

from .diffcomp import GradCheckReport, Tensor, grad_check, no_grad
from .losses import (LossConfig, cycle_loss, discriminator_adversarial, generator_adversarial,
                     seg_consistency_loss, ssim_loss)
from .networks import build_discriminator, build_segmentor
from .training import AblationFlags, build_lcgan, generator_step

LOSS_NAMES = ("adversarial", "cycle", "ssim", "seg_consistency", "total")

# Weight gradients through (leaky) ReLU stacks: a small step keeps most
# stencils clear of kinks and the rest are resolved one-sidedly. Image-input
# gradients behind the segmentor are ~1e-6, so there round-off forces a larger
# step instead.
NETWORK_STEP = 1e-7
INPUT_STEP = 1e-5


def _image(rng, n, size, scale=0.8):
    return Tensor(rng.uniform(-scale, scale, size=(n, 3, size, size)), requires_grad=True, dtype=np.float64)


def _mask(rng, n, size):
    m = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        r0, c0 = rng.integers(0, size // 2, size=2)
        m[i, r0:r0 + size // 3, c0:c0 + size // 5] = 1
    return m


def _merge(*reports: GradCheckReport) -> GradCheckReport:
    errors = {}
    for r in reports:
        errors.update(r.per_parameter_errors)
    worst = max(r.max_relative_error for r in reports)
    tol = min(r.tolerance for r in reports)
    return GradCheckReport(worst, errors, worst < tol, tol,
                           [n for r in reports for n in r.no_grad], sum(r.kinks for r in reports))


def _inputs_and_weights(f, inputs: dict, weights: dict, max_entries: int, seed: int) -> GradCheckReport:
    return _merge(
        grad_check(f, inputs, h=INPUT_STEP, max_entries=max_entries, seed=seed, kink_aware=True),
        grad_check(f, weights, h=NETWORK_STEP, max_entries=max_entries, seed=seed, kink_aware=True),
    )


def _calibrated_segmentor(rng, seed: int, size: int):
    """Untrained S with batch-norm running statistics fitted to random images.

    Default running statistics (mean 0, variance 1) leave an untrained S almost
    insensitive to its input, which makes its gradients too small to check.
    """
    S = build_segmentor(seed=seed).astype(np.float64)
    S.train()
    with no_grad():
        for _ in range(40):
            S(Tensor(rng.uniform(-0.8, 0.8, size=(2, 3, size, size))))
    return S.freeze().eval()


def check_adversarial(seed: int, size: int = 64, max_entries: int = 12) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    D = build_discriminator(seed=seed).astype(np.float64)
    real, fake = _image(rng, 1, size), _image(rng, 1, size)

    def f():
        return generator_adversarial(D(fake)) + discriminator_adversarial(D(real), D(fake))

    weights = {f"D.{k}": p for k, p in list(D.named_parameters())[:2]}
    return _inputs_and_weights(f, {"fake": fake, "real": real}, weights, max_entries, seed)


def check_cycle(seed: int, size: int = 64, max_entries: int = 40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x, fgx, y, gfy = (_image(rng, 1, size) for _ in range(4))
    return grad_check(lambda: cycle_loss(x, fgx, y, gfy), {"F(G(x))": fgx, "G(F(y))": gfy},
                      max_entries=max_entries, seed=seed)


def check_ssim(seed: int, size: int = 64, max_entries: int = 40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x, y = _image(rng, 1, size), _image(rng, 1, size)
    # fakes correlated with the reals so the similarity is far from its extremes
    gx = Tensor(np.tanh(0.7 * x.data + 0.3 * rng.standard_normal(x.shape)), requires_grad=True)
    fy = Tensor(np.tanh(-0.5 * y.data + 0.3 * rng.standard_normal(y.shape)), requires_grad=True)
    cfg = LossConfig()
    return grad_check(lambda: ssim_loss(x, gx, y, fy, cfg), {"G(x)": gx, "F(y)": fy},
                      max_entries=max_entries, seed=seed)


def check_seg_consistency(seed: int, size: int = 64, max_entries: int = 12) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    S = _calibrated_segmentor(rng, seed, size)
    fgx, y, gfy = (_image(rng, 1, size) for _ in range(3))
    x_mask = _mask(rng, 1, size)

    def f():
        return seg_consistency_loss(x_mask, S(fgx), S(y), S(gfy))

    # S is frozen: its weights are not probed, only the images feeding it
    return grad_check(f, {"F(G(x))": fgx, "G(F(y))": gfy}, h=INPUT_STEP,
                      max_entries=max_entries, seed=seed)


def check_total(seed: int, size: int = 64, max_entries: int = 6) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    S = _calibrated_segmentor(rng, seed, size)
    models = build_lcgan(S, AblationFlags(), {}, seed=seed)
    for m in (models.G, models.F, models.D_X, models.D_Y):
        m.astype(np.float64)
    models.D_X.freeze()
    models.D_Y.freeze()
    x = Tensor(rng.uniform(-0.8, 0.8, size=(1, 3, size, size)))
    y = Tensor(rng.uniform(-0.8, 0.8, size=(1, 3, size, size)))
    x_mask = _mask(rng, 1, size)
    cfg = LossConfig()

    def f():
        return generator_step(models, x, x_mask, y, cfg)[0]

    f_params = list(models.F.named_parameters())
    g_params = [(k, p) for k, p in models.G.named_parameters() if p.requires_grad]
    params = {f"F.{f_params[0][0]}": f_params[0][1], f"F.{f_params[-2][0]}": f_params[-2][1],
              f"G.{g_params[0][0]}": g_params[0][1], f"G.{g_params[-2][0]}": g_params[-2][1]}
    return grad_check(f, params, h=NETWORK_STEP, max_entries=max_entries, seed=seed,
                      kink_aware=True)


CHECKS = {
    "adversarial": check_adversarial,
    "cycle": check_cycle,
    "ssim": check_ssim,
    "seg_consistency": check_seg_consistency,
    "total": check_total,
}


def run_all(seeds=(0, 1, 2, 3, 4), size: int = 64) -> Dict[str, Dict[int, GradCheckReport]]:
    return {name: {s: fn(s, size) for s in seeds} for name, fn in CHECKS.items()}
