"""Terms of the LC-GAN objective.

Image arguments are NCHW tensors in the [-1, 1] model range unless noted.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from .diffcomp import Tensor, log_softmax
from .imagecore import build_pyramid, luminance

DEFAULT_GAMMA = (0.0, 0.05, 0.33, 0.35, 0.27)


@dataclass
class LossConfig:
    lambda_cyc: float = 5.0
    lambda_ssim: float = 1.0
    lambda_seg: float = 2.0
    gamma: Tuple[float, ...] = DEFAULT_GAMMA
    n_scales: int = 4
    eps: float = 1e-4

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.validate()

    def validate(self):
        if len(self.gamma) != self.n_scales + 1:
            raise ValueError(f"need {self.n_scales + 1} scale weights, got {len(self.gamma)}")
        if any(g < 0 for g in self.gamma):
            raise ValueError("scale weights must be non-negative")
        if abs(sum(self.gamma) - 1.0) > 1e-9:
            raise ValueError(f"scale weights must sum to 1, got {sum(self.gamma)!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = list(self.gamma)
        return d


@dataclass
class LossBreakdown:
    gan_G: float = 0.0
    gan_F: float = 0.0
    d_X: float = 0.0
    d_Y: float = 0.0
    cyc: float = 0.0
    ssim: float = 0.0
    seg: float = 0.0
    total_generator: float = 0.0
    total_discriminator: float = 0.0

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> List[float]:
        return [getattr(self, n) for n in self.field_names()]


# -- structural similarity ------------------------------------------------------

def _safe_sqrt(t: Tensor) -> Tensor:
    # sqrt with zero gradient at 0 (constant images have zero variance)
    out = np.sqrt(t.data)
    safe = np.where(out > 0, out, 1.0)
    grad_scale = np.where(out > 0, 0.5 / safe, 0.0)
    return Tensor._make(out, (t,), lambda g: (g * grad_scale,))


def zncc(a: Tensor, b: Tensor, eps: float = 1e-4) -> Tensor:
    """(cov(a, b) + eps) / (std(a) std(b) + eps) with 1/(m-1) normalization.

    ``a`` and ``b`` are ``(N, 1, H, W)`` (or any shape whose last two axes are
    the pixels); the result is averaged over the leading axes.
    """
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=np.float64))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"zncc shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a.reshape(1, a.shape[0]), b.reshape(1, b.shape[0])
        axes = (1,)
    else:
        axes = (a.ndim - 2, a.ndim - 1)
    m = int(np.prod([a.shape[ax] for ax in axes]))
    if m < 2:
        raise ValueError("zncc needs at least 2 pixels")
    da = a - a.mean(axis=axes, keepdims=True)
    db = b - b.mean(axis=axes, keepdims=True)
    scale = 1.0 / (m - 1)
    cov = (da * db).sum(axis=axes) * scale
    var_a = (da * da).sum(axis=axes) * scale
    var_b = (db * db).sum(axis=axes) * scale
    denom = _safe_sqrt(var_a * var_b) + eps
    return ((cov + eps) / denom).mean()


def multiscale_similarity(a_lum: Tensor, b_lum: Tensor, config: LossConfig) -> Tensor:
    """sum_i gamma_i * zncc(a_i, b_i) over the mean-pool pyramid."""
    pa = build_pyramid(a_lum, config.n_scales)
    pb = build_pyramid(b_lum, config.n_scales)
    total = None
    for g, la, lb in zip(config.gamma, pa, pb):
        if g == 0.0:
            continue
        term = zncc(la, lb, config.eps) * g
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=a_lum.dtype))
    return total


def _lum01(img: Tensor) -> Tensor:
    # model range -> [0, 1] without clamping (generator outputs are tanh-bounded)
    return luminance((img + 1.0) * 0.5)


def ssim_loss(x: Tensor, g_x: Tensor, y: Tensor, f_y: Tensor, config: LossConfig) -> Tensor:
    first = 1.0 - multiscale_similarity(_lum01(x), _lum01(g_x), config)
    second = 1.0 - multiscale_similarity(_lum01(y), _lum01(f_y), config)
    return first + second


# -- cycle / adversarial ------------------------------------------------------------

def cycle_loss(x: Tensor, f_g_x: Tensor, y: Tensor, g_f_y: Tensor) -> Tensor:
    return (f_g_x - x).abs().mean() + (g_f_y - y).abs().mean()


def gan_losses(d_real: Tensor, d_fake: Tensor):
    """Least-squares adversarial terms ``(generator_term, discriminator_term)``.

    Both are computed from the same patch maps. During training the
    discriminator term is evaluated on scores of *detached* fakes so that it
    updates the discriminator only.
    """
    return generator_adversarial(d_fake), discriminator_adversarial(d_real, d_fake)


def generator_adversarial(d_fake: Tensor) -> Tensor:
    return ((d_fake - 1.0) ** 2).mean()


def discriminator_adversarial(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean (D(real) - 1)^2 + mean D(fake)^2; ``d_fake`` must come from a detached fake."""
    return ((d_real - 1.0) ** 2).mean() + (d_fake ** 2).mean()


# -- segmentation consistency ------------------------------------------------------

def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]; target is (N, H, W) ints."""
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, target[:, None].astype(np.intp), 1.0, axis=1)
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / (n * h * w))


def seg_consistency_loss(x_mask: np.ndarray, s_fgx_logits: Tensor, s_y_logits: Tensor,
                         s_gfy_logits: Tensor) -> Tensor:
    """CE(x_m, S(F(G(x)))) + CE(argmax S(y), S(G(F(y)))); the pseudo-label is a constant."""
    pseudo = np.argmax(s_y_logits.data, axis=1)
    return cross_entropy(s_fgx_logits, x_mask) + cross_entropy(s_gfy_logits, pseudo)


# -- overall objective -----------------------------------------------------------------

@dataclass
class Objective:
    """Generator and discriminator minimization targets plus their scalar breakdown."""
    generator: Tensor
    discriminator_X: Optional[Tensor]
    discriminator_Y: Optional[Tensor]
    breakdown: LossBreakdown = field(default_factory=LossBreakdown)


def combine_generator_terms(gan_g, gan_f, cyc, ssim, seg, config: LossConfig):
    """gan_G + gan_F + l1*cyc + l2*ssim + l3*seg; disabled terms are passed as None."""
    total = gan_g + gan_f + cyc * config.lambda_cyc
    if ssim is not None:
        total = total + ssim * config.lambda_ssim
    if seg is not None:
        total = total + seg * config.lambda_seg
    return total


def _f(t) -> float:
    if t is None:
        return 0.0
    return float(t.data) if isinstance(t, Tensor) else float(t)


def total_objective(*, x, y, x_mask, g_x, f_y, f_g_x, g_f_y, d_y_fake, d_x_fake,
                    config: LossConfig, d_y_real=None, d_x_real=None, d_y_fake_detached=None,
                    d_x_fake_detached=None, s_fgx=None, s_y=None, s_gfy=None,
                    use_ssim: bool = True, use_seg: bool = True) -> Objective:
    """Assemble every term from precomputed network outputs.

    Discriminator targets are built only when both real scores and scores of
    detached fakes are supplied.
    """
    gan_g = generator_adversarial(d_y_fake)
    gan_f = generator_adversarial(d_x_fake)
    cyc = cycle_loss(x, f_g_x, y, g_f_y)
    ssim = ssim_loss(x, g_x, y, f_y, config) if use_ssim else None
    seg = seg_consistency_loss(x_mask, s_fgx, s_y, s_gfy) if use_seg else None
    gen_total = combine_generator_terms(gan_g, gan_f, cyc, ssim, seg, config)

    d_x = d_y = None
    if d_y_real is not None and d_y_fake_detached is not None:
        d_y = discriminator_adversarial(d_y_real, d_y_fake_detached)
    if d_x_real is not None and d_x_fake_detached is not None:
        d_x = discriminator_adversarial(d_x_real, d_x_fake_detached)

    bd = LossBreakdown(
        gan_G=_f(gan_g), gan_F=_f(gan_f), d_X=_f(d_x), d_Y=_f(d_y), cyc=_f(cyc), ssim=_f(ssim),
        seg=_f(seg), total_generator=_f(gen_total), total_discriminator=_f(d_x) + _f(d_y),
    )
    return Objective(gen_total, d_x, d_y, bd)


def breakdown_total(gan_sum: float, cyc: float, ssim: float, seg: float, config: LossConfig) -> float:
    return gan_sum + config.lambda_cyc * cyc + config.lambda_ssim * ssim + config.lambda_seg * seg


class BreakdownLog:
    """Append-only CSV: step, lr, then every LossBreakdown field."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "lr"] + LossBreakdown.field_names())

    def write(self, step: int, lr: float, bd: LossBreakdown):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, f"{lr:.8g}"] + [f"{v:.6g}" for v in bd.as_row()])
