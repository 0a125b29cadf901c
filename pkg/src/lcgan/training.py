"""Optimization loops, checkpointing and the cross-domain inference path."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .diffcomp import Tensor, concat, no_grad
from .diffcomp.module import Module, Parameter
from .imagecore import from_model_range, read_image, to_model_range, write_image
from .losses import (
    BreakdownLog,
    LossBreakdown,
    LossConfig,
    cross_entropy,
    cycle_loss,
    discriminator_adversarial,
    generator_adversarial,
    seg_consistency_loss,
    ssim_loss,
)
from .metrics import SegScore, mean_scores, score
from .networks import (
    BackboneGenerator,
    DiscriminatorConfig,
    GeneratorBackboneConfig,
    GeneratorResNetConfig,
    ResNetGenerator,
    Segmentor,
    SegmentorConfig,
    build_discriminator,
    build_generator_F,
    build_generator_G,
    build_segmentor,
    config_to_dict,
    param_checksum,
)
from .synthdata import Dataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer --------------------------------------------------------------------

def lr_at(step: int, total: int, lr0: float, constant_fraction: float = 0.5) -> float:
    """Constant ``lr0`` for the first part of training, then linear decay to 0 at ``total``."""
    if total <= 0:
        return lr0
    knee = constant_fraction * total
    if step <= knee:
        return lr0
    if step >= total:
        return 0.0
    return lr0 * (total - step) / (total - knee)


class Adam:
    def __init__(self, named_params, lr: float = 8e-5, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params: List[Tuple[str, Parameter]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, prefix: str, tensors: Dict[str, np.ndarray], t: int):
        for name, _ in self.params:
            self.m[name] = np.array(tensors[f"{prefix}.m.{name}"])
            self.v[name] = np.array(tensors[f"{prefix}.v.{name}"])
        self.t = t


class ImageBuffer:
    """History of generated images handed to the discriminator."""

    def __init__(self, capacity: int = 50, rng: Optional[np.random.Generator] = None):
        self.capacity = capacity
        self.images: List[np.ndarray] = []
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __len__(self):
        return len(self.images)

    def query(self, image: np.ndarray) -> np.ndarray:
        if self.capacity <= 0:
            return image
        if len(self.images) < self.capacity:
            self.images.append(image.copy())
            return image
        if self.rng.uniform() < 0.5:
            idx = int(self.rng.integers(self.capacity))
            old = self.images[idx]
            self.images[idx] = image.copy()
            return old
        return image


# -- helpers ------------------------------------------------------------------------

def to_batch(images: np.ndarray) -> Tensor:
    """(N, H, W, 3) in [0, 1] -> NCHW float32 tensor in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(to_model_range(arr).transpose(0, 3, 1, 2)).astype(np.float32))


def from_batch(t) -> np.ndarray:
    """NCHW in [-1, 1] -> (N, H, W, 3) in [0, 1]."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return from_model_range(data).transpose(0, 2, 3, 1)


def predict_masks(segmentor: Segmentor, images: np.ndarray, batch: int = 16) -> np.ndarray:
    segmentor.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(segmentor.predict(to_batch(images[i:i + batch])))
    return np.concatenate(out)


def translate_array(generator: Module, images: np.ndarray, batch: int = 8) -> np.ndarray:
    generator.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(from_batch(generator(to_batch(images[i:i + batch]))))
    generator.train()
    return np.concatenate(out).astype(np.float32)


def segmentation_scores(segmentor: Segmentor, images: np.ndarray, masks: np.ndarray) -> List[SegScore]:
    preds = predict_masks(segmentor, images)
    return [score(p, t) for p, t in zip(preds, masks)]


def _set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad = flag


def _check_finite(value: float, what: str, step: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at step {step}")


# -- segmentor -----------------------------------------------------------------------

@dataclass
class SegmentorResult:
    model: Segmentor
    best_val_dsc: float
    history: List[dict] = field(default_factory=list)


def _flip_augment(rng, imgs, masks):
    if rng.uniform() < 0.5:
        imgs, masks = imgs[:, :, ::-1], masks[:, :, ::-1]
    if rng.uniform() < 0.5:
        imgs, masks = imgs[:, ::-1], masks[:, ::-1]
    return np.ascontiguousarray(imgs), np.ascontiguousarray(masks)


def train_segmentor(data: Dataset, config: Optional[SegmentorConfig] = None, *, epochs: int = 30,
                    batch_size: int = 8, lr: float = 2e-3, beta1: float = 0.9, val_fraction: float = 0.1,
                    seed: int = 0, log_fn=None) -> SegmentorResult:
    """Pixel cross-entropy with Adam; keeps the parameters with the best validation mDSC."""
    if data.masks is None or len(data) == 0:
        raise ValueError("segmentor training needs a non-empty labeled dataset")
    rng = np.random.default_rng(seed)
    model = build_segmentor(config, seed=seed)
    n = len(data)
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    opt = Adam(model.named_parameters(), lr=lr, betas=(beta1, 0.999))
    total_steps = epochs * int(math.ceil(len(train_idx) / batch_size))
    best, best_state, history = -1.0, None, []
    step = 0
    for epoch in range(epochs):
        model.train()
        perm = rng.permutation(train_idx)
        losses = []
        for i in range(0, len(perm), batch_size):
            idx = np.sort(perm[i:i + batch_size])
            imgs, masks = _flip_augment(rng, data.images[idx], data.masks[idx])
            opt.zero_grad()
            loss = cross_entropy(model(to_batch(imgs)), masks)
            _check_finite(loss.item(), "segmentor loss", step)
            loss.backward()
            opt.step(lr_at(step, total_steps, lr, 0.5))
            losses.append(loss.item())
            step += 1
        if n_val:
            val = mean_scores(zip(predict_masks(model, data.images[val_idx]), data.masks[val_idx]))[0]
        else:
            val = 0.0
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_mdsc": val}
        history.append(entry)
        if log_fn:
            log_fn(entry)
        if val > best or best_state is None:
            best = val
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    return SegmentorResult(model, best, history)


def save_segmentor(path, model: Segmentor, metadata: Optional[dict] = None):
    arch = {"kind": "segmentor", "segmentor": config_to_dict(model.config)}
    return ckpt.save_checkpoint(path, ckpt.prefixed("S", model.state_dict()), arch, metadata)


def segmentor_from_tensors(tensors, arch) -> Segmentor:
    cfg = SegmentorConfig(**arch["segmentor"])
    model = build_segmentor(cfg)
    model.load_state_dict(ckpt.strip_prefix("S", tensors))
    return model.eval()


def load_segmentor(path) -> Segmentor:
    tensors, arch, _ = ckpt.load_checkpoint(path)
    if arch.get("kind") != "segmentor":
        raise ckpt.CheckpointError(f"{path} is not a segmentor checkpoint (kind={arch.get('kind')!r})")
    return segmentor_from_tensors(tensors, arch)


# -- LC-GAN ------------------------------------------------------------------------------

@dataclass
class AblationFlags:
    ssim_on: bool = True
    seg_on: bool = True
    trained_backbone_on: bool = True

    def label(self) -> str:
        mark = lambda b: "Y" if b else "N"
        return f"ssim={mark(self.ssim_on)} seg={mark(self.seg_on)} backbone={mark(self.trained_backbone_on)}"


@dataclass
class LCGANModels:
    G: Module
    F: ResNetGenerator
    D_X: Module
    D_Y: Module
    S: Optional[Segmentor]
    flags: AblationFlags

    def frozen_checksums(self) -> Dict[str, str]:
        out = {}
        if self.S is not None:
            out["S"] = param_checksum(self.S)
        if isinstance(self.G, BackboneGenerator):
            out["G.backbone"] = param_checksum(self.G.backbone)
        return out


def build_lcgan(segmentor: Optional[Segmentor], flags: AblationFlags, model_cfg: dict, seed: int = 0) -> LCGANModels:
    f_cfg = GeneratorResNetConfig(**model_cfg.get("generator_F", {}))
    d_cfg = DiscriminatorConfig(**model_cfg.get("discriminator", {}))
    if flags.trained_backbone_on:
        if segmentor is None:
            raise ValueError("trained backbone requested but no segmentor given")
        G = build_generator_G(GeneratorBackboneConfig(**model_cfg.get("generator_G", {})), segmentor, seed=seed + 1)
    else:
        G = build_generator_F(f_cfg, seed=seed + 1)
    F = build_generator_F(f_cfg, seed=seed + 2)
    D_X = build_discriminator(d_cfg, seed=seed + 3)
    D_Y = build_discriminator(d_cfg, seed=seed + 4)
    S = None
    if segmentor is not None:
        S = segmentor
        S.freeze().eval()
    return LCGANModels(G, F, D_X, D_Y, S, flags)


def lcgan_architecture(models: LCGANModels, model_cfg: dict) -> dict:
    arch = {
        "kind": "lcgan",
        "flags": vars(models.flags).copy(),
        "generator_F": config_to_dict(models.F.config),
        "discriminator": config_to_dict(models.D_X.config),
    }
    if isinstance(models.G, BackboneGenerator):
        arch["generator_G"] = {"type": "backbone", **config_to_dict(models.G.config)}
        arch["backbone_encoder"] = config_to_dict(models.G.backbone.config)
    else:
        arch["generator_G"] = {"type": "resnet", **config_to_dict(models.G.config)}
    if models.S is not None:
        arch["segmentor"] = config_to_dict(models.S.config)
    return arch


def generator_step(models: LCGANModels, x: Tensor, x_mask: np.ndarray, y: Tensor, cfg: LossConfig):
    """Forward both cycles and build the generator objective. Returns (total, parts dict, fakes)."""
    flags = models.flags
    g_x = models.G(x)
    f_g_x = models.F(g_x)
    f_y = models.F(y)
    g_f_y = models.G(f_y)
    gan_g = generator_adversarial(models.D_Y(g_x))
    gan_f = generator_adversarial(models.D_X(f_y))
    cyc = cycle_loss(x, f_g_x, y, g_f_y)
    total = gan_g + gan_f + cyc * cfg.lambda_cyc
    parts = {"gan_G": gan_g, "gan_F": gan_f, "cyc": cyc, "ssim": None, "seg": None}
    if flags.ssim_on:
        parts["ssim"] = ssim_loss(x, g_x, y, f_y, cfg)
        total = total + parts["ssim"] * cfg.lambda_ssim
    if flags.seg_on:
        with no_grad():
            s_y = models.S(y)
        n = x.shape[0]
        s_both = models.S(concat([f_g_x, g_f_y], axis=0))
        parts["seg"] = seg_consistency_loss(x_mask, s_both[:n], s_y, s_both[n:])
        total = total + parts["seg"] * cfg.lambda_seg
    return total, parts, (g_x, f_y)


def discriminator_step(D: Module, real: Tensor, fake: np.ndarray) -> Tensor:
    n = real.shape[0]
    scores = D(concat([real, Tensor(fake)], axis=0))
    return discriminator_adversarial(scores[:n], scores[n:])


@dataclass
class LCGANResult:
    models: LCGANModels
    history: List[LossBreakdown]
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def _epoch_sampler(rng, n_x: int, n_y: int):
    """One epoch runs over the larger domain; the smaller one is resampled uniformly."""
    while True:
        n = max(n_x, n_y)
        px = rng.permutation(n_x) if n_x == n else rng.integers(0, n_x, size=n)
        py = rng.permutation(n_y) if n_y == n else rng.integers(0, n_y, size=n)
        for i in range(n):
            yield int(px[i]), int(py[i])


def save_lcgan(path, models: LCGANModels, model_cfg: dict, opt_gen: Optional[Adam] = None,
               opt_dx: Optional[Adam] = None, opt_dy: Optional[Adam] = None, metadata: Optional[dict] = None):
    tensors = {}
    tensors.update(ckpt.prefixed("G", models.G.state_dict()))
    tensors.update(ckpt.prefixed("F", models.F.state_dict()))
    tensors.update(ckpt.prefixed("D_X", models.D_X.state_dict()))
    tensors.update(ckpt.prefixed("D_Y", models.D_Y.state_dict()))
    if models.S is not None:
        tensors.update(ckpt.prefixed("S", models.S.state_dict()))
    meta = dict(metadata or {})
    for name, opt in (("opt_gen", opt_gen), ("opt_dx", opt_dx), ("opt_dy", opt_dy)):
        if opt is not None:
            tensors.update(opt.state(name))
            meta[f"{name}_t"] = opt.t
    return ckpt.save_checkpoint(path, tensors, lcgan_architecture(models, model_cfg), meta)


def load_lcgan(path) -> Tuple[LCGANModels, dict]:
    tensors, arch, meta = ckpt.load_checkpoint(path)
    if arch.get("kind") != "lcgan":
        raise ckpt.CheckpointError(f"{path} is not an LC-GAN checkpoint (kind={arch.get('kind')!r})")
    flags = AblationFlags(**arch["flags"])
    S = None
    if "segmentor" in arch:
        S = build_segmentor(SegmentorConfig(**arch["segmentor"]))
        S.load_state_dict(ckpt.strip_prefix("S", tensors))
    g_arch = dict(arch["generator_G"])
    g_type = g_arch.pop("type")
    if g_type == "backbone":
        if S is None:
            S = build_segmentor(SegmentorConfig(**arch["backbone_encoder"]))
        model_cfg = {"generator_G": g_arch}
    else:
        model_cfg = {}
    model_cfg["generator_F"] = arch["generator_F"]
    model_cfg["discriminator"] = arch["discriminator"]
    models = build_lcgan(S, flags, model_cfg)
    for name, net in (("G", models.G), ("F", models.F), ("D_X", models.D_X), ("D_Y", models.D_Y)):
        net.load_state_dict(ckpt.strip_prefix(name, tensors))
    if isinstance(models.G, BackboneGenerator):
        models.G.backbone.freeze().eval()
    return models, meta


def train_lcgan(x_data: Dataset, y_data: Dataset, segmentor: Optional[Segmentor], *,
                flags: Optional[AblationFlags] = None, loss_cfg: Optional[LossConfig] = None,
                model_cfg: Optional[dict] = None, iterations: int = 3000, lr: float = 8e-5,
                betas=(0.5, 0.999), constant_fraction: float = 0.5, buffer_capacity: int = 50,
                seed: int = 0, out_dir=None, log_every: int = 50, checkpoint_every: int = 500,
                log_fn=None) -> LCGANResult:
    """Alternate one generator update and one update per discriminator each iteration."""
    flags = flags or AblationFlags()
    loss_cfg = loss_cfg or LossConfig()
    model_cfg = model_cfg or {}
    if x_data.masks is None and flags.seg_on:
        raise ValueError("segmentation consistency needs domain-X masks")
    if (flags.seg_on or flags.trained_backbone_on) and segmentor is None:
        raise ValueError("segmentor required when seg_on or trained_backbone_on")
    if not flags.seg_on and not flags.trained_backbone_on:
        segmentor = None
    rng = np.random.default_rng(seed)
    models = build_lcgan(segmentor, flags, model_cfg, seed=seed * 10)
    frozen_before = models.frozen_checksums()

    gen_params = list(models.G.named_parameters("G")) + list(models.F.named_parameters("F"))
    opt_gen = Adam(gen_params, lr=lr, betas=betas)
    opt_dx = Adam(models.D_X.named_parameters("D_X"), lr=lr, betas=betas)
    opt_dy = Adam(models.D_Y.named_parameters("D_Y"), lr=lr, betas=betas)
    buf_x = ImageBuffer(buffer_capacity, np.random.default_rng([seed, 1]))
    buf_y = ImageBuffer(buffer_capacity, np.random.default_rng([seed, 2]))

    out_dir = Path(out_dir) if out_dir is not None else None
    logger = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logger = BreakdownLog(out_dir / "train_log.csv")
    ckpt_path = None

    x_all = to_batch(x_data.images).data
    y_all = to_batch(y_data.images).data
    sampler = _epoch_sampler(rng, len(x_data), len(y_data))
    history: List[LossBreakdown] = []
    models.G.train(), models.F.train(), models.D_X.train(), models.D_Y.train()
    start = time.time()
    for step in range(iterations):
        lr_t = lr_at(step, iterations, lr, constant_fraction)
        ix, iy = next(sampler)
        x = Tensor(x_all[ix:ix + 1])
        y = Tensor(y_all[iy:iy + 1])
        x_mask = x_data.masks[ix:ix + 1] if x_data.masks is not None else None

        opt_gen.zero_grad()
        _set_requires_grad((models.D_X, models.D_Y), False)
        total, parts, (g_x, f_y) = generator_step(models, x, x_mask, y, loss_cfg)
        total_val = total.item()
        if not math.isfinite(total_val):
            raise TrainingDiverged(f"generator objective became {total_val} at step {step}; "
                                   f"last checkpoint: {ckpt_path}")
        total.backward()
        opt_gen.step(lr_t)
        _set_requires_grad((models.D_X, models.D_Y), True)

        opt_dy.zero_grad()
        d_y = discriminator_step(models.D_Y, y, buf_y.query(g_x.data))
        d_y.backward()
        opt_dy.step(lr_t)

        opt_dx.zero_grad()
        d_x = discriminator_step(models.D_X, x, buf_x.query(f_y.data))
        d_x.backward()
        opt_dx.step(lr_t)
        _check_finite(d_y.item() + d_x.item(), "discriminator objective", step)

        if step % log_every == 0 or step == iterations - 1:
            val = lambda t: 0.0 if t is None else t.item()
            bd = LossBreakdown(
                gan_G=val(parts["gan_G"]), gan_F=val(parts["gan_F"]), d_X=d_x.item(), d_Y=d_y.item(),
                cyc=val(parts["cyc"]), ssim=val(parts["ssim"]), seg=val(parts["seg"]),
                total_generator=total_val, total_discriminator=d_x.item() + d_y.item(),
            )
            history.append(bd)
            if logger is not None:
                logger.write(step, lr_t, bd)
            if log_fn:
                log_fn(step, lr_t, bd)
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            ckpt_path = save_lcgan(out_dir / "checkpoint", models, model_cfg, opt_gen, opt_dx, opt_dy,
                                   {"step": step + 1, "seed": seed})

    frozen_after = models.frozen_checksums()
    if frozen_after != frozen_before:
        raise RuntimeError("frozen parameters changed during LC-GAN training")
    if out_dir is not None:
        ckpt_path = save_lcgan(out_dir / "checkpoint", models, model_cfg, opt_gen, opt_dx, opt_dy,
                               {"step": iterations, "seed": seed, "frozen_checksums": frozen_after})
    return LCGANResult(models, history, ckpt_path, time.time() - start)


# -- inference ---------------------------------------------------------------------------

def translate(checkpoint_path, direction: str, image_dir, out_dir) -> List[Path]:
    """Translate every ``.ppm`` in ``image_dir``; ``direction`` is ``"X->Y"`` (G) or ``"Y->X"`` (F)."""
    models, _ = load_lcgan(checkpoint_path)
    gen = {"X->Y": models.G, "Y->X": models.F}.get(direction.replace("→", "->"))
    if gen is None:
        raise ValueError(f"direction must be 'X->Y' or 'Y->X', got {direction!r}")
    return translate_dir(gen, image_dir, out_dir)


def translate_dir(generator: Module, image_dir, out_dir) -> List[Path]:
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    paths = sorted(image_dir.glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm images in {image_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in paths:
        fake = translate_array(generator, read_image(p)[None])[0]
        target = out_dir / p.name
        write_image(target, fake)
        written.append(target)
    return written


@dataclass
class CrossDomainReport:
    cross_domain: Tuple[float, float]
    no_translation: Tuple[float, float]
    mainstream: Optional[Tuple[float, float]] = None
    per_image: Dict[str, List[SegScore]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"cross_domain": list(self.cross_domain), "no_translation": list(self.no_translation)}
        if self.mainstream is not None:
            d["mainstream"] = list(self.mainstream)
        return d


def _mean(scores: Sequence[SegScore]) -> Tuple[float, float]:
    return float(np.mean([s.dsc for s in scores])), float(np.mean([s.iou for s in scores]))


def evaluate_cross_domain(segmentor: Segmentor, generator_F: Optional[Module], y_test: Dataset,
                          mainstream: Optional[Segmentor] = None) -> CrossDomainReport:
    """Score S(F(y)), S(y) and optionally a segmentor trained on labeled Y.

    Y masks are used for scoring only.
    """
    if y_test.masks is None:
        raise ValueError("evaluation needs Y masks")
    fake_x = y_test.images if generator_F is None else translate_array(generator_F, y_test.images)
    per = {
        "cross_domain": segmentation_scores(segmentor, fake_x, y_test.masks),
        "no_translation": segmentation_scores(segmentor, y_test.images, y_test.masks),
    }
    main = None
    if mainstream is not None:
        per["mainstream"] = segmentation_scores(mainstream, y_test.images, y_test.masks)
        main = _mean(per["mainstream"])
    return CrossDomainReport(_mean(per["cross_domain"]), _mean(per["no_translation"]), main, per)
