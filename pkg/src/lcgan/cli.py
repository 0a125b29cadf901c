"""Command-line entry point: ``lcgan <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Set ``LCGAN_THREADS`` to cap the worker threads used by the numba kernels and
BLAS.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

THREADS_ENV = "LCGAN_THREADS"


def _apply_thread_env():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)


class UsageError(Exception):
    """Raised for invalid user input (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", default="default", help="JSON config file, or 'default'")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lcgan", description="Cross-domain instrument segmentation with LC-GAN.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic X and Y domains")
    _common(p)
    p.add_argument("--size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train-seg", help="train a segmentor on one labeled domain")
    _common(p)
    p.add_argument("--data", help="dataset root written by synth (defaults to data.root)")
    p.add_argument("--domain", choices=("X", "Y"), default="X")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-lcgan", help="train LC-GAN on unpaired X/Y")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--segmentor", help="segmentor checkpoint (needed unless seg and backbone are off)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--flags", help="backbone/ssim/seg as three 0/1 characters, e.g. 111")
    p.add_argument("--lr", type=float)

    p = sub.add_parser("translate", help="translate a directory of images")
    p.add_argument("--config", default="default", help="JSON config file, or 'default'")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", required=True, choices=("X->Y", "Y->X"))
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score S(F(y)), S(y) and an optional mainstream segmentor")
    _common(p)
    p.add_argument("--data", help="dataset root; the test split of Y is scored")
    p.add_argument("--segmentor", required=True)
    p.add_argument("--checkpoint", help="LC-GAN checkpoint; omit to score S on raw Y")
    p.add_argument("--mainstream", help="segmentor trained on labeled Y")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    _common(p, out_required=False)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("ablate", help="train all 8 flag configurations and compare")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--segmentor", required=True)
    p.add_argument("--mainstream")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("preview", help="write real | fake | mask grids as PPM")
    p.add_argument("--config", default="default", help="JSON config file, or 'default'")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=("X->Y", "Y->X"), default="Y->X")
    p.add_argument("--images", required=True)
    p.add_argument("--masks")
    p.add_argument("--segmentor", help="draw S's prediction on the fake instead of a ground-truth mask")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    return parser


# -- helpers -------------------------------------------------------------------------

def _config(args, overrides: dict) -> dict:
    from .config import apply_overrides, load_config
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        overrides = dict(overrides, **{"run.seed": args.seed, "data.seed": args.seed})
    return apply_overrides(cfg, overrides)


def _snapshot(cfg: dict, out) -> None:
    from .config import write_snapshot
    write_snapshot(cfg, out)


def _data_root(args, cfg) -> Path:
    root = getattr(args, "data", None) or cfg["data"]["root"]
    if not root:
        raise UsageError("no dataset given: pass --data or set data.root in the config")
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    return root


def _loss_config(cfg):
    from .losses import LossConfig
    return LossConfig(**cfg["loss"])


def _flags(cfg):
    from .training import AblationFlags
    r = cfg["run"]
    return AblationFlags(ssim_on=r["ssim_on"], seg_on=r["seg_on"], trained_backbone_on=r["trained_backbone_on"])


def _print(msg):
    print(msg, flush=True)


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthdata import default_specs, generate
    cfg = _config(args, {"data.size": args.size, "data.n_train": args.n_train, "data.n_test": args.n_test})
    d = cfg["data"]
    out = Path(args.out)
    for spec in default_specs(size=d["size"], seed=d["seed"]):
        generate(spec, d["n_train"], out / "train", start=0)
        generate(spec, d["n_test"], out / "test", start=d["n_train"])
    cfg["data"]["root"] = str(out)
    _snapshot(cfg, out)
    _print(f"wrote {d['n_train']}+{d['n_test']} images per domain under {out}")
    return 0


def cmd_train_seg(args) -> int:
    import csv
    from .networks import SegmentorConfig
    from .synthdata import load_domain
    from .training import save_segmentor, train_segmentor
    cfg = _config(args, {"optim.seg_epochs": args.epochs})
    root = _data_root(args, cfg)
    data = load_domain(root / "train", args.domain)
    if data.masks is None:
        raise UsageError(f"{root / 'train' / args.domain} has no masks")
    o = cfg["optim"]
    out = Path(args.out)
    _snapshot(cfg, out)
    result = train_segmentor(data, SegmentorConfig(**cfg["model"]["segmentor"]), epochs=o["seg_epochs"],
                             batch_size=o["seg_batch"], lr=o["seg_lr"], beta1=o["seg_beta1"],
                             val_fraction=o["seg_val_fraction"], seed=cfg["run"]["seed"],
                             log_fn=lambda e: _print(f"epoch {e['epoch']}: loss {e['loss']:.4f} "
                                                     f"val mDSC {e['val_mdsc']:.3f}"))
    save_segmentor(out / "segmentor", result.model,
                   {"domain": args.domain, "best_val_dsc": result.best_val_dsc, "seed": cfg["run"]["seed"]})
    with open(out / "seg_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_mdsc"])
        w.writeheader()
        w.writerows(result.history)
    _print(f"best validation mDSC {result.best_val_dsc:.3f}; checkpoint at {out / 'segmentor'}")
    return 0


def cmd_train_lcgan(args) -> int:
    from .experiment import parse_flags
    from .synthdata import Dataset, load_domain
    from .training import load_segmentor, train_lcgan
    overrides = {"run.iterations": args.iterations, "optim.lr": args.lr}
    if args.flags is not None:
        try:
            fl = parse_flags(args.flags)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        overrides.update({"run.ssim_on": fl.ssim_on, "run.seg_on": fl.seg_on,
                          "run.trained_backbone_on": fl.trained_backbone_on})
    cfg = _config(args, overrides)
    flags = _flags(cfg)
    root = _data_root(args, cfg)
    x = load_domain(root / "train", "X")
    y = load_domain(root / "train", "Y", with_masks=False)
    seg = None
    if args.segmentor:
        seg = load_segmentor(args.segmentor)
    elif flags.seg_on or flags.trained_backbone_on:
        raise UsageError("--segmentor is required when seg or backbone flags are on")
    out = Path(args.out)
    _snapshot(cfg, out)
    o, r = cfg["optim"], cfg["run"]
    result = train_lcgan(
        x, Dataset(y.ids, y.images, None), seg, flags=flags, loss_cfg=_loss_config(cfg),
        model_cfg=cfg["model"], iterations=r["iterations"], lr=o["lr"], betas=(o["beta1"], o["beta2"]),
        constant_fraction=o["constant_fraction"], buffer_capacity=r["buffer_capacity"], seed=r["seed"],
        out_dir=out, log_every=r["log_every"], checkpoint_every=r["checkpoint_every"],
        log_fn=lambda step, lr, bd: _print(f"step {step} lr {lr:.2e} G {bd.total_generator:.4f} "
                                           f"D {bd.total_discriminator:.4f}"),
    )
    _print(f"finished in {result.seconds:.0f}s; checkpoint at {result.checkpoint}")
    return 0


def cmd_translate(args) -> int:
    from .training import translate
    cfg = _config(args, {})
    written = translate(args.checkpoint, args.direction, args.images, args.out)
    _snapshot(cfg, args.out)
    _print(f"translated {len(written)} images into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import write_report
    from .synthdata import load_domain
    from .training import evaluate_cross_domain, load_lcgan, load_segmentor
    cfg = _config(args, {})
    root = _data_root(args, cfg)
    y_test = load_domain(root / "test", "Y")
    if y_test.masks is None:
        raise UsageError(f"{root / 'test' / 'Y'} has no masks to score against")
    seg = load_segmentor(args.segmentor)
    gen = load_lcgan(args.checkpoint)[0].F if args.checkpoint else None
    main = load_segmentor(args.mainstream) if args.mainstream else None
    rep = evaluate_cross_domain(seg, gen, y_test, main)
    out = Path(args.out)
    _snapshot(cfg, out)
    for name, scores in rep.per_image.items():
        write_report(out / f"scores_{name}.csv", y_test.ids, scores)
    with open(out / "summary.json", "w") as fh:
        json.dump(rep.as_dict(), fh, indent=2)
        fh.write("\n")
    for name, pair in rep.as_dict().items():
        _print(f"{name}: mDSC {100 * pair[0]:.1f}  mIoU {100 * pair[1]:.1f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import CHECKS
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    rows, ok = [], True
    for name, fn in CHECKS.items():
        for seed in range(args.seeds):
            rep = fn(seed, args.size)
            ok &= rep.passed
            rows.append({"loss": name, "seed": seed, "max_relative_error": rep.max_relative_error,
                         "passed": rep.passed, "kinks": rep.kinks})
            _print(f"{name:16s} seed {seed}: max rel. err {rep.max_relative_error:.2e} "
                   f"{'ok' if rep.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        _snapshot(_config(args, {}), out)
        with open(out / "gradcheck.json", "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    worst = max(r["max_relative_error"] for r in rows)
    _print(f"worst relative error {worst:.2e} (tolerance 1e-4)")
    return 0 if ok else 2


def cmd_ablate(args) -> int:
    from .experiment import ALL_FLAG_SETS, DeskData, run_ablation
    from .synthdata import load_domain
    from .training import load_segmentor
    overrides = {"run.iterations": args.iterations}
    if args.seeds:
        overrides["run.seeds"] = args.seeds
    cfg = _config(args, overrides)
    root = _data_root(args, cfg)
    data = DeskData(load_domain(root / "train", "X"), load_domain(root / "test", "X"),
                    load_domain(root / "train", "Y"), load_domain(root / "test", "Y"))
    seg = load_segmentor(args.segmentor)
    main = load_segmentor(args.mainstream) if args.mainstream else None
    out = Path(args.out)
    _snapshot(cfg, out)
    o = cfg["optim"]
    report = run_ablation(data, seg, ALL_FLAG_SETS, cfg["run"]["seeds"], iterations=cfg["run"]["iterations"],
                          lr=o["lr"], betas=(o["beta1"], o["beta2"]), loss_cfg=_loss_config(cfg),
                          model_cfg=cfg["model"], buffer_capacity=cfg["run"]["buffer_capacity"],
                          mainstream=main, log_fn=_print)
    path = report.write(out)
    _print(f"comparison table at {path}")
    return 0


def cmd_preview(args) -> int:
    import numpy as np
    from .imagecore import read_image, read_mask, write_image
    from .training import load_lcgan, load_segmentor, predict_masks, translate_array
    models, _ = load_lcgan(args.checkpoint)
    gen = models.G if args.direction == "X->Y" else models.F
    paths = sorted(Path(args.images).glob("*.ppm"))[:max(args.count, 0)]
    if not paths:
        raise UsageError(f"no .ppm images in {args.images}")
    seg = load_segmentor(args.segmentor) if args.segmentor else None
    out = Path(args.out)
    _snapshot(_config(args, {}), out)
    for p in paths:
        real = read_image(p)
        fake = translate_array(gen, real[None])[0]
        if seg is not None:
            mask = predict_masks(seg, fake[None])[0]
        elif args.masks:
            mask = read_mask(Path(args.masks) / f"{p.stem}.pgm")
        else:
            mask = np.zeros(real.shape[:2], dtype=np.uint8)
        mask_rgb = np.repeat(mask[..., None].astype(np.float32), 3, axis=2)
        write_image(out / f"{p.stem}_preview.ppm", np.concatenate([real, fake, mask_rgb], axis=1))
    _print(f"wrote {len(paths)} previews into {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-seg": cmd_train_seg,
    "train-lcgan": cmd_train_lcgan,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "preview": cmd_preview,
}


def main(argv=None) -> int:
    try:
        _apply_thread_env()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lcgan: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # classified below
        from .checkpoint import CheckpointError
        from .config import ConfigError
        from .imagecore import ImageFormatError
        from .networks import ArchitectureError
        if isinstance(exc, (ConfigError, CheckpointError, ImageFormatError, ArchitectureError,
                            FileNotFoundError, ValueError)):
            print(f"lcgan: error: {exc}", file=sys.stderr)
            return 1
        print(f"lcgan: runtime failure: {exc}", file=sys.stderr)
        if os.environ.get("LCGAN_DEBUG"):
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
