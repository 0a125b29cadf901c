"""Desk-scale cross-domain experiment and ablation sweeps.

Shared by the ``ablate`` command and the end-to-end acceptance test. The
workflow: train S on labeled X, train LC-GAN variants on unlabeled X/Y,
segment ``F(y)`` with S, and compare against S applied to raw Y and a
segmentor trained directly on labeled Y.
"""
from __future__ import annotations

import csv
import itertools
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from .losses import LossConfig
from .networks import Segmentor, SegmentorConfig
from .synthdata import Dataset, default_specs, in_memory
from .training import (AblationFlags, evaluate_cross_domain, segmentation_scores,
                       train_lcgan, train_segmentor)

ALL_FLAG_SETS: Tuple[AblationFlags, ...] = tuple(
    AblationFlags(ssim_on=a, seg_on=b, trained_backbone_on=c)
    for c, a, b in itertools.product((False, True), repeat=3)
)


def flags_label(flags: AblationFlags) -> str:
    """``backbone/ssim/seg`` as 1/0 characters, e.g. ``111``."""
    return "".join("1" if v else "0" for v in
                   (flags.trained_backbone_on, flags.ssim_on, flags.seg_on))


def parse_flags(label: str) -> AblationFlags:
    if len(label) != 3 or set(label) - {"0", "1"}:
        raise ValueError(f"flag label must be three 0/1 characters (backbone, ssim, seg), got {label!r}")
    c, a, b = (ch == "1" for ch in label)
    return AblationFlags(ssim_on=a, seg_on=b, trained_backbone_on=c)


@dataclass
class DeskData:
    x_train: Dataset
    x_test: Dataset
    y_train: Dataset  # masks kept only for the mainstream segmentor
    y_test: Dataset


def desk_data(size: int = 64, n_train: int = 400, n_test: int = 100, seed: int = 0) -> DeskData:
    spec_x, spec_y = default_specs(size=size, seed=seed)
    x = in_memory(spec_x, n_train + n_test)
    y = in_memory(spec_y, n_train + n_test)
    train = range(n_train)
    test = range(n_train, n_train + n_test)
    return DeskData(x.subset(train), x.subset(test), y.subset(train), y.subset(test))


def unlabeled(data: Dataset) -> Dataset:
    return Dataset(list(data.ids), data.images, None)


@dataclass
class RunResult:
    flags: str
    seed: int
    mdsc: float
    miou: float
    seconds: float


@dataclass
class ExperimentReport:
    seg_x_heldout: Tuple[float, float]
    no_translation: Tuple[float, float]
    mainstream: Optional[Tuple[float, float]]
    runs: List[RunResult] = field(default_factory=list)
    seconds: float = 0.0

    def median(self, flags: str) -> Tuple[float, float]:
        picked = [r for r in self.runs if r.flags == flags]
        if not picked:
            raise KeyError(f"no runs for flags {flags}")
        return (statistics.median(r.mdsc for r in picked), statistics.median(r.miou for r in picked))

    def flag_sets(self) -> List[str]:
        return sorted({r.flags for r in self.runs}, reverse=True)

    def to_dict(self) -> dict:
        return {
            "seg_x_heldout": list(self.seg_x_heldout),
            "no_translation": list(self.no_translation),
            "mainstream": None if self.mainstream is None else list(self.mainstream),
            "median": {f: list(self.median(f)) for f in self.flag_sets()},
            "runs": [asdict(r) for r in self.runs],
            "seconds": self.seconds,
        }

    def write(self, out_dir) -> Path:
        """``ablation.csv`` (one median row per flag set), ``runs.csv`` and ``ablation.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        order = [flags_label(f) for f in ALL_FLAG_SETS]
        present = sorted(self.flag_sets(), key=order.index)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["backbone", "ssim", "seg", "mDSC", "mIoU", "seeds"])
            for f in present:
                d, i = self.median(f)
                n = sum(1 for r in self.runs if r.flags == f)
                w.writerow([*f, f"{d:.4f}", f"{i:.4f}", n])
        with open(out / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["flags", "seed", "mDSC", "mIoU", "seconds"])
            for r in self.runs:
                w.writerow([r.flags, r.seed, f"{r.mdsc:.4f}", f"{r.miou:.4f}", f"{r.seconds:.1f}"])
        with open(out / "ablation.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        return out / "ablation.csv"


def _mean_pair(scores) -> Tuple[float, float]:
    return (statistics.fmean(s.dsc for s in scores), statistics.fmean(s.iou for s in scores))


def run_ablation(data: DeskData, segmentor: Segmentor, flag_sets: Sequence[AblationFlags],
                 seeds: Sequence[int], *, iterations: int, lr: float = 8e-5, betas=(0.5, 0.999),
                 loss_cfg: Optional[LossConfig] = None, model_cfg: Optional[dict] = None,
                 buffer_capacity: int = 50, mainstream: Optional[Segmentor] = None,
                 seg_x_heldout: Optional[Tuple[float, float]] = None,
                 log_fn: Optional[Callable[[str], None]] = None) -> ExperimentReport:
    """Train one LC-GAN per (flags, seed) and score S(F(y)) on the Y test split."""
    log = log_fn or (lambda msg: None)
    start = time.time()
    base = evaluate_cross_domain(segmentor, None, data.y_test, mainstream)
    report = ExperimentReport(
        seg_x_heldout=seg_x_heldout or _mean_pair(
            segmentation_scores(segmentor, data.x_test.images, data.x_test.masks)),
        no_translation=base.no_translation,
        mainstream=base.mainstream,
    )
    y_unlabeled = unlabeled(data.y_train)
    for flags in flag_sets:
        for seed in seeds:
            t0 = time.time()
            result = train_lcgan(data.x_train, y_unlabeled, segmentor, flags=flags, loss_cfg=loss_cfg,
                                 model_cfg=model_cfg, iterations=iterations, lr=lr, betas=betas,
                                 buffer_capacity=buffer_capacity, seed=seed, out_dir=None)
            rep = evaluate_cross_domain(segmentor, result.models.F, data.y_test)
            run = RunResult(flags_label(flags), seed, rep.cross_domain[0], rep.cross_domain[1],
                            time.time() - t0)
            report.runs.append(run)
            log(f"flags {run.flags} seed {seed}: mDSC {run.mdsc:.3f} mIoU {run.miou:.3f} "
                f"({run.seconds:.0f}s)")
    report.seconds = time.time() - start
    return report


@dataclass
class DeskSettings:
    size: int = 64
    n_train: int = 400
    n_test: int = 100
    data_seed: int = 0
    seg_epochs: int = 30
    seg_batch: int = 8
    seg_lr: float = 2e-3
    iterations: int = 1000
    lr: float = 2e-4
    seeds: Tuple[int, ...] = (0, 1, 2)
    flag_sets: Tuple[str, ...] = ("111", "000")


def run_desk_experiment(settings: DeskSettings = DeskSettings(), out_dir=None,
                        log_fn: Optional[Callable[[str], None]] = None) -> ExperimentReport:
    """Full workflow: data, S on X, mainstream S on labeled Y, LC-GAN variants."""
    log = log_fn or (lambda msg: None)
    start = time.time()
    data = desk_data(settings.size, settings.n_train, settings.n_test, settings.data_seed)
    log("training segmentor on X")
    seg = train_segmentor(data.x_train, SegmentorConfig(), epochs=settings.seg_epochs,
                          batch_size=settings.seg_batch, lr=settings.seg_lr, seed=settings.data_seed)
    held = _mean_pair(segmentation_scores(seg.model, data.x_test.images, data.x_test.masks))
    log(f"held-out X mDSC {held[0]:.3f}")
    log("training mainstream segmentor on labeled Y")
    main = train_segmentor(data.y_train, SegmentorConfig(), epochs=settings.seg_epochs,
                           batch_size=settings.seg_batch, lr=settings.seg_lr, seed=settings.data_seed)
    report = run_ablation(data, seg.model, [parse_flags(f) for f in settings.flag_sets], settings.seeds,
                          iterations=settings.iterations, lr=settings.lr, mainstream=main.model,
                          seg_x_heldout=held, log_fn=log)
    report.seconds = time.time() - start
    if out_dir is not None:
        report.write(out_dir)
    return report
