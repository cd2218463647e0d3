"""Desk-scale experiments on the phantom: crop-mode comparison, transfer, atlas sweep."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .asac import AsacConfig, desk_asac_config
from .dataset import (
    DatasetManifest, default_phantom_config, generate_phantom_dataset, render_phantom_sample,
    sample_seed, transfer_phantom_config,
)
from .evaluation import MetricsReport, atlas_relabel, classification_metrics
from .inference import predict_sample
from .network import NetworkConfig, NonLocalNet
from .preprocess import preprocess_sample
from .training import FinetuneConfig, TrainConfig, finetune, train

logger = logging.getLogger(__name__)

MINORITY = ("OpticChiasm", "Pituitary")


def desk_train_config(seed: int = 0, epochs: int = 12, **kw) -> TrainConfig:
    """Default schedule compressed for CPU: one decay step at 2/3 of training."""
    kw.setdefault("lr0", 1e-3)
    kw.setdefault("milestones", (epochs * 2 // 3,))
    kw.setdefault("samples_per_epoch", 320)
    return TrainConfig(seed=seed, epochs=epochs, **kw)


def evaluate_manifest(net: NonLocalNet, manifest: DatasetManifest, asac: AsacConfig,
                      split: Optional[str] = None) -> MetricsReport:
    entries = manifest.subset(split) if split else manifest.entries
    scores = np.array([predict_sample(preprocess_sample(manifest.load(e)), net, asac).voted for e in entries])
    return classification_metrics([e.true_class for e in entries], scores, manifest.vocabulary.names)


@dataclass
class ArmResult:
    arm: str
    seed: int
    minority_f1: float
    macro_tpr: float
    f1: list[float]
    seconds: float


@dataclass
class ComparisonResult:
    runs: list[ArmResult] = field(default_factory=list)

    def mean(self, arm: str, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.runs if r.arm == arm]))

    def summary(self) -> dict:
        return {arm: {"minority_f1": self.mean(arm, "minority_f1"), "macro_tpr": self.mean(arm, "macro_tpr")}
                for arm in ("global", "asac_nonlocal")}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps({"summary": self.summary(), "runs": [asdict(r) for r in self.runs]},
                                         indent=1))


def comparison_arms() -> dict:
    """(crop config, network config) for the baseline and the full method."""
    return {
        "global": (desk_asac_config(mode="global", train_shape=(12, 48, 48)), NetworkConfig.toy(8, nonlocal_stages=())),
        "asac_nonlocal": (desk_asac_config(train_shape=(12, 48, 48)), NetworkConfig.toy(8)),
    }


def run_phantom_comparison(
    out_dir,
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int = 12,
    train_counts: Optional[Sequence[int]] = None,
    test_counts: Sequence[int] = (20,) * 8,
    keep_networks: bool = False,
):
    """Train both arms for every seed; score on a held-out phantom set.

    Returns the ComparisonResult, plus ``{(arm, seed): net}`` when ``keep_networks``.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    manifest = generate_phantom_dataset(default_phantom_config(train_counts), 0, out_dir / "train")
    test = generate_phantom_dataset(default_phantom_config(list(test_counts)), 1000, out_dir / "test", ratios=None)
    names = list(manifest.vocabulary.names)
    minority = [names.index(n) for n in MINORITY]
    result, nets = ComparisonResult(), {}
    for arm, (asac, net_cfg) in comparison_arms().items():
        for seed in seeds:
            t0 = time.time()
            net, history = train(manifest, net_cfg, desk_train_config(seed, epochs), asac)
            report = evaluate_manifest(net, test, asac)
            history.write_csv(out_dir / f"history_{arm}_{seed}.csv")
            run = ArmResult(arm, seed, float(report.f1[minority].mean()), report.macro_tpr,
                            report.f1.tolist(), time.time() - t0)
            logger.info("%s seed %d minority F1 %.3f macro TPR %.3f (%.0f s)",
                        arm, seed, run.minority_f1, run.macro_tpr, run.seconds)
            result.runs.append(run)
            if keep_networks:
                nets[(arm, seed)] = net
    result.write(out_dir / "comparison.json")
    return (result, nets) if keep_networks else result


@dataclass
class TransferResult:
    per_class_tpr: dict[str, float]
    frozen_identical: bool
    history_lr: list[float]


def run_transfer(pretrained: NonLocalNet, out_dir, per_class: int = 5, test_per_class: int = 20,
                 config: Optional[FinetuneConfig] = None, asac: Optional[AsacConfig] = None) -> TransferResult:
    """Fine-tune a pretrained net on four unseen organ shapes with a handful of samples each."""
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    asac = asac or desk_asac_config(train_shape=(12, 48, 48))
    # 640 draws = four augmented passes over the ~160 ASAC crops of 20 samples
    config = config or FinetuneConfig(samples_per_epoch=640)
    new = generate_phantom_dataset(transfer_phantom_config([per_class] * 4), 2000, out_dir / "train", ratios=None)
    test = generate_phantom_dataset(transfer_phantom_config([test_per_class] * 4), 3000, out_dir / "test",
                                    ratios=None)
    before = {k: v.clone() for k, v in pretrained.state_dict().items()}
    tuned, history = finetune(pretrained, new, config, asac)
    after = tuned.state_dict()
    frozen = [k for k in after if k.split(".")[0] not in config.trainable]
    identical = all(torch.equal(before[k], after[k]) for k in frozen)
    report = evaluate_manifest(tuned, test, asac)
    return TransferResult(dict(zip(report.class_names, report.tpr.tolist())), identical, history.lr)


def run_atlas_sweep(noise_levels: Sequence[float] = (0.0, 0.5, 1.0, 2.0), per_class: int = 20,
                    seed: int = 7) -> dict[float, float]:
    """Atlas accuracy (identity transform) against increasingly poor delineations.

    References and test masks share the unshifted organ placement; test masks
    keep their size jitter, and noise adds contour errors on top.
    """
    ref = default_phantom_config([1] * 8, jitter=0.0, size_jitter=0.0, hu_noise=0.0)
    atlas = [(c.name, render_phantom_sample(ref, k, sample_seed(seed + 1, k, 0)).mask)
             for k, c in enumerate(ref.classes)]
    test_cfg = default_phantom_config([1] * 8, jitter=0.0)
    out = {}
    for noise in noise_levels:
        hits = total = 0
        for k, c in enumerate(test_cfg.classes):
            for i in range(per_class):
                m = render_phantom_sample(test_cfg, k, sample_seed(seed, k, i), delineation_noise=noise).mask
                hits += atlas_relabel(m, atlas)[0] == c.name
                total += 1
        out[float(noise)] = hits / total
    return out
