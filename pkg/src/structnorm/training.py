"""Training and fine-tuning loops."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .asac import (
    AsacConfig, CropCubeSpec, adaptive_preresize, augment, balanced_sampling_weights,
    enumerate_crops, extract_and_resize, global_crop, model_inputs,
)
from .dataset import DatasetManifest, VolumeSample
from .evaluation import classification_metrics
from .inference import crop_probabilities, vote
from .network import NetworkConfig, NonLocalNet, init_parameters
from .preprocess import PreprocessConfig, preprocess_sample

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    milestones: tuple[int, ...] = (2, 5, 10)
    decay_factor: float = 10.0
    seed: int = 0
    # draws per epoch; None means the size of the train split
    samples_per_epoch: Optional[int] = None
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.betas = tuple(float(b) for b in self.betas)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError("milestones must be smaller than epochs")
        if self.batch_size < 1 or self.epochs < 1 or self.lr0 <= 0:
            raise ValueError("batch_size, epochs and lr0 must be positive")

    @classmethod
    def non_asac(cls, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 200)
        kw.setdefault("milestones", (10, 20, 30))
        return cls(**kw)


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    samples_per_epoch: Optional[int] = None
    trainable: tuple[str, ...] = ("res4", "head")

    def __post_init__(self):
        if self.epochs > 20:
            raise ValueError("fine-tuning runs at most 20 epochs")
        self.trainable = tuple(self.trainable)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_macro_f1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lr)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_macro_f1", "lr"])
            for i in range(len(self)):
                w.writerow([i, repr(self.train_loss[i]), repr(self.val_loss[i]),
                            repr(self.val_macro_f1[i]), repr(self.lr[i])])


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Step schedule: divide by ``decay_factor`` at each milestone reached."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr0 / config.decay_factor ** passed


class CropPool:
    """Preprocessed samples with their candidate training crops."""

    def __init__(self, samples: Sequence[VolumeSample], asac: AsacConfig, ids: Sequence[str] = ()):
        self.asac = asac
        self.samples = []
        self.specs: list[list[CropCubeSpec]] = []
        self.ids = list(ids) or [str(i) for i in range(len(samples))]
        for s, sid in zip(samples, self.ids):
            if asac.mode == "global":
                specs = [global_crop(s)]
            else:
                s, _ = adaptive_preresize(s, asac.largest_inplane)
                specs = enumerate_crops(s, asac.scales)
                if asac.skip_empty_crops:
                    kept = [sp for sp in specs if extract_and_resize(s, sp, asac.input_shape).tensor[1].any()]
                    specs = kept or specs
            self.samples.append(s)
            self.specs.append(specs)

    def __len__(self) -> int:
        return len(self.samples)

    def draw(self, i: int, rng: np.random.Generator) -> np.ndarray:
        """One random crop of sample ``i``, augmented to the training shape."""
        specs = self.specs[i]
        spec = specs[int(rng.integers(len(specs)))]
        inp = extract_and_resize(self.samples[i], spec, self.asac.input_shape, self.ids[i])
        seed = int(rng.integers(2 ** 63))
        return augment(inp, seed, self.asac.augment, self.asac.train_shape).tensor


def _load_split(manifest: DatasetManifest, split: str, preprocess: Optional[PreprocessConfig]):
    entries = manifest.subset(split)
    samples = [preprocess_sample(manifest.load(e), preprocess) for e in entries]
    return samples, np.array([e.true_class for e in entries], dtype=int), [e.path for e in entries]


class _Validator:
    def __init__(self, samples, labels, asac: AsacConfig, class_names):
        self.inputs = [model_inputs(s, asac) for s in samples]
        self.labels = labels
        self.class_names = list(class_names)

    def __call__(self, net: NonLocalNet) -> tuple[float, float]:
        if not self.inputs:
            return float("nan"), float("nan")
        voted = np.array([vote(crop_probabilities(inp, net)) for inp in self.inputs])
        p_true = voted[np.arange(len(voted)), self.labels]
        loss = float(-np.log(np.clip(p_true, 1e-12, None)).mean())
        f1 = classification_metrics(self.labels, voted, self.class_names).macro_f1
        return loss, f1


def _fit(
    net: NonLocalNet,
    pool: CropPool,
    labels: np.ndarray,
    weights: np.ndarray,
    epochs: int,
    batch_size: int,
    samples_per_epoch: Optional[int],
    lr_for_epoch: Callable[[int], float],
    seed: int,
    betas=(0.9, 0.999),
    validator: Optional[_Validator] = None,
    trainable: Optional[Sequence[str]] = None,
    log_prefix: str = "train",
) -> tuple[NonLocalNet, TrainHistory]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if trainable is None:
        params = list(net.parameters())
    else:
        params = []
        for name, p in net.named_parameters():
            p.requires_grad_(name.split(".")[0] in trainable)
            if p.requires_grad:
                params.append(p)
    optimizer = torch.optim.Adam(params, lr=lr_for_epoch(0), betas=betas)
    probs = weights / weights.sum()
    steps = math.ceil((samples_per_epoch or len(pool)) / batch_size)
    dtype = next(net.parameters()).dtype

    history = TrainHistory()
    best_state, best_key = None, None
    for epoch in range(epochs):
        lr = lr_for_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        _set_train_mode(net, trainable)
        losses = []
        for _ in range(steps):
            ids = rng.choice(len(pool), size=batch_size, replace=True, p=probs)
            x = torch.from_numpy(np.stack([pool.draw(int(i), rng) for i in ids])).to(dtype)
            y = torch.from_numpy(labels[ids])
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, lr {lr}, batch {[pool.ids[int(i)] for i in ids]}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        net.eval()
        val_loss, val_f1 = validator(net) if validator is not None else (float("nan"), float("nan"))
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val_loss)
        history.val_macro_f1.append(val_f1)
        history.lr.append(lr)
        logger.info("%s epoch %d lr %.1e loss %.4f val_loss %.4f val_f1 %.4f",
                    log_prefix, epoch, lr, history.train_loss[-1], val_loss, val_f1)
        if validator is not None:
            key = (val_f1, -val_loss)
            if best_key is None or key > best_key:
                best_key, best_state = key, copy.deepcopy(net.state_dict())
    if trainable is not None:
        for p in net.parameters():
            p.requires_grad_(True)
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return net, history


def _set_train_mode(net: NonLocalNet, trainable: Optional[Sequence[str]]) -> None:
    net.train()
    if trainable is None:
        return
    # frozen stages keep their batch-norm statistics untouched
    for name, child in net.named_children():
        if name not in trainable:
            child.eval()


def train(
    manifest: DatasetManifest,
    net_config: NetworkConfig,
    train_config: TrainConfig,
    asac: Optional[AsacConfig] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> tuple[NonLocalNet, TrainHistory]:
    """Train from scratch with inverse-frequency sampling, one random augmented crop per draw.

    The returned network holds the epoch with the best validation macro-F1.
    """
    asac = asac or AsacConfig()
    samples, labels, ids = _load_split(manifest, "train", preprocess)
    if not samples:
        raise ValueError("train split is empty")
    val_samples, val_labels, _ = _load_split(manifest, "val", preprocess)
    if not val_samples:
        raise ValueError("val split is empty")
    pool = CropPool(samples, asac, ids)
    validator = _Validator(val_samples, val_labels, asac, manifest.vocabulary.names)
    net = init_parameters(net_config, train_config.seed)
    return _fit(
        net, pool, labels, balanced_sampling_weights(manifest, "train"),
        train_config.epochs, train_config.batch_size, train_config.samples_per_epoch,
        lambda e: learning_rate(e, train_config), train_config.seed, train_config.betas, validator,
    )


def finetune(
    net: NonLocalNet,
    new_manifest: DatasetManifest,
    config: Optional[FinetuneConfig] = None,
    asac: Optional[AsacConfig] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> tuple[NonLocalNet, TrainHistory]:
    """Re-head ``net`` for the new vocabulary and train only Res4 and the head at a fixed lr."""
    config = config or FinetuneConfig()
    asac = asac or AsacConfig()
    samples, labels, ids = _load_split(new_manifest, "train", preprocess)
    if not samples:
        raise ValueError("train split is empty")
    missing = sorted(set(range(len(new_manifest.vocabulary))) - set(labels.tolist()))
    if missing:
        raise ValueError(f"classes without training samples: {[new_manifest.vocabulary[i] for i in missing]}")
    val_samples, val_labels, _ = _load_split(new_manifest, "val", preprocess)
    validator = _Validator(val_samples, val_labels, asac, new_manifest.vocabulary.names) if val_samples else None

    net = copy.deepcopy(net)
    net.reset_head(len(new_manifest.vocabulary), seed=config.seed)
    net.to(next(net.stem.parameters()).dtype)
    pool = CropPool(samples, asac, ids)
    return _fit(
        net, pool, labels, balanced_sampling_weights(new_manifest, "train"),
        config.epochs, config.batch_size, config.samples_per_epoch,
        lambda e: config.lr, config.seed, validator=validator,
        trainable=config.trainable, log_prefix="finetune",
    )
