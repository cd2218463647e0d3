"""Early-match lookup, multi-crop voting and structure-set relabeling."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .asac import AsacConfig, CropCubeSpec, ModelInput, model_inputs
from .dataset import VolumeSample
from .network import NonLocalNet
from .preprocess import PreprocessConfig, preprocess_sample

logger = logging.getLogger(__name__)

UNRECOGNIZED = "unrecognized"
REPORT_HEADER = ("original_label", "assigned_label", "source", "confidence")


@dataclass
class StandardizationDictionary:
    canonical: list[str]
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = sorted(set(self.aliases.values()) - set(self.canonical))
        if missing:
            raise ValueError(f"alias targets not canonical: {missing}")
        self._lookup = {}
        for name in self.canonical:
            self._lookup.setdefault(name.strip().casefold(), name)
        for alias, target in self.aliases.items():
            self._lookup.setdefault(alias.strip().casefold(), target)

    @classmethod
    def load(cls, path) -> "StandardizationDictionary":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {"canonical", "aliases"}
        if unknown:
            raise ValueError(f"unknown dictionary keys: {sorted(unknown)}")
        return cls(list(raw["canonical"]), dict(raw.get("aliases", {})))

    def match(self, label: str) -> Optional[str]:
        return self._lookup.get(label.strip().casefold())


def early_match(original_label: str, dictionary: StandardizationDictionary) -> Optional[str]:
    """Exact (trimmed, case-insensitive) lookup; no fuzzy matching."""
    return dictionary.match(original_label)


def vote(prob_vectors, weights=None) -> np.ndarray:
    """Mean of per-crop probability vectors, uniform unless ``weights`` are given.

    Uses exactly rounded sums so the result does not depend on crop order.
    """
    p = np.asarray(prob_vectors, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("need at least one probability vector")
    if weights is None:
        return np.array([math.fsum(p[:, c]) / len(p) for c in range(p.shape[1])])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(p),) or np.any(w < 0) or not w.any():
        raise ValueError("weights must be non-negative, one per crop, not all zero")
    total = math.fsum(w)
    return np.array([math.fsum(w * p[:, c]) / total for c in range(p.shape[1])])


def argmax_lowest(v) -> int:
    v = np.asarray(v)
    return int(np.flatnonzero(v == v.max())[0])


@dataclass
class Prediction:
    per_crop_scores: list[tuple[Optional[CropCubeSpec], np.ndarray]]
    voted: np.ndarray
    class_index: int
    source: str = "classifier"

    @property
    def confidence(self) -> float:
        return float(self.voted[self.class_index])


def crop_probabilities(inputs: Sequence[ModelInput], net: NonLocalNet, batch_size: int = 64) -> np.ndarray:
    """Softmax scores, one row per input."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = torch.from_numpy(np.stack([m.tensor for m in inputs[i:i + batch_size]])).to(dtype)
            logits = net(x).double()
            out.append(torch.softmax(logits, dim=1).numpy())
    net.train(was_training)
    return np.concatenate(out)


def crop_features(inputs: Sequence[ModelInput], net: NonLocalNet, batch_size: int = 64) -> np.ndarray:
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = torch.from_numpy(np.stack([m.tensor for m in inputs[i:i + batch_size]])).to(dtype)
            out.append(net.features(x).double().numpy())
    net.train(was_training)
    return np.concatenate(out)


def predict_from_inputs(inputs: Sequence[ModelInput], net: NonLocalNet) -> Prediction:
    assert inputs, "ASAC padding guarantees at least one crop"
    probs = crop_probabilities(inputs, net)
    voted = vote(probs)
    return Prediction([(m.spec, p) for m, p in zip(inputs, probs)], voted, argmax_lowest(voted))


def predict_sample(
    sample: VolumeSample,
    net: NonLocalNet,
    asac: Optional[AsacConfig] = None,
    preprocess: Optional[PreprocessConfig] = None,
    sample_id: str = "",
) -> Prediction:
    """Preprocess (once), crop at every scale and position, score each crop, vote."""
    asac = asac or AsacConfig()
    sample = preprocess_sample(sample, preprocess)
    return predict_from_inputs(model_inputs(sample, asac, sample_id), net)


@dataclass
class ReportRow:
    original_label: str
    assigned_label: str
    source: str  # early_match | classifier | error
    confidence: float
    voted: Optional[np.ndarray] = None
    error: str = ""


@dataclass
class StandardizationReport:
    rows: list[ReportRow]
    classifier_calls: int

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.original_label, r.assigned_label, r.source, f"{r.confidence:.6f}"])
        scores = [None if r.voted is None else [float(v) for v in r.voted] for r in self.rows]
        path.with_suffix(".scores.json").write_text(json.dumps({"voted": scores}))


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise ValueError(f"unexpected report header {reader.fieldnames}")
        return list(reader)


def standardize_structure_set(
    samples: Sequence[VolumeSample],
    dictionary: StandardizationDictionary,
    predictor: Callable[[VolumeSample], Prediction],
    vocabulary: Sequence[str],
    threshold: float = 0.5,
    workers: int = 1,
) -> StandardizationReport:
    """Relabel every structure; early-match hits never reach the classifier.

    Predictions whose top voted probability is below ``threshold`` are reported
    as ``unrecognized``. Failures are recorded per row, never raised.
    """
    rows: list[Optional[ReportRow]] = [None] * len(samples)
    pending = []
    for i, s in enumerate(samples):
        hit = early_match(s.original_label, dictionary)
        if hit is not None:
            rows[i] = ReportRow(s.original_label, hit, "early_match", 1.0)
        else:
            pending.append(i)

    def run(i):
        s = samples[i]
        try:
            pred = predictor(s)
        except Exception as exc:  # recorded in the report
            logger.exception("prediction failed for %r", s.original_label)
            return ReportRow(s.original_label, "", "error", 0.0, error=str(exc))
        conf = pred.confidence
        label = vocabulary[pred.class_index] if conf >= threshold else UNRECOGNIZED
        return ReportRow(s.original_label, label, "classifier", conf, voted=pred.voted)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, pending))
    else:
        results = [run(i) for i in pending]
    for i, r in zip(pending, results):
        rows[i] = r
    return StandardizationReport(rows, len(pending))
