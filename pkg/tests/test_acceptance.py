"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import time
import warnings

import numpy as np
import pytest
import torch

from oracles import (
    backbone_gradient_check, counting_oracle, f_tail_quadrature, nonlocal_double_loop, pairwise_auc,
    random_nonlocal_params, synthetic_structure_set,
)
from structnorm.asac import DEFAULT_SCALES, axial_starts
from structnorm.dataset import LabelVocabulary, VolumeSample
from structnorm.evaluation import auc_one_vs_rest, classification_metrics, one_way_anova
from structnorm.experiments import run_atlas_sweep, run_phantom_comparison, run_transfer
from structnorm.inference import (
    Prediction, StandardizationDictionary, argmax_lowest, standardize_structure_set, vote,
)
from structnorm.network import NetworkConfig, init_parameters, nonlocal_block_forward
from structnorm.preprocess import normalize_hu, normalize_voxels


def test_01_nonlocal_oracle_equivalence(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(20):
        c = int(rng.choice([2, 4]))
        while True:
            d, h, w = (int(v) for v in rng.integers(1, 4, 3))
            if d * h * w <= 27:
                break
        x = torch.from_numpy(rng.normal(size=(1, c, d, h, w)))
        params = random_nonlocal_params(c, seed=k)
        got = nonlocal_block_forward(x, params)[0].numpy()
        ref = nonlocal_double_loop(x[0], params)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    elapsed = time.time() - t0
    ok = worst < 1e-6 and elapsed < 10
    criterion(1, ok, f"max rel err {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_02_gradient_check(criterion):
    t0 = time.time()
    err = backbone_gradient_check(init_parameters(NetworkConfig.toy(4), 11), n_params=20, seed=11)
    elapsed = time.time() - t0
    ok = err < 1e-4 and elapsed < 120
    criterion(2, ok, f"max rel err {err:.2e} over 20 parameters, {elapsed:.1f} s")
    assert ok


def test_03_identity_initialization(criterion):
    net = init_parameters(NetworkConfig.toy(8), seed=0)
    g = torch.Generator().manual_seed(0)
    blocks = net.nonlocal_blocks()
    exact = []
    for b in blocks:
        x = torch.randn(2, b.sigma.out_channels, 3, 4, 4, generator=g)
        exact.append(torch.equal(b(x), x))
    ok = bool(blocks) and all(exact)
    criterion(3, ok, f"{sum(exact)}/{len(blocks)} blocks bit-identical to identity")
    assert ok


def test_04_metric_oracles(criterion):
    rng = np.random.default_rng(4)
    exact = auc_ok = True
    worst_auc = 0.0
    for i in range(200):
        n = int(rng.integers(5, 60))
        y = rng.integers(0, 5, n)
        # coarse scores force ties in half of the instances
        scores = rng.integers(0, 4, (n, 5)) / 4 if i % 2 else rng.random((n, 5))
        r = classification_metrics(y, scores, list("abcde"))
        pred = np.argmax(scores, axis=1)
        for c, (tp, fp, fn, tpr, ppv, f1) in enumerate(counting_oracle(y, pred, 5)):
            exact &= (r.tp[c], r.fp[c], r.fn[c]) == (tp, fp, fn)
            exact &= (r.tpr[c], r.ppv[c], r.f1[c]) == (tpr, ppv, f1)
            labels = y == c
            if labels.any() and (~labels).any():
                diff = abs(auc_one_vs_rest(labels, scores[:, c]) - pairwise_auc(labels, scores[:, c]))
                worst_auc = max(worst_auc, diff)
    auc_ok = worst_auc <= 1e-12
    ok = bool(exact) and auc_ok
    criterion(4, ok, f"counts/ratios exact={bool(exact)}, max AUC diff {worst_auc:.1e}")
    assert ok


def test_05_asac_coverage(criterion):
    failures = []
    for n, _ in DEFAULT_SCALES:
        for d in range(12, 65):
            starts = axial_starts(d, n)
            covered = np.zeros(max(d, n), bool)
            for z in starts:
                covered[z:z + n] = True
            if not covered[:d].all() or max(d - n, 0) not in starts:
                failures.append((d, n))
    ok = not failures
    criterion(5, ok, f"{5 * 53 - len(failures)}/{5 * 53} (D, scale) pairs covered with terminal start")
    assert ok


def test_06_voting_invariance(criterion):
    rng = np.random.default_rng(6)
    same = 0
    for _ in range(50):
        n = int(rng.integers(1, 30))
        logits = rng.normal(0, 4, (n, 8))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        v = vote(p)
        perm = vote(p[rng.permutation(n)])
        doubled = vote(np.concatenate([p, p[rng.permutation(n)]]))
        same += v.tobytes() == perm.tobytes() == doubled.tobytes() and argmax_lowest(v) == argmax_lowest(doubled)
    ok = same == 50
    criterion(6, ok, f"{same}/50 predictions bit-identical under permutation and doubling")
    assert ok


def test_07_preprocessing_constants(criterion):
    ends = normalize_hu(np.array([-1000.0, 2500.0]))
    ends_ok = ends[0] == 0.0 and ends[1] == 1.0
    rng = np.random.default_rng(7)
    ratio_ok = True
    for _ in range(30):
        shape = tuple(int(v) for v in rng.integers(4, 20, 3))
        sp_in = (float(rng.uniform(0.5, 3.0)), *(float(rng.uniform(0.5, 1.5)),) * 2)
        out = normalize_voxels(VolumeSample(np.zeros(shape), np.ones(shape), sp_in))
        ratio = np.array(out.spacing) / out.spacing[1]
        ratio_ok &= np.allclose(ratio, [0.77, 1, 1], rtol=1e-12)
        for n_in, s_in, n_out, s_out in zip(shape, sp_in, out.shape, out.spacing):
            ratio_ok &= abs((n_in - 1) * s_in - (n_out - 1) * s_out) <= s_out / 2 + 1e-9
    ok = ends_ok and bool(ratio_ok)
    criterion(7, ok, f"HU endpoints -> {ends.tolist()}, spacing ratio 0.77:1:1 within rounding={bool(ratio_ok)}")
    assert ok


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t0 = time.time()
        result, nets = run_phantom_comparison(tmp_path_factory.mktemp("cmp"), seeds=(0, 1, 2), keep_networks=True)
    return result, nets, time.time() - t0


def test_08_phantom_crop_and_vote_beats_global_crop(comparison, criterion):
    result, _, elapsed = comparison
    s = result.summary()
    gap = s["asac_nonlocal"]["minority_f1"] - s["global"]["minority_f1"]
    tpr_ok = s["asac_nonlocal"]["macro_tpr"] >= s["global"]["macro_tpr"]
    ok = gap >= 0.10 and tpr_ok
    criterion(8, ok, f"minority F1 global {s['global']['minority_f1']:.3f} vs ASAC+NL "
                     f"{s['asac_nonlocal']['minority_f1']:.3f} (gap {100 * gap:+.1f} pp); macro TPR "
                     f"{s['global']['macro_tpr']:.3f} vs {s['asac_nonlocal']['macro_tpr']:.3f}; {elapsed / 60:.1f} min")
    assert ok


def test_09_early_match_call_count(criterion):
    vocab = LabelVocabulary.default().names
    labels = synthetic_structure_set(vocab, n_canonical=21)
    calls = []

    def predictor(sample):
        calls.append(sample.original_label)
        v = np.full(len(vocab), 0.01)
        v[0] = 1 - 0.01 * (len(vocab) - 1)
        return Prediction([], v, argmax_lowest(v))

    samples = [VolumeSample(np.zeros((1, 1, 1)), np.ones((1, 1, 1)), (1, 1, 1), lab) for lab in labels]
    rep = standardize_structure_set(samples, StandardizationDictionary(list(vocab)), predictor, vocab)
    ok = len(labels) == 38 and len(calls) == 17 and rep.classifier_calls == 17 and len(rep.rows) == 38
    criterion(9, ok, f"{len(labels)} structures -> {len(calls)} classifier calls")
    assert ok


def test_10_atlas_baseline(criterion):
    levels = (0.0, 0.5, 1.0, 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        acc = run_atlas_sweep(levels)
    values = [acc[level] for level in levels]
    ok = values[0] == 1.0 and all(b < a for a, b in zip(values, values[1:]))
    criterion(10, ok, "accuracy by noise " + ", ".join(f"{k}: {v:.3f}" for k, v in acc.items()))
    assert ok


def test_11_anova(criterion):
    degenerate = one_way_anova([0.5, 0.5, 0.5], [0.5, 0.5]).p
    r = one_way_anova([2, 4, 6], [3, 5, 7])
    q = f_tail_quadrature(0.375, 1, 4)
    ok = degenerate == 1.0 and r.f == 0.375 and abs(r.p - q) < 1e-6
    criterion(11, ok, f"degenerate p={degenerate}, F={r.f}, p={r.p:.10f} vs quadrature {q:.10f}")
    assert ok


def test_12_finetune_transfer(comparison, criterion, tmp_path):
    _, nets, _ = comparison
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = run_transfer(nets[("asac_nonlocal", 0)], tmp_path)
    worst = min(r.per_class_tpr.values())
    lr_ok = set(r.history_lr) == {1e-5} and len(r.history_lr) <= 20
    ok = r.frozen_identical and worst >= 0.8 and lr_ok
    criterion(12, ok, f"frozen tensors identical={r.frozen_identical}, per-class TPR "
                      + ", ".join(f"{k} {v:.2f}" for k, v in r.per_class_tpr.items()))
    assert ok
