import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structnorm.asac import (
    DEFAULT_SCALES, AffineParams, AsacConfig, AugmentConfig, CropCubeSpec, ModelInput,
    adaptive_preresize, apply_inplane_affine, augment, axial_starts, balanced_sampling_weights,
    center_crop, desk_asac_config, enumerate_crops, extract_and_resize, mask_bbox, model_inputs,
)
from structnorm.dataset import (
    DatasetManifest, LabelVocabulary, ManifestEntry, VolumeSample, default_phantom_config,
    render_phantom_sample, sample_seed,
)
from structnorm.preprocess import preprocess_sample


def _sample(shape, mask_box=None, ct=0.5, spacing=(0.77, 1, 1)):
    mask = np.zeros(shape, np.uint8)
    if mask_box is None:
        mask[tuple(s // 2 for s in shape)] = 1
    else:
        mask[mask_box] = 1
    return VolumeSample(np.full(shape, ct, np.float32), mask, spacing)


def test_single_fit_one_crop():
    assert axial_starts(12, 12) == [0]


def test_depth_36_scale_12():
    assert axial_starts(36, 12) == [0, 8, 16, 24]


def test_depth_28_scale_12_dedups_terminal_start():
    assert axial_starts(28, 12) == [0, 8, 16]


def test_short_volume_gets_single_crop():
    assert axial_starts(5, 12) == [0]


@pytest.mark.parametrize("n", [n for n, _ in DEFAULT_SCALES])
def test_coverage_exhaustive(n):
    for d in range(12, 65):
        starts = axial_starts(d, n)
        covered = np.zeros(max(d, n), bool)
        for z in starts:
            assert z >= 0 and (z + n <= d or d < n)
            covered[z:z + n] = True
        assert covered[:d].all()
        assert starts[-1] == max(d - n, 0)


def test_crop_count_is_sum_over_scales():
    s = _sample((40, 8, 8))
    specs = enumerate_crops(s)
    assert len(specs) == sum(len(axial_starts(40, n)) for n, _ in DEFAULT_SCALES)
    assert {sp.scale_index for sp in specs} == set(range(5))


def test_preresize_identity_for_small_organ():
    s = _sample((4, 200, 200), (slice(1, 3), slice(40, 140), slice(30, 150)))
    out, f = adaptive_preresize(s)
    assert f == 1.0 and out is s


def test_preresize_degenerate_organ_is_identity():
    s = _sample((3, 20, 20))
    assert adaptive_preresize(s)[1] == 1.0


def test_preresize_oversized_organ():
    s = _sample((4, 100, 500), (slice(0, 4), slice(20, 80), slice(10, 490)))
    out, f = adaptive_preresize(s, 384)
    assert f == pytest.approx(0.8)
    box = mask_bbox(out.mask)
    assert box[2][1] - box[2][0] + 1 <= 384
    assert box[1][1] - box[1][0] + 1 <= 384


def test_extract_identity_when_window_matches_volume():
    rng = np.random.default_rng(0)
    shape = (12, 128, 128)
    mask = np.zeros(shape, np.uint8)
    mask[:, 63:65, 63:65] = 1  # centroid 63.5 -> window starts at 0
    s = VolumeSample(rng.random(shape, dtype=np.float32), mask, (0.77, 1, 1))
    inp = extract_and_resize(s, CropCubeSpec(0, 12, 128, 0))
    assert inp.tensor.shape == (2, 12, 128, 128)
    assert np.array_equal(inp.tensor[0], s.ct)
    assert np.array_equal(inp.tensor[1], mask)


def test_extract_constant_ct():
    s = _sample((30, 300, 300), (slice(10, 20), slice(100, 200), slice(100, 200)), ct=0.25)
    for spec in enumerate_crops(s)[:3]:
        inp = extract_and_resize(s, spec)
        assert np.all(inp.tensor[0] == np.float32(0.25))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 60), st.integers(1, 60), st.sampled_from(range(5)))
def test_extract_shape_always_exact(d, h, w, k):
    s = _sample((d, h, w))
    n, m = DEFAULT_SCALES[k]
    spec = CropCubeSpec(k, n, m, axial_starts(d, n)[-1])
    inp = extract_and_resize(s, spec, (12, 32, 32))
    assert inp.tensor.shape == (2, 12, 32, 32)
    assert set(np.unique(inp.tensor[1])) <= {0.0, 1.0}


def test_downscaled_crop_foreground_count():
    # a box of 12 x 64 x 64 voxels shrinks by 2 along each axis at scale (24, 256)
    s = _sample((24, 256, 256), (slice(6, 18), slice(96, 160), slice(96, 160)))
    inp = extract_and_resize(s, CropCubeSpec(2, 24, 256, 0))
    before = 12 * 64 * 64
    after = inp.tensor[1].sum()
    assert after == pytest.approx(before / 8, rel=0.15)


def test_identity_augment_is_central_crop():
    rng = np.random.default_rng(1)
    t = rng.random((2, 12, 128, 128)).astype(np.float32)
    t[1] = t[1] > 0.5
    cfg = AugmentConfig(max_translation=0, max_rotation=0, max_shear=0, scale_range=(1.0, 1.0))
    out = augment(ModelInput(t, "s", None), 3, cfg, (12, 96, 96))
    assert np.array_equal(out.tensor, t[:, :, 16:112, 16:112])


def test_augment_deterministic_per_seed():
    s = render_phantom_sample(default_phantom_config(), 2, sample_seed(0, 2, 0))
    inp = model_inputs(preprocess_sample(s), desk_asac_config())[0]
    a = augment(inp, 42, train_shape=(12, 36, 36))
    b = augment(inp, 42, train_shape=(12, 36, 36))
    assert a.tensor.shape == (2, 12, 36, 36)
    assert np.array_equal(a.tensor, b.tensor)
    assert set(np.unique(a.tensor[1])) <= {0.0, 1.0}


def test_translation_shifts_mask_centroid():
    t = np.zeros((2, 12, 64, 64), np.float32)
    t[1, 4:8, 20:30, 25:35] = 1
    out = apply_inplane_affine(t, AffineParams(translation=(3.0, 0.0)))
    before = np.array([i.mean() for i in np.nonzero(t[1])])
    after = np.array([i.mean() for i in np.nonzero(out[1])])
    np.testing.assert_allclose(after - before, [0, 3, 0], atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_augment_keeps_shape_and_binarity(seed):
    t = np.zeros((2, 12, 48, 48), np.float32)
    t[0] = 0.3
    t[1, 3:9, 18:30, 20:28] = 1
    out = augment(ModelInput(t, "", None), seed, train_shape=(12, 36, 36))
    assert out.tensor.shape == (2, 12, 36, 36)
    assert set(np.unique(out.tensor[1])) <= {0.0, 1.0}
    assert out.tensor[1].any()


def test_augment_falls_back_to_identity_when_mask_lost():
    t = np.zeros((2, 12, 48, 48), np.float32)
    t[1, 6, 0, 0] = 1  # corner voxel, outside the central crop whatever the transform
    out = augment(ModelInput(t, "", None), 0, train_shape=(12, 36, 36))
    assert np.array_equal(out.tensor, center_crop(t, (12, 36, 36)))


def _manifest(counts):
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(len(counts))))
    entries = [ManifestEntry(f"s{k}_{i}", k) for k, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(vocab, entries)


def test_inverse_frequency_weights():
    w = balanced_sampling_weights(_manifest([10, 90]))
    assert np.allclose(w[:10], 0.1) and np.allclose(w[10:], 1 / 90)
    labels = np.array([0] * 10 + [1] * 90)
    p = w / w.sum()
    assert p[labels == 0].sum() == pytest.approx(0.5)


def test_equal_counts_give_uniform_weights():
    w = balanced_sampling_weights(_manifest([7, 7, 7]))
    assert np.all(w == w[0])


def test_empty_class_is_an_error():
    with pytest.raises(ValueError, match="no entries"):
        balanced_sampling_weights(_manifest([3, 0, 2]))


def test_weighted_draws_are_uniform_over_classes():
    counts = [10, 90, 400, 3]
    w = balanced_sampling_weights(_manifest(counts))
    labels = np.repeat(np.arange(4), counts)
    draws = np.random.default_rng(0).choice(len(w), size=100_000, p=w / w.sum())
    freq = np.bincount(labels[draws], minlength=4)
    expected = 100_000 / 4
    sigma = np.sqrt(100_000 * 0.25 * 0.75)
    assert np.all(np.abs(freq - expected) <= 3 * sigma)


def test_model_inputs_global_mode_single_crop():
    s = preprocess_sample(render_phantom_sample(default_phantom_config(), 0, sample_seed(0, 0, 0)))
    ins = model_inputs(s, desk_asac_config(mode="global"))
    assert len(ins) == 1 and ins[0].tensor.shape == (2, 12, 48, 48)


def test_model_inputs_skip_empty_crops():
    s = preprocess_sample(render_phantom_sample(default_phantom_config(), 6, sample_seed(0, 6, 0)))
    cfg = desk_asac_config()
    ins = model_inputs(s, cfg)
    assert all(x.tensor[1].any() for x in ins)
    every = model_inputs(s, desk_asac_config(skip_empty_crops=False))
    assert len(every) == len(enumerate_crops(s, cfg.scales)) >= len(ins)


def test_scale_subset():
    cfg = AsacConfig().select_scales([0, 4])
    assert cfg.scales == ((12, 128), (36, 384))
