import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msav import ftz
from msav.data import (
    Manifest,
    ManifestError,
    MixupConfig,
    SampleRecord,
    beta_sample,
    epoch_batches,
    load_features,
    min_pairwise_distance,
    mix,
    mixup,
    sample_batch,
    synth_dataset,
)
from tests.conftest import SMALL_SHAPES


def corpus_manifest(n_files, n_segments):
    records = [
        SampleRecord(f"f{f}-{k}", f"f{f}", f % 10, f"x/{f}-{k}.ftz", None, None)
        for f in range(n_files)
        for k in range(n_segments)
    ]
    return Manifest(records)


# -- manifest ------------------------------------------------------------------------


def test_manifest_validation():
    rec = SampleRecord("a", "p", 0, "a.ftz", None, None)
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest([rec, rec])
    with pytest.raises(ManifestError, match="label"):
        Manifest([SampleRecord("a", "p", 10, "a.ftz", None, None)])
    with pytest.raises(ManifestError, match="split"):
        Manifest([], split="test")


def test_manifest_json_round_trip(tmp_path, small_corpus):
    small_corpus.save(tmp_path / "m.json")
    again = Manifest.load(tmp_path / "m.json")
    assert again == small_corpus


def test_manifest_load_errors(tmp_path):
    with pytest.raises(ManifestError):
        Manifest.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"records": [{"id": 1}]}')
    with pytest.raises(ManifestError, match="malformed"):
        Manifest.load(tmp_path / "bad.json")


def test_load_features_checks_paths(tmp_path):
    m = Manifest([SampleRecord("a", "p", 0, "nope.ftz", "nope.ftz", "nope.ftz")], root=tmp_path)
    with pytest.raises(ManifestError, match="does not exist"):
        load_features(m)
    with pytest.raises(ManifestError, match="no records"):
        load_features(Manifest([]))


def test_load_features_stacks_in_order(small_corpus):
    feats = load_features(small_corpus)
    assert feats.spectral.shape == (24, *SMALL_SHAPES["spectral"])
    assert feats.pvisual.shape == (24, *SMALL_SHAPES["pvisual"])
    assert list(feats.labels) == [r.label for r in small_corpus.records]
    first = ftz.load(small_corpus.resolve(small_corpus.records[0].spectral_path))
    np.testing.assert_array_equal(feats.spectral[0], first)


# -- synthetic corpus --------------------------------------------------------------


def test_synth_counts_and_determinism(tmp_path):
    a = synth_dataset(tmp_path / "a", n_classes=4, files_per_class=2, segments_per_file=3, seed=5, shapes=SMALL_SHAPES,
                     anchor_scale=4.0)
    b = synth_dataset(tmp_path / "b", n_classes=4, files_per_class=2, segments_per_file=3, seed=5, shapes=SMALL_SHAPES,
                     anchor_scale=4.0)
    assert len(a) == 4 * 2 * 3
    assert len(a.parent_files) == 8
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_full_shapes_and_anchor_separation(tmp_path):
    m = synth_dataset(tmp_path, n_classes=10, files_per_class=2, segments_per_file=10, seed=0)
    assert len(m) == 200
    feats = load_features(m)
    assert feats.spectral.shape[1:] == (60, 128)
    assert feats.paudio.shape[1:] == (1, 128)
    assert feats.pvisual.shape[1:] == (30, 4096)
    # class means estimate the anchors; noise averages down over 20 samples
    for stream in (feats.spectral, feats.paudio, feats.pvisual):
        means = np.stack([stream[feats.labels == c].mean(axis=0) for c in range(10)])
        assert min_pairwise_distance(means) >= 5.0


def test_min_pairwise_distance_oracle():
    pts = np.array([[0.0, 0.0], [3.0, 4.0], [10.0, 0.0]])
    assert min_pairwise_distance(pts) == pytest.approx(5.0)


# -- sampler -------------------------------------------------------------------------


def test_sample_batch_distinct_parents_over_many_draws():
    m = corpus_manifest(10, 10)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        batch = sample_batch(m, 10, rng)
        assert len({r.parent_file for r in batch}) == 10


def test_sample_batch_too_few_files():
    with pytest.raises(ValueError, match="distinct files"):
        sample_batch(corpus_manifest(3, 5), 4, np.random.default_rng(0))


def test_sample_batch_is_roughly_uniform():
    m = corpus_manifest(5, 4)
    rng = np.random.default_rng(1)
    counts = Counter(r.id for _ in range(4000) for r in sample_batch(m, 2, rng))
    expected = 4000 * 2 / 20
    assert len(counts) == 20
    assert max(abs(c - expected) for c in counts.values()) < 5 * math.sqrt(expected)


def test_sampler_determinism():
    m = corpus_manifest(8, 3)
    a = [r.id for r in sample_batch(m, 5, np.random.default_rng(9))]
    b = [r.id for r in sample_batch(m, 5, np.random.default_rng(9))]
    assert a == b


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(2, 12), st.integers(0, 2**16))
def test_epoch_batches_cover_each_sample_once(n_files, n_segments, batch_size, seed):
    if batch_size > n_files:
        batch_size = n_files
    parents = [f"f{f}" for f in range(n_files) for _ in range(n_segments)]
    seen = []
    for batch in epoch_batches(parents, batch_size, np.random.default_rng(seed)):
        assert 2 <= len(batch) <= batch_size
        assert len({parents[i] for i in batch}) == len(batch)
        seen.extend(batch.tolist())
    assert len(seen) == len(set(seen))
    # the greedy rule keeps files level, so at most one lone sample is left for a final batch of one
    assert len(parents) - len(seen) <= 1


# -- mixup -----------------------------------------------------------------------------


def one_hot(labels, n=10):
    return np.eye(n, dtype=np.float32)[labels]


def test_mix_endpoints_and_midpoint():
    x = [np.arange(6.0).reshape(2, 3)]
    t = one_hot([0, 1])
    same_x, same_t = mix(x, t, 1.0, np.array([1, 0]))
    np.testing.assert_array_equal(same_x[0], x[0])
    np.testing.assert_array_equal(same_t, t)
    _, half = mix(x, t, 0.5, np.array([1, 0]))
    np.testing.assert_array_equal(half[:, :2], [[0.5, 0.5], [0.5, 0.5]])


def test_mixup_inactive_is_identity(rng):
    x = [rng.normal(size=(4, 3))]
    out, t, lam = mixup(x, one_hot([0, 1, 2, 3]), MixupConfig(activation_prob=0.0), rng)
    assert lam is None and out[0] is x[0]


def test_mixup_rejects_soft_targets(rng):
    with pytest.raises(ValueError, match="one-hot"):
        mixup([np.zeros((2, 3))], np.full((2, 10), 0.1), MixupConfig(), rng)


def test_mixup_convexity_over_random_draws():
    rng = np.random.default_rng(0)
    cfg = MixupConfig(activation_prob=1.0)
    for _ in range(200):
        x = rng.normal(size=(6, 4))
        t = one_hot(rng.integers(10, size=6))
        (mx,), mt, lam = mixup([x], t, cfg, rng)
        assert 0 < lam < 1
        np.testing.assert_allclose(mt.sum(axis=1), 1, atol=1e-6)
        assert np.all(mt >= 0)
        lo = np.minimum(x[:, None], x[None]).min(axis=1)
        hi = np.maximum(x[:, None], x[None]).max(axis=1)
        assert np.all((mx >= lo - 1e-12) & (mx <= hi + 1e-12))


def test_beta_uniform_case_passes_ks():
    rng = np.random.default_rng(0)
    n = 5000
    draws = np.sort([beta_sample(1.0, 1.0, rng) for _ in range(n)])
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(n) / n
    d = max(np.max(ecdf_hi - draws), np.max(draws - ecdf_lo))
    assert d < 1.628 / math.sqrt(n)  # alpha = 0.01 critical value


def test_beta_sample_rejects_bad_shape(rng):
    with pytest.raises(ValueError):
        beta_sample(0.0, 1.0, rng)


def test_mixup_config_validation():
    with pytest.raises(ValueError):
        MixupConfig(activation_prob=1.5)
    with pytest.raises(ValueError):
        MixupConfig(beta_shape=0)
