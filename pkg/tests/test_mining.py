import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_samples

from finmine import dsp, mining
from finmine.errors import (
    ClipTooShort,
    DataError,
    SingleCluster,
    TooFewPoints,
    UnresolvedProvenance,
)
from scenarios import blobs, trained_detector

RATE = 44100
SPAN = 127 * 220 + 441  # samples under one 128-frame window


def test_blobs_recovered_exactly():
    X, labels = blobs(sigma=0.01)
    cm = mining.kmeans(mining.EmbeddingSet(X), k=3, seed=0)
    assert mining.adjusted_rand_index(cm.assignments, labels) == 1.0
    assert np.all(np.diff(cm.inertia_history) <= 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ari_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, 60), rng.integers(0, 5, 60)
    assert mining.adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_kmeans_degenerate_sizes():
    X = np.random.default_rng(0).normal(size=(7, 2))
    cm = mining.kmeans(X, k=7, seed=1)
    assert cm.inertia == 0.0
    assert sorted(cm.assignments.tolist()) == list(range(7))
    with pytest.raises(TooFewPoints):
        mining.kmeans(X, k=8)


def test_kmeans_deterministic_and_monotone():
    X = np.random.default_rng(2).normal(size=(400, 5))
    a = mining.kmeans(X, k=20, seed=4)
    b = mining.kmeans(X, k=20, seed=4)
    assert np.array_equal(a.assignments, b.assignments) and a.inertia == b.inertia
    assert all(y <= x * (1 + 1e-12) for x, y in zip(a.inertia_history, a.inertia_history[1:]))


def test_kmeans_pp_always_seeds_the_outlier():
    # after any first pick the outlier holds all remaining D^2 mass or was picked first
    X = np.array([[0.0, 0.0], [0.0, 0.0], [100.0, 0.0]])
    for s in range(50):
        C = mining.kmeans_pp_init(X, 2, np.random.default_rng(s))
        assert any((c == X[2]).all() for c in C)


def test_silhouette_examples():
    X = np.array([[0.0, 0], [0.1, 0], [10, 0], [10.1, 0]])
    assert np.all(mining.silhouette(X, [0, 0, 1, 1]) > 0.97)
    s = mining.silhouette(np.array([[0.0], [2.0], [4.0], [6.0]]), [0, 0, 1, 1])
    # point at 2: a = 2, b = mean(2, 4) = 3
    assert s[1] == pytest.approx(1 / 3)
    with pytest.raises(SingleCluster):
        mining.silhouette(X, [0, 0, 0, 0])


def test_silhouette_zero_when_a_equals_b():
    X = np.array([[0.0], [2.0], [4.0]])
    s = mining.silhouette(X, [0, 0, 1])
    # point at 2: a = 2 (to 0), b = 2 (to 4)
    assert s[1] == 0.0
    assert s[2] == 0.0  # singleton


@pytest.mark.parametrize("seed", range(5))
def test_silhouette_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 4))
    labels = rng.integers(0, 6, 150)
    ours = mining.silhouette(X, labels, chunk=37)
    np.testing.assert_allclose(ours, silhouette_samples(X, labels), atol=1e-10)


def test_median_filter_examples():
    s = np.array([0.1, 0.2, 0.3])
    keep, _ = mining.filter_by_median_silhouette(None, None, s)
    assert keep.tolist() == [1, 2]
    keep, _ = mining.filter_by_median_silhouette(None, None, np.full(6, 0.4))
    assert keep.tolist() == list(range(6))
    keep, _ = mining.filter_by_median_silhouette(None, None, np.array([0.1, 0.9]))
    assert keep.tolist() == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=60))
def test_median_filter_keeps_at_least_half(values):
    keep, _ = mining.filter_by_median_silhouette(None, None, np.array(values))
    assert int(np.ceil(len(values) / 2)) <= len(keep) <= len(values)


def _layout_separation(Y, labels):
    D = np.sqrt(mining.sq_distances(Y, Y))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(Y), dtype=bool)
    return D[same & off].mean(), D[~same].mean()


def test_tsne_two_blobs():
    X, labels = blobs(n_per=40, centers=((0,) * 5, (20,) + (0,) * 4), sigma=1.0, dim=5)
    lay = mining.tsne(X, perplexity=10, iters=400, seed=0)
    assert lay.kl < lay.initial_kl and lay.kl >= 0
    intra, inter = _layout_separation(lay.coords, labels)
    assert inter > intra
    assert np.all(np.isfinite(lay.coords))


def test_tsne_duplicates_coincide():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 6))
    X[59] = X[3]
    Y = mining.tsne(X, perplexity=10, seed=2).coords
    D = np.sqrt(mining.sq_distances(Y, Y))
    pairs = D[np.triu_indices(60, 1)]
    assert D[3, 59] < np.percentile(pairs, 5)


def test_tsne_affinity_rows_are_distributions():
    X = np.random.default_rng(0).normal(size=(50, 3))
    P = mining.conditional_affinities(mining.sq_distances(X, X), 10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(np.diag(P) == 0)
    rows = np.where(P > 0, P, 1.0)
    entropy = -(P * np.log(rows)).sum(axis=1)
    np.testing.assert_allclose(entropy, np.log(10.0), atol=1e-4)


def test_tsne_too_few_points():
    with pytest.raises(TooFewPoints):
        mining.tsne(np.zeros((2, 3)))


def test_tsne_deterministic():
    X = np.random.default_rng(3).normal(size=(30, 4))
    a = mining.tsne(X, perplexity=5, iters=300, seed=7)
    b = mining.tsne(X, perplexity=5, iters=300, seed=7)
    assert a.coords.tobytes() == b.coords.tobytes()


# detection sweeps


class ConstantDetector:
    def __init__(self, p):
        self.p = p

    def predict_proba(self, X):
        return np.full((len(X), 1), self.p)


def test_threshold_zero_gives_one_spanning_region():
    clip = dsp.AudioClip(np.random.default_rng(0).normal(0, 0.1, RATE * 2), RATE)
    regions = mining.detect_regions(clip, ConstantDetector(0.2), threshold=0.0)
    n_frames = (2 * RATE - 441) // 220 + 1
    last_start = (n_frames - 128) // 64 * 64
    assert [(r.start_frame, r.end_frame) for r in regions] == [(0, last_start + 128)]
    assert mining.detect_regions(clip, ConstantDetector(0.2), threshold=0.5) == []
    with pytest.raises(ClipTooShort):
        mining.detect_regions(dsp.AudioClip(np.zeros(1000), RATE), ConstantDetector(1.0))


def _iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


def test_trained_detector_finds_the_whistle():
    clf = trained_detector()
    clip, truth = dsp.synthesize_recording(0, [("noise", 2.0), ("whistle", 1.0), ("noise", 2.0)])
    regions = mining.detect_regions(clip, clf)
    assert len(regions) == 1
    whistle = (truth[1][1] / 220, truth[1][2] / 220)
    assert _iou((regions[0].start_frame, regions[0].end_frame), whistle) > 0.5
    quiet, _ = dsp.synthesize_recording(100, [("noise", 5.0)])
    assert mining.detect_regions(quiet, clf) == []


# cluster audio export


def _clips():
    rng = np.random.default_rng(0)
    return {"a.wav": dsp.AudioClip(rng.uniform(-0.5, 0.5, RATE * 2), RATE),
            "b.wav": dsp.AudioClip(rng.uniform(-0.5, 0.5, RATE * 2), RATE)}


def test_cluster_wav_duration(tmp_path):
    clips = _clips()
    members = [("a.wav", 0), ("a.wav", 64), ("b.wav", 10)]
    n = mining.export_cluster_wav(members, clips, tmp_path / "c.wav", gap_seconds=0.25)
    expected = 3 * SPAN + 2 * round(0.25 * RATE)
    assert abs(n - expected) <= 4  # one sample per segment boundary
    back = dsp.load_audio(tmp_path / "c.wav")
    assert back.samples.size == n
    # payload under the second member is the raw audio at its frame offset
    start = SPAN + round(0.25 * RATE)
    np.testing.assert_allclose(back.samples[start:start + SPAN],
                               clips["a.wav"].samples[64 * 220:64 * 220 + SPAN], atol=2 / 32768)


def test_empty_cluster_wav_is_valid(tmp_path):
    assert mining.export_cluster_wav([], _clips(), tmp_path / "e.wav") == 0
    raw = (tmp_path / "e.wav").read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE" and len(raw) == 44


def test_unresolved_provenance(tmp_path):
    with pytest.raises(UnresolvedProvenance):
        mining.export_cluster_wav([("missing.wav", 0)], _clips(), tmp_path / "x.wav")
    with pytest.raises(UnresolvedProvenance):
        mining.export_cluster_wav([("a.wav", 10**6)], _clips(), tmp_path / "x.wav")


# rendering


def _svg(path):
    text = path.read_text()
    return text.count("<circle"), set(re.findall(r'<circle [^>]*fill="(#[0-9a-f]{6})"', text))


def test_svg_counts(tmp_path):
    Y = np.random.default_rng(0).normal(size=(10, 2))
    mining.render_scatter_svg(Y, [0] * 5 + [1] * 5, tmp_path / "a.svg")
    circles, colors = _svg(tmp_path / "a.svg")
    assert circles == 10 and len(colors) == 2
    Y = np.random.default_rng(1).normal(size=(100, 2))
    assert mining.render_scatter_svg(Y, np.arange(100) % 7, tmp_path / "b.svg", sample_fraction=0.25) == 25
    assert _svg(tmp_path / "b.svg")[0] == 25


def test_svg_rerender_identical(tmp_path):
    Y = np.random.default_rng(2).normal(size=(50, 2))
    for name in ("a.svg", "b.svg"):
        mining.render_scatter_svg(Y, np.arange(50) % 3, tmp_path / name, sample_fraction=0.5, seed=9)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_palette_is_distinct():
    assert len(set(mining.PALETTE)) == 100


# delimited formats


def test_csv_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    emb = mining.EmbeddingSet(rng.normal(size=(5, 3)), [("x.wav", 64 * i) for i in range(5)])
    mining.write_embeddings_csv(tmp_path / "e.csv", emb)
    back = mining.read_embeddings_csv(tmp_path / "e.csv")
    assert back.provenance == emb.provenance and back.vectors.tobytes() == emb.vectors.tobytes()
    s = rng.uniform(-1, 1, 5)
    mining.write_assignments_csv(tmp_path / "a.csv", emb, [0, 1, 0, 2, 1], s)
    rows = mining.read_assignments_csv(tmp_path / "a.csv")
    assert [r[2] for r in rows] == [0, 1, 0, 2, 1] and [r[3] for r in rows] == s.tolist()
    mining.write_layout_csv(tmp_path / "l.csv", rng.normal(size=(5, 2)), [0, 1, 0, 2, 1])
    coords, a = mining.read_layout_csv(tmp_path / "l.csv")
    assert coords.shape == (5, 2) and a.tolist() == [0, 1, 0, 2, 1]


def test_embedding_set_rejects_duplicates():
    with pytest.raises(DataError):
        mining.EmbeddingSet(np.zeros((2, 2)), [("a", 0), ("a", 0)])
