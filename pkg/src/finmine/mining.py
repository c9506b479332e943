"""Embedding-space analytics: clustering, silhouette filtering, t-SNE,
detection sweeps over long recordings, cluster audio export and SVG maps."""

from __future__ import annotations

import colorsys
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsp import (
    WINDOW_FRAMES,
    AudioClip,
    SpectrogramParams,
    extract_windows,
    n_frames_for,
    save_wav,
    stft,
    window_sample_span,
)
from .errors import (
    ClipTooShort,
    DataError,
    InvalidConfig,
    IOFailure,
    NonFiniteValue,
    NumericalError,
    SingleCluster,
    TooFewPoints,
    UnresolvedProvenance,
)

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # N x D
    provenance: list = field(default_factory=list)  # (source_id, start_frame) per row

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not self.provenance:
            self.provenance = [("", i) for i in range(len(self.vectors))]
        self.provenance = [(str(s), int(f)) for s, f in self.provenance]
        if len(self.provenance) != len(self.vectors):
            raise DataError("one provenance entry per embedding row is required")
        if len(set(self.provenance)) != len(self.provenance):
            raise DataError("duplicate provenance entries in embedding set")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFiniteValue("non-finite embedding")

    def __len__(self):
        return len(self.vectors)

    def subset(self, idx):
        idx = list(idx)
        return EmbeddingSet(self.vectors[idx], [self.provenance[i] for i in idx])


def _matrix(emb) -> np.ndarray:
    return emb.vectors if isinstance(emb, EmbeddingSet) else np.atleast_2d(np.asarray(emb, dtype=np.float64))


def sq_distances(X, C):
    d = (X * X).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * X @ C.T
    return np.maximum(d, 0.0)


# k-means


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


def kmeans_pp_init(X, k, rng):
    """k-means++ seeding: first center uniform, then proportional to D^2."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, sq_distances(X, X[nxt:nxt + 1])[:, 0])
    return X[chosen].copy()


def _assign(X, C):
    d = sq_distances(X, C)
    a = np.argmin(d, axis=1)
    return a, d[np.arange(len(X)), a]


def kmeans(emb, k: int = 100, max_iters: int = 1024, seed: int = 0) -> ClusterModel:
    X = _matrix(emb)
    n = len(X)
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    if n < k:
        raise TooFewPoints(f"{n} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, k, rng)
    a, d = _assign(X, C)
    history = [float(d.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(a, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, a, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        # empty clusters restart on the points worst served by their centroid
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-d, kind="stable")
            for j, p in zip(empty, far):
                C[j] = X[p]
        a_new, d = _assign(X, C)
        inertia = float(d.sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise NumericalError(f"k-means inertia rose from {history[-1]} to {inertia}")
        history.append(inertia)
        changed = np.any(a_new != a)
        a = a_new
        if not changed:
            break
    return ClusterModel(C, a, history[-1], it, history)


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index of two labelings."""
    a, b = np.unique(a, return_inverse=True)[1], np.unique(b, return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    comb = lambda x: x * (x - 1) / 2.0
    sum_ij = comb(table).sum()
    sa, sb = comb(table.sum(1)).sum(), comb(table.sum(0)).sum()
    expected = sa * sb / comb(len(a))
    top = (sa + sb) / 2.0
    if top == expected:
        return 1.0
    return float((sum_ij - expected) / (top - expected))


# silhouette


def silhouette(emb, assignments, chunk: int = 1024) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b); singleton clusters score 0."""
    X = _matrix(emb)
    labels, inv = np.unique(np.asarray(assignments), return_inverse=True)
    if len(X) != len(inv):
        raise DataError("one assignment per embedding row is required")
    if len(labels) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    k = len(labels)
    onehot = np.zeros((len(X), k))
    onehot[np.arange(len(X)), inv] = 1.0
    sizes = onehot.sum(0)
    s = np.zeros(len(X))
    for start in range(0, len(X), chunk):
        rows = slice(start, start + chunk)
        D = np.sqrt(sq_distances(X[rows], X))
        D[np.arange(D.shape[0]), np.arange(start, start + D.shape[0])] = 0.0
        sums = D @ onehot  # rows x k
        own = inv[rows]
        r = np.arange(len(own))
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[r, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes
        means[r, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        with np.errstate(invalid="ignore", divide="ignore"):
            si = np.where(denom > 0, (b - a) / denom, 0.0)
        si[own_size <= 1] = 0.0
        s[rows] = si
    return s


def median_threshold(s) -> float:
    """Lower-middle order statistic (index ceil(N/2) - 1 of the sorted values)."""
    s = np.sort(np.asarray(s))
    return float(s[int(np.ceil(len(s) / 2)) - 1])


def filter_by_median_silhouette(emb, assignments, coefficients=None):
    """Indices whose silhouette is at least the median, plus all coefficients."""
    s = silhouette(emb, assignments) if coefficients is None else np.asarray(coefficients)
    keep = np.flatnonzero(s >= median_threshold(s))
    return keep, s


# t-SNE


@dataclass
class TsneLayout:
    coords: np.ndarray
    kl: float
    n_iter: int
    initial_kl: float = float("nan")
    perplexity: float = 30.0


def conditional_affinities(D2, perplexity, tol=1e-4, max_tries=50):
    """Row-stochastic Gaussian affinities whose entropy matches log(perplexity).

    Bisection on each row's precision; diagonal entries are zero.
    """
    n = len(D2)
    P = np.zeros((n, n))
    target = np.log(perplexity)
    for i in range(n):
        d = np.delete(D2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, -np.inf, np.inf
        for _ in range(max_tries):
            p = np.exp(-d * beta)
            sp = p.sum()
            H = np.log(sp) + beta * (d * p).sum() / sp
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = beta / 2 if lo == -np.inf else (beta + lo) / 2
        P[i, np.arange(n) != i] = p / sp
    return P


def kl_divergence(P, Y):
    num = 1.0 / (1.0 + sq_distances(Y, Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    Pm = np.maximum(P, 1e-12)
    return float((P * np.log(Pm / Q)).sum())


def tsne(emb, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, momentum=(0.5, 0.8), momentum_switch: int = 250,
         ) -> TsneLayout:
    """Exact O(N^2) t-SNE to two dimensions."""
    X = _matrix(emb)
    n = len(X)
    if n < 3:
        raise TooFewPoints(f"t-SNE needs at least 3 points, got {n}")
    if n < 3 * perplexity:
        perplexity = max(2.0, (n - 1) / 3.0)
    P = conditional_affinities(sq_distances(X, X), perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    # short runs keep three quarters of their iterations unexaggerated
    exaggeration_iters = min(exaggeration_iters, iters // 4)
    momentum_switch = min(momentum_switch, iters // 4)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl0 = kl_divergence(P, Y)
    step = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iters):
        Pe = P * exaggeration if it < exaggeration_iters else P
        num = 1.0 / (1.0 + sq_distances(Y, Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (W.sum(1)[:, None] * Y - W @ Y)
        mom = momentum[0] if it < momentum_switch else momentum[1]
        same = (grad > 0) == (step > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        step = mom * step - learning_rate * gains * grad
        Y = Y + step
        Y = Y - Y.mean(0)
        if not np.all(np.isfinite(Y)):
            raise NonFiniteValue(f"t-SNE diverged at iteration {it}")
    kl = kl_divergence(P, Y)
    if kl > kl0:
        raise NumericalError(f"t-SNE increased KL from {kl0:.4g} to {kl:.4g}")
    return TsneLayout(Y, kl, iters, kl0, perplexity)


# detection sweep


@dataclass
class Region:
    start_frame: int
    end_frame: int  # exclusive
    score: float


def sweep(clip: AudioClip, detector, window_hop_frames: int = 64,
          params: SpectrogramParams = SpectrogramParams()):
    """Normalized windows across a clip and the detector's score for each."""
    params.validate(clip.sample_rate)
    W, H = params.window_length(clip.sample_rate), params.hop_length(clip.sample_rate)
    if n_frames_for(clip.samples.size, W, H) < WINDOW_FRAMES:
        raise ClipTooShort(f"{clip.source_id or 'clip'} is shorter than one {WINDOW_FRAMES}-frame window")
    windows = extract_windows(stft(clip, params), WINDOW_FRAMES, window_hop_frames)
    scores = detector.predict_proba(np.stack([w.values for w in windows]))[:, 0]
    return windows, scores


def detect_regions(clip: AudioClip, detector, window_hop_frames: int = 64, threshold: float = 0.5,
                   params: SpectrogramParams = SpectrogramParams()) -> list[Region]:
    """Maximal runs of above-threshold windows, scored by their best window."""
    windows, scores = sweep(clip, detector, window_hop_frames, params)
    starts = [w.start_frame for w in windows]
    out = []
    run = None
    for i, (s, p) in enumerate(zip(starts, scores)):
        if p >= threshold:
            if run is None:
                run = Region(s, s + WINDOW_FRAMES, float(p))
            else:
                run.end_frame = s + WINDOW_FRAMES
                run.score = max(run.score, float(p))
        elif run is not None:
            out.append(run)
            run = None
    if run is not None:
        out.append(run)
    # runs separated by a single rejected window can still touch when hop < window
    merged = []
    for r in out:
        if merged and r.start_frame < merged[-1].end_frame:
            merged[-1].end_frame = max(merged[-1].end_frame, r.end_frame)
            merged[-1].score = max(merged[-1].score, r.score)
        else:
            merged.append(r)
    return merged


# export


def export_cluster_wav(members: Sequence, clips: Mapping[str, AudioClip], path,
                       gap_seconds: float = 0.25, params: SpectrogramParams = SpectrogramParams(),
                       window_frames: int = WINDOW_FRAMES, sample_rate: int | None = None) -> int:
    """Concatenate the raw audio under each member window, separated by silence.

    Returns the number of samples written.
    """
    rates = {c.sample_rate for c in clips.values()}
    rate = sample_rate or (next(iter(rates)) if len(rates) == 1 else None)
    pieces = []
    for source_id, start_frame in members:
        clip = clips.get(source_id)
        if clip is None:
            raise UnresolvedProvenance(f"no loaded clip for {source_id!r}")
        if rate is None:
            rate = clip.sample_rate
        if clip.sample_rate != rate:
            raise InvalidConfig("cluster members come from clips with different sample rates")
        a, b = window_sample_span(start_frame, rate, params, window_frames)
        if b > clip.samples.size:
            raise UnresolvedProvenance(f"{source_id}@{start_frame} lies beyond the end of the clip")
        pieces.append(clip.samples[a:b])
    rate = rate or 44100
    gap = np.zeros(int(round(gap_seconds * rate)))
    out = []
    for i, p in enumerate(pieces):
        if i:
            out.append(gap)
        out.append(p)
    samples = np.concatenate(out) if out else np.zeros(0)
    save_wav(path, samples, rate)
    return samples.size


# rendering


def palette(n: int = 100) -> list[str]:
    """Fixed colors with hues stepped by the golden ratio conjugate."""
    out = []
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.9)
        out.append(f"#{int(round(r * 255)):02x}{int(round(g * 255)):02x}{int(round(b * 255)):02x}")
    return out


PALETTE = palette(100)


def sample_indices(n: int, fraction: float, seed: int = 0) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise InvalidConfig("sample_fraction must lie in (0, 1]")
    keep = int(round(fraction * n))
    if keep >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, keep, replace=False))


def render_scatter_svg(layout, assignments, path, sample_fraction: float = 1.0, seed: int = 0,
                       size: int = 800, radius: float = 3.0) -> int:
    """Write the 2-D map as an SVG with one circle per sampled point."""
    Y = layout.coords if isinstance(layout, TsneLayout) else np.asarray(layout, dtype=np.float64)
    assignments = np.asarray(assignments)
    if len(Y) != len(assignments):
        raise DataError("layout and assignments differ in length")
    idx = sample_indices(len(Y), sample_fraction, seed)
    margin = 10.0
    span = size - 2 * margin
    lo, hi = (Y.min(0), Y.max(0)) if len(Y) else (np.zeros(2), np.ones(2))
    rng_ = np.where(hi - lo > 0, hi - lo, 1.0)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    for i in idx:
        x, y = margin + (Y[i] - lo) / rng_ * span
        if hi[0] - lo[0] <= 0:
            x = size / 2
        if hi[1] - lo[1] <= 0:
            y = size / 2
        color = PALETTE[int(assignments[i]) % len(PALETTE)]
        lines.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{radius:g}" fill="{color}"/>')
    lines.append("</svg>")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc
    return len(idx)


# delimited formats


def write_embeddings_csv(path, emb: EmbeddingSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "start_frame"] + [f"e{j}" for j in range(emb.vectors.shape[1])])
        for (sid, sf), row in zip(emb.provenance, emb.vectors):
            w.writerow([sid, sf] + [repr(float(v)) for v in row])


def read_embeddings_csv(path) -> EmbeddingSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["source_id", "start_frame"]:
        raise DataError(f"{path}: not an embeddings CSV")
    body = rows[1:]
    vecs = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), -1)
    return EmbeddingSet(vecs, [(r[0], int(r[1])) for r in body])


def write_assignments_csv(path, emb: EmbeddingSet, assignments, coefficients):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "start_frame", "cluster", "silhouette"])
        for (sid, sf), c, s in zip(emb.provenance, assignments, coefficients):
            w.writerow([sid, sf, int(c), repr(float(s))])


def read_assignments_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["source_id"], int(r["start_frame"]), int(r["cluster"]), float(r["silhouette"]))
            for r in rows]


def write_layout_csv(path, coords, assignments):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "cluster"])
        for (x, y), c in zip(coords, assignments):
            w.writerow([repr(float(x)), repr(float(y)), int(c)])


def read_layout_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    return coords, np.array([int(r["cluster"]) for r in rows], dtype=np.int64)
