"""Frame-level pseudo-label discovery with k-means.

The first refinement iteration clusters MFCC frames; later iterations
cluster a middle transformer layer of the previous model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import mfcc

DEFAULT_K = 32


@dataclass
class Codebook:
    centroids: np.ndarray
    source: str = "mfcc"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a (K, D) matrix")

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def feature_dim(self):
        return self.centroids.shape[1]

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.std
        return x


def model_layer_source(layer, iteration):
    return f"model_layer({layer},{iteration})"


def _sq_dists(x, c, chunk=4096):
    out = np.empty((x.shape[0], c.shape[0]))
    for i in range(0, x.shape[0], chunk):
        diff = x[i : i + chunk, None, :] - c[None, :, :]
        out[i : i + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features, k=DEFAULT_K, iters=50, seed=0, source="mfcc", tol=0.0):
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded with the point farthest from its centroid.
    The per-iteration inertia is kept in ``Codebook.inertia_history`` and is
    non-increasing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an (N, D) matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history = []
    labels = None
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        point_d2 = d2[np.arange(len(x)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centers[j] = x[far]
                point_d2[far] = 0.0
                labels[far] = j
        if len(history) > 1 and history[-2] - history[-1] <= tol * history[-2] and tol > 0:
            break
    d2 = _sq_dists(x, centers)
    history.append(float(d2.min(axis=1).sum()))
    return Codebook(centers, source=source, inertia_history=history)


def inertia(cb, features):
    x = cb.normalize(features)
    return float(_sq_dists(x, cb.centroids).min(axis=1).sum())


def assign(cb, frames):
    """Nearest-centroid ids; ties go to the lowest centroid index."""
    x = frames.frames if hasattr(frames, "frames") else np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.feature_dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match codebook dim {cb.feature_dim}")
    return _sq_dists(cb.normalize(x), cb.centroids).argmin(axis=1)


def fit_normalized(features, k=DEFAULT_K, iters=50, seed=0, source="mfcc"):
    """z-normalise per dimension, then cluster; the codebook remembers the
    statistics so ``assign`` accepts raw features."""
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    cb = kmeans_fit((x - mean) / std, k=k, iters=iters, seed=seed, source=source)
    cb.mean, cb.std = mean, std
    return cb


def utterance_features(iteration, utterances, encoder=None, layer=None, visual_mode="real"):
    """Per-utterance frame features used for clustering at ``iteration``."""
    if iteration == 1:
        return [mfcc(u.audio).frames for u in utterances]
    out = []
    for u in utterances:
        a = mfcc(u.audio).frames
        t = min(len(a), len(u.visual))
        feats = encoder.layer_outputs(a[None, :t], u.visual.frames[None, :t], visual_mode)
        out.append(feats[layer - 1, 0])
    return out


def make_iteration_targets(iteration, utterances, encoder=None, layer=None, k=DEFAULT_K, iters=50, seed=0,
                           max_fit_frames=20000):
    """Cluster targets for a refinement iteration.

    Returns ``(targets, codebook)`` where ``targets`` maps utterance id to one
    cluster id per 25 Hz frame. Iteration 1 clusters MFCCs; iteration >= 2
    clusters layer ``layer`` (1-based, default ceil(L/2)) of ``encoder``.
    """
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    if iteration >= 2:
        if encoder is None:
            raise ValueError(f"iteration {iteration} needs the previous iteration's encoder")
        layer = layer or -(-encoder.config.n_layers // 2)
        if not 1 <= layer <= encoder.config.n_layers:
            raise ValueError(f"layer {layer} outside 1..{encoder.config.n_layers}")
        source = model_layer_source(layer, iteration)
    else:
        source = "mfcc"
    feats = utterance_features(iteration, utterances, encoder, layer)
    stacked = np.concatenate(feats)
    if len(stacked) > max_fit_frames:
        idx = np.random.default_rng(seed).choice(len(stacked), size=max_fit_frames, replace=False)
        fit_on = stacked[np.sort(idx)]
    else:
        fit_on = stacked
    cb = fit_normalized(fit_on, k=k, iters=iters, seed=seed, source=source)
    targets = {u.utt_id: assign(cb, f) for u, f in zip(utterances, feats)}
    return targets, cb


def mutual_information(a, b):
    """Mutual information (nats) between two discrete label sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
