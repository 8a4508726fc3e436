"""scikit-learn style wrappers around the pipeline stages.

Each wrapper keeps its constructor arguments untouched (so ``get_params`` /
``set_params`` / ``clone`` work) and stores learned state in trailing
underscore attributes.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_labels, check_utterances, check_waveforms
from .dsp import MfccConfig, Waveform, mfcc
from .finetune import FinetuneConfig, finetune
from .pretrain import PretrainConfig, pretrain
from .units import DEFAULT_K, assign, fit_normalized, inertia


class MfccTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to 25 Hz MFCC frames. Stateless; ``fit`` is a no-op."""

    def __init__(self, window_ms=25.0, hop_ms=40.0, fft_size=256, mel_bins=23, coeffs=13):
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.fft_size = fft_size
        self.mel_bins = mel_bins
        self.coeffs = coeffs

    def _config(self):
        return MfccConfig(self.window_ms, self.hop_ms, self.fft_size, self.mel_bins, self.coeffs)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        """List of ``(frames, coeffs)`` arrays, one per waveform. A 2-D
        batch of equal-length signals gives a 3-D array instead."""
        cfg = self._config()
        feats = [mfcc(Waveform(x), cfg).frames for x in check_waveforms(X)]
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return np.stack(feats)
        return feats


class UnitDiscovery(ClusterMixin, BaseEstimator):
    """k-means over z-normalised frame features (k-means++ seeding)."""

    def __init__(self, n_clusters=DEFAULT_K, max_iter=50, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_frames(X)
        if self.n_clusters > len(X):
            raise ValueError(f"n_clusters={self.n_clusters} exceeds the {len(X)} frames")
        self.codebook_ = fit_normalized(X, k=self.n_clusters, iters=self.max_iter, seed=self.random_state)
        self.cluster_centers_ = self.codebook_.centroids
        self.n_features_in_ = X.shape[1]
        self.labels_ = assign(self.codebook_, X)
        self.inertia_ = inertia(self.codebook_, X)
        return self

    def predict(self, X):
        check_is_fitted(self, "codebook_")
        return assign(self.codebook_, check_frames(X, self.n_features_in_))

    def score(self, X, y=None):
        """Negative inertia in normalised space, as in ``KMeans.score``."""
        check_is_fitted(self, "codebook_")
        return -inertia(self.codebook_, check_frames(X, self.n_features_in_))


class MaskedPretrainer(TransformerMixin, BaseEstimator):
    """Masked cluster-prediction pretraining on unlabelled utterances.

    ``transform`` mean-pools one encoder layer per utterance.
    """

    def __init__(self, steps=2000, batch_size=4, crop_frames=100, iteration=1, n_clusters=DEFAULT_K,
                 noise_aug=False, prev_encoder=None, layer=None, random_state=0):
        self.steps = steps
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.iteration = iteration
        self.n_clusters = n_clusters
        self.noise_aug = noise_aug
        self.prev_encoder = prev_encoder
        self.layer = layer
        self.random_state = random_state

    def _config(self):
        return PretrainConfig(steps=self.steps, batch_size=self.batch_size, crop_frames=self.crop_frames,
                              iteration=self.iteration, n_clusters=self.n_clusters, noise_aug=self.noise_aug,
                              seed=self.random_state)

    def fit(self, X, y=None):
        utts = check_utterances(X)
        res = pretrain(utts, self._config(), prev_encoder=self.prev_encoder)
        self.encoder_ = res.encoder
        self.codebook_ = res.codebook
        self.log_ = res.log
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        enc = self.encoder_
        layer = self.layer if self.layer is not None else enc.config.n_layers
        if not 1 <= layer <= enc.config.n_layers:
            raise ValueError(f"layer {layer} outside 1..{enc.config.n_layers}")
        out = []
        for u in check_utterances(X):
            a = mfcc(u.audio).frames
            t = min(len(a), len(u.visual))
            feats = enc.layer_outputs(a[None, :t], u.visual.frames[None, :t], "real")
            out.append(feats[layer - 1, 0].mean(axis=0))
        return np.stack(out)


class SpeakerEmbedder(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Speaker embeddings fine-tuned from an (optional) pretrained encoder.

    ``transform`` gives whole-utterance embeddings; ``predict`` classifies
    over the training speakers.
    """

    def __init__(self, encoder=None, protocol="cls", modality="AV", head="xvector", steps=2000, batch_size=8,
                 crop_frames=100, freeze_steps=None, noise_aug=False, random_state=0):
        self.encoder = encoder
        self.protocol = protocol
        self.modality = modality
        self.head = head
        self.steps = steps
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.freeze_steps = freeze_steps
        self.noise_aug = noise_aug
        self.random_state = random_state

    def _config(self):
        return FinetuneConfig(protocol=self.protocol, modality=self.modality, head=self.head, steps=self.steps,
                              batch_size=self.batch_size, crop_frames=self.crop_frames,
                              freeze_steps=self.freeze_steps, noise_aug=self.noise_aug, seed=self.random_state)

    def fit(self, X, y=None):
        utts = check_utterances(X, min_count=2)
        labels = check_labels(utts, y)
        # internal labels are contiguous ints; keep the caller's labels in classes_
        self.classes_, codes = np.unique(labels, return_inverse=True)
        relabelled = [dataclasses.replace(u, speaker_id=int(c)) for u, c in zip(utts, codes)]
        res = finetune(self.encoder, relabelled, self._config())
        self.model_ = res.model
        self.log_ = res.log
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return np.stack([self.model_.embed_utterance(u) for u in check_utterances(X)])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        post = self.model_.posterior(self.transform(X))
        # model columns follow the sorted label map, which is 0..C-1 here
        order = [self.model_.label_map[i] for i in range(len(self.classes_)) if i in self.model_.label_map]
        return post[:, order]

    def predict(self, X):
        proba = self.predict_proba(X)
        present = [i for i in range(len(self.classes_)) if i in self.model_.label_map]
        return self.classes_[np.asarray(present)[proba.argmax(axis=1)]]

    def score(self, X, y=None):
        utts = check_utterances(X)
        return float(np.mean(self.predict(utts) == check_labels(utts, y)))


__all__ = ["MfccTransformer", "UnitDiscovery", "MaskedPretrainer", "SpeakerEmbedder"]
