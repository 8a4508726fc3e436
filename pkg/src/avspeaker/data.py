"""Crop sampling and batch assembly shared by pretraining and fine-tuning."""

from __future__ import annotations

import numpy as np

from .dsp import SAMPLES_PER_FRAME, MfccConfig, mfcc, mix_at_snr
from .synth import NOISE_KINDS, make_noise

AUG_SNRS = (-10.0, -5.0, 0.0, 5.0, 10.0)


class FeatureCache:
    """Clean whole-utterance MFCCs, computed once per utterance id."""

    def __init__(self, cfg=None):
        self.cfg = cfg or MfccConfig()
        self._store = {}

    def __call__(self, utt):
        f = self._store.get(utt.utt_id)
        if f is None:
            f = self._store[utt.utt_id] = mfcc(utt.audio, self.cfg).frames
        return f

    def n_frames(self, utt):
        return min(len(self(utt)), len(utt.visual))


def crop_audio(utt, start, n_frames):
    lo = start * SAMPLES_PER_FRAME
    return utt.audio.samples[lo : lo + n_frames * SAMPLES_PER_FRAME]


def noisy_crop_mfcc(utt, start, n_frames, noise_pool, rng, snrs=AUG_SNRS, kinds=NOISE_KINDS):
    """MFCCs of a crop whose audio is mixed with a random noise kind at a
    random SNR; the noise never contains the crop's own speaker."""
    clean = crop_audio(utt, start, n_frames)
    kind = kinds[int(rng.integers(len(kinds)))]
    snr = float(snrs[int(rng.integers(len(snrs)))])
    noise = make_noise(kind, len(clean) / 8000.0, None, exclude_speaker=utt.speaker_id,
                       seed=int(rng.integers(2**31)), utterances=noise_pool)
    mixed = mix_at_snr(clean, noise, snr).waveform
    return mfcc(mixed).frames[:n_frames]


def eligible(utts, cache, n_frames):
    return [u for u in utts if cache.n_frames(u) >= n_frames]


def sample_batch(utts, cache, batch_size, n_frames, rng, noise_pool=None, snrs=AUG_SNRS):
    """Random fixed-length crops.

    Returns ``(items, mfcc, visual)`` where ``items`` lists ``(utt, start)``.
    When ``noise_pool`` is given each crop's audio is noise-augmented.
    """
    items, feats, vis = [], [], []
    for _ in range(batch_size):
        u = utts[int(rng.integers(len(utts)))]
        start = int(rng.integers(cache.n_frames(u) - n_frames + 1))
        items.append((u, start))
        if noise_pool is not None:
            feats.append(noisy_crop_mfcc(u, start, n_frames, noise_pool, rng, snrs))
        else:
            feats.append(cache(u)[start : start + n_frames])
        vis.append(u.visual.frames[start : start + n_frames])
    return items, np.stack(feats), np.stack(vis)
