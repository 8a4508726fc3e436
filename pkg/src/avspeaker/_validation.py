"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .dsp import Waveform
from .synth import Corpus, Utterance


def check_utterances(X, min_count=1):
    """Return ``X`` as a list of utterances.

    Accepts a corpus, a single utterance or any iterable of utterances.
    """
    if isinstance(X, Corpus):
        X = X.utterances
    elif isinstance(X, Utterance):
        X = [X]
    try:
        utts = list(X)
    except TypeError:
        raise TypeError(f"expected utterances, got {type(X).__name__}") from None
    for u in utts:
        if not isinstance(u, Utterance):
            raise TypeError(f"expected Utterance objects, got {type(u).__name__}")
    if len(utts) < min_count:
        raise ValueError(f"need at least {min_count} utterance(s), got {len(utts)}")
    return utts


def check_labels(utts, y):
    """Speaker labels for ``utts``; defaults to each utterance's speaker id."""
    if y is None:
        return np.array([u.speaker_id for u in utts])
    y = np.asarray(y)
    if y.shape != (len(utts),):
        raise ValueError(f"y has shape {y.shape}, expected ({len(utts)},)")
    return y


def check_waveforms(X):
    """List of 1-D float arrays from waveforms, arrays or a 2-D batch."""
    if isinstance(X, Waveform):
        return [X.samples]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [row for row in check_array(X, dtype=np.float64)]
    out = []
    for x in X:
        x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("each waveform must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains NaN or inf")
        out.append(x)
    return out


def check_frames(X, dim=None):
    """A finite (n, d) float matrix, optionally with a fixed column count."""
    X = check_array(X, dtype=np.float64)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"X has {X.shape[1]} features, expected {dim}")
    return X
