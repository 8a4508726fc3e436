"""Speaker verification and classification scoring.

Verification trials are scored by the mean pairwise cosine between ten
evenly spaced 4 s segment embeddings of each utterance; EER comes from a
FAR/FRR threshold sweep with linear interpolation at the crossing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import FRAME_RATE, SAMPLES_PER_FRAME, mfcc, mix_at_snr
from .synth import NOISE_KINDS, derive_rng, make_noise

SNR_GRID = (-10, -5, 0, 5, 10)
N_SEGMENTS = 10
SEGMENT_S = 4.0


@dataclass(frozen=True)
class NoiseCondition:
    kind: str = "Clean"
    snr_db: float | None = None

    def __post_init__(self):
        if self.kind == "Clean":
            if self.snr_db is not None:
                raise ValueError("the clean condition has no SNR")
        elif self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        elif self.snr_db is None:
            raise ValueError(f"{self.kind} needs an SNR")

    @property
    def is_clean(self):
        return self.kind == "Clean"

    @property
    def label(self):
        return "Clean" if self.is_clean else f"{self.kind}@{int(self.snr_db):+d}dB"


CLEAN = NoiseCondition()


def noise_grid(kinds=NOISE_KINDS, snrs=SNR_GRID):
    return [NoiseCondition(k, float(s)) for k in kinds for s in snrs]


@dataclass(frozen=True)
class Trial:
    utt_a: str
    utt_b: str
    same: bool

    def __post_init__(self):
        if self.utt_a == self.utt_b:
            raise ValueError("a trial needs two distinct utterances")


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if len(self.trials) != len(self.scores):
            raise ValueError("one score per trial required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def labels(self):
        return np.array([t.same for t in self.trials], dtype=bool)


def sample_segments(duration_s, n=N_SEGMENTS, seg_s=SEGMENT_S):
    """``n`` evenly spaced ``(start, end)`` spans in seconds; utterances no
    longer than ``seg_s`` yield ``n`` copies of the whole utterance."""
    if duration_s <= seg_s:
        return [(0.0, float(duration_s))] * n
    starts = np.linspace(0.0, duration_s - seg_s, n)
    return [(float(s), float(s) + seg_s) for s in starts]


def segment_inputs(utt, audio=None, n=N_SEGMENTS, seg_s=SEGMENT_S):
    """Aligned (n, frames, dim) MFCC and visual crops for the segments.

    Short utterances are cyclically repeated up to ``seg_s``.
    """
    x = utt.audio.samples if audio is None else audio.samples
    vis = utt.visual.frames
    seg_frames = int(round(seg_s * FRAME_RATE))
    total = min(len(vis), len(x) // SAMPLES_PER_FRAME)
    if total < seg_frames:
        reps = -(-seg_frames // total)
        x = np.tile(x[: total * SAMPLES_PER_FRAME], reps)
        vis = np.tile(vis[:total], (reps, 1))
        total = seg_frames
    feats = mfcc(x).frames
    a_out, v_out = [], []
    for start_s, _ in sample_segments(total / FRAME_RATE, n, seg_s):
        f0 = int(round(start_s * FRAME_RATE))
        a_out.append(feats[f0 : f0 + seg_frames])
        v_out.append(vis[f0 : f0 + seg_frames])
    return np.stack(a_out), np.stack(v_out)


def _unit_rows(e):
    e = np.asarray(e, dtype=float)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return e / norms


def trial_score(emb_a, emb_b):
    """Mean cosine similarity over all (segment a, segment b) pairs."""
    a = _unit_rows(np.atleast_2d(emb_a))
    b = _unit_rows(np.atleast_2d(emb_b))
    return float((a @ b.T).mean())


def gen_trials(utterances, seed=0):
    """One same-speaker and one different-speaker partner per utterance."""
    by_spk = {}
    for u in utterances:
        by_spk.setdefault(u.speaker_id, []).append(u.utt_id)
    if len(by_spk) < 2:
        raise ValueError("trials need at least two speakers")
    for s, ids in by_spk.items():
        if len(ids) < 2:
            raise ValueError(f"speaker {s} has a single utterance; cannot form a positive trial")
    rng = derive_rng("trials", seed)
    trials = []
    for u in utterances:
        same = [i for i in by_spk[u.speaker_id] if i != u.utt_id]
        other = [i for s, ids in by_spk.items() if s != u.speaker_id for i in ids]
        trials.append(Trial(u.utt_id, same[int(rng.integers(len(same)))], True))
        trials.append(Trial(u.utt_id, other[int(rng.integers(len(other)))], False))
    return trials


def eer(labels, scores):
    """Equal error rate with FAR(t) = P(neg >= t), FRR(t) = P(pos < t),
    thresholds at the sorted unique scores plus +inf, and linear
    interpolation between the two thresholds that bracket FAR == FRR."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER needs both positive and negative trials")
    thr = np.append(np.unique(scores), np.inf)
    far = 1.0 - np.searchsorted(neg, thr, side="left") / neg.size
    frr = np.searchsorted(pos, thr, side="left") / pos.size
    d = frr - far
    j = int(np.argmax(d >= 0))
    if d[j] == 0 or j == 0:
        return float(far[j])
    alpha = -d[j - 1] / (d[j] - d[j - 1])
    return float(far[j - 1] + alpha * (far[j] - far[j - 1]))


def eer_from_scoreset(ss):
    return eer(ss.labels, ss.scores)


def sc_accuracy(model, utterances, condition=None, seed=0, noise_utterances=None):
    """Closed-set accuracy with whole-utterance embeddings, optionally with
    the audio corrupted as in :func:`evaluate_sv`."""
    if not utterances:
        raise ValueError("no utterances to classify")
    condition = condition or CLEAN
    correct = 0
    for u in utterances:
        if u.speaker_id not in model.label_map:
            raise KeyError(f"speaker {u.speaker_id} is not in the model's label map")
        audio = noisy_audio(u, condition, noise_utterances or utterances, seed)
        post = model.posterior(model.embed_utterance(u, audio_override=audio))
        correct += int(np.argmax(post) == model.label_map[u.speaker_id])
    return correct / len(utterances)


def noisy_audio(utt, condition, noise_utterances, seed):
    """The utterance's audio under ``condition``; noise is drawn per
    (utterance, condition, seed) and never contains the utterance's speaker."""
    if condition.is_clean:
        return utt.audio
    noise = make_noise(condition.kind, utt.audio.duration, None, exclude_speaker=utt.speaker_id,
                       seed=derive_rng("eval-noise", utt.utt_id, condition.label, seed).integers(2**31),
                       utterances=noise_utterances)
    return mix_at_snr(utt.audio, noise, condition.snr_db).waveform


def embed_segments(model, utterances, condition=CLEAN, noise_utterances=None, seed=0):
    """Segment embeddings per utterance id, shape (n_segments, D)."""
    noise_utterances = noise_utterances if noise_utterances is not None else utterances
    mf, vis, owners = [], [], []
    for u in utterances:
        a, v = segment_inputs(u, noisy_audio(u, condition, noise_utterances, seed))
        mf.append(a)
        vis.append(v)
        owners.append((u.utt_id, len(a)))
    emb = model.embed_arrays(np.concatenate(mf), np.concatenate(vis))
    out, i = {}, 0
    for uid, n in owners:
        out[uid] = emb[i : i + n]
        i += n
    return out


def score_trials(trials, embeddings):
    return ScoreSet(list(trials), [trial_score(embeddings[t.utt_a], embeddings[t.utt_b]) for t in trials])


def evaluate_sv(model, utterances, trials, condition=CLEAN, seed=0, noise_utterances=None):
    """EER and scores for ``trials`` under one noise condition. Only audio is
    corrupted; the visual stream is left untouched."""
    needed = {t.utt_a for t in trials} | {t.utt_b for t in trials}
    by_id = {u.utt_id: u for u in utterances}
    missing = needed - set(by_id)
    if missing:
        raise ValueError(f"trials reference unknown utterances: {sorted(missing)[:3]}")
    used = [by_id[i] for i in sorted(needed)]
    emb = embed_segments(model, used, condition, noise_utterances or utterances, seed)
    ss = score_trials(trials, emb)
    return eer_from_scoreset(ss), ss


@dataclass
class EvalReport:
    task: str
    results: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, condition, metric, value, n_trials):
        self.results[condition.label] = {
            "kind": condition.kind,
            "snr_db": condition.snr_db,
            metric: float(value),
            "n_trials": int(n_trials),
        }

    def value(self, label, metric="eer"):
        return self.results[label][metric]

    def mean_noisy(self, metric="eer", snr=None):
        vals = [r[metric] for r in self.results.values()
                if r["kind"] != "Clean" and (snr is None or r["snr_db"] == snr)]
        return float(np.mean(vals))

    def to_dict(self):
        return {"task": self.task, "meta": self.meta, "conditions": self.results}

    def table_rows(self, metric="eer"):
        """Rows of noise kind x SNR, mirroring a noise-robustness table."""
        rows = []
        for kind in NOISE_KINDS:
            row = {"noise": kind}
            for snr in SNR_GRID:
                r = self.results.get(NoiseCondition(kind, float(snr)).label)
                row[f"{snr}dB"] = None if r is None else r[metric]
            rows.append(row)
        if "Clean" in self.results:
            rows.append({"noise": "Clean", **{f"{s}dB": self.results["Clean"][metric] for s in SNR_GRID}})
        return [r for r in rows if any(v is not None for k, v in r.items() if k != "noise")]


def evaluate_grid(model, utterances, trials, conditions, seed=0, noise_utterances=None, meta=None,
                  on_scores=None):
    """SV report over ``conditions``; ``on_scores(condition, scoreset)`` sees
    every score set as it is produced."""
    report = EvalReport("sv", meta=dict(meta or {}))
    for cond in conditions:
        value, ss = evaluate_sv(model, utterances, trials, cond, seed, noise_utterances)
        report.add(cond, "eer", value, len(ss.trials))
        if on_scores is not None:
            on_scores(cond, ss)
    return report


def evaluate_sc_grid(model, utterances, conditions, seed=0, noise_utterances=None, meta=None):
    report = EvalReport("sc", meta=dict(meta or {}))
    for cond in conditions:
        report.add(cond, "accuracy", sc_accuracy(model, utterances, cond, seed, noise_utterances), len(utterances))
    return report


def scoreset_rows(ss):
    return [{"utt_a": t.utt_a, "utt_b": t.utt_b, "label": "same" if t.same else "different", "score": repr(float(s))}
            for t, s in zip(ss.trials, ss.scores)]
