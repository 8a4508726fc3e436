"""Synthetic audio-visual speaker corpus.

Each speaker has a stable voice (pitch, formant scaling, band timbre) and a
stable appearance vector. Utterances share phonetic content drawn from a
12-class Markov chain at 25 Hz. The visual stream per frame is

    content_gain * phone_embed[phone] + identity_gain * project(appearance)
    + session offset + frame noise

so it carries both a lip-reading cue and an identity cue. Four noise
families (babble, competing speech, music, low-passed white noise) are
generated from the corpus itself for robustness tests.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import butter, sosfilt

from .dsp import FRAME_RATE, SAMPLE_RATE, FrameFeatures, Waveform, fit_length

N_PHONES = 12
APPEARANCE_DIM = 16
N_BANDS = 6
F0_RANGE = (80.0, 300.0)
NOISE_KINDS = ("Babble", "Speech", "Music", "Other")
BABBLE_TALKERS = 4

# (F1, F2, F3) in Hz per phone class; class 0 is a quiet, neutral vowel.
PHONE_FORMANTS = np.array(
    [
        [500, 1500, 2500],
        [730, 1090, 2440],
        [270, 2290, 3010],
        [300, 870, 2240],
        [660, 1720, 2410],
        [530, 1840, 2480],
        [640, 1190, 2390],
        [440, 1020, 2240],
        [390, 1990, 2550],
        [490, 1350, 1690],
        [570, 840, 2410],
        [360, 1650, 2700],
    ],
    dtype=float,
)
PHONE_LOUDNESS = np.array([0.15] + [1.0] * (N_PHONES - 1))
FORMANT_BANDWIDTH = np.array([90.0, 130.0, 180.0])
MEAN_PHONE_FRAMES = 5


def derive_rng(*keys):
    """Generator seeded from a tuple of ints/strings."""
    ints = [k if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence([int(abs(i)) for i in ints]))


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class VisualConfig:
    dim: int = 8
    identity_gain: float = 0.5
    content_gain: float = 1.0
    noise_std: float = 0.5
    session_std: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("visual dim must be >= 1")
        if min(self.identity_gain, self.content_gain, self.noise_std, self.session_std) < 0:
            raise ValueError("visual gains must be non-negative")


VISUAL_PRESETS = {
    "lip": VisualConfig(dim=8, identity_gain=0.5),
    "face": VisualConfig(dim=16, identity_gain=1.5),
}


def visual_preset(name):
    try:
        return VISUAL_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown visual preset {name!r}; choose from {sorted(VISUAL_PRESETS)}") from None


@dataclass(frozen=True)
class VoiceConfig:
    """Per-utterance nuisance variation of the audio channel."""

    channel_std: float = 0.35
    background_snr_db: float = 30.0
    level_db_range: tuple = (-26.0, -18.0)


@dataclass
class SpeakerProfile:
    speaker_id: int
    f0: float
    formant_offsets: np.ndarray
    appearance: np.ndarray
    timbre_weights: np.ndarray

    def to_dict(self):
        return {
            "speaker_id": int(self.speaker_id),
            "f0": float(self.f0),
            "formant_offsets": [float(v) for v in self.formant_offsets],
            "appearance": [float(v) for v in self.appearance],
            "timbre_weights": [float(v) for v in self.timbre_weights],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            speaker_id=int(d["speaker_id"]),
            f0=float(d["f0"]),
            formant_offsets=np.array(d["formant_offsets"], dtype=float),
            appearance=np.array(d["appearance"], dtype=float),
            timbre_weights=np.array(d["timbre_weights"], dtype=float),
        )

    def __eq__(self, other):
        if not isinstance(other, SpeakerProfile):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(eq=False)
class Utterance:
    utt_id: str
    speaker_id: int
    audio: Waveform
    visual: FrameFeatures
    phones: np.ndarray
    split: str = "train"

    @property
    def duration_s(self):
        return self.audio.duration

    @property
    def n_frames(self):
        return len(self.visual)


@dataclass
class Corpus:
    speakers: list
    utterances: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {s.speaker_id for s in self.speakers}
        for u in self.utterances:
            if u.speaker_id not in ids:
                raise ValueError(f"utterance {u.utt_id} references unknown speaker {u.speaker_id}")
        self._by_id = {u.utt_id: u for u in self.utterances}
        if len(self._by_id) != len(self.utterances):
            raise ValueError("duplicate utterance ids")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, utt_id):
        return self._by_id[utt_id]

    def select(self, splits):
        """Utterances whose split tag is in ``splits``."""
        if isinstance(splits, str):
            splits = (splits,)
        return [u for u in self.utterances if u.split in splits]

    def speaker_ids(self, splits=None):
        utts = self.utterances if splits is None else self.select(splits)
        return sorted({u.speaker_id for u in utts})

    def profile(self, speaker_id):
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def subset(self, utterances):
        keep = {u.speaker_id for u in utterances}
        return Corpus([s for s in self.speakers if s.speaker_id in keep], list(utterances), dict(self.config))

    @property
    def visual_config(self):
        return VisualConfig(**self.config["visual"]) if "visual" in self.config else VisualConfig()


# --- fixed phonetic structure -------------------------------------------------------


def _phone_transitions():
    rng = derive_rng("phone-transitions")
    stay = 1.0 - 1.0 / MEAN_PHONE_FRAMES
    trans = np.zeros((N_PHONES, N_PHONES))
    for i in range(N_PHONES):
        p = rng.dirichlet(np.full(N_PHONES - 1, 0.3))
        trans[i, [j for j in range(N_PHONES) if j != i]] = (1.0 - stay) * p
        trans[i, i] = stay
    return trans


PHONE_TRANSITIONS = _phone_transitions()


def phone_embeddings(dim):
    rng = derive_rng("phone-embed", dim)
    e = rng.normal(size=(N_PHONES, dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def appearance_projection(dim):
    rng = derive_rng("appearance-proj", dim)
    return rng.normal(0.0, 1.0 / np.sqrt(APPEARANCE_DIM), size=(dim, APPEARANCE_DIM))


def sample_phones(n, rng):
    phones = np.empty(n, dtype=np.int64)
    phones[0] = rng.integers(N_PHONES)
    u = rng.random(n)
    cum = np.cumsum(PHONE_TRANSITIONS, axis=1)
    for t in range(1, n):
        phones[t] = min(np.searchsorted(cum[phones[t - 1]], u[t], side="right"), N_PHONES - 1)
    return phones


# --- generation ---------------------------------------------------------------------


def gen_speaker(seed, speaker_id=None):
    """Deterministic speaker profile for ``seed``."""
    rng = derive_rng("speaker", seed)
    f0 = float(np.exp(rng.uniform(np.log(F0_RANGE[0]), np.log(F0_RANGE[1]))))
    formant_offsets = rng.uniform(-0.15, 0.15, size=3)
    direction = rng.normal(size=APPEARANCE_DIM)
    appearance = direction / np.linalg.norm(direction) * rng.uniform(0.5, 2.0)
    timbre = np.exp(rng.normal(0.0, 0.5, size=N_BANDS))
    return SpeakerProfile(
        speaker_id=int(seed if speaker_id is None else speaker_id),
        f0=f0,
        formant_offsets=formant_offsets,
        appearance=appearance,
        timbre_weights=timbre,
    )


def _band_index(freqs):
    return np.minimum((freqs / (SAMPLE_RATE / 2) * N_BANDS).astype(int), N_BANDS - 1)


def _voice(profile, phones, n_samples, rng, voice):
    """Harmonic source at the speaker's f0 shaped by per-phone formants."""
    f0 = profile.f0
    harmonics = np.arange(1, int((SAMPLE_RATE / 2 - 200) // f0) + 1)
    hf = harmonics * f0
    formants = PHONE_FORMANTS[phones] * (1.0 + profile.formant_offsets)  # (T, 3)
    resonance = 1.0 / (1.0 + ((hf[None, :, None] - formants[:, None, :]) / FORMANT_BANDWIDTH) ** 2)
    env = resonance.sum(axis=2) * PHONE_LOUDNESS[phones, None]  # (T, H)
    channel = np.exp(rng.normal(0.0, voice.channel_std, size=N_BANDS))
    env *= (profile.timbre_weights * channel)[_band_index(hf)][None, :]
    env /= np.sqrt(harmonics)[None, :]

    centers = (np.arange(len(phones)) + 0.5) * (SAMPLE_RATE / FRAME_RATE)
    n = np.arange(n_samples)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=harmonics.size)
    out = np.zeros(n_samples)
    base = 2.0 * np.pi * f0 * n / SAMPLE_RATE
    for k, h in enumerate(harmonics):
        amp = np.interp(n, centers, env[:, k])
        out += amp * np.sin(h * base + phase[k])
    return out


def synth_utterance(profile, duration_s, vcfg=None, seed=0, voice=None, utt_id=None, split="train"):
    """Render one utterance for ``profile``."""
    if duration_s < 1.0:
        raise ValueError("utterance duration must be at least 1 s")
    vcfg = vcfg or VisualConfig()
    voice = voice or VoiceConfig()
    rng = derive_rng("utterance", profile.speaker_id, seed)
    n_samples = int(round(duration_s * SAMPLE_RATE))
    t = int(round(duration_s * FRAME_RATE))
    phones = sample_phones(t, rng)

    audio = _voice(profile, phones, n_samples, rng, voice)
    level = 10.0 ** (rng.uniform(*voice.level_db_range) / 20.0)
    audio *= level / np.sqrt(np.mean(audio**2))
    bg = rng.normal(size=n_samples)
    audio += bg * level * 10.0 ** (-voice.background_snr_db / 20.0)
    audio = np.clip(audio, -1.0, 1.0)

    identity = appearance_projection(vcfg.dim) @ profile.appearance
    session = rng.normal(0.0, vcfg.session_std, size=vcfg.dim)
    visual = (
        vcfg.content_gain * phone_embeddings(vcfg.dim)[phones]
        + vcfg.identity_gain * identity
        + session
        + rng.normal(0.0, vcfg.noise_std, size=(t, vcfg.dim))
    )
    return Utterance(
        utt_id=utt_id or f"s{profile.speaker_id:04d}_x{seed}",
        speaker_id=profile.speaker_id,
        audio=Waveform(_f32(audio)),
        visual=FrameFeatures(_f32(visual)),
        phones=phones,
        split=split,
    )


def split_sizes(n_speakers, test_fraction=0.2):
    """``(train_pool, test)`` speaker counts used by :func:`gen_corpus`."""
    n_test = min(max(1, int(round(test_fraction * n_speakers))), n_speakers - 1)
    return n_speakers - n_test, n_test


def gen_corpus(n_speakers, utts_per_speaker, duration_s=6.0, vcfg=None, seed=0, voice=None, test_fraction=0.2,
               dev_fraction=0.2):
    """Generate a corpus with a speaker-disjoint SV test pool.

    Roughly ``test_fraction`` of the speakers are held out (split ``test``);
    for the remaining speakers ``dev_fraction`` of their utterances are tagged
    ``dev`` (closed-set classification test) and the rest ``train``.
    """
    if n_speakers < 2:
        raise ValueError("a corpus needs at least two speakers")
    if utts_per_speaker < 1:
        raise ValueError("utts_per_speaker must be >= 1")
    vcfg = vcfg or VisualConfig()
    voice = voice or VoiceConfig()
    order = derive_rng("corpus-split", seed).permutation(n_speakers)
    n_test = split_sizes(n_speakers, test_fraction)[1]
    test_idx = set(order[:n_test].tolist())
    n_dev = int(round(dev_fraction * utts_per_speaker)) if utts_per_speaker > 1 else 0

    speakers, utterances = [], []
    for i in range(n_speakers):
        prof = gen_speaker(seed * 100003 + i, speaker_id=i)
        speakers.append(prof)
        for j in range(utts_per_speaker):
            if i in test_idx:
                split = "test"
            else:
                split = "dev" if j >= utts_per_speaker - n_dev else "train"
            utterances.append(
                synth_utterance(
                    prof, duration_s, vcfg, seed=seed * 1009 + j, voice=voice, utt_id=f"s{i:03d}_u{j:03d}",
                    split=split,
                )
            )
    config = {
        "n_speakers": n_speakers,
        "utts_per_speaker": utts_per_speaker,
        "duration_s": duration_s,
        "seed": seed,
        "visual": asdict(vcfg),
        "voice": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(voice).items()},
    }
    return Corpus(speakers, utterances, config)


def _training_pool(c):
    return [u for u in c.utterances if u.split in ("train",)]


def subset_by_utterances(c, fraction, seed=0):
    """Keep a uniform random ``fraction`` of the training utterances."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    pool = _training_pool(c)
    n = int(round(fraction * len(pool)))
    if n == 0:
        raise ValueError("subset would be empty")
    if fraction == 1.0:
        return c
    keep = set(derive_rng("subset-utts", seed).choice(len(pool), size=n, replace=False).tolist())
    chosen = {pool[i].utt_id for i in keep}
    return _restrict_training(c, chosen)


def subset_by_speakers(c, fraction, seed=0):
    """Keep ``fraction`` of the training speakers with all their utterances."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    pool = sorted({u.speaker_id for u in _training_pool(c)})
    n = int(round(fraction * len(pool)))
    if n == 0:
        raise ValueError("subset retains no speakers")
    if fraction == 1.0:
        return c
    kept = set(derive_rng("subset-spk", seed).choice(pool, size=n, replace=False).tolist())
    chosen = {u.utt_id for u in _training_pool(c) if u.speaker_id in kept}
    return _restrict_training(c, chosen)


def _restrict_training(c, chosen_ids):
    """Drop unchosen training utterances; dev utterances follow their speaker,
    test utterances are kept untouched."""
    train_spk = {c[i].speaker_id for i in chosen_ids}
    utts = []
    for u in c.utterances:
        if u.split == "train" and u.utt_id not in chosen_ids:
            continue
        if u.split == "dev" and u.speaker_id not in train_spk:
            continue
        utts.append(u)
    return c.subset(utts)


# --- noise --------------------------------------------------------------------------


def _normalize(x, target=0.1):
    r = np.sqrt(np.mean(x * x))
    return x * (target / r) if r > 0 else x


def _speech_segment(u, n, rng):
    x = np.roll(u.audio.samples, -int(rng.integers(len(u.audio))))
    return fit_length(x, n)


def make_noise(kind, duration_s, corpus, exclude_speaker=None, seed=0, utterances=None):
    """Noise waveform of ``kind`` that never contains ``exclude_speaker``.

    Babble sums four other-talker utterances, Speech is a single other
    talker, Music is three slowly modulated harmonic tones and Other is
    low-pass filtered white noise.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = derive_rng("noise", kind, seed)
    t = np.arange(n) / SAMPLE_RATE
    if kind in ("Babble", "Speech"):
        pool = utterances if utterances is not None else corpus.utterances
        by_spk = {}
        for u in pool:
            if u.speaker_id != exclude_speaker:
                by_spk.setdefault(u.speaker_id, []).append(u)
        need = BABBLE_TALKERS if kind == "Babble" else 1
        if len(by_spk) < need:
            raise ValueError(f"{kind} noise needs {need} speakers other than {exclude_speaker}, found {len(by_spk)}")
        talkers = rng.choice(sorted(by_spk), size=need, replace=False)
        mix = np.zeros(n)
        for s in talkers:
            utts = by_spk[int(s)]
            mix += _normalize(_speech_segment(utts[int(rng.integers(len(utts)))], n, rng))
        return Waveform(_normalize(mix))
    if kind == "Music":
        out = np.zeros(n)
        for _ in range(3):
            f = rng.uniform(110.0, 880.0)
            rate = rng.uniform(0.2, 1.5)
            am = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
            tone = sum((0.6**h) * np.sin(2 * np.pi * f * (h + 1) * t + rng.uniform(0, 2 * np.pi))
                       for h in range(4) if f * (h + 1) < SAMPLE_RATE / 2)
            out += am * tone
        return Waveform(_normalize(out))
    cutoff = rng.uniform(800.0, 2500.0)
    sos = butter(4, cutoff, btype="low", fs=SAMPLE_RATE, output="sos")
    return Waveform(_normalize(sosfilt(sos, rng.normal(size=n))))
