"""Waveform helpers: RMS, SNR-controlled mixing and 25 Hz MFCCs.

Audio is fixed at 8 kHz; a 40 ms hop (320 samples) makes the MFCC frame rate
exactly 25 Hz so audio and visual streams align frame for frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct, rfft

SAMPLE_RATE = 8000
FRAME_RATE = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FRAME_RATE
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class FrameFeatures:
    frames: np.ndarray
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a (T, D) matrix")
        if self.frame_rate != FRAME_RATE:
            raise ValueError(f"frame_rate must be {FRAME_RATE}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frame features contain NaN or Inf")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 25.0
    hop_ms: float = 40.0
    fft_size: int = 256
    mel_bins: int = 23
    coeffs: int = 13

    def __post_init__(self):
        hop = self.hop_ms * SAMPLE_RATE / 1000
        if hop != int(hop):
            raise ValueError("hop must be a whole number of samples")
        if self.win_length > self.fft_size:
            raise ValueError("window longer than the FFT")
        if not 1 <= self.coeffs <= self.mel_bins:
            raise ValueError("coeffs must lie in [1, mel_bins]")

    @property
    def win_length(self):
        return int(round(self.window_ms * SAMPLE_RATE / 1000))

    @property
    def hop_length(self):
        return int(self.hop_ms * SAMPLE_RATE / 1000)


def rms(w):
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=float)
    if x.size == 0:
        raise ValueError("rms of an empty waveform")
    return float(np.sqrt(np.mean(x * x)))


def snr_db(clean, noise):
    """20*log10(rms(clean) / rms(noise))."""
    return 20.0 * np.log10(rms(clean) / rms(noise))


def fit_length(x, n):
    """Tile ``x`` until it covers ``n`` samples, then crop from offset 0."""
    x = np.asarray(x)
    if x.shape[0] < n:
        x = np.tile(x, (-(-n // x.shape[0]),) + (1,) * (x.ndim - 1))
    return x[:n]


@dataclass
class Mixture:
    waveform: Waveform
    noise: np.ndarray
    gain: float
    n_clipped: int


def mix_at_snr(clean, noise, snr):
    """Add ``noise`` to ``clean`` at ``snr`` dB.

    The noise is tiled or cropped to the clean length and scaled by
    ``rms(clean) / rms(noise) * 10**(-snr / 20)``. The sum is clipped to
    [-1, 1] only when it leaves that range; ``n_clipped`` counts such samples.
    """
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, float)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, float)
    n = fit_length(n, c.size)
    rc, rn = rms(c), rms(n)
    if rc == 0:
        raise ValueError("clean signal is silent")
    if rn == 0:
        raise ValueError("noise signal is silent")
    gain = (rc / rn) * 10.0 ** (-snr / 20.0)
    scaled = gain * n
    mixed = c + scaled
    out_of_range = np.abs(mixed) > 1.0
    n_clipped = int(out_of_range.sum())
    if n_clipped:
        mixed = np.clip(mixed, -1.0, 1.0)
    return Mixture(Waveform(mixed), scaled, float(gain), n_clipped)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels=23, fft_size=256, sample_rate=SAMPLE_RATE):
    """Triangular filters on the mel scale, shape (n_mels, fft_size//2 + 1)."""
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def hann(n):
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def n_frames(n_samples, cfg=None):
    cfg = cfg or MfccConfig()
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def mfcc(w, cfg=None):
    """MFCCs at 25 Hz: Hann window, power spectrum, mel filterbank, natural
    log floored at 1e-10, orthonormal DCT-II truncated to ``cfg.coeffs``."""
    cfg = cfg or MfccConfig()
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, float)
    if x.size < max(cfg.hop_length, cfg.win_length):
        raise ValueError(f"waveform of {x.size} samples is shorter than one frame")
    t = n_frames(x.size, cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    frames = x[idx] * hann(cfg.win_length)
    power = np.abs(rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg.mel_bins, cfg.fft_size).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    return FrameFeatures(dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.coeffs])


# --- AVW1 waveform files ------------------------------------------------------------

WAVE_MAGIC = b"AVW1"


def waveform_to_bytes(w):
    samples = np.asarray(w.samples, dtype="<f4")
    return WAVE_MAGIC + struct.pack("<I", samples.size) + samples.tobytes()


def waveform_from_bytes(buf):
    if len(buf) < 8 or buf[:4] != WAVE_MAGIC:
        raise ValueError("not an AVW1 waveform (bad magic)")
    (count,) = struct.unpack("<I", buf[4:8])
    if len(buf) != 8 + 4 * count:
        raise ValueError(f"truncated AVW1 waveform: expected {count} samples")
    return Waveform(np.frombuffer(buf, dtype="<f4", offset=8).astype(np.float64))
