"""Audio-visual masked-prediction encoder.

Two feed-forward stream extractors (MFCC and visual features), frame-wise
concatenation fusion, a pre-norm transformer that exposes every layer's
output, and a linear cluster-prediction head. An optional ``[cls]`` row can
be prepended for full fine-tuning.

All batched methods take ``(batch, frames, dim)`` arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

VISUAL_MODES = ("real", "zero")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    audio_dim: int = 13
    visual_dim: int = 8
    n_clusters: int = 32
    max_frames: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if min(self.audio_dim, self.visual_dim, self.n_clusters, self.max_frames) < 1:
            raise ValueError("encoder dimensions must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerFeatures:
    """Per-layer transformer outputs ``layers[l]`` of shape (B, T, D), plus
    the fused pre-transformer input ``fused``."""

    layers: list
    fused: Tensor

    def __len__(self):
        return len(self.layers)

    @property
    def n_frames(self):
        return self.layers[0].shape[-2]


def sinusoid_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))


class Encoder:
    """Parameters live in ``self.params`` (trainable) and ``self.buffers``
    (fixed input-normalisation statistics)."""

    def __init__(self, config=None, seed=0, audio_mean=None, audio_std=None):
        self.config = config or EncoderConfig()
        self.meta = {}
        cfg = self.config
        rng = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
        p = {}
        p["audio.w1"] = _dense(rng, cfg.audio_dim, d)
        p["audio.b1"] = np.zeros(d)
        p["audio.w2"] = _dense(rng, d, d)
        p["audio.b2"] = np.zeros(d)
        p["visual.w1"] = _dense(rng, cfg.visual_dim, d)
        p["visual.b1"] = np.zeros(d)
        p["visual.w2"] = _dense(rng, d, d)
        p["visual.b2"] = np.zeros(d)
        p["mask.audio"] = rng.normal(0.0, 0.02, size=d)
        p["mask.visual"] = rng.normal(0.0, 0.02, size=d)
        p["fuse.w"] = _dense(rng, 2 * d, d)
        p["fuse.b"] = np.zeros(d)
        out_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            b = f"blocks.{i}."
            p[b + "ln1.g"] = np.ones(d)
            p[b + "ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv"):
                p[b + "attn." + name] = _dense(rng, d, d)
            for name in ("bq", "bk", "bv"):
                p[b + "attn." + name] = np.zeros(d)
            p[b + "attn.wo"] = _dense(rng, d, d, out_scale)
            p[b + "attn.bo"] = np.zeros(d)
            p[b + "ln2.g"] = np.ones(d)
            p[b + "ln2.b"] = np.zeros(d)
            p[b + "ffn.w1"] = _dense(rng, d, f)
            p[b + "ffn.b1"] = np.zeros(f)
            p[b + "ffn.w2"] = _dense(rng, f, d, out_scale)
            p[b + "ffn.b2"] = np.zeros(d)
        p["head.w"] = _dense(rng, d, cfg.n_clusters, 0.1)
        p["head.b"] = np.zeros(cfg.n_clusters)
        self.params = {k: ag.parameter(v, name=k) for k, v in p.items()}
        self.buffers = {
            "norm.mean": np.zeros(cfg.audio_dim) if audio_mean is None else np.asarray(audio_mean, float),
            "norm.std": np.ones(cfg.audio_dim) if audio_std is None else np.asarray(audio_std, float),
        }
        self._pe = sinusoid_positions(cfg.max_frames + 1, d)

    # --- bookkeeping ------------------------------------------------------------

    @property
    def has_cls(self):
        return "cls" in self.params

    def add_cls(self, seed=0):
        """Create the learnable ``[cls]`` embedding (N(0, 0.02))."""
        rng = np.random.default_rng(seed)
        self.params["cls"] = ag.parameter(rng.normal(0.0, 0.02, size=self.config.d_model), name="cls")

    def copy(self):
        other = Encoder.__new__(Encoder)
        other.config = self.config
        other.meta = dict(self.meta)
        other.params = {k: ag.parameter(t.data.copy(), name=k) for k, t in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._pe = self._pe
        return other

    def backbone_names(self):
        return [k for k in self.params if k != "cls"]

    def set_requires_grad(self, flag, names=None):
        for k in names if names is not None else self.params:
            t = self.params[k]
            t.requires_grad = bool(flag)
            t.grad = np.zeros_like(t.data) if flag else None

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def n_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def param_hash(self, names=None):
        h = hashlib.sha256()
        for k in sorted(names if names is not None else self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def state_arrays(self):
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def expected_shapes(self):
        """Names and shapes a checkpoint for this config must provide."""
        shapes = {k: t.data.shape for k, t in self.params.items() if k != "cls"}
        shapes.update({k: v.shape for k, v in self.buffers.items()})
        return shapes

    # --- stream extraction ------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _ffn2(self, x, prefix):
        h = ag.relu(x @ self._p(prefix + "w1") + self._p(prefix + "b1"))
        return h @ self._p(prefix + "w2") + self._p(prefix + "b2")

    def audio_features(self, mfcc):
        """Normalized MFCC frames (B, T, audio_dim) -> (B, T, d_model)."""
        mfcc = np.asarray(mfcc, dtype=float)
        if mfcc.shape[-1] != self.config.audio_dim:
            raise ValueError(f"expected {self.config.audio_dim} MFCC coefficients, got {mfcc.shape[-1]}")
        x = (mfcc - self.buffers["norm.mean"]) / self.buffers["norm.std"]
        return self._ffn2(Tensor(x), "audio.")

    def visual_features(self, visual, visual_mode="real"):
        """Visual frames (B, T, visual_dim) -> (B, T, d_model); exactly zero
        when ``visual_mode == 'zero'`` (audio-only operation)."""
        if visual_mode not in VISUAL_MODES:
            raise ValueError(f"visual_mode must be one of {VISUAL_MODES}")
        visual = np.asarray(visual, dtype=float)
        if visual_mode == "zero":
            return Tensor(np.zeros(visual.shape[:-1] + (self.config.d_model,)))
        if visual.shape[-1] != self.config.visual_dim:
            raise ValueError(f"expected visual dim {self.config.visual_dim}, got {visual.shape[-1]}")
        return self._ffn2(Tensor(visual), "visual.")

    def extract_streams(self, utterance, audio_override=None, visual_mode="real"):
        """Per-stream features (T, d_model) for a single utterance."""
        from .dsp import mfcc

        audio = utterance.audio if audio_override is None else audio_override
        if abs(len(audio.samples) - len(utterance.audio.samples)) > 320:
            raise ValueError("audio override differs from the utterance by more than one frame")
        feats = mfcc(audio).frames
        vis = utterance.visual.frames
        t = min(len(feats), len(vis))
        a = self.audio_features(feats[None, :t])
        v = self.visual_features(vis[None, :t], visual_mode)
        return a[0], v[0]

    # --- fusion and backbone ----------------------------------------------------

    def fuse(self, audio, visual):
        if audio.shape[:-1] != visual.shape[:-1]:
            raise ValueError(f"stream length mismatch: {audio.shape} vs {visual.shape}")
        cat = ag.concat([audio, visual], axis=-1)
        return cat @ self._p("fuse.w") + self._p("fuse.b")

    def _attention(self, x, prefix):
        cfg = self.config
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        b, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads

        def heads(w, bias):
            return (x @ self._p(prefix + w) + self._p(prefix + bias)).reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        att = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        out = out @ self._p(prefix + "wo") + self._p(prefix + "bo")
        return out[0] if squeeze else out

    def forward_layers(self, fused, prepend_cls=False, positions=True):
        """Run the transformer; returns every layer's output.

        With ``prepend_cls`` row 0 of each layer is the ``[cls]`` position and
        the sequence has T+1 rows.
        """
        cfg = self.config
        t = fused.shape[-2]
        if t > cfg.max_frames:
            raise ValueError(f"{t} frames exceed the encoder cap of {cfg.max_frames}")
        x = fused
        if prepend_cls:
            if not self.has_cls:
                raise ValueError("encoder has no [cls] embedding; call add_cls() first")
            cls = self.params["cls"]
            lead = x.shape[:-2]
            ones = Tensor(np.ones(lead + (1, 1)))
            x = ag.concat([ones * cls, x], axis=-2)
        if positions:
            x = x + self._pe[: x.shape[-2]]
        layers = []
        for i in range(cfg.n_layers):
            b = f"blocks.{i}."
            x = x + self._attention(ag.layer_norm(x, self._p(b + "ln1.g"), self._p(b + "ln1.b")), b + "attn.")
            hdn = ag.layer_norm(x, self._p(b + "ln2.g"), self._p(b + "ln2.b"))
            x = x + self._ffn2(hdn, b + "ffn.")
            layers.append(x)
        return LayerFeatures(layers=layers, fused=fused)

    def predict_clusters(self, final_layer):
        """Linear head over the last layer; returns unnormalised logits."""
        return final_layer @ self._p("head.w") + self._p("head.b")

    def encode(self, mfcc, visual, visual_mode="real", masks=None, prepend_cls=False):
        """Full forward from raw per-frame inputs to layer features.

        ``masks`` is an optional ``(audio_mask, visual_mask)`` pair of boolean
        ``(B, T)`` arrays; masked frames are swapped for the stream's mask
        embedding before fusion.
        """
        a = self.audio_features(mfcc)
        v = self.visual_features(visual, visual_mode)
        if masks is not None:
            from .pretrain import apply_masks

            a = apply_masks(a, masks[0], self.params["mask.audio"])
            if visual_mode == "real":
                v = apply_masks(v, masks[1], self.params["mask.visual"])
        return self.forward_layers(self.fuse(a, v), prepend_cls=prepend_cls)

    def layer_outputs(self, mfcc, visual, visual_mode="real", batch_size=32):
        """Inference-only per-layer features as numpy, shape (L, B, T, D)."""
        was = {k: t.requires_grad for k, t in self.params.items()}
        self.set_requires_grad(False)
        try:
            outs = []
            for i in range(0, len(mfcc), batch_size):
                feats = self.encode(mfcc[i : i + batch_size], visual[i : i + batch_size], visual_mode)
                outs.append(np.stack([c.data for c in feats.layers]))
            return np.concatenate(outs, axis=1)
        finally:
            for k, flag in was.items():
                if flag:
                    self.set_requires_grad(True, [k])
