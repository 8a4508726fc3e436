"""Supervised speaker-embedding training on top of the encoder.

Two protocols:

* ``frozen``: the encoder is a fixed feature extractor. A convex combination
  of its layer outputs (softmax-parametrised weights) feeds a downstream head
  (average pooling or x-vector statistics pooling).
* ``cls``: a learnable ``[cls]`` row is prepended and the whole network is
  trained; the final-layer ``[cls]`` output is the embedding. The encoder
  stays frozen for the first ``freeze_steps`` updates.

Both end in a bias-free softmax classifier over the training speakers.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AUG_SNRS, FeatureCache, eligible, sample_batch
from .dsp import mfcc
from .encoder import Encoder, EncoderConfig

log = logging.getLogger(__name__)

PROTOCOLS = ("frozen", "cls")
MODALITIES = ("A", "AV")
HEADS = ("avg_pool", "xvector")


def visual_mode_for(modality):
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}")
    return "real" if modality == "AV" else "zero"


class LayerWeights:
    """Non-negative layer weights summing to one, as a softmax over logits."""

    def __init__(self, n_layers, logits=None):
        init = np.zeros(n_layers) if logits is None else np.asarray(logits, dtype=float)
        self.logits = ag.parameter(init, name="layer_logits")

    def __len__(self):
        return self.logits.shape[0]

    def tensor(self):
        return ag.softmax(self.logits, axis=-1)

    @property
    def weights(self):
        return self.tensor().data


def layer_weighted_sum(feats, w):
    """Frame-wise convex combination of layer outputs."""
    layers = feats.layers if hasattr(feats, "layers") else feats
    if len(layers) != len(w):
        raise ValueError(f"{len(w)} layer weights for {len(layers)} layers")
    wt = w.tensor()
    if all(not c.requires_grad for c in layers):
        stacked = Tensor(np.stack([c.data for c in layers]))
        shape = (len(layers),) + (1,) * (stacked.ndim - 1)
        return (wt.reshape(shape) * stacked).sum(axis=0)
    out = None
    for i, c in enumerate(layers):
        term = c * wt[i]
        out = term if out is None else out + term
    return out


class DownstreamHead:
    """Maps (B, T, D) frame features to (B, d_spk) embeddings.

    ``avg_pool``: mean over frames, then a linear layer.
    ``xvector``: frame-wise ReLU layer, mean and std pooling, two linear layers.
    """

    def __init__(self, variant, d_in, d_spk=32, hidden=64, seed=0):
        if variant not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.variant, self.d_in, self.d_spk, self.hidden = variant, d_in, d_spk, hidden
        rng = np.random.default_rng(seed)
        p = {}
        if variant == "avg_pool":
            p["head.w"] = rng.normal(0, 1 / np.sqrt(d_in), (d_in, d_spk))
            p["head.b"] = np.zeros(d_spk)
        else:
            p["head.frame_w"] = rng.normal(0, np.sqrt(2 / d_in), (d_in, hidden))
            p["head.frame_b"] = np.zeros(hidden)
            p["head.seg1_w"] = rng.normal(0, np.sqrt(2 / (2 * hidden)), (2 * hidden, hidden))
            p["head.seg1_b"] = np.zeros(hidden)
            p["head.seg2_w"] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, d_spk))
            p["head.seg2_b"] = np.zeros(d_spk)
        self.params = {k: ag.parameter(v, name=k) for k, v in p.items()}

    def pool(self, x):
        """Statistics pooling output (mean ‖ std over frames) of the x-vector
        frame layer; exposed for tests."""
        p = self.params
        h = ag.relu(x @ p["head.frame_w"] + p["head.frame_b"])
        return ag.concat([h.mean(axis=-2), ag.std(h, axis=-2)], axis=-1)

    def __call__(self, x):
        p = self.params
        if self.variant == "avg_pool":
            return x.mean(axis=-2) @ p["head.w"] + p["head.b"]
        h = ag.relu(self.pool(x) @ p["head.seg1_w"] + p["head.seg1_b"])
        return h @ p["head.seg2_w"] + p["head.seg2_b"]


class ClassifierHead:
    """Posterior ``softmax(A s)`` over the training speakers (no bias)."""

    def __init__(self, n_classes, d_spk, seed=0):
        rng = np.random.default_rng(seed)
        self.A = ag.parameter(rng.normal(0, 1 / np.sqrt(d_spk), (n_classes, d_spk)), name="classifier.A")

    @property
    def n_classes(self):
        return self.A.shape[0]

    @property
    def d_spk(self):
        return self.A.shape[1]

    def logits(self, s):
        if s.shape[-1] != self.d_spk:
            raise ValueError(f"embedding dim {s.shape[-1]} != classifier dim {self.d_spk}")
        return s @ self.A.transpose()


def classify(head, s):
    """Posterior over speakers for embedding(s) ``s``."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=float))
    squeeze = s.ndim == 1
    if squeeze:
        s = s.reshape(1, -1)
    post = ag.softmax(head.logits(s), axis=-1).data
    return post[0] if squeeze else post


@dataclass
class FinetuneConfig:
    protocol: str = "cls"
    modality: str = "AV"
    head: str = "xvector"
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 100
    freeze_steps: int | None = None
    peak_lr: float = 1e-3
    warmup_fraction: float = 1.0 / 3.0
    noise_aug: bool = False
    snrs: tuple = AUG_SNRS
    d_spk: int = 32
    hidden: int = 64
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        visual_mode_for(self.modality)
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.freeze_steps is None:
            self.freeze_steps = self.steps // 4
        if not 0 <= self.freeze_steps <= self.steps:
            raise ValueError("freeze_steps must lie in [0, steps]")

    def to_dict(self):
        d = asdict(self)
        d["snrs"] = list(self.snrs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["snrs"] = tuple(d.get("snrs", AUG_SNRS))
        return cls(**d)


class SpeakerModel:
    """A fine-tuned bundle: encoder, protocol-specific heads and label map."""

    def __init__(self, encoder, protocol, modality, label_map, head=None, layer_weights=None, classifier=None,
                 meta=None):
        if protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        self.encoder = encoder
        self.protocol = protocol
        self.modality = modality
        self.visual_mode = visual_mode_for(modality)
        self.label_map = {int(k): int(v) for k, v in label_map.items()}
        self.head = head
        self.layer_weights = layer_weights
        self.classifier = classifier
        self.meta = dict(meta or {})
        if protocol == "frozen" and (head is None or layer_weights is None):
            raise ValueError("frozen protocol needs a downstream head and layer weights")
        if protocol == "cls" and not encoder.has_cls:
            raise ValueError("cls protocol needs an encoder with a [cls] embedding")

    @property
    def embedding_dim(self):
        return self.head.d_spk if self.protocol == "frozen" else self.encoder.config.d_model

    def head_params(self):
        p = {"classifier.A": self.classifier.A}
        if self.protocol == "frozen":
            p["layer_logits"] = self.layer_weights.logits
            p.update(self.head.params)
        return p

    def embed_batch(self, mfcc_batch, visual_batch):
        """Embeddings (B, D) for a batch of aligned crops."""
        enc = self.encoder
        if self.protocol == "frozen":
            feats = enc.encode(mfcc_batch, visual_batch, self.visual_mode)
            return self.head(layer_weighted_sum(feats, self.layer_weights))
        feats = enc.encode(mfcc_batch, visual_batch, self.visual_mode, prepend_cls=True)
        return feats.layers[-1][:, 0, :]

    def embed_arrays(self, mfcc_batch, visual_batch, batch_size=64):
        """Inference-only embeddings as a numpy array."""
        saved = {k: p.requires_grad for k, p in self._all_params().items()}
        for p in saved:
            self._all_params()[p].requires_grad = False
        try:
            out = [self.embed_batch(mfcc_batch[i : i + batch_size], visual_batch[i : i + batch_size]).data
                   for i in range(0, len(mfcc_batch), batch_size)]
        finally:
            allp = self._all_params()
            for k, flag in saved.items():
                allp[k].requires_grad = flag
        return np.concatenate(out)

    def embed_utterance(self, utt, audio_override=None):
        audio = utt.audio if audio_override is None else audio_override
        a = mfcc(audio).frames
        t = min(len(a), len(utt.visual))
        return self.embed_arrays(a[None, :t], utt.visual.frames[None, :t])[0]

    def posterior(self, embeddings):
        return classify(self.classifier, embeddings)

    def _all_params(self):
        p = dict(self.encoder.params)
        p.update(self.head_params())
        return p


def embed_frozen(enc, w, head, utt, visual_mode="real", audio_override=None):
    """Frozen-protocol embedding of one utterance; the encoder gets no gradient."""
    audio = utt.audio if audio_override is None else audio_override
    a = mfcc(audio).frames
    t = min(len(a), len(utt.visual))
    saved = {k: p.requires_grad for k, p in enc.params.items()}
    enc.set_requires_grad(False)
    try:
        feats = enc.encode(a[None, :t], utt.visual.frames[None, :t], visual_mode)
    finally:
        for k, flag in saved.items():
            if flag:
                enc.set_requires_grad(True, [k])
    return head(layer_weighted_sum(feats, w))[0]


def embed_cls(enc, utt, visual_mode="real", audio_override=None):
    """Final-layer output at the ``[cls]`` position for one utterance."""
    if not enc.has_cls:
        raise ValueError("encoder has no [cls] embedding")
    audio = utt.audio if audio_override is None else audio_override
    a = mfcc(audio).frames
    t = min(len(a), len(utt.visual))
    feats = enc.encode(a[None, :t], utt.visual.frames[None, :t], visual_mode, prepend_cls=True)
    return feats.layers[-1][0, 0]


@dataclass
class FinetuneResult:
    model: SpeakerModel
    log: list

    def train_accuracy(self, window=100):
        return float(np.mean([r["acc"] for r in self.log[-window:]]))


def _new_encoder(utterances, cfg, cache):
    stacked = np.concatenate([cache(u) for u in utterances])
    enc_cfg = EncoderConfig(**{**asdict(cfg.encoder), "visual_dim": utterances[0].visual.dim})
    return Encoder(enc_cfg, seed=cfg.seed + 104729, audio_mean=stacked.mean(axis=0),
                   audio_std=stacked.std(axis=0) + 1e-8)


def finetune(encoder, utterances, cfg=None, noise_pool=None):
    """Train a speaker classifier on labelled ``utterances``.

    ``encoder=None`` starts from random initialisation (no pretraining). The
    passed encoder is copied, never modified.
    """
    cfg = cfg or FinetuneConfig()
    cache = FeatureCache()
    pool = eligible(list(utterances), cache, cfg.crop_frames)
    speakers = sorted({u.speaker_id for u in pool})
    if len(speakers) < 2:
        raise ValueError("fine-tuning needs at least two speakers")
    label_map = {s: i for i, s in enumerate(speakers)}

    enc = _new_encoder(pool, cfg, cache) if encoder is None else encoder.copy()
    enc.params.pop("cls", None)
    enc.set_requires_grad(False)
    backbone = enc.backbone_names()
    if cfg.protocol == "cls":
        enc.add_cls(seed=cfg.seed + 17)
        d_spk = enc.config.d_model
        head = weights = None
    else:
        weights = LayerWeights(enc.config.n_layers)
        head = DownstreamHead(cfg.head, enc.config.d_model, cfg.d_spk, cfg.hidden, seed=cfg.seed + 31)
        d_spk = cfg.d_spk
    classifier = ClassifierHead(len(speakers), d_spk, seed=cfg.seed + 47)
    model = SpeakerModel(enc, cfg.protocol, cfg.modality, label_map, head, weights, classifier,
                         meta={"init": "none" if encoder is None else "pretrained"})

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31337]))
    schedule = ag.LrSchedule(total_steps=cfg.steps + 1, peak_lr=cfg.peak_lr, warmup_fraction=cfg.warmup_fraction)
    opt = ag.AdamState()
    noise = (noise_pool if noise_pool is not None else pool) if cfg.noise_aug else None
    rows = []
    for step in range(1, cfg.steps + 1):
        if cfg.protocol == "cls" and step == cfg.freeze_steps + 1:
            enc.set_requires_grad(True, backbone)
        trainable = model.head_params()
        if cfg.protocol == "cls":
            trainable["cls"] = enc.params["cls"]
            trainable.update({k: enc.params[k] for k in backbone if enc.params[k].requires_grad})
        for p in trainable.values():
            p.zero_grad()

        items, mf, vis = sample_batch(pool, cache, cfg.batch_size, cfg.crop_frames, rng, noise_pool=noise,
                                      snrs=cfg.snrs)
        labels = np.array([label_map[u.speaker_id] for u, _ in items])
        logits = classifier.logits(model.embed_batch(mf, vis))
        loss = ag.cross_entropy(logits, labels)
        ag.backward(loss)
        enc_grad = float(np.sqrt(sum(np.sum(enc.params[k].grad ** 2) for k in backbone
                                     if enc.params[k].grad is not None)))
        lr = ag.lr_at(schedule, step)
        ag.adam_step(trainable, {k: p.grad for k, p in trainable.items()}, opt, lr)
        row = {"step": step, "lr": lr, "loss": float(loss.data),
               "acc": float((logits.data.argmax(axis=1) == labels).mean()), "encoder_grad_norm": enc_grad}
        if weights is not None:
            w = weights.weights
            row["weight_sum"] = float(w.sum())
            row["weight_min"] = float(w.min())
        rows.append(row)
        if step % 100 == 0:
            log.info("finetune step %d loss %.4f acc %.3f", step, row["loss"], row["acc"])
    enc.set_requires_grad(False)
    return FinetuneResult(model, rows)
