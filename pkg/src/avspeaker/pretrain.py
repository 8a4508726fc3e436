"""Masked cluster prediction over fused audio-visual streams."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AUG_SNRS, FeatureCache, eligible, sample_batch
from .encoder import Encoder, EncoderConfig
from .units import DEFAULT_K, make_iteration_targets

log = logging.getLogger(__name__)

MAX_MASK_RETRIES = 10


@dataclass(frozen=True)
class MaskSpec:
    mask_prob: float = 0.08
    span_len: int = 10

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.span_len < 1:
            raise ValueError("span_len must be >= 1")


def _one_mask(n, spec, rng):
    for _ in range(MAX_MASK_RETRIES):
        starts = np.flatnonzero(rng.random(n) < spec.mask_prob)
        if starts.size:
            m = np.zeros(n, dtype=bool)
            for s in starts:
                m[s : s + spec.span_len] = True
            return m
    m = np.zeros(n, dtype=bool)
    s = int(rng.integers(n - spec.span_len + 1))
    m[s : s + spec.span_len] = True
    return m


def sample_stream_masks(n_frames, spec=None, seed=None, rng=None):
    """Independent span masks for the audio and visual streams.

    Each frame starts a span with probability ``mask_prob``. A stream that
    comes out empty is redrawn a few times and then gets one forced span.
    """
    spec = spec or MaskSpec()
    if n_frames < spec.span_len:
        raise ValueError(f"{n_frames} frames is shorter than a {spec.span_len}-frame span")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return _one_mask(n_frames, spec, rng), _one_mask(n_frames, spec, rng)


def apply_masks(stream, mask, embedding):
    """Replace masked frames of ``stream`` (``(..., T, D)``) with ``embedding``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != stream.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match stream {stream.shape[:-1]}")
    if not mask.any():
        return stream
    m = mask[..., None].astype(np.float64)
    return stream * Tensor(1.0 - m) + Tensor(m) * embedding


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop_frames: int = 100
    peak_lr: float = 1e-3
    warmup_fraction: float = 1.0 / 3.0
    noise_aug: bool = False
    snrs: tuple = AUG_SNRS
    seed: int = 0
    iteration: int = 1
    n_clusters: int = DEFAULT_K
    refine_layer: int | None = None
    kmeans_iters: int = 50
    checkpoint_every: int = 500
    stop_below: float | None = None
    stop_window: int = 20
    mask: MaskSpec = field(default_factory=MaskSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size <= 0 or self.crop_frames <= 0:
            raise ValueError("batch_size and crop_frames must be positive")
        if self.iteration < 1:
            raise ValueError("iteration must be >= 1")
        if self.stop_window < 1:
            raise ValueError("stop_window must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["snrs"] = list(self.snrs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mask"] = MaskSpec(**d.get("mask", {}))
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["snrs"] = tuple(d.get("snrs", AUG_SNRS))
        return cls(**d)


@dataclass
class StepResult:
    loss: float
    masked_acc: float
    n_masked: int


def masked_loss(enc, mfcc, visual, targets, masks):
    """Cross-entropy over the union of audio- and visual-masked frames."""
    feats = enc.encode(mfcc, visual, "real", masks=masks)
    logits = enc.predict_clusters(feats.layers[-1])
    union = masks[0] | masks[1]
    loss = ag.cross_entropy(logits, targets, union)
    pred = logits.data.argmax(axis=-1)
    acc = float((pred[union] == np.asarray(targets)[union]).mean())
    return loss, acc, int(union.sum())


def pretrain_step(enc, mfcc, visual, targets, spec, opt, lr, rng):
    """Sample masks, compute the masked loss, and apply one Adam update."""
    b, t = targets.shape
    am = np.zeros((b, t), dtype=bool)
    vm = np.zeros((b, t), dtype=bool)
    for i in range(b):
        am[i], vm[i] = sample_stream_masks(t, spec, rng=rng)
    enc.zero_grad()
    loss, acc, n = masked_loss(enc, mfcc, visual, targets, (am, vm))
    ag.backward(loss)
    params = {k: p for k, p in enc.params.items() if p.requires_grad}
    ag.adam_step(params, {k: p.grad for k, p in params.items()}, opt, lr)
    return StepResult(float(loss.data), acc, n)


@dataclass
class PretrainResult:
    encoder: Encoder
    codebook: object
    targets: dict
    log: list

    def final_loss(self, window=100):
        return float(np.mean([r["loss"] for r in self.log[-window:]]))


def pretrain(utterances, cfg=None, prev_encoder=None, out_dir=None, noise_pool=None, on_checkpoint=None):
    """Run one refinement iteration of masked-prediction pretraining.

    ``utterances`` is the unlabeled pretraining pool. Iteration >= 2 needs the
    previous iteration's encoder to build its targets; each iteration starts
    from a freshly initialised network.
    """
    from . import persist

    cfg = cfg or PretrainConfig()
    if not utterances:
        raise ValueError("pretraining pool is empty")
    if cfg.iteration >= 2 and prev_encoder is None:
        raise ValueError(f"iteration {cfg.iteration} needs an iteration-{cfg.iteration - 1} encoder")
    cache = FeatureCache()
    pool = eligible(utterances, cache, cfg.crop_frames)
    if not pool:
        raise ValueError(f"no utterance has {cfg.crop_frames} frames")

    targets, codebook = make_iteration_targets(
        cfg.iteration, pool, encoder=prev_encoder, layer=cfg.refine_layer, k=cfg.n_clusters,
        iters=cfg.kmeans_iters, seed=cfg.seed,
    )
    stacked = np.concatenate([cache(u) for u in pool])
    enc_cfg = replace(cfg.encoder, n_clusters=cfg.n_clusters, visual_dim=pool[0].visual.dim)
    enc = Encoder(enc_cfg, seed=cfg.seed, audio_mean=stacked.mean(axis=0), audio_std=stacked.std(axis=0) + 1e-8)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    schedule = ag.LrSchedule(total_steps=cfg.steps + 1, peak_lr=cfg.peak_lr, warmup_fraction=cfg.warmup_fraction)
    opt = ag.AdamState()
    rows = []
    noise = (noise_pool if noise_pool is not None else utterances) if cfg.noise_aug else None
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(1, cfg.steps + 1):
        items, mf, vis = sample_batch(pool, cache, cfg.batch_size, cfg.crop_frames, rng, noise_pool=noise,
                                      snrs=cfg.snrs)
        tg = np.stack([targets[u.utt_id][s : s + cfg.crop_frames] for u, s in items])
        lr = ag.lr_at(schedule, step)
        res = pretrain_step(enc, mf, vis, tg, cfg.mask, opt, lr, rng)
        rows.append({"step": step, "lr": lr, "loss": res.loss, "masked_acc": res.masked_acc})
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f acc %.3f", step, res.loss, res.masked_acc)
        # optional early stop once the running loss is under a target
        done = step == cfg.steps or (
            cfg.stop_below is not None and step >= cfg.stop_window
            and np.mean([r["loss"] for r in rows[-cfg.stop_window:]]) < cfg.stop_below
        )
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or done):
            meta = {"kind": "pretrain", "step": step, "iteration": cfg.iteration, "codebook_source": codebook.source}
            path = out_dir / ("encoder.avck" if done else f"encoder_step{step}.avck")
            persist.save_encoder(path, enc, meta)
            if on_checkpoint is not None:
                on_checkpoint(path)
        if done:
            break
    if out_dir is not None:
        persist.write_log_csv(out_dir / "train_log.csv", rows)
        persist.write_json(out_dir / "config.json", cfg.to_dict())
        persist.save_codebook(out_dir / "codebook.avcb", codebook)
    return PretrainResult(enc, codebook, targets, rows)
