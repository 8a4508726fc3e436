"""On-disk formats.

Binary artifacts share one header layout (all integers little-endian)::

    magic (4 bytes) | format_version u32 | meta_length u32 | meta JSON (utf-8)
    followed by raw array blocks described in meta["blocks"]

Magics: ``AVCB`` codebook, ``AVCK`` checkpoint. Waveforms (``AVW1``) and
visual frame files (``AVF1``) use the fixed layouts in :mod:`dsp` and here.
Every writer goes through a temp file and ``os.replace``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dsp import FrameFeatures, waveform_from_bytes, waveform_to_bytes
from .encoder import Encoder, EncoderConfig
from .synth import Corpus, SpeakerProfile, Utterance
from .units import Codebook

FORMAT_VERSION = 1
CODEBOOK_MAGIC = b"AVCB"
CHECKPOINT_MAGIC = b"AVCK"
VISUAL_MAGIC = b"AVF1"
CORPUS_FORMAT = "avcorpus/1"
BUNDLE_FORMAT = "avbundle/1"


class FormatError(ValueError):
    """A file is malformed, truncated, or from an unsupported version."""


class ProtocolMismatchError(FormatError):
    pass


# --- primitives ---------------------------------------------------------------------


def write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    write_atomic(path, dumps_json(obj).encode())


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_log_csv(path, rows):
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    write_atomic(path, buf.getvalue().encode())


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def pack(magic, meta, arrays=()):
    """Header + meta + blocks. ``arrays`` is a sequence of (name, ndarray)."""
    blocks, payload, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = arr.astype(dtype).tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    meta = dict(meta, blocks=blocks)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    return magic + struct.pack("<II", FORMAT_VERSION, len(meta_raw)) + meta_raw + b"".join(payload)


def unpack(buf, magic):
    """Inverse of :func:`pack`; returns ``(meta, {name: array})``."""
    if len(buf) < 12:
        raise FormatError("file truncated before the header ends")
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    version, meta_len = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})")
    if len(buf) < 12 + meta_len:
        raise FormatError("file truncated inside the metadata")
    meta = json.loads(buf[12 : 12 + meta_len].decode())
    base = 12 + meta_len
    arrays = {}
    for b in meta.get("blocks", []):
        lo = base + b["offset"]
        hi = lo + b["nbytes"]
        if hi > len(buf):
            raise FormatError(f"file truncated inside block {b['name']!r}")
        arr = np.frombuffer(buf[lo:hi], dtype=b["dtype"])
        if arr.size != int(np.prod(b["shape"])):
            raise FormatError(f"block {b['name']!r} size does not match its declared shape {b['shape']}")
        arrays[b["name"]] = arr.reshape(b["shape"]).astype(np.float64)
    return meta, arrays


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# --- visual frames ------------------------------------------------------------------


def frames_to_bytes(f):
    data = np.asarray(f.frames, dtype="<f4")
    t, d = data.shape
    return VISUAL_MAGIC + struct.pack("<II", t, d) + data.tobytes()


def frames_from_bytes(buf):
    if len(buf) < 12 or buf[:4] != VISUAL_MAGIC:
        raise FormatError("not an AVF1 frame file (bad magic)")
    t, d = struct.unpack("<II", buf[4:12])
    if len(buf) != 12 + 4 * t * d:
        raise FormatError(f"truncated AVF1 frame file: expected {t}x{d} values")
    return FrameFeatures(np.frombuffer(buf, dtype="<f4", offset=12).reshape(t, d).astype(np.float64))


# --- corpus -------------------------------------------------------------------------


def save_corpus(path, corpus):
    """Write ``manifest.json`` plus one AVW1 and one AVF1 file per utterance."""
    root = Path(path)
    entries = []
    for u in corpus.utterances:
        audio_rel = f"audio/{u.utt_id}.avw"
        visual_rel = f"visual/{u.utt_id}.avf"
        write_atomic(root / audio_rel, waveform_to_bytes(u.audio))
        write_atomic(root / visual_rel, frames_to_bytes(u.visual))
        entries.append({
            "utt_id": u.utt_id,
            "speaker_id": int(u.speaker_id),
            "split": u.split,
            "n_samples": len(u.audio),
            "n_frames": len(u.visual),
            "visual_dim": u.visual.dim,
            "phones": [int(p) for p in u.phones],
            "audio": audio_rel,
            "visual": visual_rel,
        })
    splits = {}
    for u in corpus.utterances:
        splits.setdefault(u.split, []).append(u.utt_id)
    manifest = {
        "format": CORPUS_FORMAT,
        "config": corpus.config,
        "n_speakers": len(corpus.speakers),
        "n_utterances": len(corpus.utterances),
        "speakers": [s.to_dict() for s in corpus.speakers],
        "splits": splits,
        "utterances": entries,
    }
    write_json(root / "manifest.json", manifest)
    return root


def load_corpus(path):
    root = Path(path)
    try:
        manifest = read_json(root / "manifest.json")
    except FileNotFoundError:
        raise FormatError(f"no manifest.json in {root}") from None
    if manifest.get("format") != CORPUS_FORMAT:
        raise FormatError(f"unsupported corpus format {manifest.get('format')!r}")
    entries = manifest["utterances"]
    if manifest.get("n_utterances") != len(entries):
        raise FormatError(f"manifest declares {manifest.get('n_utterances')} utterances but lists {len(entries)}")
    if manifest.get("n_speakers") != len(manifest["speakers"]):
        raise FormatError("manifest speaker count mismatch")
    speakers = [SpeakerProfile.from_dict(s) for s in manifest["speakers"]]
    utts = []
    for e in entries:
        try:
            audio = waveform_from_bytes(_read(root / e["audio"]))
        except ValueError as exc:
            raise FormatError(f"{e['audio']}: {exc}") from None
        visual = frames_from_bytes(_read(root / e["visual"]))
        if len(audio) != e["n_samples"]:
            raise FormatError(f"{e['utt_id']}: audio has {len(audio)} samples, manifest says {e['n_samples']}")
        if visual.frames.shape != (e["n_frames"], e["visual_dim"]):
            raise FormatError(f"{e['utt_id']}: visual shape {visual.frames.shape} disagrees with the manifest")
        if len(e["phones"]) != e["n_frames"]:
            raise FormatError(f"{e['utt_id']}: phone count disagrees with the frame count")
        utts.append(Utterance(e["utt_id"], e["speaker_id"], audio, visual, np.array(e["phones"], dtype=np.int64),
                              e["split"]))
    return Corpus(speakers, utts, manifest["config"])


# --- codebook -----------------------------------------------------------------------


def save_codebook(path, cb):
    arrays = [("centroids", cb.centroids)]
    if cb.mean is not None:
        arrays += [("mean", cb.mean), ("std", cb.std)]
    meta = {"K": cb.n_clusters, "D": cb.feature_dim, "source": cb.source}
    write_atomic(path, pack(CODEBOOK_MAGIC, meta, arrays))


def load_codebook(path):
    meta, arrays = unpack(_read(path), CODEBOOK_MAGIC)
    cent = arrays.get("centroids")
    if cent is None:
        raise FormatError("codebook has no centroid block")
    if cent.shape != (meta["K"], meta["D"]):
        raise FormatError(f"centroid block shape {cent.shape} != declared ({meta['K']}, {meta['D']})")
    return Codebook(cent, source=meta["source"], mean=arrays.get("mean"), std=arrays.get("std"))


# --- encoder checkpoints -----------------------------------------------------------


def save_encoder(path, enc, meta=None):
    header = {"kind": "encoder", "config": enc.config.to_dict(), "has_cls": enc.has_cls, "meta": meta or {}}
    arrays = sorted(enc.state_arrays().items())
    write_atomic(path, pack(CHECKPOINT_MAGIC, header, arrays))


def _check_blocks(arrays, expected):
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing parameter block {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise FormatError(f"block {name!r} has shape {arrays[name].shape}, expected {tuple(shape)}")


def load_encoder(path):
    meta, arrays = unpack(_read(path), CHECKPOINT_MAGIC)
    if meta.get("kind") != "encoder":
        raise FormatError(f"{path} is not an encoder checkpoint")
    cfg = EncoderConfig(**meta["config"])
    enc = Encoder(cfg)
    if meta.get("has_cls"):
        enc.add_cls()
    expected = enc.expected_shapes()
    if enc.has_cls:
        expected["cls"] = (cfg.d_model,)
    _check_blocks(arrays, expected)
    for k, t in enc.params.items():
        t.data = arrays[k].copy()
    for k in enc.buffers:
        enc.buffers[k] = arrays[k].copy()
    enc.meta = meta.get("meta", {})
    return enc


# --- fine-tuned bundles ------------------------------------------------------------


def save_bundle(path, model, extra=None):
    """Directory with ``encoder.avck``, ``heads.avck`` and ``bundle.json``."""
    from .finetune import SpeakerModel  # noqa: F401  (type reference)

    root = Path(path)
    save_encoder(root / "encoder.avck", model.encoder)
    head_meta = {"kind": "heads", "protocol": model.protocol}
    if model.protocol == "frozen":
        head_meta.update(variant=model.head.variant, d_in=model.head.d_in, d_spk=model.head.d_spk,
                         hidden=model.head.hidden)
    arrays = sorted((k, p.data) for k, p in model.head_params().items())
    write_atomic(root / "heads.avck", pack(CHECKPOINT_MAGIC, head_meta, arrays))
    info = {
        "format": BUNDLE_FORMAT,
        "protocol": model.protocol,
        "modality": model.modality,
        "label_map": {str(k): v for k, v in sorted(model.label_map.items())},
        "meta": model.meta,
    }
    if extra:
        info.update(extra)
    write_json(root / "bundle.json", info)
    return root


def load_bundle(path, expected_protocol=None):
    from .finetune import ClassifierHead, DownstreamHead, LayerWeights, SpeakerModel

    root = Path(path)
    info = read_json(root / "bundle.json")
    if info.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"unsupported bundle format {info.get('format')!r}")
    protocol = info["protocol"]
    if expected_protocol is not None and protocol != expected_protocol:
        raise ProtocolMismatchError(f"bundle was trained with protocol {protocol!r}, not {expected_protocol!r}")
    enc = load_encoder(root / "encoder.avck")
    hmeta, arrays = unpack(_read(root / "heads.avck"), CHECKPOINT_MAGIC)
    if hmeta.get("protocol") != protocol:
        raise ProtocolMismatchError("heads checkpoint protocol disagrees with bundle.json")
    label_map = {int(k): int(v) for k, v in info["label_map"].items()}
    if "classifier.A" not in arrays:
        raise FormatError("heads checkpoint is missing parameter block 'classifier.A'")
    d_spk = arrays["classifier.A"].shape[1]
    classifier = ClassifierHead(len(label_map), d_spk)
    head = weights = None
    expected = {"classifier.A": (len(label_map), d_spk)}
    if protocol == "frozen":
        head = DownstreamHead(hmeta["variant"], hmeta["d_in"], hmeta["d_spk"], hmeta["hidden"])
        weights = LayerWeights(enc.config.n_layers)
        expected["layer_logits"] = (enc.config.n_layers,)
        expected.update({k: p.shape for k, p in head.params.items()})
    _check_blocks(arrays, expected)
    classifier.A.data = arrays["classifier.A"].copy()
    if protocol == "frozen":
        weights.logits.data = arrays["layer_logits"].copy()
        for k, p in head.params.items():
            p.data = arrays[k].copy()
    enc.set_requires_grad(False)
    model = SpeakerModel(enc, protocol, info["modality"], label_map, head, weights, classifier, info.get("meta"))
    for p in model.head_params().values():
        p.requires_grad = False
        p.grad = None
    return model
