"""Factorial study designs run across seeds, reported as seed medians.

A design expands a validated JSON config into cells (one per factor
combination), trains and evaluates every cell for every seed, and reports
the per-cell median of each metric together with directional verdicts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import persist
from .encoder import EncoderConfig
from .evaluation import CLEAN, NoiseCondition, evaluate_grid, gen_trials, noise_grid
from .finetune import FinetuneConfig, finetune
from .pretrain import PretrainConfig, pretrain
from .synth import BABBLE_TALKERS, gen_corpus, split_sizes, subset_by_speakers, subset_by_utterances, visual_preset

log = logging.getLogger(__name__)

DESIGNS = ("label-efficiency", "noise-aug", "protocols", "visual-tradeoff")
CORE_NOISY = tuple(NoiseCondition(k, float(s)) for k in ("Babble", "Speech") for s in (-10, -5))

BASE_CONFIG = {
    "seeds": [0, 1, 2, 3, 4],
    "corpus": {"speakers": 40, "utts": 8, "duration": 6.0, "visual": "lip", "test_fraction": 0.2},
    "model": {"d_model": 64, "n_layers": 4, "n_heads": 4, "ffn_mult": 4},
    "pretrain": {"steps": 800, "batch_size": 4, "noise_aug": True, "iterations": 1},
    "finetune": {"steps": 400, "batch_size": 8, "protocol": "cls", "head": "xvector", "modality": "AV",
                 "noise_aug": False},
}

DESIGN_DEFAULTS = {
    "label-efficiency": {"subsets": ["utts:0.2", "all"], "modalities": ["A", "AV"], "grid": "noisy"},
    # augmented crops are harder, so this design fine-tunes twice as long
    "noise-aug": {"modalities": ["A", "AV"], "grid": "noisy", "finetune": {"steps": 800}},
    "protocols": {"subsets": ["utts:0.2"], "protocols": ["frozen", "cls"], "grid": "clean"},
    "visual-tradeoff": {"visuals": ["lip", "face"], "grid": "clean"},
}


class ConfigError(ValueError):
    """An experiment config that fails schema or semantic validation."""


def load_schema(name):
    return json.loads(resources.files("avspeaker").joinpath("schemas", name).read_text())


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(design, user=None):
    """Validate ``user`` against the schema and fill in design defaults."""
    if design not in DESIGNS:
        raise ConfigError(f"unknown design {design!r}; choose from {', '.join(DESIGNS)}")
    user = user or {}
    try:
        jsonschema.validate(user, load_schema("experiment.schema.json"))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None
    cfg = _merge(_merge(BASE_CONFIG, DESIGN_DEFAULTS[design]), user)
    m = cfg["model"]
    if m["d_model"] % m["n_heads"]:
        raise ConfigError("model.d_model must be divisible by model.n_heads")
    for s in cfg.get("subsets", []):
        parse_subset(s)
    _check_speaker_counts(design, cfg)
    return cfg


def _check_speaker_counts(design, cfg):
    """Fail early when the corpus is too small for trials or babble noise."""
    c = cfg["corpus"]
    n_train, n_test = split_sizes(c["speakers"], c["test_fraction"])
    need = BABBLE_TALKERS + 1
    if n_test < 2:
        raise ConfigError(f"corpus.test_fraction leaves {n_test} test speaker(s); verification needs 2")
    kinds = {x.kind for x in grid_conditions(cfg["grid"])}
    if kinds & {"Babble", "Speech"} and n_test < need:
        raise ConfigError(f"noisy grids need {need} test speakers (babble excludes the target), got {n_test}")
    noisy_training = cfg["pretrain"]["noise_aug"] or cfg["finetune"]["noise_aug"] or design == "noise-aug"
    if noisy_training and n_train < need:
        raise ConfigError(f"noise-augmented training needs {need} training speakers, got {n_train}")


def parse_subset(text):
    """``all`` | ``utts:F`` | ``spk:F`` to ``(kind, fraction)``."""
    if text == "all":
        return "all", 1.0
    m = re.fullmatch(r"(utts|spk):([0-9]*\.?[0-9]+)", text)
    if not m or not 0.0 < float(m.group(2)) <= 1.0:
        raise ConfigError(f"bad subset {text!r}; use all, utts:F or spk:F with 0 < F <= 1")
    return m.group(1), float(m.group(2))


def apply_subset(corpus, text, seed=0):
    kind, frac = parse_subset(text)
    if kind == "all":
        return corpus
    fn = subset_by_utterances if kind == "utts" else subset_by_speakers
    return fn(corpus, frac, seed=seed)


def parse_condition(label):
    if label == "Clean":
        return CLEAN
    m = re.fullmatch(r"(Babble|Speech|Music|Other)@([+-]?[0-9]+)dB", label)
    if not m:
        raise ConfigError(f"bad condition {label!r}")
    return NoiseCondition(m.group(1), float(m.group(2)))


def grid_conditions(grid):
    if grid == "clean":
        return [CLEAN]
    if grid == "noisy":
        return [CLEAN] + noise_grid()
    conds = [parse_condition(g) for g in grid]
    return conds if CLEAN in conds else [CLEAN] + conds


class Workbench:
    """Per-run cache of corpora and pretrained encoders.

    Encoders are also kept on disk under ``cache_dir`` when given, so
    separate designs with identical corpus and pretraining settings share
    them.
    """

    def __init__(self, cache_dir=None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._corpora = {}
        self._encoders = {}

    def corpus(self, ccfg, seed, visual=None):
        visual = visual or ccfg["visual"]
        key = json.dumps([ccfg, seed, visual], sort_keys=True)
        if key not in self._corpora:
            self._corpora[key] = gen_corpus(
                ccfg["speakers"], ccfg["utts"], ccfg["duration"], vcfg=visual_preset(visual), seed=seed,
                test_fraction=ccfg["test_fraction"],
            )
        return self._corpora[key]

    def encoder(self, cfg, seed, visual=None):
        visual = visual or cfg["corpus"]["visual"]
        spec = [cfg["corpus"], cfg["model"], cfg["pretrain"], seed, visual]
        key = json.dumps(spec, sort_keys=True)
        if key in self._encoders:
            return self._encoders[key]
        path = None
        if self.cache_dir is not None:
            digest = hashlib.sha256(key.encode()).hexdigest()[:16]
            path = self.cache_dir / f"pretrain_{digest}.avck"
            if path.exists():
                enc = persist.load_encoder(path)
                self._encoders[key] = enc
                return enc
        c = self.corpus(cfg["corpus"], seed, visual)
        pool = c.select(("train", "dev"))
        pcfg = cfg["pretrain"]
        enc = None
        for it in range(1, pcfg["iterations"] + 1):
            res = pretrain(pool, PretrainConfig(
                steps=pcfg["steps"], batch_size=pcfg["batch_size"], noise_aug=pcfg["noise_aug"], seed=seed,
                iteration=it, encoder=EncoderConfig(**cfg["model"]),
            ), prev_encoder=enc)
            enc = res.encoder
            log.info("pretrained seed %d visual %s iteration %d: final loss %.3f", seed, visual, it,
                     res.final_loss())
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            persist.save_encoder(path, enc, {"kind": "pretrain", "spec": spec})
        self._encoders[key] = enc
        return enc


def _finetune_cell(bench, cfg, seed, *, init, protocol, modality, subset, noise_aug, visual=None):
    c = bench.corpus(cfg["corpus"], seed, visual)
    train = apply_subset(c, subset, seed).select("train")
    f = cfg["finetune"]
    enc = bench.encoder(cfg, seed, visual) if init == "pretrained" else None
    ft = FinetuneConfig(protocol=protocol, modality=modality, head=f["head"], steps=f["steps"],
                        batch_size=f["batch_size"], noise_aug=noise_aug, seed=seed,
                        encoder=EncoderConfig(**cfg["model"]))
    model = finetune(enc, train, ft).model
    test = c.select("test")
    report = evaluate_grid(model, test, gen_trials(test, seed), grid_conditions(cfg["grid"]), seed,
                           meta={"protocol": protocol, "modality": modality, "init": init})
    return report


@dataclass
class ExperimentResult:
    design: str
    factors: list
    metrics: list
    cells: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def median(self, match, metric):
        for c in self.cells:
            if all(c["factors"][k] == v for k, v in match.items()):
                return c["median"][metric]
        raise KeyError(match)

    def rows(self):
        """One flat row per cell: factor values then metric medians."""
        return [{**c["factors"], **{m: c["median"][m] for m in self.metrics}} for c in self.cells]

    def to_dict(self):
        return {"design": self.design, "factors": self.factors, "metrics": self.metrics, "cells": self.cells,
                "verdicts": self.verdicts, "config": self.config}


def _cell_metrics(report, metrics):
    out = {}
    for m in metrics:
        if m == "noisy_mean":
            out[m] = report.mean_noisy()
        elif m.startswith("mean@"):
            out[m] = report.mean_noisy(snr=float(m[5:-2]))
        else:
            out[m] = report.value(m)
    return out


def _run_cells(design, cfg, factor_names, combos, metrics, run_one, on_cell=None):
    res = ExperimentResult(design, list(factor_names), list(metrics), config=cfg)
    for combo in combos:
        factors = dict(zip(factor_names, combo))
        per_seed = {m: [] for m in metrics}
        for seed in cfg["seeds"]:
            report = run_one(seed, **factors)
            vals = _cell_metrics(report, metrics)
            for m in metrics:
                if not np.isfinite(vals[m]):
                    raise FloatingPointError(f"non-finite {m} in cell {factors} seed {seed}")
                per_seed[m].append(vals[m])
            log.info("%s %s seed %d: %s", design, factors, seed, vals)
        cell = {"factors": factors, "per_seed": per_seed,
                "median": {m: float(np.median(v)) for m, v in per_seed.items()}}
        res.cells.append(cell)
        if on_cell is not None:
            on_cell(cell)
    return res


def _verdict(res, name, passed, detail):
    res.verdicts.append({"claim": name, "pass": bool(passed), "detail": detail})


def _grid_metrics(cfg):
    conds = grid_conditions(cfg["grid"])
    return conds, [c.label for c in conds]


def run_label_efficiency(cfg, bench, on_cell=None):
    conds, _ = _grid_metrics(cfg)
    metrics = ["Clean"] + (["noisy_mean"] if len(conds) > 1 else [])
    combos = [(i, m, s) for i in ("none", "pretrained") for m in cfg["modalities"] for s in cfg["subsets"]]

    def one(seed, init, modality, subset):
        return _finetune_cell(bench, cfg, seed, init=init, protocol=cfg["finetune"]["protocol"], modality=modality,
                              subset=subset, noise_aug=cfg["finetune"]["noise_aug"])

    res = _run_cells("label-efficiency", cfg, ("init", "modality", "subset"), combos, metrics, one, on_cell)
    for m in cfg["modalities"]:
        for s in cfg["subsets"]:
            pt = res.median({"init": "pretrained", "modality": m, "subset": s}, "Clean")
            sc = res.median({"init": "none", "modality": m, "subset": s}, "Clean")
            _verdict(res, f"pretrained beats scratch ({m}, {s})", pt < sc, f"clean EER {pt:.4f} vs {sc:.4f}")
    return res


def run_protocols(cfg, bench, on_cell=None):
    combos = [(p, i, s) for p in cfg["protocols"] for i in ("none", "pretrained") for s in cfg["subsets"]]
    modality = cfg["finetune"]["modality"]

    def one(seed, protocol, init, subset):
        return _finetune_cell(bench, cfg, seed, init=init, protocol=protocol, modality=modality, subset=subset,
                              noise_aug=cfg["finetune"]["noise_aug"])

    res = _run_cells("protocols", cfg, ("protocol", "init", "subset"), combos, ["Clean"], one, on_cell)
    for p in cfg["protocols"]:
        for s in cfg["subsets"]:
            pt = res.median({"protocol": p, "init": "pretrained", "subset": s}, "Clean")
            sc = res.median({"protocol": p, "init": "none", "subset": s}, "Clean")
            _verdict(res, f"pretrained beats scratch ({p}, {s})", pt < sc, f"clean EER {pt:.4f} vs {sc:.4f}")
    return res


def run_noise_aug(cfg, bench, on_cell=None):
    conds, labels = _grid_metrics(cfg)
    snrs = sorted({c.snr_db for c in conds if not c.is_clean})
    metrics = labels + [f"mean@{int(s):+d}dB" for s in snrs]
    combos = [(m, a) for m in cfg["modalities"] for a in (False, True)]

    def one(seed, modality, noise_aug):
        return _finetune_cell(bench, cfg, seed, init="pretrained", protocol=cfg["finetune"]["protocol"],
                              modality=modality, subset="all", noise_aug=noise_aug)

    res = _run_cells("noise-aug", cfg, ("modality", "noise_aug"), combos, metrics, one, on_cell)
    mods = set(cfg["modalities"])
    if {"A", "AV"} <= mods:
        core = [c for c in CORE_NOISY if c.label in labels]
        for c in core:
            av = res.median({"modality": "AV", "noise_aug": False}, c.label)
            a = res.median({"modality": "A", "noise_aug": False}, c.label)
            _verdict(res, f"AV beats A at {c.label}", av < a, f"EER {av:.4f} vs {a:.4f}")
        if core:
            def gap(m):
                cell = {"modality": m, "noise_aug": False}
                return float(np.mean([res.median(cell, c.label) for c in core])) - res.median(cell, "Clean")
            _verdict(res, "AV degrades less than A", gap("AV") < gap("A"),
                     f"noisy-clean gap {gap('AV'):.4f} vs {gap('A'):.4f}")
    if "A" in mods and -10.0 in snrs:
        on = res.median({"modality": "A", "noise_aug": True}, "mean@-10dB")
        off = res.median({"modality": "A", "noise_aug": False}, "mean@-10dB")
        _verdict(res, "noise augmentation helps A at -10 dB", on < off, f"mean EER {on:.4f} vs {off:.4f}")
    return res


def run_visual_tradeoff(cfg, bench, on_cell=None):
    conds, _ = _grid_metrics(cfg)
    metrics = ["Clean"] + (["noisy_mean"] if len(conds) > 1 else [])
    combos = [(v,) for v in cfg["visuals"]]

    def one(seed, visual):
        return _finetune_cell(bench, cfg, seed, init="pretrained", protocol=cfg["finetune"]["protocol"],
                              modality="AV", subset="all", noise_aug=cfg["finetune"]["noise_aug"], visual=visual)

    res = _run_cells("visual-tradeoff", cfg, ("visual",), combos, metrics, one, on_cell)
    if {"lip", "face"} <= set(cfg["visuals"]):
        face = res.median({"visual": "face"}, "Clean")
        lip = res.median({"visual": "lip"}, "Clean")
        _verdict(res, "face at least as good as lip", face <= lip, f"clean EER {face:.4f} vs {lip:.4f}")
    return res


RUNNERS = {
    "label-efficiency": run_label_efficiency,
    "noise-aug": run_noise_aug,
    "protocols": run_protocols,
    "visual-tradeoff": run_visual_tradeoff,
}


def run_design(design, user_config=None, bench=None, on_cell=None):
    cfg = resolve_config(design, user_config)
    return RUNNERS[design](cfg, bench or Workbench(), on_cell)
