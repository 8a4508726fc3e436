"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (4 to 7, 9, 10) run the experiment designs at their
default desk scale and take most of the suite's runtime.
"""

import hashlib
import math
import shutil
import time

import numpy as np
import pytest

import fdcheck
from avspeaker import cli, persist
from avspeaker.dsp import mix_at_snr, rms
from avspeaker.encoder import Encoder, EncoderConfig
from avspeaker.evaluation import SNR_GRID, eer
from avspeaker.experiments import Workbench, run_design
from avspeaker.finetune import FinetuneConfig, finetune
from avspeaker.pretrain import PretrainConfig, pretrain
from avspeaker.synth import NOISE_KINDS, gen_corpus, make_noise
from avspeaker.units import fit_normalized
from test_evaluation import brute_force_eer

SEEDS = [0, 1, 2, 3, 4]
NOISE_GRID = ["Babble@-10dB", "Speech@-10dB", "Babble@-5dB", "Speech@-5dB", "Music@-10dB", "Other@-10dB"]


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    # shared so designs reuse each seed's pretrained lip encoder
    return Workbench(tmp_path_factory.mktemp("bench"))


@pytest.fixture(scope="session")
def noise_aug_result(bench):
    return run_design("noise-aug", {"seeds": SEEDS, "grid": NOISE_GRID}, bench)


def _verdicts(res, prefix=""):
    return [v for v in res.verdicts if v["claim"].startswith(prefix)]


# 1 ---------------------------------------------------------------------------------


def test_c01_gradients(verdict):
    t0 = time.time()
    worst = {name: max(fdcheck.run_case(name, seed) for seed in range(100)) for name in sorted(fdcheck.CASES)}
    worst["encoder"] = max(fdcheck.tiny_encoder_error(seed) for seed in range(3))
    name, err = max(worst.items(), key=lambda kv: kv[1])
    elapsed = time.time() - t0
    verdict(1, "finite-difference gradients", err < fdcheck.TOL and elapsed < 60,
            f"{len(worst)} op families x 100 instances, worst rel err {err:.2e} ({name}), {elapsed:.1f} s")


# 2 ---------------------------------------------------------------------------------


def test_c02_eer_oracle(verdict):
    t0 = time.time()
    hand = [eer([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]), eer([1, 0], [0.5, 0.5]), eer([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9])]
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 60))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        scores = rng.normal(size=n) + labels * rng.uniform(0, 2)
        if i % 3 == 0:
            scores = np.round(scores, 1)  # ties
        worst = max(worst, abs(eer(labels, scores) - brute_force_eer(labels, scores)))
    elapsed = time.time() - t0
    ok = hand == [0.0, 0.5, 1.0] and worst <= 1e-9 and elapsed < 10
    verdict(2, "EER oracle equivalence", ok, f"hand cases {hand}, worst diff {worst:.1e} over 1000 sets, {elapsed:.1f} s")


# 3 ---------------------------------------------------------------------------------


def test_c03_snr_exactness(verdict):
    t0 = time.time()
    c = gen_corpus(6, 2, 2.0, seed=0)
    worst, clipped = 0.0, 0
    for kind in NOISE_KINDS:
        for seed in range(50):
            u = c.utterances[seed % len(c.utterances)]
            noise = make_noise(kind, 2.0, c, exclude_speaker=u.speaker_id, seed=seed)
            for snr in SNR_GRID:
                m = mix_at_snr(u.audio, noise, snr)
                got = 20 * math.log10(rms(u.audio.samples) / rms(m.noise))
                worst = max(worst, abs(got - snr))
                clipped += m.n_clipped
    elapsed = time.time() - t0
    verdict(3, "SNR exactness", worst < 0.01 and elapsed < 30,
            f"5 SNRs x 4 kinds x 50 seeds, worst error {worst:.2e} dB, {clipped} samples clipped, {elapsed:.1f} s")


# 4 ---------------------------------------------------------------------------------


def test_c04_pretraining_learns(verdict):
    t0 = time.time()
    target = 0.8 * math.log(32)
    finals, steps = [], []
    for seed in SEEDS:
        c = gen_corpus(20, 10, 6.0, seed=seed)
        res = pretrain(c.select(("train", "dev")), PretrainConfig(steps=2000, seed=seed, stop_below=target))
        finals.append(float(np.mean([r["loss"] for r in res.log[-20:]])))
        steps.append(len(res.log))
    med = float(np.median(finals))
    elapsed = time.time() - t0
    verdict(4, "pretraining learns", med < target,
            f"median final 20-step loss {med:.3f} < {target:.3f} (losses {np.round(finals, 3).tolist()}, "
            f"steps {steps}), {elapsed / 60:.1f} min")


# 5 ---------------------------------------------------------------------------------


def test_c05_pretraining_helps(bench, verdict):
    t0 = time.time()
    res = run_design("protocols", {"seeds": SEEDS}, bench)
    vs = _verdicts(res, "pretrained beats scratch")
    detail = "; ".join(f"{v['claim']}: {v['detail']}" for v in vs)
    verdict(5, "pretraining helps at 20% utterances", len(vs) == 2 and all(v["pass"] for v in vs),
            f"{detail}, {(time.time() - t0) / 60:.1f} min")


# 6 ---------------------------------------------------------------------------------


def test_c06_av_beats_a_under_noise(noise_aug_result, verdict):
    vs = _verdicts(noise_aug_result, "AV ")
    detail = "; ".join(f"{v['claim']}: {v['detail']}" for v in vs)
    verdict(6, "AV beats A under noise", len(vs) == 5 and all(v["pass"] for v in vs), detail)


# 7 ---------------------------------------------------------------------------------


def test_c07_noise_aug_helps_audio(noise_aug_result, verdict):
    (v,) = _verdicts(noise_aug_result, "noise augmentation")
    verdict(7, "noise-augmented fine-tuning helps A at -10 dB", v["pass"], v["detail"])


# 8 ---------------------------------------------------------------------------------


def test_c08_protocol_contracts(verdict):
    c = gen_corpus(6, 3, 4.5, seed=0)
    train = c.select("train")
    enc = Encoder(EncoderConfig(), seed=0)
    before = enc.param_hash()
    frozen = finetune(enc, train, FinetuneConfig(protocol="frozen", steps=6, batch_size=4, seed=0))
    same = frozen.model.encoder.param_hash(enc.backbone_names()) == before == enc.param_hash()
    simplex = all(r["weight_min"] >= 0 and abs(r["weight_sum"] - 1) <= 1e-12 for r in frozen.log)
    no_grad = all(r["encoder_grad_norm"] == 0.0 for r in frozen.log)

    cls = finetune(enc, train, FinetuneConfig(protocol="cls", steps=6, freeze_steps=3, batch_size=4, seed=0))
    norms = [r["encoder_grad_norm"] for r in cls.log]
    schedule = norms[:3] == [0.0] * 3 and all(n > 0 for n in norms[3:])
    rng = np.random.default_rng(0)
    e = cls.model.encoder
    feats = e.encode(rng.normal(size=(1, 100, 13)), rng.normal(size=(1, 100, e.config.visual_dim)), prepend_cls=True)
    length = all(x.shape[1] == 101 for x in feats.layers)
    verdict(8, "protocol contracts", same and simplex and no_grad and schedule and length,
            f"frozen encoder bit-identical={same}, weights on simplex every step={simplex}, "
            f"frozen grads zero={no_grad}, cls freeze schedule={schedule} ({np.round(norms, 4).tolist()}), "
            f"cls length T+1={length}")


# 9 ---------------------------------------------------------------------------------


def test_c09_visual_tradeoff(bench, verdict):
    t0 = time.time()
    res = run_design("visual-tradeoff", {"seeds": SEEDS}, bench)
    (v,) = _verdicts(res, "face")
    verdict(9, "face preset at least as good as lip", v["pass"], f"{v['detail']}, {(time.time() - t0) / 60:.1f} min")


# 10 --------------------------------------------------------------------------------


def test_c10_speaker_classification(verdict):
    from avspeaker.evaluation import sc_accuracy

    # 11 speakers with one held out for verification leaves a 10-speaker training pool
    c = gen_corpus(11, 10, 6.0, seed=0, test_fraction=0.09)
    train, dev = c.select("train"), c.select("dev")
    res = finetune(None, train, FinetuneConfig(steps=400, seed=0))
    acc = sc_accuracy(res.model, dev)
    n_cls = len(res.model.label_map)
    verdict(10, "closed-set speaker classification", n_cls == 10 and acc > 0.9,
            f"accuracy {acc:.3f} on {len(dev)} dev utterances, {n_cls} classes (chance {1 / n_cls:.2f})")


# 11 --------------------------------------------------------------------------------


def _digest(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _pipeline(root, cfg_path):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0

    corpus = root / "corpus"
    run("gen-corpus", "--speakers", 12, "--utts", 3, "--duration", 4.5, "--test-fraction", 0.42, "--out", corpus)
    run("pretrain", "--corpus", corpus, "--steps", 3, "--out", root / "pt1")
    run("pretrain", "--corpus", corpus, "--steps", 2, "--iteration", 2, "--prev", root / "pt1", "--out", root / "pt2")
    run("finetune", "--corpus", corpus, "--init", root / "pt2", "--protocol", "frozen", "--steps", 3,
        "--out", root / "ft")
    run("evaluate", "--model", root / "ft", "--corpus", corpus, "--grid", "noisy", "--report", root / "ev" / "r.json")
    run("evaluate", "--model", root / "ft", "--corpus", corpus, "--task", "sc", "--report", root / "sc" / "r.json")
    run("experiment", "--design", "visual-tradeoff", "--config", cfg_path, "--out", root / "exp")
    return {d: _digest(root / d) for d in ("corpus", "pt1", "pt2", "ft", "ev", "sc", "exp")}


def test_c11_determinism_and_persistence(tmp_path, verdict):
    import json

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seeds": [0], "corpus": {"speakers": 10, "utts": 2, "duration": 4.5, "test_fraction": 0.5},
        "model": {"d_model": 8, "n_layers": 2, "n_heads": 2, "ffn_mult": 1},
        "pretrain": {"steps": 2, "batch_size": 2}, "finetune": {"steps": 2, "batch_size": 2},
    }))
    # identical flags means identical paths too: reports record the model path
    a = _pipeline(tmp_path / "a", cfg)
    shutil.rmtree(tmp_path / "a")
    b = _pipeline(tmp_path / "a", cfg)
    differing = sorted(k for k in a if a[k] != b[k])

    # every format read back and rewritten gives the same bytes
    root = tmp_path / "a"
    trips = {}
    c = persist.load_corpus(root / "corpus")
    persist.save_corpus(tmp_path / "rt" / "corpus", c)
    trips["corpus"] = _digest(tmp_path / "rt" / "corpus") == a["corpus"]
    enc = persist.load_encoder(root / "pt1" / "encoder.avck")
    persist.save_encoder(tmp_path / "rt" / "e.avck", enc, enc.meta)
    trips["checkpoint"] = (tmp_path / "rt" / "e.avck").read_bytes() == (root / "pt1" / "encoder.avck").read_bytes()
    cb = persist.load_codebook(root / "pt2" / "codebook.avcb")
    persist.save_codebook(tmp_path / "rt" / "c.avcb", cb)
    trips["codebook"] = (tmp_path / "rt" / "c.avcb").read_bytes() == (root / "pt2" / "codebook.avcb").read_bytes()
    model = persist.load_bundle(root / "ft", expected_protocol="frozen")
    info = persist.read_json(root / "ft" / "bundle.json")
    extra = {k: info[k] for k in ("config", "subset", "init")}
    persist.save_bundle(tmp_path / "rt" / "ft", model, extra=extra)
    trips["bundle"] = all((tmp_path / "rt" / "ft" / f).read_bytes() == (root / "ft" / f).read_bytes()
                          for f in ("encoder.avck", "heads.avck", "bundle.json"))
    x = np.random.default_rng(0).normal(size=(50, 4))
    cb2 = fit_normalized(x, k=3, seed=0)
    persist.save_codebook(tmp_path / "rt" / "x.avcb", cb2)
    back = persist.load_codebook(tmp_path / "rt" / "x.avcb")
    trips["codebook values"] = np.array_equal(back.centroids, cb2.centroids)
    failed = sorted(k for k, ok in trips.items() if not ok)
    verdict(11, "determinism and persistence", not differing and not failed,
            f"reruns identical for {sorted(a)} (differing: {differing or 'none'}); "
            f"bitwise round trips: {sorted(trips)} (failed: {failed or 'none'})")
