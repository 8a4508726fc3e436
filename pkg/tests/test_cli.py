import hashlib
import json
import subprocess
import sys

import jsonschema
import pytest

from avspeaker import cli, persist
from avspeaker.experiments import load_schema

CORPUS_ARGS = ["--speakers", "15", "--utts", "3", "--duration", "4.5", "--test-fraction", "0.34", "--seed", "0"]


def digest(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-corpus", *CORPUS_ARGS, "--out", root / "corpus") == 0
    assert run("pretrain", "--corpus", root / "corpus", "--steps", 3, "--out", root / "pt1") == 0
    assert run("finetune", "--corpus", root / "corpus", "--init", root / "pt1", "--steps", 3,
               "--out", root / "ft") == 0
    return root


def test_gen_corpus_stats_and_digest(tmp_path, capsys):
    assert run("gen-corpus", "--speakers", 20, "--utts", 10, "--duration", 4.0, "--out", tmp_path / "a") == 0
    out = capsys.readouterr().out
    assert "utterances: 200" in out
    m = persist.read_json(tmp_path / "a" / "manifest.json")
    assert m["n_utterances"] == 200
    assert run("gen-corpus", "--speakers", 20, "--utts", 10, "--duration", 4.0, "--out", tmp_path / "b") == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_gen_corpus_face_preset(tmp_path, capsys):
    assert run("gen-corpus", "--speakers", 3, "--utts", 1, "--duration", 1.0, "--visual", "face",
               "--out", tmp_path) == 0
    assert "D_v=16" in capsys.readouterr().out
    m = persist.read_json(tmp_path / "manifest.json")
    assert m["config"]["visual"]["dim"] == 16
    assert m["utterances"][0]["visual_dim"] == 16


def test_invalid_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-corpus", "--speakers", "0", "--out", str(tmp_path)])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["finetune", "--corpus", "x", "--init", "none", "--subset", "half", "--out", "y"])
    assert e.value.code == 2
    assert run("gen-corpus", "--speakers", 1, "--out", tmp_path) == 2


def test_pretrain_outputs_and_determinism(work, tmp_path):
    rows = persist.read_csv(work / "pt1" / "train_log.csv")
    assert len(rows) == 3
    assert persist.load_encoder(work / "pt1" / "encoder.avck").meta["iteration"] == 1
    assert run("pretrain", "--corpus", work / "corpus", "--steps", 3, "--out", tmp_path / "again") == 0
    assert digest(tmp_path / "again") == digest(work / "pt1")


def test_iteration_two_dependencies(work, tmp_path):
    assert run("pretrain", "--corpus", work / "corpus", "--iteration", 2, "--steps", 2, "--out", tmp_path / "x") == 3
    assert run("pretrain", "--corpus", work / "corpus", "--iteration", 2, "--prev", tmp_path / "nope",
               "--steps", 2, "--out", tmp_path / "x") == 3
    assert run("pretrain", "--corpus", work / "corpus", "--iteration", 2, "--prev", work / "pt1",
               "--steps", 2, "--out", tmp_path / "pt2") == 0
    assert persist.load_codebook(tmp_path / "pt2" / "codebook.avcb").source == "model_layer(2,2)"
    # an iteration-2 checkpoint cannot seed another iteration 2
    assert run("pretrain", "--corpus", work / "corpus", "--iteration", 2, "--prev", tmp_path / "pt2",
               "--steps", 2, "--out", tmp_path / "y") == 3


def test_missing_corpus_exit_3(tmp_path):
    assert run("pretrain", "--corpus", tmp_path / "missing", "--steps", 1, "--out", tmp_path / "o") == 3
    assert run("finetune", "--corpus", tmp_path / "missing", "--init", "none", "--out", tmp_path / "o") == 3
    assert run("evaluate", "--model", tmp_path / "nomodel", "--corpus", tmp_path, "--report", tmp_path / "r.json") == 3


def test_finetune_bundle(work, tmp_path):
    info = persist.read_json(work / "ft" / "bundle.json")
    assert info["protocol"] == "cls" and info["init"] == "pretrained"
    assert len(persist.read_csv(work / "ft" / "train_log.csv")) == 3
    assert run("finetune", "--corpus", work / "corpus", "--init", work / "pt1", "--steps", 3,
               "--out", tmp_path / "ft") == 0
    assert digest(tmp_path / "ft") == digest(work / "ft")


def test_finetune_speaker_subset(work, tmp_path):
    assert run("finetune", "--corpus", work / "corpus", "--init", "none", "--protocol", "frozen",
               "--subset", "spk:0.5", "--steps", 2, "--out", tmp_path / "half") == 0
    info = persist.read_json(tmp_path / "half" / "bundle.json")
    assert len(info["label_map"]) == 5
    assert info["init"] == "none"


def test_finetune_audio_only_ignores_visual(work, tmp_path):
    # scramble every visual file; an audio-only run must produce the same bundle
    import shutil

    import numpy as np

    from avspeaker.dsp import FrameFeatures

    shutil.copytree(work / "corpus", tmp_path / "scrambled")
    rng = np.random.default_rng(0)
    for p in sorted((tmp_path / "scrambled" / "visual").glob("*.avf")):
        f = persist.frames_from_bytes(p.read_bytes())
        p.write_bytes(persist.frames_to_bytes(FrameFeatures(rng.normal(size=f.frames.shape))))
    for name in ("corpus", "scrambled"):
        src = work / "corpus" if name == "corpus" else tmp_path / "scrambled"
        assert run("finetune", "--corpus", src, "--init", work / "pt1", "--modality", "A", "--steps", 2,
                   "--out", tmp_path / f"ft_{name}") == 0
    a = persist.read_csv(tmp_path / "ft_corpus" / "train_log.csv")
    b = persist.read_csv(tmp_path / "ft_scrambled" / "train_log.csv")
    assert a == b


def test_evaluate_noisy_grid(work, tmp_path, capsys):
    report = tmp_path / "rep.json"
    assert run("evaluate", "--model", work / "ft", "--corpus", work / "corpus", "--grid", "noisy",
               "--report", report) == 0
    doc = persist.read_json(report)
    jsonschema.validate(doc, load_schema("eval_report.schema.json"))
    assert len(doc["conditions"]) == 21
    assert len(list((tmp_path / "rep_scores").glob("*.csv"))) == 21
    rows = persist.read_csv(tmp_path / "rep.csv")
    assert [r["noise"] for r in rows] == ["Babble", "Speech", "Music", "Other", "Clean"]
    scores = persist.read_csv(tmp_path / "rep_scores" / "Clean.csv")
    assert list(scores[0]) == ["utt_a", "utt_b", "label", "score"]
    assert len(scores) == 2 * 15
    capsys.readouterr()
    report2 = tmp_path / "again" / "rep.json"
    assert run("evaluate", "--model", work / "ft", "--corpus", work / "corpus", "--grid", "noisy",
               "--report", report2) == 0
    assert report.read_bytes() == report2.read_bytes()
    assert digest(tmp_path / "rep_scores") == digest(tmp_path / "again" / "rep_scores")
    assert (tmp_path / "rep.csv").read_bytes() == (tmp_path / "again" / "rep.csv").read_bytes()


def test_evaluate_sc_and_protocol_check(work, tmp_path):
    assert run("evaluate", "--model", work / "ft", "--corpus", work / "corpus", "--task", "sc",
               "--report", tmp_path / "sc.json") == 0
    doc = persist.read_json(tmp_path / "sc.json")
    assert doc["task"] == "sc" and 0 <= doc["conditions"]["Clean"]["accuracy"] <= 1
    assert run("evaluate", "--model", work / "ft", "--corpus", work / "corpus", "--protocol", "frozen",
               "--report", tmp_path / "x.json") == 2


def test_experiment_command(tmp_path, capsys):
    cfg = {
        "seeds": [0],
        "corpus": {"speakers": 10, "utts": 2, "duration": 4.5, "test_fraction": 0.5},
        "model": {"d_model": 8, "n_layers": 2, "n_heads": 2, "ffn_mult": 1},
        "pretrain": {"steps": 2, "batch_size": 2},
        "finetune": {"steps": 2, "batch_size": 2},
        "protocols": ["frozen"],
        "subsets": ["utts:0.5"],
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    for out in ("a", "b"):
        assert run("experiment", "--design", "protocols", "--config", tmp_path / "cfg.json",
                   "--out", tmp_path / out) == 0
    printed = capsys.readouterr().out
    assert "pretrained beats scratch (frozen, utts:0.5)" in printed
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["cells", "plot.svg", "table.csv", "table.json"]
    assert len(list((tmp_path / "a" / "cells").glob("*.json"))) == 2
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    rows = persist.read_csv(tmp_path / "a" / "table.csv")
    assert [(r["protocol"], r["init"]) for r in rows] == [("frozen", "none"), ("frozen", "pretrained")]


def test_experiment_bad_config(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"seeds": "all"}))
    assert run("experiment", "--design", "protocols", "--config", tmp_path / "bad.json", "--out", tmp_path) == 2
    (tmp_path / "broken.json").write_text("{")
    assert run("experiment", "--design", "protocols", "--config", tmp_path / "broken.json", "--out", tmp_path) == 2


def test_divergence_exit_4(work, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("loss became NaN")

    monkeypatch.setattr(cli, "finetune", boom)
    assert run("finetune", "--corpus", work / "corpus", "--init", "none", "--out", tmp_path / "o") == 4


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "avspeaker.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-corpus", "pretrain", "finetune", "evaluate", "experiment"):
        assert cmd in out.stdout
