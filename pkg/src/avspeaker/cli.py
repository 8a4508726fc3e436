"""Command line entry point: ``avspeaker <command> ...``.

Exit codes: 0 success, 2 invalid arguments or config, 3 a required input
(corpus, checkpoint, previous iteration) is missing, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import persist
from .evaluation import evaluate_grid, evaluate_sc_grid, gen_trials, scoreset_rows
from .experiments import ConfigError, apply_subset, grid_conditions, load_schema, parse_subset, run_design
from .finetune import HEADS, MODALITIES, PROTOCOLS, FinetuneConfig, finetune
from .plots import experiment_chart
from .pretrain import PretrainConfig, pretrain
from .synth import gen_corpus, visual_preset

log = logging.getLogger("avspeaker")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


class MissingDependency(RuntimeError):
    pass


def _need(path, what):
    p = Path(path)
    if not p.exists():
        raise MissingDependency(f"{what} not found: {p}")
    return p


def _load_corpus(path):
    return persist.load_corpus(_need(Path(path) / "manifest.json", "corpus manifest").parent)


def _checkpoint_path(path, what):
    p = _need(path, what)
    return p / "encoder.avck" if p.is_dir() else p


# --- commands -----------------------------------------------------------------------


def cmd_gen_corpus(args):
    c = gen_corpus(args.speakers, args.utts, args.duration, vcfg=visual_preset(args.visual), seed=args.seed,
                   test_fraction=args.test_fraction)
    persist.save_corpus(args.out, c)
    splits = {s: len(c.select(s)) for s in ("train", "dev", "test")}
    print(f"speakers: {len(c.speakers)}  utterances: {len(c)}  ({', '.join(f'{k} {v}' for k, v in splits.items())})")
    print(f"duration: {args.duration:g} s each, {len(c) * args.duration / 60:.1f} min total")
    print(f"visual: {args.visual} (D_v={c.visual_config.dim}, identity gain {c.visual_config.identity_gain:g})")
    return 0


def cmd_pretrain(args):
    prev = None
    if args.iteration >= 2:
        if args.prev is None:
            raise MissingDependency(f"iteration {args.iteration} needs --prev pointing at an "
                                    f"iteration-{args.iteration - 1} checkpoint")
        ck = _checkpoint_path(args.prev, "previous-iteration checkpoint")
        prev = persist.load_encoder(ck)
        got = prev.meta.get("iteration")
        if got != args.iteration - 1:
            raise MissingDependency(f"{ck} is from iteration {got}, expected {args.iteration - 1}")
    c = _load_corpus(args.corpus)
    cfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size, iteration=args.iteration,
                         noise_aug=args.noise_aug, seed=args.seed, stop_below=args.stop_below)
    res = pretrain(c.select(("train", "dev")), cfg, prev_encoder=prev, out_dir=args.out)
    first, last = res.log[0]["loss"], res.log[-1]["loss"]
    print(f"pretrain iteration {args.iteration}: {len(res.log)} steps, loss {first:.4f} -> {last:.4f} "
          f"(last-100 mean {res.final_loss():.4f}); targets from {res.codebook.source}")
    print(f"checkpoint: {Path(args.out) / 'encoder.avck'}")
    return 0


def cmd_finetune(args):
    c = _load_corpus(args.corpus)
    enc = None
    if args.init != "none":
        enc = persist.load_encoder(_checkpoint_path(args.init, "initial checkpoint"))
    train = apply_subset(c, args.subset, args.seed).select("train")
    cfg = FinetuneConfig(protocol=args.protocol, modality=args.modality, head=args.head, steps=args.steps,
                         batch_size=args.batch_size, freeze_steps=args.freeze_steps, noise_aug=args.noise_aug,
                         seed=args.seed)
    res = finetune(enc, train, cfg)
    out = Path(args.out)
    persist.save_bundle(out, res.model, extra={"config": cfg.to_dict(), "subset": args.subset,
                                               "init": args.init if args.init == "none" else "pretrained"})
    persist.write_log_csv(out / "train_log.csv", res.log)
    print(f"finetune {args.protocol}/{args.modality} on {len(train)} utterances, "
          f"{len(res.model.label_map)} speakers; train acc {res.train_accuracy():.3f}")
    print(f"bundle: {out}")
    return 0


def _write_report(report, out):
    out = Path(out)
    doc = report.to_dict()
    jsonschema.validate(doc, load_schema("eval_report.schema.json"))
    persist.write_json(out, doc)
    metric = "eer" if report.task == "sv" else "accuracy"
    persist.write_log_csv(out.with_suffix(".csv"), report.table_rows(metric))
    return out


def cmd_evaluate(args):
    model = persist.load_bundle(_need(args.model, "model bundle"), expected_protocol=args.protocol)
    c = _load_corpus(args.corpus)
    conds = grid_conditions(args.grid)
    meta = {"model": str(args.model), "protocol": model.protocol, "modality": model.modality, "seed": args.seed}
    out = Path(args.report)
    if args.task == "sv":
        test = c.select("test")
        trials = gen_trials(test, args.seed)
        score_dir = out.parent / f"{out.stem}_scores"

        def dump(cond, ss):
            persist.write_log_csv(score_dir / f"{cond.label}.csv", scoreset_rows(ss))

        report = evaluate_grid(model, test, trials, conds, args.seed, meta=meta, on_scores=dump)
        metric = "eer"
    else:
        # closed set: only speakers the classifier was trained on
        dev = [u for u in c.select("dev") if u.speaker_id in model.label_map]
        if not dev:
            raise ConfigError("the corpus has no dev utterances from the model's training speakers")
        report = evaluate_sc_grid(model, dev, conds, args.seed, noise_utterances=c.select("dev"), meta=meta)
        metric = "accuracy"
    _write_report(report, out)
    for label, r in report.results.items():
        print(f"{label:>14}  {metric} {r[metric]:.4f}  (n={r['n_trials']})")
    return 0


def cmd_experiment(args):
    try:
        user = json.loads(Path(args.config).read_text()) if args.config else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells_dir = out / "cells"

    def save_cell(cell):
        name = "_".join(f"{k}-{v}" for k, v in cell["factors"].items()).replace(":", "")
        persist.write_json(cells_dir / f"{name}.json", cell)

    res = run_design(args.design, user, on_cell=save_cell)
    persist.write_json(out / "table.json", res.to_dict())
    persist.write_log_csv(out / "table.csv", res.rows())
    persist.write_atomic(out / "plot.svg", experiment_chart(res).encode())
    for row in res.rows():
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    for v in res.verdicts:
        print(f"[{'PASS' if v['pass'] else 'FAIL'}] {v['claim']}: {v['detail']}")
    return 0


# --- parser -------------------------------------------------------------------------


def _subset(text):
    try:
        parse_subset(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def build_parser():
    p = argparse.ArgumentParser(prog="avspeaker", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic audio-visual corpus")
    g.add_argument("--speakers", type=_positive(int), default=20)
    g.add_argument("--utts", type=_positive(int), default=10)
    g.add_argument("--duration", type=_positive(float), default=6.0, help="seconds per utterance")
    g.add_argument("--visual", choices=("lip", "face"), default="lip")
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="masked cluster-prediction pretraining")
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=_positive(int), default=2000)
    t.add_argument("--batch-size", type=_positive(int), default=4)
    t.add_argument("--iteration", type=int, choices=(1, 2), default=1)
    t.add_argument("--prev", help="iteration-1 checkpoint (file or directory), required for --iteration 2")
    t.add_argument("--noise-aug", action="store_true")
    t.add_argument("--stop-below", type=float, help="stop once the 20-step mean loss drops below this")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune speaker embeddings")
    f.add_argument("--corpus", required=True)
    f.add_argument("--init", required=True, help="pretrained checkpoint, or 'none' to train from scratch")
    f.add_argument("--protocol", choices=PROTOCOLS, default="cls")
    f.add_argument("--modality", choices=MODALITIES, default="AV")
    f.add_argument("--head", choices=HEADS, default="xvector")
    f.add_argument("--subset", type=_subset, default="all", help="all | utts:F | spk:F")
    f.add_argument("--steps", type=_positive(int), default=2000)
    f.add_argument("--batch-size", type=_positive(int), default=8)
    f.add_argument("--freeze-steps", type=int)
    f.add_argument("--noise-aug", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="output bundle directory")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="speaker verification / classification")
    e.add_argument("--model", required=True, help="bundle directory")
    e.add_argument("--corpus", required=True)
    e.add_argument("--task", choices=("sv", "sc"), default="sv")
    e.add_argument("--grid", choices=("clean", "noisy"), default="clean")
    e.add_argument("--protocol", choices=PROTOCOLS, help="refuse bundles trained with another protocol")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True, help="report JSON path; a table CSV is written next to it")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="multi-seed factorial study")
    x.add_argument("--design", required=True, choices=("label-efficiency", "noise-aug", "protocols",
                                                       "visual-tradeoff"))
    x.add_argument("--config", help="JSON config (see docs/experiment.schema.json)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, persist.ProtocolMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependency as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
