"""Single entry point wiring the modules into reproducible pipelines.

Subcommands: synth, preprocess, train, eval, visualize.
Exit codes: 0 success, 1 validation error, 2 internal error.
Relative output paths resolve against $GAZEVLM_OUT_ROOT when it is set.
"""

import argparse
import logging
import os
import sys
import traceback
from collections import Counter

from .errors import GazeVlmError
from .evaluation import evaluate, render_report, report_json_line
from .ingest import load_manifest, parse_session
from .model import load_model
from .supervision import (
    PatchGrid,
    SupervisionRecord,
    build_supervision,
    write_supervision_file,
)
from .synth import make_scenario, generate_corpus
from .training import build_dataset, parse_train_config, train_stage1, train_stage2, write_train_config
from .viz import visualize_session

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INTERNAL = 2


def resolve_out(path):
    root = os.environ.get("GAZEVLM_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _session_dirs(sessions_dir):
    manifest = os.path.join(sessions_dir, "manifest.jsonl")
    if os.path.exists(manifest):
        return [sid for sid, _ in load_manifest(manifest)]
    found = sorted(
        name for name in os.listdir(sessions_dir)
        if os.path.isdir(os.path.join(sessions_dir, name))
    )
    return found


def cmd_synth(args):
    scenario = make_scenario(args.scenario, n_samples=args.n, seed=args.seed, G=args.grid_g)
    out_dir = resolve_out(args.out)
    entries = generate_corpus(scenario, out_dir)
    counts = Counter(split for _, split in entries)
    print(f"wrote {len(entries)} sessions to {out_dir} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return EXIT_OK


def cmd_preprocess(args):
    sigma = args.sigma if args.sigma is not None else 1.0 / args.grid_g
    grid = PatchGrid(args.grid_g)
    names = _session_dirs(args.sessions)
    if not names:
        raise GazeVlmError(f"no session directories under {args.sessions}")
    records = []
    failures = 0
    k_hist = [Counter() for _ in range(4)]
    for name in names:
        session_dir = os.path.join(args.sessions, name)
        try:
            session = parse_session(session_dir)
            sup = build_supervision(session, grid, sigma, args.k)
        except GazeVlmError as exc:
            print(f"error: {name}: {exc}", file=sys.stderr)
            failures += 1
            continue
        for i, k_i in enumerate(sup.k_values):
            k_hist[i][k_i] += 1
        records.append(
            SupervisionRecord(
                sample_id=name,
                labels=session.labels,
                supervision=sup,
                grid_G=args.grid_g,
                k=args.k,
                sigma_norm=sigma,
            )
        )
    out_path = resolve_out(args.out)
    write_supervision_file(out_path, records)
    print(f"wrote {len(records)} supervision records to {out_path}")
    for i, hist in enumerate(k_hist, start=1):
        shown = " ".join(f"{k}:{c}" for k, c in sorted(hist.items()))
        print(f"K_{i} histogram: {shown}")
    return EXIT_VALIDATION if failures else EXIT_OK


def cmd_train(args):
    overrides = {
        "stage": args.stage,
        "seed": args.seed,
        "supervision_variant": args.variant,
        "init_from": args.init_from,
        "steps": args.steps,
    }
    config = parse_train_config(args.config, **overrides)
    out_dir = resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    samples = build_dataset(
        config.corpus_dir,
        supervision_file=config.supervision_file if config.stage == 1 else None,
        split="train",
        variant=config.supervision_variant,
        seed=config.seed,
    )
    if config.stage == 1:
        _, history = train_stage1(samples, config, out_dir=out_dir)
    else:
        _, history = train_stage2(samples, config, config.init_from, out_dir=out_dir)
    write_train_config(os.path.join(out_dir, "config.txt"), config)
    last = history[-1] if history else None
    shown = "n/a"
    if last is not None:
        shown = f"l_gaze={last.l_gaze:.4f}" if config.stage == 1 else f"l_combined={last.l_combined:.4f}"
    print(f"stage {config.stage} done ({config.steps} steps, {shown}); "
          f"checkpoint at {os.path.join(out_dir, 'checkpoint.ckpt')}")
    return EXIT_OK


def cmd_eval(args):
    model, manifest = load_model(args.ckpt)
    print(f"checkpoint: stage={manifest.get('stage')} "
          f"variant={manifest.get('supervision_variant')} seed={manifest.get('seed')} "
          f"steps={manifest.get('steps')}")
    samples = build_dataset(args.data, split=args.split)
    report = evaluate(
        model,
        samples,
        mode=args.mode,
        expected_variant=args.expect_variant,
        manifest=manifest,
    )
    print(render_report(report))
    if args.out:
        out_path = resolve_out(args.out)
        with open(out_path, "a", encoding="utf-8", newline="\n") as f:
            f.write(report_json_line(report) + "\n")
    violated = []
    if args.min_macro_auroc is not None:
        if report.macro_auroc is None or report.macro_auroc < args.min_macro_auroc:
            violated.append(f"macro_auroc < {args.min_macro_auroc}")
    if args.min_accuracy is not None and report.accuracy < args.min_accuracy:
        violated.append(f"accuracy < {args.min_accuracy}")
    if args.min_macro_f1 is not None and report.macro_f1 < args.min_macro_f1:
        violated.append(f"macro_f1 < {args.min_macro_f1}")
    if violated:
        print("threshold violations: " + "; ".join(violated), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_visualize(args):
    sigma = args.sigma
    paths = visualize_session(args.session, resolve_out(args.out), grid_G=args.grid_g, sigma_norm=sigma)
    for path in paths:
        print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazevlm",
        description="Gaze-supervised toy VLM pipeline: synthesize sessions, build "
                    "patch-index gaze supervision, train the two stages, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session corpus")
    p.add_argument("--scenario", required=True, choices=("separable", "order_sensitive", "dropout_heavy"))
    p.add_argument("--n", type=int, required=True, help="number of sessions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-g", type=int, default=8)
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="sessions -> gaze supervision file")
    p.add_argument("--sessions", required=True, help="directory of session_<id>/ directories")
    p.add_argument("--out", required=True, help="supervision .jsonl path")
    p.add_argument("--grid-g", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--sigma", type=float, default=None, help="default 1/G")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--variant", choices=("original", "random", "shuffled"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--init-from", default=None, help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="corpus directory (with manifest.jsonl)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mode", default="classifier_head", choices=("classifier_head", "parsed_text"))
    p.add_argument("--expect-variant", default=None)
    p.add_argument("--out", default=None, help="append the JSON report line here")
    p.add_argument("--min-macro-auroc", type=float, default=None)
    p.add_argument("--min-accuracy", type=float, default=None)
    p.add_argument("--min-macro-f1", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="per-bin gaze heatmap overlays for one session")
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-g", type=int, default=16)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GazeVlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
