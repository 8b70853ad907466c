"""Command line entry point.

Every subcommand works inside one output directory (``--out``, default the
config's ``out_dir``); checkpoints written by earlier subcommands are reused.
Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, RestyleError

COMMANDS = {
    "gen-build": "build the frozen generator and write its checkpoint",
    "data-make": "synthesise the dataset and write it as .npy arrays",
    "train": "train one encoder (--scheme restyle|single_pass|naive|fpn|styled)",
    "invert": "invert test images with an encoder scheme (--scheme, --steps)",
    "optimize": "latent optimisation from the average latent (--steps iterations)",
    "hybrid": "encoder inversion followed by --steps optimisation iterations",
    "evaluate": "run every configured scheme on the test split",
    "analyze": "per-step analysis tables plus quality/time curves",
    "bootstrap": "stylized fine-tune, then bootstrapped versus average-start inversion",
    "report": "evaluate the acceptance checks and write report.md",
    "run": "all of the above in order",
}

INVERT_SCHEMES = ("restyle", "single_pass", "naive", "fpn")


def build_parser():
    epilog = "commands:\n" + "\n".join(f"  {name:<10} {desc}" for name, desc in COMMANDS.items())
    parser = argparse.ArgumentParser(
        prog="restyle", description="Iterative residual inversion testbed.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", metavar="command", help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--steps", type=int, help="inference steps, or optimisation iterations")
    parser.add_argument("--scheme", help="scheme or encoder kind for train/invert")
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        s = args.seed
        cfg.generator.seed = cfg.data.seed = cfg.encoder.seed = cfg.train.seed = s
        cfg.metric_seed = cfg.bootstrap.finetune_seed = s
    if args.steps is not None and args.steps < 0:
        raise ConfigurationError("--steps must be non-negative")
    if args.out:
        cfg.out_dir = args.out
    return cfg.validate()


def _cmd_gen_build(ws, args):
    g = ws.generator()
    print(f"generator checksum {g.checksum()[:16]} -> {ws.root / 'checkpoints' / 'generator.zip'}")


def _cmd_data_make(ws, args):
    data = ws.dataset()
    out = ws.root / "data"
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", data.images)
    if data.latents is not None:
        np.save(out / "latents.npy", data.latents)
    (out / "index.json").write_text(json.dumps(
        {"ids": data.ids, "splits": {k: v.tolist() for k, v in data.splits.items()},
         **ws.provenance()}, sort_keys=True))
    print(f"{len(data)} items -> {out}")


def _cmd_train(ws, args):
    from .pipeline import ENCODER_KINDS

    kind = args.scheme or "restyle"
    if kind not in ENCODER_KINDS:
        raise ConfigurationError(f"--scheme for train must be one of {ENCODER_KINDS}")
    if args.steps is not None:
        ws.cfg.train.n_steps = args.steps
        ws.cfg.validate()
    e = ws.encoder(kind)
    print(f"{kind} encoder checksum {e.checksum()[:16]}")


def _write(ws, scheme, traces, ids):
    from .traces import save_trace

    for image_id, tr in zip(ids, traces):
        save_trace(tr, ws.root / "traces" / scheme / image_id, extra_meta=ws.provenance())
    final = np.mean([tr.final.losses["l2"] for tr in traces])
    print(f"{scheme}: {len(traces)} traces of {len(traces[0].steps)} records, mean final l2 {final:.5f}")


def _cmd_invert(ws, args):
    from .schemes import naive_iterate_batch, restyle_infer_batch, single_pass_infer_batch

    scheme = args.scheme or "restyle"
    if scheme not in INVERT_SCHEMES:
        raise ConfigurationError(f"--scheme for invert must be one of {INVERT_SCHEMES}")
    steps = args.steps if args.steps is not None else ws.cfg.train.n_steps
    test = ws.test_set(ws.cfg.evaluation.n_images)
    g = ws.generator()
    if scheme == "single_pass":
        traces = single_pass_infer_batch(ws.encoder("single_pass"), g, test.images, ws.bundle)
    elif scheme == "naive":
        traces = naive_iterate_batch(ws.encoder("naive"), g, test.images, steps, ws.bundle)
    else:
        if steps < 1:
            raise ConfigurationError("--steps must be >= 1 for iterative inversion")
        traces = restyle_infer_batch(ws.encoder(scheme), g, test.images, steps, ws.bundle)
    _write(ws, scheme, traces, test.ids)


def _cmd_optimize(ws, args):
    from .schemes import optimize_latent_batch

    ev = ws.cfg.evaluation
    test = ws.test_set(max(1, ev.n_opt_images))
    iters = args.steps if args.steps is not None else ev.opt_iters
    traces = optimize_latent_batch(ws.generator(), test.images, None, iters, ev.opt_lr,
                                   record_every=ev.record_every, bundle=ws.bundle)
    _write(ws, "optimization", traces, test.ids)


def _cmd_hybrid(ws, args):
    from .schemes import hybrid_infer_batch

    ev = ws.cfg.evaluation
    test = ws.test_set(max(1, ev.n_opt_images))
    iters = args.steps if args.steps is not None else ev.hybrid_iters
    traces = hybrid_infer_batch(ws.encoder("restyle"), ws.generator(), test.images, iters,
                                n_enc_steps=ws.cfg.train.n_steps, lr=ev.opt_lr,
                                record_every=ev.record_every, bundle=ws.bundle)
    _write(ws, "hybrid", traces, test.ids)


def _cmd_stage(name):
    def run(ws, args):
        from . import pipeline

        if args.scheme:
            ws.cfg.schemes = [s.strip() for s in args.scheme.split(",")]
            ws.cfg.validate()
        if name in ("analyze", "report"):
            pipeline.stage_evaluate(ws)
        if name == "report":
            pipeline.stage_analyze(ws)
            if "bootstrap" in ws.cfg.schemes:
                pipeline.stage_bootstrap(ws)
            pipeline.stage_timing(ws)
        getattr(pipeline, f"stage_{name}")(ws)
        print(f"{name} done -> {ws.root}")
    return run


def _cmd_run(ws, args):
    from .pipeline import run_experiment

    if args.scheme:
        ws.cfg.schemes = [s.strip() for s in args.scheme.split(",")]
    done = run_experiment(ws.cfg, ws.root)
    for r in done.results.get("criteria", []):
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.number:2d} {r.name}: {r.detail}")


HANDLERS = {
    "gen-build": _cmd_gen_build, "data-make": _cmd_data_make, "train": _cmd_train,
    "invert": _cmd_invert, "optimize": _cmd_optimize, "hybrid": _cmd_hybrid,
    "evaluate": _cmd_stage("evaluate"), "analyze": _cmd_stage("analyze"),
    "bootstrap": _cmd_stage("bootstrap"), "report": _cmd_stage("report"), "run": _cmd_run,
}


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command not in HANDLERS:
        parser.print_usage(sys.stderr)
        print(f"restyle: unknown command {args.command!r}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .pipeline import StageError, Workspace, set_single_threaded

    try:
        cfg = _load(args)
        set_single_threaded()
        ws = Workspace.open(cfg, Path(cfg.out_dir))
        HANDLERS[args.command](ws, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, ConfigurationError) else 1
    except RestyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
