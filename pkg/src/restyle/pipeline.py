"""End-to-end experiment orchestration.

An output directory doubles as a workspace: every stage reuses checkpoints it
finds there and produces the missing ones, so CLI subcommands compose and
``run_experiment`` simply runs them all in order.

Files under ``summary/`` depend only on (config, seeds) and reproduce bitwise
in single-threaded mode. Wall-clock measurements go under ``timing/``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .bootstrap import alignment_probe, bootstrap_invert_batch
from .checkpoint import load_encoder, load_generator, save_encoder, save_generator
from .config import ExperimentConfig, dump_config
from .data import make_dataset
from .encoder import build_encoder, encode_nchw
from .errors import RestyleError
from .generator import build_generator, finetune_stylized
from .losses import LossBundle
from .schemes import (
    hybrid_infer_batch, naive_iterate_batch, optimize_latent_batch,
    restyle_infer_batch, restyle_train, single_pass_infer_batch,
)
from .traces import hybrid_records, save_trace, trace_records, write_jsonl

log = logging.getLogger(__name__)

ENCODER_KINDS = ("restyle", "single_pass", "naive", "fpn", "styled")


class StageError(RestyleError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def set_single_threaded():
    torch.set_num_threads(1)


@dataclass
class Workspace:
    cfg: ExperimentConfig
    root: Path
    _g: object = None
    _g_styled: object = None
    _data: object = None
    _bundle: object = None
    encoders: dict = field(default_factory=dict)
    train_logs: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    @classmethod
    def open(cls, cfg, root=None):
        root = Path(root or cfg.out_dir)
        root.mkdir(parents=True, exist_ok=True)
        ws = cls(cfg, root)
        dump_config(cfg, root / "config.yaml")
        (root / "provenance.json").write_text(json.dumps(ws.provenance(), sort_keys=True, indent=1))
        return ws

    def provenance(self):
        return {"config_hash": self.cfg.config_hash(), "seeds": self.cfg.seeds()}

    def header(self):
        p = self.provenance()
        seeds = " ".join(f"{k}={v}" for k, v in sorted(p["seeds"].items()))
        return f"# config_hash={p['config_hash']} seeds: {seeds}"

    def path(self, *parts):
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- lazily built artifacts ------------------------------------------------

    @property
    def bundle(self):
        if self._bundle is None:
            self._bundle = LossBundle(seed=self.cfg.metric_seed, weights=self.cfg.train.loss_weights)
        return self._bundle

    def generator(self):
        if self._g is None:
            ckpt = self.root / "checkpoints" / "generator.zip"
            if ckpt.exists():
                self._g = load_generator(ckpt)
            else:
                gs = self.cfg.generator
                self._g = build_generator(gs.seed, gs.k, gs.d, gs.resolution, channels=tuple(gs.channels),
                                          avg_samples=gs.avg_samples)
                save_generator(self._g, self.path("checkpoints", "generator.zip"))
        return self._g

    def styled_generator(self):
        if self._g_styled is None:
            ckpt = self.root / "checkpoints" / "generator_styled.zip"
            if ckpt.exists():
                self._g_styled = load_generator(ckpt)
            else:
                b = self.cfg.bootstrap
                self._g_styled = finetune_stylized(self.generator(), b.transform, b.finetune_steps, b.finetune_seed)
                save_generator(self._g_styled, self.path("checkpoints", "generator_styled.zip"))
        return self._g_styled

    def dataset(self):
        if self._data is None:
            self._data = make_dataset(self.generator(), self.cfg.data)
        return self._data

    def test_set(self, limit):
        return self.dataset().subset("test", limit)

    def encoder(self, kind):
        if kind not in self.encoders:
            ckpt = self.root / "checkpoints" / f"encoder_{kind}.zip"
            if ckpt.exists():
                self.encoders[kind] = load_encoder(ckpt)
            else:
                self.encoders[kind] = self._train(kind)
                save_encoder(self.encoders[kind], self.path("checkpoints", f"encoder_{kind}.zip"))
        return self.encoders[kind]

    def _train_config(self, kind):
        base = self.cfg.train
        tc = replace(base, loss_weights=dict(base.loss_weights))
        bl = self.cfg.baselines
        if kind == "single_pass":
            tc.n_steps = 1
            if bl.single_pass_budget == "updates":
                tc.total_iterations = base.total_iterations * base.n_steps
        elif kind == "naive":
            tc.n_steps = 1
            tc.total_iterations = bl.naive_iterations
        elif kind == "fpn" and bl.fpn_iterations is not None:
            tc.total_iterations = bl.fpn_iterations
        elif kind == "styled":
            tc.total_iterations = self.cfg.bootstrap.train_iterations
        return tc

    def _train(self, kind):
        if kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}")
        g = self.generator()
        variant = "fpn" if kind == "fpn" else self.cfg.encoder.variant
        channels = 3 if kind == "naive" else 6
        data = self.dataset().subset("train")
        target_g = g
        if kind == "styled":
            target_g = self.styled_generator()
            data = data.with_targets(self.cfg.bootstrap.transform)
        e0 = build_encoder(variant, channels, target_g, self.cfg.encoder.seed)
        tc = self._train_config(kind)
        start = time.perf_counter()

        def progress(it, rec):
            if (it + 1) % 50 == 0:
                log.info("train %s: iteration %d/%d, loss %.5f", kind, it + 1, tc.total_iterations, rec["loss"])

        enc, train_log = restyle_train(e0, target_g, data, tc, bundle=self.bundle, progress=progress)
        self.timing[f"train_{kind}_s"] = time.perf_counter() - start
        enc.meta["role"] = kind
        self.train_logs[kind] = train_log
        write_jsonl(train_log, self.path("logs", f"train_{kind}.jsonl"), header=self.provenance())
        log.info("trained %s encoder (%d iterations)", kind, tc.total_iterations)
        return enc


# -- stages -------------------------------------------------------------------

def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except RestyleError as exc:
        raise StageError(name, exc) from exc


def stage_evaluate(ws):
    cfg = ws.cfg
    ev = cfg.evaluation
    g = ws.generator()
    test = ws.test_set(ev.n_images)
    xs = test.images
    schemes = set(cfg.schemes)
    if "restyle" in schemes:
        ws.traces["restyle"] = restyle_infer_batch(ws.encoder("restyle"), g, xs, ev.infer_steps, ws.bundle)
    if "single_pass" in schemes:
        ws.traces["single_pass"] = single_pass_infer_batch(ws.encoder("single_pass"), g, xs, ws.bundle)
    if "naive" in schemes:
        ws.traces["naive"] = naive_iterate_batch(ws.encoder("naive"), g, xs, ev.infer_steps, ws.bundle)
    if "fpn" in schemes:
        ws.traces["fpn"] = restyle_infer_batch(ws.encoder("fpn"), g, xs, ev.infer_steps, ws.bundle)
    n_opt = min(ev.n_opt_images, len(xs))
    if "optimization" in schemes and n_opt:
        ws.traces["optimization"] = optimize_latent_batch(
            g, xs[:n_opt], None, ev.opt_iters, ev.opt_lr, record_every=ev.record_every, bundle=ws.bundle)
    if "hybrid" in schemes and n_opt:
        ws.traces["hybrid"] = hybrid_infer_batch(
            ws.encoder("restyle"), g, xs[:n_opt], ev.hybrid_iters, n_enc_steps=cfg.train.n_steps,
            lr=ev.opt_lr, record_every=ev.record_every, bundle=ws.bundle)
    _write_traces(ws, test)
    _write_records(ws, test)
    _write_metric_summary(ws, test)


def _write_traces(ws, test):
    for scheme, traces in ws.traces.items():
        for image_id, tr in zip(test.ids, traces):
            save_trace(tr, ws.root / "traces" / scheme / image_id, extra_meta=ws.provenance())


def _records_for(ws, test):
    records = []
    for scheme in sorted(ws.traces):
        for image_id, tr in zip(test.ids, ws.traces[scheme]):
            if scheme == "hybrid":
                records.extend(hybrid_records(tr, image_id))
            else:
                records.extend(trace_records(tr, image_id, scheme))
    return records


def _write_records(ws, test):
    records = _records_for(ws, test)
    ws.results["records"] = records
    write_jsonl(records, ws.path("timing", "records.jsonl"), header=ws.provenance())


def _csv_text(header, columns, rows):
    buf = io.StringIO()
    buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def latent_distances(traces, true_latents):
    """(n_images, T) array of ||w_t - w*||_2."""
    return np.array([[np.linalg.norm(s.w.astype(np.float64) - wt.astype(np.float64)) for s in tr.steps]
                     for tr, wt in zip(traces, true_latents)])


def delta_norms(traces):
    """(n_images, T) array of ||delta_t||_2 for t = 1..T (frobenius norm over the k x d residual)."""
    return np.array([[np.linalg.norm(s.delta.astype(np.float64)) for s in tr.steps[1:]] for tr in traces])


def _write_metric_summary(ws, test):
    rows = []
    for scheme in sorted(ws.traces):
        traces = ws.traces[scheme]
        curves = {m: np.mean([tr.loss_curve(m) for tr in traces], axis=0)
                  for m in ("l2", "perceptual", "similarity")}
        dist = None
        if test.latents is not None and scheme not in ("optimization", "hybrid"):
            dist = latent_distances(traces, test.latents[:len(traces)]).mean(axis=0)
        iters = [s.iteration if s.phase != "encoder" else t for t, s in enumerate(traces[0].steps)]
        for t in range(len(curves["l2"])):
            rows.append((scheme, traces[0].steps[t].phase, iters[t], curves["l2"][t], curves["perceptual"][t],
                         curves["similarity"][t], "" if dist is None else dist[t]))
    text = _csv_text(ws.header(), ["scheme", "phase", "step", "l2", "perceptual", "similarity", "latent_dist"], rows)
    ws.path("summary", "metrics.csv").write_text(text)


def stage_analyze(ws):
    g = ws.generator()
    if "restyle" not in ws.traces:
        stage_evaluate(ws)
    restyle = ws.traces["restyle"]
    maps_global = analysis.image_diff_maps(restyle, "global")
    maps_step = analysis.image_diff_maps(restyle, "per_step")
    table = analysis.latent_change_table(restyle, g)
    ws.results.update(diff_global=maps_global, diff_per_step=maps_step, latent_table=table)
    rows = [(m.transition, m.mean, m.max) for m in maps_global]
    ws.path("summary", "diffmaps_global.csv").write_text(
        _csv_text(ws.header(), ["transition", "mean", "max"], rows))
    rows = [(m.transition, m.mean, m.max) for m in maps_step]
    ws.path("summary", "diffmaps_per_step.csv").write_text(
        _csv_text(ws.header(), ["transition", "mean", "max"], rows))
    ws.path("summary", "latent_table.csv").write_text(
        _csv_text(ws.header(), ["style_index", "group", "step", "v"], table.rows()))
    dn = delta_norms(restyle).mean(axis=0)
    ws.path("summary", "delta_norms.csv").write_text(
        _csv_text(ws.header(), ["step", "mean_delta_norm"], [(t + 1, v) for t, v in enumerate(dn)]))
    analysis.save_heatmaps(maps_global, ws.path("figures", "diffmaps_global.png"))
    analysis.save_heatmaps(maps_step, ws.path("figures", "diffmaps_per_step.png"))
    records = ws.results.get("records") or _records_for(ws, ws.test_set(ws.cfg.evaluation.n_images))
    curves = analysis.quality_time_curves(_curve_records(ws, records), "l2")
    ws.results["curves"] = curves
    ws.path("timing", "curves.csv").write_text(ws.header() + "\n" + analysis.curves_csv(curves))
    analysis.plot_curves(curves, ws.path("figures", "quality_time.png"), title="l2 vs time per image")


def _curve_records(ws, records):
    # encoder points are shown up to the training step count, matching the inference default
    n = ws.cfg.train.n_steps
    out = []
    for r in records:
        if r["scheme"] in ("restyle", "fpn", "naive") and r["step"] > n:
            continue
        if r["scheme"] in ("restyle", "fpn", "naive", "single_pass") and r["step"] == 0:
            continue
        out.append(r)
    return out


def stage_bootstrap(ws):
    b = ws.cfg.bootstrap
    g, gs = ws.generator(), ws.styled_generator()
    probe = alignment_probe(g, gs, b.probe_samples, ws.cfg.data.seed + 101)
    ws.results["alignment"] = probe
    ws.path("summary", "alignment.csv").write_text(_csv_text(
        ws.header(), ["paired_mean", "shuffled_mean", "standard_error", "margin_in_se", "passed"],
        [(probe.paired_mean, probe.shuffled_mean, probe.standard_error, probe.margin_in_se, int(probe.passed))]))
    test = ws.test_set(b.n_images)
    from .generator import apply_transform

    targets = apply_transform(b.transform, test.images)
    e_base, e_styled = ws.encoder("restyle"), ws.encoder("styled")
    rows, results = [], {}
    for mode in ("average", "bootstrapped"):
        res = bootstrap_invert_batch(e_base, e_styled, g, gs, test.images, b.n_steps, mode, bundle=ws.bundle)
        results[mode] = res
        outs = np.stack([r.styled_trace.images() for r in res])  # (n, T, H, W, 3)
        for t in range(outs.shape[1]):
            y = torch.from_numpy(outs[:, t])
            m = ws.bundle.evaluate(y, torch.from_numpy(targets))
            for i, image_id in enumerate(test.ids):
                rows.append((image_id, mode, t, float(m["l2"][i]), float(m["similarity"][i])))
        for image_id, r in zip(test.ids, res):
            save_trace(r.styled_trace, ws.root / "traces" / f"styled_{mode}" / image_id, ws.provenance())
            if r.base_trace is not None:
                save_trace(r.base_trace, ws.root / "traces" / "styled_base" / image_id, ws.provenance())
    ws.results["bootstrap"] = results
    ws.results["bootstrap_rows"] = rows
    ws.path("summary", "bootstrap.csv").write_text(_csv_text(
        ws.header(), ["image_id", "init_mode", "step", "l2_to_target", "similarity"], rows))


def median_latency(e, x, repeats):
    """Median wall time of one encoder forward on ``x`` (NCHW), over ``repeats`` runs."""
    times = []
    with torch.no_grad():
        encode_nchw(e, x)  # warm-up
        for _ in range(repeats):
            start = time.perf_counter()
            encode_nchw(e, x)
            times.append(time.perf_counter() - start)
    return statistics.median(times)


def stage_timing(ws):
    ev = ws.cfg.evaluation
    g = ws.generator()
    x = torch.from_numpy(ws.test_set(1).images).permute(0, 3, 1, 2)
    x6 = torch.cat([x, x], dim=1).to(g.dtype)
    out = {}
    if "restyle" in ws.cfg.schemes and "fpn" in ws.cfg.schemes:
        # interleave the two encoders so drifts in machine load hit both alike
        simple, fpn = [], []
        for _ in range(5):
            simple.append(median_latency(ws.encoder("restyle"), x6, max(1, 100 // 5)))
            fpn.append(median_latency(ws.encoder("fpn"), x6, max(1, 100 // 5)))
        out["latency_simple_s"] = statistics.median(simple)
        out["latency_fpn_s"] = statistics.median(fpn)
    if "restyle" in ws.cfg.schemes:
        xs = ws.test_set(1).images
        e = ws.encoder("restyle")
        t1 = [restyle_infer_batch(e, g, xs, 1, ws.bundle)[0].final.wall_clock_s for _ in range(ev.timing_repeats)]
        t5 = [restyle_infer_batch(e, g, xs, 5, ws.bundle)[0].final.wall_clock_s for _ in range(ev.timing_repeats)]
        out["single_pass_median_s"] = statistics.median(t1)
        out["restyle5_median_s"] = statistics.median(t5)
    ws.timing.update(out)
    ws.path("timing", "timing.json").write_text(json.dumps(ws.timing, sort_keys=True, indent=1))


def stage_report(ws):
    from .criteria import evaluate_all, format_report

    results = evaluate_all(ws)
    ws.results["criteria"] = results
    ws.path("report.md").write_text(format_report(ws, results))
    rows = [(r.number, r.name, int(r.passed), r.detail) for r in results]
    ws.path("timing", "criteria.csv").write_text(_csv_text(ws.header(), ["number", "name", "passed", "detail"], rows))
    return results


def run_experiment(cfg, out_dir=None, *, stages=("evaluate", "analyze", "bootstrap", "timing", "report")):
    """Run the configured pipeline; returns the populated Workspace."""
    set_single_threaded()
    cfg.validate()
    ws = Workspace.open(cfg, out_dir)
    start = time.perf_counter()
    table = {"evaluate": stage_evaluate, "analyze": stage_analyze, "bootstrap": stage_bootstrap,
             "timing": stage_timing, "report": stage_report}
    for name in stages:
        if name == "bootstrap" and "bootstrap" not in cfg.schemes:
            continue
        log.info("stage %s", name)
        _stage(name, table[name], ws)
    ws.timing["total_s"] = time.perf_counter() - start
    ws.path("timing", "timing.json").write_text(json.dumps(ws.timing, sort_keys=True, indent=1))
    return ws
