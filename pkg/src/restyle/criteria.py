"""Acceptance checks computed from a finished workspace.

Each check returns a ``Criterion`` with the measured quantities in ``detail``
so that failures are diagnosable from the report alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .analysis import first_crossing_time, latent_change_table
from .generator import build_generator, sample_latent, synthesize
from .losses import LossBundle
from .schemes import latent_gradient, objective_value, restyle_infer_batch, single_pass_infer_batch


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str


def _mean_curve(traces, metric):
    return np.mean([tr.loss_curve(metric) for tr in traces], axis=0)


def check_n1_reduction(ws, n_inputs=32, seed=1234):
    g = ws.generator()
    e = ws.encoder("restyle")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1, 1, size=(n_inputs, g.resolution, g.resolution, 3)).astype(np.float32)
    a = restyle_infer_batch(e, g, xs, 1, ws.bundle)
    b = single_pass_infer_batch(e, g, xs, ws.bundle)
    same = all(
        len(ta.steps) == len(tb.steps) == 2
        and all(np.array_equal(sa.w, sb.w) and np.array_equal(sa.y_hat, sb.y_hat) and sa.losses == sb.losses
                for sa, sb in zip(ta.steps, tb.steps))
        for ta, tb in zip(a, b))
    return Criterion(1, "N=1 reduction", same, f"{n_inputs} random inputs, bitwise equal={same}")


def all_traces(ws):
    out = []
    for traces in ws.traces.values():
        out.extend(traces)
    for results in ws.results.get("bootstrap", {}).values():
        for r in results:
            out.append(r.styled_trace)
            if r.base_trace is not None:
                out.append(r.base_trace)
    return out


def check_replay(ws):
    traces = all_traces(ws)
    bad = sum(not tr.check_replay() for tr in traces)
    return Criterion(2, "replay invariant", bad == 0 and len(traces) > 0,
                     f"{len(traces)} traces checked, {bad} violations")


def check_iterative_improvement(ws, steps=5, reduction=0.2, slack=1e-3):
    l2 = _mean_curve(ws.traces["restyle"], "l2")
    drop = 1 - l2[steps] / l2[1]
    monotone = all(l2[t + 1] <= l2[t] + slack for t in range(1, steps))
    ok = drop >= reduction and monotone
    return Criterion(3, "iterative improvement", ok,
                     f"l2 steps 1..{steps} = {np.round(l2[1:steps + 1], 5).tolist()}, "
                     f"reduction {drop:.3f} (need >= {reduction}), non-increasing within {slack}: {monotone}")


def check_beats_single_pass(ws, steps=5, margin=0.1):
    r_l2 = _mean_curve(ws.traces["restyle"], "l2")[steps]
    r_p = _mean_curve(ws.traces["restyle"], "perceptual")[steps]
    s_l2 = _mean_curve(ws.traces["single_pass"], "l2")[1]
    s_p = _mean_curve(ws.traces["single_pass"], "perceptual")[1]
    ok = r_l2 <= (1 - margin) * s_l2 and r_p <= s_p
    return Criterion(4, "beats single pass", ok,
                     f"restyle l2 {r_l2:.5f} vs single {s_l2:.5f} (margin {1 - r_l2 / s_l2:.3f}, need >= {margin}); "
                     f"perceptual {r_p:.5f} vs {s_p:.5f}")


def check_residual_decay(ws, first=2, last=10, slack=0.05):
    from .pipeline import delta_norms

    dn = delta_norms(ws.traces["restyle"]).mean(axis=0)   # dn[t-1] = mean ||delta_t||
    last = min(last, len(dn))
    ok = all(dn[t] <= (1 + slack) * dn[t - 1] for t in range(first, last))
    return Criterion(5, "residual decay", ok,
                     f"mean ||delta_t|| t={first}..{last}: {np.round(dn[first - 1:last], 4).tolist()}")


def check_naive(ws, steps=5):
    naive = _mean_curve(ws.traces["naive"], "l2")
    rs = _mean_curve(ws.traces["restyle"], "l2")
    ok = naive[steps] >= naive[1] and rs[steps] < rs[1]
    return Criterion(6, "naive iteration deteriorates", ok,
                     f"naive l2 step1 {naive[1]:.5f} step{steps} {naive[steps]:.5f}; "
                     f"restyle step1 {rs[1]:.5f} step{steps} {rs[steps]:.5f}")


def check_quality_time(ws, steps=5, factor=5.0):
    curves = ws.results["curves"]
    n = len(ws.traces["optimization"])
    restyle = ws.traces["restyle"][:n]
    r_final = float(np.mean([tr.steps[steps].losses["l2"] for tr in restyle]))
    r_time = float(np.mean([tr.steps[steps].wall_clock_s for tr in restyle]))
    cross = first_crossing_time(curves["optimization"], r_final)
    time_ok = cross is not None and cross >= factor * r_time
    # hybrid starts exactly at the encoder's final loss, image by image
    start_ok = all(
        h.steps[steps].losses == r.steps[steps].losses and h.meta["opt_start_loss"] == r.steps[steps].losses
        for h, r in zip(ws.traces["hybrid"], restyle))
    curve_start = curves["hybrid"].values[0]
    start_ok = start_ok and curve_start == float(np.mean([tr.steps[steps].losses["l2"] for tr in restyle]))
    ok = time_ok and start_ok
    ratio = "never" if cross is None else f"{cross / r_time:.1f}x"
    return Criterion(7, "quality-time ordering", ok,
                     f"restyle final l2 {r_final:.5f} at {r_time * 1e3:.2f} ms; optimisation crosses at {ratio} "
                     f"(need >= {factor}x); hybrid starts at encoder loss: {start_ok}")


def check_latent_recovery(ws, steps=5, reduction=0.3):
    from .pipeline import latent_distances

    test = ws.test_set(ws.cfg.evaluation.n_images)
    if test.latents is None:
        return Criterion(8, "latent recovery", False, "dataset has no ground-truth latents")
    dist = latent_distances(ws.traces["restyle"], test.latents).mean(axis=0)
    drop = 1 - dist[steps] / dist[1]
    return Criterion(8, "latent recovery", drop >= reduction,
                     f"mean ||w_t - w*|| t=0..{steps}: {np.round(dist[:steps + 1], 3).tolist()}, "
                     f"reduction t1->t{steps} {drop:.3f} (need >= {reduction})")


def gradient_check(seed=3, h=1e-3):
    """Max relative error of the analytic latent gradient against central differences.

    Per-coordinate error |a - f| divided by max(|f|, 1e-3 * max|f|), on a float64
    (k=4, d=8, res=16) generator.
    """
    g = build_generator(seed, k=4, d=8, resolution=16, avg_samples=1000, dtype=torch.float64)
    bundle = LossBundle(seed=0, dtype=torch.float64)
    # target and evaluation point are both drawn from the latent distribution
    with torch.no_grad():
        x = synthesize(g, sample_latent(g, seed + 1)).numpy()
    w = sample_latent(g, seed + 2).numpy()
    analytic = latent_gradient(g, x, w, bundle).numpy()
    fd = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd[idx] = (objective_value(g, x, wp, bundle) - objective_value(g, x, wm, bundle)) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
    return float((np.abs(analytic - fd) / denom).max())


def check_gradient(ws=None, tol=1e-3):
    err = gradient_check()
    return Criterion(9, "gradient correctness", err < tol, f"max relative error {err:.2e} (need < {tol})")


def check_simple_vs_fpn(ws, steps=5, tol=0.1):
    s = _mean_curve(ws.traces["restyle"], "l2")[steps]
    f = _mean_curve(ws.traces["fpn"], "l2")[steps]
    ls, lf = ws.timing.get("latency_simple_s"), ws.timing.get("latency_fpn_s")
    ok = abs(s - f) <= tol * f and ls is not None and ls < lf
    return Criterion(10, "simple vs FPN", ok,
                     f"l2 simple {s:.5f} fpn {f:.5f} (rel diff {abs(s - f) / f:.3f}, need <= {tol}); "
                     f"latency simple {ls * 1e3:.3f} ms fpn {lf * 1e3:.3f} ms")


def brute_force_latent_table(traces, k):
    """Straight loop over images, styles, steps and coordinates."""
    n = len(traces)
    n_steps = len(traces[0].steps) - 1
    d = traces[0].steps[0].w.shape[1]
    v = np.zeros((k, n_steps))
    for l in range(k):
        for t in range(1, n_steps + 1):
            total = 0.0
            for j in range(d):
                acc = 0.0
                for tr in traces:
                    diff = float(tr.steps[t].w[l, j]) - float(tr.steps[t - 1].w[l, j])
                    acc += diff * diff
                mean = acc / n
                total += mean * mean
            v[l, t - 1] = total ** 0.5
    return v


def check_analysis(ws, slack=0.05):
    traces = ws.traces["restyle"][:16]
    fast = latent_change_table(traces, ws.generator()).v
    slow = brute_force_latent_table(traces, ws.generator().k)
    err = float(np.abs(fast - slow).max())
    means = [m.mean for m in ws.results["diff_global"]]
    decreasing = all(means[i + 1] <= (1 + slack) * means[i] for i in range(1, len(means) - 1))
    ok = err <= 1e-10 and decreasing
    return Criterion(11, "analysis formulas", ok,
                     f"latent table max abs error {err:.1e}; global diff-map means t=1..: "
                     f"{np.round(means, 4).tolist()} decreasing for t>=2: {decreasing}")


def check_bootstrap(ws, n_sigma=3.0):
    rows = ws.results["bootstrap_rows"]
    n_steps = ws.cfg.bootstrap.n_steps
    final = {}
    for image_id, mode, step, _, sim in rows:
        if step == n_steps:
            final.setdefault(mode, []).append(sim)
    avg, boot = np.mean(final["average"]), np.mean(final["bootstrapped"])
    probe = ws.results["alignment"]
    ok = boot >= avg and boot - avg > 0 and probe.margin_in_se >= n_sigma
    return Criterion(12, "bootstrapping", ok,
                     f"final similarity bootstrapped {boot:.4f} vs average {avg:.4f} (margin {boot - avg:+.4f}); "
                     f"alignment paired {probe.paired_mean:.3f} shuffled {probe.shuffled_mean:.3f} "
                     f"({probe.margin_in_se:.1f} SE, need >= {n_sigma})")


def evaluate_all(ws):
    checks = [check_n1_reduction, check_replay, check_iterative_improvement, check_beats_single_pass,
              check_residual_decay, check_naive, check_quality_time, check_latent_recovery, check_gradient,
              check_simple_vs_fpn, check_analysis, check_bootstrap]
    out = []
    for check in checks:
        try:
            out.append(check(ws))
        except (KeyError, IndexError) as exc:
            # a scheme was not run, or its traces are shorter than the check needs
            n = checks.index(check) + 1
            kind = "missing input" if isinstance(exc, KeyError) else "traces too short"
            out.append(Criterion(n, check.__name__.replace("check_", ""), False, f"{kind}: {exc}"))
    return out


def compare_summaries(dir_a, dir_b):
    """Names of summary CSVs that differ (or exist on one side only) between two run directories."""
    from pathlib import Path

    a, b = Path(dir_a) / "summary", Path(dir_b) / "summary"
    names = sorted({p.name for p in a.glob("*.csv")} | {p.name for p in b.glob("*.csv")})
    return [n for n in names if not ((a / n).exists() and (b / n).exists()
                                     and (a / n).read_bytes() == (b / n).read_bytes())], names


def format_report(ws, results):
    lines = ["# Inversion experiment report", "", ws.header().lstrip("# "), ""]
    lines.append("| # | criterion | result | detail |")
    lines.append("|---|---|---|---|")
    for r in results:
        lines.append(f"| {r.number} | {r.name} | {'PASS' if r.passed else 'FAIL'} | {r.detail} |")
    lines.append("")
    if ws.timing:
        lines.append("## Timing")
        for key in sorted(ws.timing):
            lines.append(f"- {key}: {ws.timing[key]:.4g}")
    return "\n".join(lines) + "\n"
