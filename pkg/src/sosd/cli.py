"""Command-line entry point.

Exit status: 0 success, 1 violation, 2 usage error, 3 I/O error.
Relative output paths are placed under ``$SOSD_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from sosd.config import ConfigError, load_config
from sosd.manifest import ManifestError, RunManifest, analyze_snapshots, load_manifest, write_analysis, write_manifest
from sosd.model import TRAINABLE, backward, forward, gen_dataset, init_params
from sosd.report import render_report
from sosd.snapshots import SnapshotFormatError, write_snapshot
from sosd.telemetry import measure_constants, phase_report, running_max_grad
from sosd.tracefile import TraceFormatError, TraceWriter, read_trace
from sosd.training import train
from sosd.verification import LEMMAS, check_descent_lemma, check_inequality_suite, finite_diff_gradcheck

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "SOSD_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_path(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _print_kv(pairs, out=None):
    out = out or sys.stdout
    for k, v in pairs:
        if isinstance(v, float):
            v = format(v, ".17g")
        print(f"{k}: {v}", file=out)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = output_path(args.out)
    snap_dir = os.path.join(out, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    trace_path = os.path.join(out, "trace.csv")
    if os.path.exists(trace_path):
        os.remove(trace_path)
    entries = []

    def on_snapshot(t, state):
        for name in TRAINABLE:
            rel = os.path.join("snapshots", f"{t:06d}_{name}.sosd")
            write_snapshot(os.path.join(out, rel), getattr(state, name))
            entries.append((t, name, rel))

    run_id = args.run_id or os.path.basename(os.path.normpath(out)) or "run"
    with TraceWriter(trace_path) as writer:
        result = train(cfg, on_record=writer.append, on_snapshot=on_snapshot)
    write_manifest(os.path.join(out, "manifest.ini"), RunManifest(run_id, entries, cfg, "trace.csv"))

    lines = [("run", run_id), ("steps", cfg.total_steps), ("final_loss", result.records[-1].loss)]
    ph = result.phases
    if ph is not None:
        lines += [(f"onset_{m}", ph.sosd_onset[m]) for m in TRAINABLE]
        lines += [
            ("phase1_end", ph.phase1_end),
            ("phase2_start", ph.phase2_start),
            ("phase1_mean_dL", ph.phase1_mean_dL),
            ("phase2_mean_dL", ph.phase2_mean_dL),
            ("p_hat", ph.p_hat if ph.p_hat is not None else "unavailable"),
        ]
    if result.constants is not None:
        lines.append(("T_star", result.constants.T_star))
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        _print_kv(lines, fh)
    _print_kv(lines)
    return EXIT_OK


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest)
    result = analyze_snapshots(manifest)
    out = output_path(args.out)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "analysis.csv")
    write_analysis(path, result)
    for name, s in result.series.items():
        print(f"{name}: {len(s.steps)} snapshots, first cos_to_final {s.cos_to_final[0]:.6f}")
    print(f"wrote {path}")
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        lo, _, hi = text.partition("-")
        dims = (int(lo), int(hi or lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dimension range {text!r}") from None
    if dims[0] < 2 or dims[1] < dims[0]:
        raise argparse.ArgumentTypeError("dimension range must satisfy 2 <= lo <= hi")
    return dims


def cmd_verify(args) -> int:
    reports = []
    if args.suite in ("lemmas", "all"):
        reports += [check_inequality_suite(L, args.trials, args.seed, args.dims) for L in LEMMAS]
    if args.suite in ("descent", "all"):
        reports += [check_descent_lemma(2.0, eta, args.trials, args.seed) for eta in (0.5, 0.25)]
    if args.suite in ("gradcheck", "all"):
        reports.append(finite_diff_gradcheck(None, args.seed))
    for r in reports:
        print(r.to_text())
        print()
    failed = [r.lemma for r in reports if not r.passed]
    print("result: " + ("FAIL " + ",".join(failed) if failed else "PASS"))
    return EXIT_VIOLATION if failed else EXIT_OK


def run_constants(manifest: RunManifest, epsilon: float | None = None, C: float = 1.0):
    """Rebuild the threshold constants of a finished run from its manifest and trace."""
    cfg = manifest.config
    if cfg is None:
        raise UsageError("manifest carries no run config")
    if not manifest.trace:
        raise UsageError("manifest names no trace file")
    records = read_trace(manifest.resolve(manifest.trace))
    state = init_params(cfg.model)
    batch = gen_dataset(cfg.model, cfg.noise, cfg.data_seed)
    gh0 = float(np.linalg.norm(backward(state, batch, forward(state, batch)).G_H))
    kappa = {m: max(r.get(m, "cond") for r in records) for m in TRAINABLE}
    init_norms = {m: float(np.linalg.norm(getattr(state, m))) for m in TRAINABLE}
    final_nuc = {m: records[-1].get(m, "nuc_norm") for m in TRAINABLE}
    G = float(running_max_grad(records)[-1])
    c = measure_constants(batch.X, gh0, init_norms, kappa, G, cfg.schedule.base_lr, final_nuc, epsilon, C)
    return c, records, cfg


def cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    c, records, cfg = run_constants(manifest, args.epsilon, args.C)
    _print_kv(c.as_dict().items())
    ph = phase_report(records, cfg.model.d, c, window=cfg.window)
    for m in TRAINABLE:
        _print_kv([(f"empirical_onset_{m}", ph.sosd_onset[m])])
    onset = ph.phase2_start
    if onset and c.T_star > 0:
        _print_kv([("onset_over_T_star", onset / c.T_star)])
    return EXIT_OK


def _report_d(args) -> int | None:
    if args.d is not None:
        return args.d
    guess = os.path.join(os.path.dirname(os.path.abspath(args.trace)), "manifest.ini")
    if os.path.exists(guess):
        m = load_manifest(guess)
        if m.config is not None:
            return m.config.model.d
    return None


def cmd_report(args) -> int:
    records = read_trace(args.trace)
    if len(records) < 2:
        raise UsageError("trace needs at least two rows")
    d = _report_d(args)
    onsets = None
    if d is not None and len(records) >= 3:
        onsets = phase_report(records, d, window=args.window).sosd_onset
    else:
        print("no feature dimension known; onset markers omitted", file=sys.stderr)
    out = output_path(args.out)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    svg, data = render_report(records, out, onsets, args.trace)
    print(f"wrote {svg}")
    if data:
        print(f"wrote {data}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sosd", description="Spectral stability lab for a toy attention model.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model and record telemetry")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--run-id")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="cosine-to-final and SD variation from snapshots")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="run randomized inequality suites")
    v.add_argument("--suite", choices=("lemmas", "gradcheck", "descent", "all"), default="all")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--dims", type=_parse_dims, default=(2, 16), help="dimension range, e.g. 2-16")
    v.set_defaults(func=cmd_verify)

    pt = sub.add_parser("predict-thresholds", help="print measured constants and predicted hitting times")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--epsilon", type=float, help="fixed stability bound instead of the per-matrix default")
    pt.add_argument("--C", type=float, default=1.0, help="scale constant for T_star")
    pt.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", help="render the SVG report of a trace")
    r.add_argument("--trace", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--d", type=int, help="feature dimension (default: from manifest.ini beside the trace)")
    r.add_argument("--window", type=int, default=50)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "trials", 1) < 1:
        parser.print_usage(sys.stderr)
        print("sosd: error: --trials must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"sosd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ManifestError, SnapshotFormatError, TraceFormatError) as exc:
        print(f"sosd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
