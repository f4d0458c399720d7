"""Command-line interface.

Subcommands cover the full workflow: score image difficulty, generate
synthetic traces, inspect calibration quantiles, optimise thresholds, replay
traces through a policy, and render reports.  All file outputs are written
atomically (temp file + rename).  DART_SEED supplies the default seed; flags
override it.
"""
from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import tempfile
from pathlib import Path

from . import adaptive, engine, metrics, optimizer, trace
from .difficulty import DifficultyWeights, difficulty as score_difficulty

PROG = "dart"


def _env_seed() -> int:
    raw = os.environ.get("DART_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        print(f"{PROG}: DART_SEED={raw!r} is not an integer", file=sys.stderr)
        raise SystemExit(2)


def _atomic_write(path: str | Path, writer) -> None:
    """Write via a sibling temp file and rename, so readers never see partials."""
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or Path("."),
                               prefix=target.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            writer(fh)
        os.replace(tmp, target)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _class_bias(text: str) -> dict[int, float]:
    """Parse '0:-0.3,2:0.3' into {0: -0.3, 2: 0.3}."""
    out: dict[int, float] = {}
    for part in text.split(","):
        if not part:
            continue
        try:
            cls, off = part.split(":")
            out[int(cls)] = float(off)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected CLASS:OFFSET pairs, got {text!r}")
    return out


def _difficulty_source(text: str) -> str | float:
    if text in ("auto", "stored", "image"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected auto|stored|image or a constant in [0,1], got {text!r}")


# --- difficulty --------------------------------------------------------------

def _score_one(args: tuple[str, tuple[float, float, float], float]):
    path, weights, edge_k = args
    try:
        image = trace.load_image(path)
        score = score_difficulty(image, DifficultyWeights(*weights), edge_k=edge_k)
        return path, (score.edge, score.variance, score.gradient, score.fused)
    except (OSError, ValueError) as exc:
        return path, str(exc)


def cmd_difficulty(args: argparse.Namespace) -> int:
    weights = args.weights
    if len(weights) != 3:
        print(f"{PROG}: --weights needs exactly 3 values", file=sys.stderr)
        return 2
    try:
        DifficultyWeights(*weights)
    except ValueError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    tasks = [(p, tuple(weights), args.edge_k) for p in args.images]
    if args.jobs > 1 and len(tasks) > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            results = pool.map(_score_one, tasks)
    else:
        results = [_score_one(t) for t in tasks]

    rows = [(p, r) for p, r in results if not isinstance(r, str)]
    failures = [(p, r) for p, r in results if isinstance(r, str)]
    if args.format == "json":
        payload = [{"file": p, "edge": e, "variance": v, "gradient": g, "fused": f}
                   for p, (e, v, g, f) in rows]
        print(json.dumps(payload, indent=2))
    elif args.format == "csv":
        print("file,edge,variance,gradient,fused")
        for p, (e, v, g, f) in rows:
            print(f"{p},{e!r},{v!r},{g!r},{f!r}")
    else:
        if rows:
            width = max(len(p) for p, _ in rows)
            print(f"{'file'.ljust(width)}  edge    var     grad    fused")
            for p, (e, v, g, f) in rows:
                print(f"{p.ljust(width)}  {e:.4f}  {v:.4f}  {g:.4f}  {f:.4f}")
    for p, msg in failures:
        print(f"{PROG}: {p}: {msg}", file=sys.stderr)
    return 2 if failures else 0


# --- synth -------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    traces = trace.synth_trace(
        num_exits=args.exits, num_samples=args.samples, num_classes=args.classes,
        seed=args.seed, class_bias=args.bias,
        gain=args.gain, difficulty_weight=args.difficulty_weight,
        noise_sigma=args.noise_sigma,
        total_macs=args.total_macs, total_time_ms=args.total_time_ms,
        total_energy_mj=args.total_energy_mj,
        model=args.model, dataset=args.dataset,
    )
    _atomic_write(args.out, lambda fh: trace.write_trace(traces, fh))
    print(f"wrote {len(traces)} samples ({args.exits} exits, "
          f"{args.classes} classes, seed {args.seed}) to {args.out}")
    return 0


# --- calibrate ---------------------------------------------------------------

def cmd_calibrate(args: argparse.Namespace) -> int:
    traces = trace.read_trace(args.trace)
    candidates = optimizer.quantile_candidates(traces, args.quantiles)
    if args.format == "json":
        print(json.dumps({"candidates": candidates}, indent=2))
    elif args.format == "csv":
        print("exit,candidates")
        for i, cand in enumerate(candidates, start=1):
            print(f"{i},\"{','.join(repr(c) for c in cand)}\"")
    else:
        for i, cand in enumerate(candidates, start=1):
            print(f"exit {i}: " + " ".join(f"{c:.6f}" for c in cand))
    return 0


# --- optimize ----------------------------------------------------------------

def cmd_optimize(args: argparse.Namespace) -> int:
    traces = trace.read_trace(args.trace)
    cfg = optimizer.ObjectiveConfig(beta_opt=args.beta_opt)
    if args.method == "grid":
        candidates = optimizer.quantile_candidates(traces, args.quantiles)
        thresholds, objective = optimizer.grid_search(
            candidates, traces, cfg,
            max_combinations=args.max_combinations, jobs=args.jobs)
    else:  # dp
        mdp = optimizer.build_mdp(traces, cfg, alpha_bins=args.alpha_bins,
                                  conf_bins=args.conf_bins)
        qtable = optimizer.value_iterate(mdp, gamma=args.gamma)
        thresholds = optimizer.extract_thresholds(qtable, mdp, traces)
        objective = optimizer.evaluate_objective(thresholds, traces, cfg)
    policy = engine.ExitPolicy(
        thresholds=tuple(thresholds), beta_diff=args.beta_diff,
        meta={"method": args.method, "beta_opt": args.beta_opt,
              "objective": objective, "trace": str(args.trace)})
    if args.out:
        _atomic_write(args.out, lambda fh: engine.save_policy(policy, fh))
    tau_text = " ".join(f"{t:.6f}" for t in thresholds) or "(none: single exit)"
    print(f"method={args.method} J={objective:.6f} thresholds: {tau_text}")
    if args.out:
        print(f"wrote policy to {args.out}")
    return 0


# --- simulate ----------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    traces = trace.read_trace(args.trace)
    policy = engine.load_policy(args.policy)
    if args.beta_diff is not None:
        policy.beta_diff = args.beta_diff
    adaptation = None
    if args.adaptive:
        adaptation = adaptive.AdaptationConfig(
            strategy=args.strategy, use_bandit=args.ucb,
            window_capacity=args.window, cadence=args.cadence,
            decay=args.decay, rate=args.rate,
            target_accuracy=args.target_accuracy, beta_opt=args.beta_opt)
    result = engine.simulate(
        traces, policy, adaptation=adaptation,
        difficulty_source=args.difficulty_source,
        base_dir=Path(args.trace).parent)
    if args.out:
        _atomic_write(args.out, lambda fh: engine.write_outcomes(result.outcomes, fh))
    if args.adapt_log:
        _atomic_write(args.adapt_log,
                      lambda fh: engine.write_adaptation_log(
                          result.adaptation_events, fh))
    method = "adaptive" if args.adaptive else "policy"
    rows = metrics.rows_from_single(traces.profile.model, method, result.report)
    sys.stdout.write(metrics.render(rows, args.report_format))
    return 0


# --- report ------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    traces = trace.read_trace(args.trace)
    outcomes = engine.read_outcomes(args.outcomes)
    candidate = metrics.aggregate(outcomes, traces.profile)
    if args.baseline:
        baseline = metrics.aggregate(engine.read_outcomes(args.baseline),
                                     traces.profile)
        comp = metrics.compare(baseline, candidate, alpha_override=args.alpha)
        rows = metrics.rows_from_comparison(
            traces.profile.model, args.baseline_label, args.label, comp,
            alpha_override=args.alpha)
    else:
        rows = metrics.rows_from_single(traces.profile.model, args.label,
                                        candidate, alpha_override=args.alpha)
    sys.stdout.write(metrics.render(rows, args.format))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Difficulty-aware early-exit policies over recorded "
                    "inference traces.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("difficulty", help="score image files")
    p.add_argument("images", nargs="+", help="PGM/PPM/DIMG files")
    p.add_argument("--weights", type=_float_list, default=(0.4, 0.3, 0.3),
                   metavar="E,V,G", help="fusion weights (default 0.4,0.3,0.3)")
    p.add_argument("--edge-k", type=float, default=1.0,
                   help="stddev multiplier for the edge threshold")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--jobs", type=_positive_int, default=1,
                   help="score files in parallel")
    p.set_defaults(func=cmd_difficulty)

    p = sub.add_parser("synth", help="generate a calibrated synthetic trace")
    p.add_argument("--out", required=True, help="output trace path (JSONL)")
    p.add_argument("--exits", type=_positive_int, default=3)
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--classes", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=None,
                   help="default: DART_SEED env var, else 0")
    p.add_argument("--bias", type=_class_bias, default=None, metavar="C:OFF,...",
                   help="per-class difficulty offsets, e.g. 0:-0.3,2:0.3")
    p.add_argument("--gain", type=float, default=4.0)
    p.add_argument("--difficulty-weight", type=float, default=2.0)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--total-macs", type=float, default=1.0e9)
    p.add_argument("--total-time-ms", type=float, default=10.0)
    p.add_argument("--total-energy-mj", type=float, default=100.0)
    p.add_argument("--model", default="synthetic")
    p.add_argument("--dataset", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="per-exit quantile threshold candidates")
    p.add_argument("--trace", required=True)
    p.add_argument("--quantiles", type=_float_list, default=None, metavar="Q,...")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("optimize", help="fit thresholds to a recorded trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--method", choices=("grid", "dp"), required=True)
    p.add_argument("--beta-opt", type=float, default=0.3,
                   help="cost weight in the objective")
    p.add_argument("--quantiles", type=_float_list, default=None, metavar="Q,...",
                   help="grid method: candidate quantiles")
    p.add_argument("--max-combinations", type=_positive_int, default=1_000_000)
    p.add_argument("--jobs", type=_positive_int, default=1,
                   help="grid method: parallel workers")
    p.add_argument("--alpha-bins", type=_positive_int, default=10,
                   help="dp method: difficulty bins")
    p.add_argument("--conf-bins", type=_positive_int, default=10,
                   help="dp method: confidence bins")
    p.add_argument("--gamma", type=float, default=1.0, help="dp method: discount")
    p.add_argument("--beta-diff", type=float, default=0.3,
                   help="difficulty weight stored in the policy")
    p.add_argument("--out", help="write the fitted policy JSON here")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="replay a trace through a policy")
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--beta-diff", type=float, default=None,
                   help="override the policy's difficulty weight")
    p.add_argument("--adaptive", action="store_true",
                   help="adapt coefficients while replaying")
    p.add_argument("--strategy", choices=adaptive.STRATEGIES, default="both")
    p.add_argument("--ucb", action="store_true",
                   help="let a UCB1 bandit pick the strategy")
    p.add_argument("--window", type=_positive_int, default=1000)
    p.add_argument("--cadence", type=_positive_int, default=100)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--rate", type=float, default=0.05)
    p.add_argument("--target-accuracy", type=float, default=0.85)
    p.add_argument("--beta-opt", type=float, default=0.3,
                   help="cost weight in the bandit reward")
    p.add_argument("--difficulty-source", type=_difficulty_source, default="auto",
                   help="auto|stored|image or a constant in [0,1]")
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for workflow uniformity; the decision rule "
                        "is deterministic")
    p.add_argument("--out", help="write per-sample outcomes (JSONL)")
    p.add_argument("--adapt-log", help="write adaptation events (JSONL)")
    p.add_argument("--report-format", choices=("table", "csv", "json"),
                   default="table")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render metrics from outcome files")
    p.add_argument("--outcomes", required=True, help="candidate outcomes (JSONL)")
    p.add_argument("--trace", required=True,
                   help="trace that produced the outcomes (for the profile)")
    p.add_argument("--baseline", help="baseline outcomes (JSONL)")
    p.add_argument("--alpha", type=float, default=None,
                   help="difficulty override used in the combined score")
    p.add_argument("--label", default="candidate")
    p.add_argument("--baseline-label", default="baseline")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "seed") and args.seed is None:
        args.seed = _env_seed()
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
