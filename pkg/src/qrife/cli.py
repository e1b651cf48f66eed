"""Command line entry point: ``qrife estimate | simulate | selftest``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .io import ConfigError, IngestionError, ingest_group_csv, ingest_micro_csv, load_config
from .panel_ife import DesignError
from .pipeline import PipelineError, run_pipeline
from .quantile_regression import QuantileRegressionError
from .simulation import DgpConfig, MonteCarloError, run_monte_carlo

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


def _threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("QRIFE_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"QRIFE_THREADS must be an integer, got {env!r}") from None
    return 1


def _err(msg: str) -> int:
    print(f"qrife: error: {msg}", file=sys.stderr)
    return EXIT_ERROR


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    micro = ingest_micro_csv(args.micro)
    design = ingest_group_csv(args.group, cfg.t0)
    result = run_pipeline(micro, design, cfg, threads=_threads(args.threads))
    rpath, epath = result.write(args.out)
    print(f"wrote {rpath} and {epath}")
    if not result.all_converged:
        bad = [f"{r['name']}@u={r['u']}" for r in result.report["fits"] if not r["converged"]]
        print(f"warning: second step did not converge for {', '.join(bad)}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


SIM_DEFAULTS = {"scenarios": [1, 2], "N": 500, "S": 40, "T": 25, "reps": 100,
                "quantiles": [0.1, 0.5, 0.9], "factors": ["auto"], "eta_scale": 0.0,
                "checkpoints": [2, 5], "ci_level": 0.95}


def _load_sim_config(path) -> dict:
    out = dict(SIM_DEFAULTS)
    if path is None:
        return out
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("{"):
        doc = json.loads(text)
    else:
        doc = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            items = [s.strip() for s in v.strip("[]").split(",") if s.strip()]
            doc[k] = [json.loads(s) if s != "auto" else s for s in items] \
                if k in ("scenarios", "quantiles", "factors", "checkpoints") else json.loads(v)
    unknown = set(doc) - set(SIM_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown simulate config keys {sorted(unknown)}")
    out.update(doc)
    return out


def _policy(v):
    return None if str(v).lower() == "auto" else int(v)


def cmd_simulate(args) -> int:
    sc = _load_sim_config(args.config)
    for key in ("reps", "N", "S", "T"):
        if getattr(args, key) is not None:
            sc[key] = getattr(args, key)
    if args.scenario is not None:
        sc["scenarios"] = [args.scenario]
    if args.quantiles is not None:
        sc["quantiles"] = [float(u) for u in args.quantiles.split(",")]
    if args.factors is not None:
        sc["factors"] = args.factors.split(",")
    configs = [DgpConfig(int(s), int(sc["N"]), int(sc["S"]), int(sc["T"]),
                         eta_scale=float(sc["eta_scale"])) for s in sc["scenarios"]]
    report = run_monte_carlo(configs, int(sc["reps"]), sc["quantiles"], master_seed=args.seed,
                             threads=_threads(args.threads),
                             checkpoints=tuple(int(m) for m in sc["checkpoints"]),
                             factor_policies=tuple(_policy(f) for f in sc["factors"]),
                             level=float(sc["ci_level"]))
    csv_path, json_path = report.write(args.out)
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest(seed=args.seed) else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrife", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="two-step estimation from CSV inputs")
    e.add_argument("--micro", required=True, help="individual-level CSV: group,time,y,<z...>")
    e.add_argument("--group", required=True, help="group-level CSV: group,time,d,<x...>")
    e.add_argument("--config", required=True, help="run configuration (JSON or key = value)")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--seed", type=int, default=0, help="accepted for symmetry; estimation is deterministic")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo study on the simulation design")
    s.add_argument("--config", default=None, help="simulation configuration (JSON or key = value)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--scenario", type=int, choices=(1, 2), default=None)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--S", type=int, default=None)
    s.add_argument("--T", type=int, default=None)
    s.add_argument("--quantiles", default=None, help="comma-separated, e.g. 0.1,0.5,0.9")
    s.add_argument("--factors", default=None, help="comma-separated policies, e.g. auto,2")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("selftest", help="run the built-in oracle checks")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IngestionError, ConfigError, DesignError, PipelineError, QuantileRegressionError,
            MonteCarloError, OSError, ValueError) as exc:
        return _err(str(exc))


if __name__ == "__main__":
    sys.exit(main())
