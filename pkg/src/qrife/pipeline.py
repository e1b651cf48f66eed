"""Two-step estimation from ingested data to a report of policy effects."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .inference import build_components, estimate_effect
from .io import ConfigError, EffectSpec, RunConfig, dump_json, fmt_float
from .panel_ife import GroupDesign, fit_ife
from .policy_effects import DeltaProfile, EffectQuery
from .quantile_regression import MicroPanel, fit_first_step

SCHEMA_VERSION = 1
EFFECT_COLUMNS = ("label", "kind", "t", "u", "u1", "u2", "point", "bias", "se", "lo", "hi", "level")


class PipelineError(RuntimeError):
    pass


def _profile_vector(p, names: tuple[str, ...], where: str) -> tuple[float, ...]:
    if isinstance(p, dict):
        unknown = set(p) - set(names)
        if unknown:
            raise ConfigError(f"{where}: unknown regressors {sorted(unknown)}; known {list(names)}")
        return tuple(float(p.get(n, 0.0)) for n in names)
    vec = tuple(float(v) for v in p)
    if len(vec) != len(names):
        raise ConfigError(f"{where}: profile has {len(vec)} entries, expected {len(names)} {list(names)}")
    return vec


def resolve_effect(spec: EffectSpec, names: tuple[str, ...], design: GroupDesign) -> EffectQuery:
    where = f"effect {spec.label or spec.kind}"
    times = list(design.times)
    t = spec.t
    if t not in times and str(t) in [str(x) for x in times]:
        t = times[[str(x) for x in times].index(str(t))]
    if t not in times:
        raise ConfigError(f"{where}: period {spec.t!r} is not an observed time")
    pos = times.index(t) + 1
    vecs = {k: None if getattr(spec, k) is None else _profile_vector(getattr(spec, k), names, where)
            for k in ("z", "z1", "z2")}
    try:
        return EffectQuery(spec.kind, pos, spec.u, spec.u1, spec.u2, vecs["z"], vecs["z1"],
                           vecs["z2"], spec.label)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class PipelineResult:
    report: dict
    fits: dict
    effects: list
    all_converged: bool

    def effects_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EFFECT_COLUMNS)
        for row in self.report["effects"]:
            w.writerow([fmt_float(row[c]) if isinstance(row[c], float) else
                        ("" if row[c] is None else row[c]) for c in EFFECT_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rpath, epath = out / "report.json", out / "effects.csv"
        rpath.write_text(dump_json(self.report), encoding="utf-8")
        epath.write_text(self.effects_csv(), encoding="utf-8")
        return rpath, epath


def run_pipeline(micro: MicroPanel, design: GroupDesign, cfg: RunConfig, *,
                 threads: int = 1, timestamp: str | None = None) -> PipelineResult:
    if tuple(micro.groups) != tuple(design.groups) or tuple(micro.times) != tuple(design.times):
        raise PipelineError("micro and group files cover different groups or times")
    times = list(design.times)
    if cfg.t0 not in times and str(cfg.t0) not in [str(t) for t in times]:
        raise ConfigError(f"t0={cfg.t0!r} is not an observed time")
    names = tuple(micro.names)
    queries = [resolve_effect(e, names, design) for e in cfg.effects]
    missing = {u for q in queries for u in q.quantiles()} - set(cfg.quantiles)
    if missing:
        raise ConfigError(f"effects use quantiles {sorted(missing)} that are not in 'quantiles'")

    first = fit_first_step(micro, cfg.quantiles, threads=threads)
    fits = {}
    records = []
    for u in cfg.quantiles:
        per_j = []
        for j, name in enumerate(names):
            try:
                fit = fit_ife(first[u].coefficient(j), design, tol=cfg.tol,
                              max_iter=cfg.max_iter, r_fixed=cfg.r_fixed, j=j, u=u)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                raise PipelineError(f"second step failed for coefficient {name} u={u}: {exc}") from exc
            per_j.append(fit)
            records.append({
                "u": u, "j": j, "name": name, "converged": fit.converged,
                "iterations": fit.iterations, "r": fit.r,
                "delta": dict(zip([str(t) for t in times[design.T0 - 1:]], fit.delta.tolist())),
                "beta": dict(zip(design.names, fit.beta.tolist())),
                "trace": [{k: v for k, v in step.items() if k != "warning" or v} for step in fit.trace],
            })
        fits[u] = per_j
    profile = DeltaProfile.from_fits(fits, design.T0, design.T)

    estimates = []
    by_t: dict[int, list[EffectQuery]] = {}
    for q in queries:
        by_t.setdefault(q.t, []).append(q)
    comps = {}
    for t, qs in sorted(by_t.items()):
        pairs = {(q.u1, q.u2) for q in qs if q.kind == "within"}
        try:
            comps[t] = build_components(fits, design, t, pairs)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise PipelineError(f"inference failed at period {times[t - 1]}: {exc}") from exc
    for q in queries:
        estimates.append(estimate_effect(q, profile, comps[q.t], cfg.ci_level))

    effects = [{"label": e.query.label, "kind": e.query.kind, "t": times[e.query.t - 1],
                "u": e.query.u, "u1": e.query.u1, "u2": e.query.u2, "point": e.point,
                "bias": e.bias, "se": e.se, "lo": e.lo, "hi": e.hi, "level": e.level}
               for e in estimates]
    all_ok = all(f.converged for per_j in fits.values() for f in per_j)
    report = {
        "schema_version": SCHEMA_VERSION,
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict(),
        "groups": list(design.groups), "times": times, "T0": times[design.T0 - 1],
        "regressors": list(names), "group_covariates": list(design.names),
        "all_converged": all_ok,
        "first_step": {str(u): {"status_counts": _counts(first[u].status.values())}
                       for u in cfg.quantiles},
        "fits": records,
        "effects": effects,
    }
    return PipelineResult(report, fits, estimates, all_ok)


def _counts(values) -> dict:
    out: dict = {}
    for v in values:
        out[v] = out.get(v, 0) + 1
    return dict(sorted(out.items()))
