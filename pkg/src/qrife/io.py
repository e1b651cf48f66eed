"""CSV ingestion and export, run configuration and report serialization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .panel_ife import DesignError, GroupDesign
from .quantile_regression import MicroPanel


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _label(text: str):
    """Group/time labels are integers when they look like integers."""
    try:
        return int(text)
    except ValueError:
        return text


def _read_rows(path, required: Sequence[str]):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:len(required)] != list(required):
            raise IngestionError(
                f"{path} line 1: header must start with {','.join(required)}, got {','.join(header)}")
        if len(set(header)) != len(header):
            raise IngestionError(f"{path} line 1: duplicate column names")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path} line {line}: expected {len(header)} fields, found {len(row)}")
            rows.append((line, [c.strip() for c in row]))
    return header, rows


def _floats(path, line, header, values, start):
    out = []
    for name, v in zip(header[start:], values[start:]):
        try:
            x = float(v)
        except ValueError:
            raise IngestionError(f"{path} line {line}: column {name!r} is not numeric: {v!r}") from None
        if not math.isfinite(x):
            raise IngestionError(f"{path} line {line}: column {name!r} is not finite: {v!r}")
        out.append(x)
    return out


def _sorted_labels(labels):
    try:
        return sorted(labels)
    except TypeError:
        return sorted(labels, key=str)


def ingest_micro_csv(path) -> MicroPanel:
    """Long-format individual data: ``group,time,y,<z columns>``.

    A column of ones named ``const`` is prepended to the design unless the
    file already has a ``const`` column.
    """
    header, rows = _read_rows(path, ("group", "time", "y"))
    znames = header[3:]
    add_const = "const" not in znames
    names = (("const",) if add_const else ()) + tuple(znames)
    if not names:
        raise IngestionError(f"{path} line 1: no regressors")
    acc: dict = {}
    for line, vals in rows:
        nums = _floats(path, line, header, vals, 2)
        key = (_label(vals[0]), _label(vals[1]))
        acc.setdefault(key, []).append(([1.0] if add_const else []) + nums)
    if not acc:
        raise IngestionError(f"{path}: no data rows")
    groups = _sorted_labels({k[0] for k in acc})
    times = _sorted_labels({k[1] for k in acc})
    for g in groups:
        for t in times:
            if (g, t) not in acc:
                raise IngestionError(f"missing cell group={g} time={t}")
    cells = {}
    for key, data in acc.items():
        arr = np.array(data)
        cells[key] = (arr[:, 1 if add_const else 0].copy(),
                      np.delete(arr, 1 if add_const else 0, axis=1))
    return MicroPanel(cells, names=names)


def ingest_group_csv(path, t0) -> GroupDesign:
    """Group-level panel ``group,time,d,<x columns>`` with policy start ``t0``.

    ``d`` must equal the group's treatment flag from ``t0`` on and zero
    before; ``t0`` is a time label as it appears in the file.
    """
    header, rows = _read_rows(path, ("group", "time", "d"))
    xnames = tuple(header[3:])
    acc: dict = {}
    for line, vals in rows:
        nums = _floats(path, line, header, vals, 2)
        key = (_label(vals[0]), _label(vals[1]))
        if key in acc:
            raise IngestionError(f"{path} line {line}: duplicate row for group={key[0]} time={key[1]}")
        if nums[0] not in (0.0, 1.0):
            raise IngestionError(f"{path} line {line}: d must be 0 or 1, got {vals[2]!r}")
        acc[key] = (line, nums)
    if not acc:
        raise IngestionError(f"{path}: no data rows")
    groups = _sorted_labels({k[0] for k in acc})
    times = _sorted_labels({k[1] for k in acc})
    for g in groups:
        for t in times:
            if (g, t) not in acc:
                raise IngestionError(f"missing cell group={g} time={t}")
    t0 = _label(str(t0))
    if t0 not in times:
        raise DesignError(f"policy start t0={t0} is not an observed time")
    pos = times.index(t0)
    S, T = len(groups), len(times)
    X = np.zeros((S, T, len(xnames)))
    d = np.zeros(S)
    for i, g in enumerate(groups):
        flag = acc[(g, times[-1])][1][0]
        d[i] = flag
        for k, t in enumerate(times):
            line, nums = acc[(g, t)]
            want = flag if k >= pos else 0.0
            if nums[0] != want:
                what = "treated before t0" if k < pos else "treatment switches within the post period"
                raise DesignError(f"{path} line {line}: group={g} time={t}: {what}")
            X[i, k] = nums[1:]
    return GroupDesign(X, d, pos + 1, tuple(groups), tuple(times), xnames)


def export_micro_csv(panel: MicroPanel, path) -> Path:
    """Write a panel in the layout read by :func:`ingest_micro_csv`."""
    path = Path(path)
    names = list(panel.names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "y"] + names)
        for (g, t) in sorted(panel.cells):
            y, Z = panel.cells[(g, t)]
            for i in range(y.shape[0]):
                w.writerow([g, t, fmt_float(y[i])] + [fmt_float(v) for v in Z[i]])
    return path


def export_group_csv(design: GroupDesign, path) -> Path:
    path = Path(path)
    dst = design.d_st()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "d"] + list(design.names))
        for i, g in enumerate(design.groups):
            for k, t in enumerate(design.times):
                w.writerow([g, t, int(dst[i, k])] + [fmt_float(v) for v in design.X[i, k]])
    return path


def fmt_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return ""
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectSpec:
    """Effect request with attribute profiles given by regressor name or position."""

    kind: str
    t: Any
    u: float | None = None
    u1: float | None = None
    u2: float | None = None
    z: Any = None
    z1: Any = None
    z2: Any = None
    label: str = ""


@dataclass(frozen=True)
class RunConfig:
    quantiles: tuple[float, ...]
    t0: Any
    factors: str | int = "auto"
    tol: float = 1e-5
    max_iter: int = 1000
    ci_level: float = 0.95
    effects: tuple[EffectSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        qs = tuple(float(u) for u in self.quantiles)
        if not qs:
            raise ConfigError("at least one quantile is required")
        if any(not 0.0 < u < 1.0 for u in qs):
            raise ConfigError(f"quantiles must lie strictly inside (0, 1): {qs}")
        if len(set(qs)) != len(qs):
            raise ConfigError(f"quantiles must be distinct: {qs}")
        object.__setattr__(self, "quantiles", tuple(sorted(qs)))
        f = self.factors
        if isinstance(f, str) and f.strip().lower() != "auto":
            try:
                f = int(f)
            except ValueError:
                raise ConfigError(f"factors must be 'auto' or a non-negative integer, got {f!r}") from None
        if isinstance(f, str):
            f = "auto"
        elif isinstance(f, bool) or int(f) != f or f < 0:
            raise ConfigError(f"factors must be 'auto' or a non-negative integer, got {f!r}")
        else:
            f = int(f)
        object.__setattr__(self, "factors", f)
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ConfigError("max_iter must be at least 1")
        if not 0.0 < float(self.ci_level) < 1.0:
            raise ConfigError("ci_level must lie in (0, 1)")
        object.__setattr__(self, "effects", tuple(self.effects))

    @property
    def r_fixed(self) -> int | None:
        return None if self.factors == "auto" else int(self.factors)

    def to_dict(self) -> dict:
        return {"quantiles": list(self.quantiles), "t0": self.t0, "factors": self.factors,
                "tol": self.tol, "max_iter": self.max_iter, "ci_level": self.ci_level,
                "effects": [{k: v for k, v in vars(e).items() if v is not None and v != ""}
                            for e in self.effects]}


_EFFECT_KEYS = ("kind", "t", "u", "u1", "u2", "z", "z1", "z2", "label")


def _effect_from_mapping(m: Mapping, where: str) -> EffectSpec:
    unknown = set(m) - set(_EFFECT_KEYS)
    if unknown:
        raise ConfigError(f"{where}: unknown effect fields {sorted(unknown)}")
    if "kind" not in m or "t" not in m:
        raise ConfigError(f"{where}: effect needs 'kind' and 't'")
    vals = dict(m)
    for k in ("u", "u1", "u2"):
        if vals.get(k) is not None:
            vals[k] = float(vals[k])
    return EffectSpec(**vals)


def _parse_profile(text: str):
    """``1,0.5`` (positional) or ``const:1,z:0.5`` (by name)."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if parts and all(":" in p for p in parts):
        return {k.strip(): float(v) for k, v in (p.split(":", 1) for p in parts)}
    return [float(p) for p in parts]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_config_text(text: str) -> RunConfig:
    """Parse a JSON object or a flat ``key = value`` document.

    In the flat form effects are lines ``effect.<label> = kind=aqtt; t=5;
    u=0.5; z=const:1,z:0.5``.  Lists such as quantiles are comma-separated.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except ValueError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        effects = [_effect_from_mapping(e, f"effects[{i}]")
                   for i, e in enumerate(doc.pop("effects", []))]
        return _build_config(doc, effects)

    doc, effects = {}, []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("effect."):
            fields = {"label": key[len("effect."):]}
            for item in value.split(";"):
                if not item.strip():
                    continue
                if "=" not in item:
                    raise ConfigError(f"config line {n}: effect field {item.strip()!r} lacks '='")
                k, v = (s.strip() for s in item.split("=", 1))
                fields[k] = _parse_profile(v) if k in ("z", "z1", "z2") else _parse_value(v)
            effects.append(_effect_from_mapping(fields, f"config line {n}"))
        elif key == "quantiles":
            doc[key] = [float(v) for v in value.strip("[]").split(",") if v.strip()]
        else:
            doc[key] = _parse_value(value)
    return _build_config(doc, effects)


def _build_config(doc: dict, effects) -> RunConfig:
    known = {"quantiles", "t0", "factors", "tol", "max_iter", "ci_level"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for k in ("quantiles", "t0"):
        if k not in doc:
            raise ConfigError(f"config is missing {k!r}")
    try:
        return RunConfig(effects=tuple(effects), **doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# JSON with round-trip floats
# ---------------------------------------------------------------------------

def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    return obj


def dump_json(doc) -> str:
    """JSON text; floats use the shortest representation that round-trips exactly."""
    return json.dumps(to_jsonable(doc), indent=2, allow_nan=False) + "\n"
