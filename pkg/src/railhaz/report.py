"""Reading and writing the CSV/JSON artifacts exchanged between subcommands.

Free-form numbers are written with 6 significant digits. Hazard-ratio tables
follow the published layout instead: ratios and interval bounds to 3
decimals, p-values to 4 decimals with anything below 1e-4 shown as
``<0.0001``. Exact values always remain available in the JSON fit files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .ctmc import CtmcFit, PanelPath
from .errors import SchemaError, ValidationError
from .inference import wald_interval, wald_pvalue
from .ingest import MissingClass, PanelRow, Reject, SectionRecord
from .survival import CoxFit, SurvivalCurve

__all__ = [
    "DISPLAY_NAMES",
    "SECTION_COLUMNS",
    "PANEL_COLUMNS",
    "fmt_num",
    "fmt_ratio",
    "fmt_pvalue",
    "display_name",
    "write_sections",
    "read_sections",
    "write_panel",
    "read_panel",
    "panel_rows_from_paths",
    "write_rejects",
    "cox_table_rows",
    "write_cox_table",
    "ctmc_table_rows",
    "write_ctmc_tables",
    "write_survival_curves",
    "write_evolution",
    "write_json",
    "read_json",
]

DISPLAY_NAMES = {
    "temperature_c": "Temperature",
    "humidity_pct": "Humidity",
    "snow_depth_cm": "Snow depth",
    "precip_cat": "Ice/snow precipitation",
}

SECTION_COLUMNS = ("train_id", "stratum", "start_km", "stop_km", "primary_delay", "arrival_delay")
PANEL_COLUMNS = ("train_id", "km", "state")
REJECT_COLUMNS = ("source", "line", "train_id", "reason", "detail")


def fmt_num(x: float) -> str:
    """Six significant digits, no trailing zeros; ``-0`` is printed as ``0``."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    s = f"{x:.6g}"
    return "0" if s == "-0" else s


def fmt_ratio(x: float) -> str:
    return "" if not math.isfinite(x) else f"{x:.3f}"


def fmt_pvalue(p: float) -> str:
    if not math.isfinite(p):
        return ""
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


def display_name(name: str) -> str:
    return DISPLAY_NAMES.get(name, name)


def _writer(path: Path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _read_frame(path: str | Path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path.name}: file is empty") from None
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing column(s) {', '.join(missing)}")
    return df


def _float(value: str, what: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ValidationError(f"{what}: not a number: {value!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{what}: non-finite value {value!r}")
    return v


def _int(value: str, what: str) -> int:
    v = _float(value, what)
    if v != int(v):
        raise ValidationError(f"{what}: expected an integer, got {value!r}")
    return int(v)


# -- sections -----------------------------------------------------------------


def write_sections(path: str | Path, records: Iterable[SectionRecord], covariate_names: Sequence[str]) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow([*SECTION_COLUMNS, *covariate_names, "missing_class"])
        for r in records:
            if len(r.covariates) != len(covariate_names):
                raise ValueError(f"{r.train_id}: {len(r.covariates)} covariates, expected {len(covariate_names)}")
            start, stop = fmt_num(r.start_km), fmt_num(r.stop_km)
            if float(stop) <= float(start):
                raise ValueError(
                    f"{r.train_id}: section ({r.start_km}, {r.stop_km}] is empty at 6 significant digits"
                )
            w.writerow([
                r.train_id,
                "" if r.stratum is None else r.stratum,
                start,
                stop,
                r.primary_delay,
                r.arrival_delay_state,
                *(fmt_num(v) for v in r.covariates),
                "" if r.missing_class is None else r.missing_class.name,
            ])


def read_sections(path: str | Path) -> tuple[list[SectionRecord], list[str]]:
    """Load ``sections.csv``; every column not in the fixed set is a covariate."""
    df = _read_frame(path, ("train_id", "start_km", "stop_km", "primary_delay"))
    fixed = set(SECTION_COLUMNS) | {"missing_class"}
    names = [c for c in df.columns if c not in fixed]
    records = []
    for k, row in enumerate(df.to_dict("records"), start=2):
        where = f"{Path(path).name} line {k}"
        mc = row.get("missing_class", "").strip()
        if mc and mc not in MissingClass.__members__:
            raise ValidationError(f"{where}: unknown missing_class {mc!r}")
        stratum = row.get("stratum", "").strip()
        records.append(SectionRecord(
            train_id=row["train_id"],
            start_km=_float(row["start_km"], where),
            stop_km=_float(row["stop_km"], where),
            primary_delay=_int(row["primary_delay"], where),
            arrival_delay_state=_int(row.get("arrival_delay") or "1", where),
            stratum=_int(stratum, where) if stratum else None,
            covariates=tuple(_float(row[c], f"{where} ({c})") for c in names),
            missing_class=MissingClass[mc] if mc else None,
        ))
    return records, names


# -- panel --------------------------------------------------------------------


def panel_rows_from_paths(paths: Iterable[PanelPath]) -> list[PanelRow]:
    return [
        PanelRow(p.train_id, float(d), int(s), tuple(float(v) for v in x))
        for p in paths
        for d, s, x in zip(p.distances, p.states, p.covariates)
    ]


def write_panel(path: str | Path, rows: Iterable[PanelRow], covariate_names: Sequence[str]) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow([*PANEL_COLUMNS, *covariate_names])
        for r in rows:
            w.writerow([r.train_id, fmt_num(r.km), r.state, *(fmt_num(v) for v in r.covariates)])


def read_panel(path: str | Path) -> tuple[list[PanelPath], list[str]]:
    """Load ``panel.csv`` into one path per train, sorted by distance."""
    df = _read_frame(path, PANEL_COLUMNS)
    names = [c for c in df.columns if c not in PANEL_COLUMNS]
    if df.empty:
        return [], names
    name = Path(path).name
    try:
        km = pd.to_numeric(df["km"]).to_numpy(dtype=float)
        state = pd.to_numeric(df["state"]).to_numpy(dtype=float)
        X = df[names].apply(pd.to_numeric).to_numpy(dtype=float).reshape(len(df), len(names))
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from None
    paths = []
    for train, idx in df.groupby("train_id", sort=False).indices.items():
        idx = idx[np.argsort(km[idx], kind="stable")]
        paths.append(PanelPath(str(train), km[idx], state[idx], X[idx]))
    return paths, names


def write_rejects(path: str | Path, rejects: Iterable[Reject]) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(REJECT_COLUMNS)
        for r in rejects:
            w.writerow([r.source, r.line, r.train_id, r.reason, r.detail])


# -- tables -------------------------------------------------------------------


def cox_table_rows(fit: CoxFit, level: float = 0.95) -> list[list[str]]:
    return [
        [display_name(s["predictor"]), fmt_ratio(s["hazard_ratio"]), fmt_ratio(s["ci_lower"]),
         fmt_ratio(s["ci_upper"]), fmt_pvalue(s["p_value"])]
        for s in fit.summary(level)
    ]


def write_cox_table(path: str | Path, fit: CoxFit, level: float = 0.95) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["predictor", "hazard_ratio", "ci_lower", "ci_upper", "p_value"])
        w.writerows(cox_table_rows(fit, level))


def ctmc_table_rows(fit: CtmcFit, level: float = 0.95) -> list[list[str]]:
    """Hazard ratios per transition direction, followed by segment ratios."""
    spec, params = fit.spec, fit.params
    se = fit.standard_errors
    names = spec.param_names()
    index = {n: i for i, n in enumerate(names)}

    def row(label: str, predictor: str, key: str, estimate: float) -> list[str]:
        s = float(se[index[key]]) if se is not None else float("nan")
        if math.isfinite(s) and s > 0:
            lo, hi = wald_interval(estimate, s, level)
            p = wald_pvalue(estimate, s)
        else:
            lo = hi = p = float("nan")
        return [label, predictor, fmt_ratio(math.exp(estimate)), fmt_ratio(lo), fmt_ratio(hi), fmt_pvalue(p)]

    rows = []
    labels = spec.transition_labels()
    for k, t in enumerate(labels):
        for c, cname in enumerate(spec.covariate_names):
            rows.append(row(t, display_name(cname), f"beta[{t}][{cname}]", params.beta[k, c]))
        if params.beta_post is not None:
            for c, cname in enumerate(spec.covariate_names):
                rows.append(row(t, f"{display_name(cname)} (after changepoint)",
                                f"beta_post[{t}][{cname}]", params.beta_post[k, c]))
    if params.z is not None:
        for k, t in enumerate(labels):
            rows.append(row(t, "segment", f"z[{t}]", params.z[k]))
    return rows


def write_ctmc_tables(path: str | Path, fit: CtmcFit, level: float = 0.95) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["transition", "predictor", "hazard_ratio", "ci_lower", "ci_upper", "p_value"])
        w.writerows(ctmc_table_rows(fit, level))


def write_survival_curves(path: str | Path, curves: Iterable[SurvivalCurve]) -> None:
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["stratum", "km", "survival"])
        for c in curves:
            for t, s in zip(c.grid, c.survival):
                w.writerow([c.stratum, fmt_num(t), fmt_num(s)])


def write_evolution(path: str | Path, grid: Sequence[float], probs: np.ndarray) -> None:
    probs = np.asarray(probs, dtype=float)
    q = probs.shape[1]
    header = ["p_punctual", "p_delayed"] if q == 2 else [f"p_state{k}" for k in range(1, q + 1)]
    fh, w = _writer(Path(path))
    with fh:
        w.writerow(["km", *header])
        for t, row in zip(grid, probs):
            w.writerow([fmt_num(t), *(fmt_num(v) for v in row)])


# -- json ---------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
