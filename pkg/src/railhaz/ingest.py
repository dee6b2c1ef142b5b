"""Train-operation and weather ingestion.

Turns raw timetable/actual-time records into model-ready section records:
missing actual times are imputed by last observation carried forward,
primary/arrival delay indicators are derived from the STA thresholds,
event strata are assigned, and section-averaged weather is joined from an
hourly grid.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, JoinError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "PRIMARY_DELAY_MIN",
    "ARRIVAL_DELAY_MIN",
    "WEATHER_VARIABLES",
    "COVARIATE_NAMES",
    "RawStop",
    "Run",
    "Reject",
    "MissingClass",
    "SectionRecord",
    "WeatherGrid",
    "SpotFix",
    "LineSpot",
    "parse_operations",
    "read_line",
    "classify_missing",
    "impute_locf",
    "derive_indicators",
    "assign_strata",
    "round_to_hour",
    "join_weather",
    "IngestResult",
    "ingest",
]

PRIMARY_DELAY_MIN = 3.0
ARRIVAL_DELAY_MIN = 5.0

PUNCTUAL = 1
DELAYED = 2

WEATHER_VARIABLES = ("temperature_c", "humidity_pct", "snow_depth_cm", "precip_mm")
COVARIATE_NAMES = ("temperature_c", "humidity_pct", "snow_depth_cm", "precip_cat")

OPERATIONS_COLUMNS = (
    "train_number",
    "train_type",
    "spot_name",
    "spot_km",
    "planned_arrival",
    "planned_departure",
    "actual_arrival",
    "actual_departure",
    "date",
)
LINE_COLUMNS = ("spot_name", "spot_km", "easting_km", "northing_km")
WEATHER_COLUMNS = ("point_id", "easting_km", "northing_km", "hour") + WEATHER_VARIABLES

_HHMM = re.compile(r"^(\d{1,2}):(\d{2})$")


@dataclass(frozen=True)
class RawStop:
    train_id: str
    spot_name: str
    spot_km: float
    planned_arrival: datetime | None
    planned_departure: datetime | None
    actual_arrival: datetime | None = None
    actual_departure: datetime | None = None
    imputed_arrival: bool = False
    imputed_departure: bool = False


@dataclass
class Run:
    """One train's trip on one departure date, stops in schedule order."""

    train_id: str
    train_number: str
    date: date
    train_type: str
    stops: list[RawStop]
    first_line: int = 0


@dataclass(frozen=True)
class Reject:
    source: str
    line: int
    train_id: str
    reason: str
    detail: str = ""


class MissingClass(Enum):
    """Which actual times of a section were missing."""

    DepartureOnly = 1
    ArrivalOnly = 2
    Both = 3


def classify_missing(departure_missing: bool, arrival_missing: bool) -> MissingClass | None:
    if departure_missing and arrival_missing:
        return MissingClass.Both
    if departure_missing:
        return MissingClass.DepartureOnly
    if arrival_missing:
        return MissingClass.ArrivalOnly
    return None


@dataclass(frozen=True)
class SectionRecord:
    """One section between consecutive measuring spots of a train run."""

    train_id: str
    start_km: float
    stop_km: float
    primary_delay: int
    arrival_delay_state: int = PUNCTUAL
    stratum: int | None = None
    covariates: tuple[float, ...] = ()
    missing_class: MissingClass | None = None

    def __post_init__(self) -> None:
        if not self.stop_km > self.start_km:
            raise ValidationError(
                f"{self.train_id}: section stop {self.stop_km} must exceed start {self.start_km}"
            )
        if self.primary_delay not in (0, 1):
            raise ValidationError(f"{self.train_id}: primary_delay must be 0 or 1")
        if self.arrival_delay_state not in (PUNCTUAL, DELAYED):
            raise ValidationError(f"{self.train_id}: arrival state must be 1 or 2")
        if self.stratum is not None and self.stratum < 1:
            raise ValidationError(f"{self.train_id}: stratum must be positive")
        if not all(math.isfinite(v) for v in self.covariates):
            raise ValidationError(f"{self.train_id}: non-finite covariate")


# -- parsing -----------------------------------------------------------------


def _parse_time(value: str, day: date) -> tuple[datetime | None, bool]:
    """Parse a time field; returns ``(time, is_clock_only)``. Raises ValueError if malformed."""
    value = value.strip()
    if not value:
        return None, False
    m = _HHMM.match(value)
    if m:
        h, mi = int(m.group(1)), int(m.group(2))
        if h > 23 or mi > 59:
            raise ValueError(f"invalid clock time {value!r}")
        return datetime(day.year, day.month, day.day, h, mi), True
    t = datetime.fromisoformat(value)
    if t.tzinfo is not None:
        t = t.replace(tzinfo=None)
    return t.replace(second=0, microsecond=0), False


def _closest_day(t: datetime, ref: datetime) -> datetime:
    candidates = (t - timedelta(days=1), t, t + timedelta(days=1))
    return min(candidates, key=lambda c: abs((c - ref).total_seconds()))


def parse_operations(path: str | Path) -> tuple[list[Run], list[Reject]]:
    """Read ``operations.csv`` into runs grouped by (train number, date).

    Malformed time fields are kept as missing and reported in the rejects;
    rows that cannot be placed at all (bad km or date) are dropped and
    reported. Runs that fail validation are excluded with a reason code.
    """
    path = Path(path)
    rejects: list[Reject] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            logger.warning("%s is empty", path)
            return [], rejects
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in OPERATIONS_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        groups: dict[tuple[str, date], list[tuple[int, dict]]] = {}
        for lineno, row in enumerate(reader, start=2):
            train = (row.get("train_number") or "").strip()
            try:
                day = date.fromisoformat((row.get("date") or "").strip())
            except ValueError:
                rejects.append(Reject("operations", lineno, train, "bad_date", repr(row.get("date"))))
                continue
            try:
                km = float(row["spot_km"])
                if not math.isfinite(km) or km < 0:
                    raise ValueError
            except (TypeError, ValueError):
                rejects.append(Reject("operations", lineno, train, "bad_spot_km", repr(row.get("spot_km"))))
                continue
            row["spot_km"] = km
            groups.setdefault((train, day), []).append((lineno, row))

    if not groups:
        logger.warning("%s contains no usable rows", path)
        return [], rejects

    runs = []
    for (train, day), rows in groups.items():
        run_id = f"{train}_{day.isoformat()}"
        try:
            runs.append(_build_run(run_id, train, day, rows, rejects))
        except ValidationError as exc:
            rejects.append(Reject("operations", rows[0][0], run_id, getattr(exc, "code", "invalid_run"), str(exc)))
    return runs, rejects


def _run_error(code: str, msg: str) -> ValidationError:
    exc = ValidationError(msg)
    exc.code = code
    return exc


def _build_run(run_id: str, train: str, day: date, rows: list[tuple[int, dict]], rejects: list[Reject]) -> Run:
    stops = []
    prev_planned: datetime | None = None
    shift = timedelta(0)
    for lineno, row in rows:
        parsed = {}
        for col in ("planned_arrival", "planned_departure", "actual_arrival", "actual_departure"):
            try:
                parsed[col] = _parse_time(row.get(col) or "", day)
            except ValueError:
                rejects.append(Reject("operations", lineno, run_id, "malformed_time", f"{col}={row.get(col)!r}"))
                parsed[col] = (None, False)
        # clock-only planned times roll past midnight in file order
        for col in ("planned_arrival", "planned_departure"):
            t, clock = parsed[col]
            if t is None:
                continue
            if clock:
                t = t + shift
                while prev_planned is not None and t < prev_planned:
                    t += timedelta(days=1)
                    shift += timedelta(days=1)
            parsed[col] = (t, clock)
            prev_planned = t
        for col, ref_col in (("actual_arrival", "planned_arrival"), ("actual_departure", "planned_departure")):
            t, clock = parsed[col]
            ref = parsed[ref_col][0] or parsed["planned_arrival"][0] or parsed["planned_departure"][0]
            if t is not None and clock and ref is not None:
                parsed[col] = (_closest_day(t, ref), clock)
        stops.append(
            RawStop(
                train_id=run_id,
                spot_name=(row.get("spot_name") or "").strip(),
                spot_km=row["spot_km"],
                planned_arrival=parsed["planned_arrival"][0],
                planned_departure=parsed["planned_departure"][0],
                actual_arrival=parsed["actual_arrival"][0],
                actual_departure=parsed["actual_departure"][0],
            )
        )

    if len(stops) < 2:
        raise _run_error("too_few_stops", f"{run_id}: a run needs at least two stops")
    # origin has no planned arrival and terminus no planned departure in many timetables
    first, last = stops[0], stops[-1]
    if first.planned_arrival is None:
        stops[0] = replace(first, planned_arrival=first.planned_departure)
    if last.planned_departure is None:
        stops[-1] = replace(last, planned_departure=last.planned_arrival)
    for s in stops:
        if s.planned_arrival is None or s.planned_departure is None:
            raise _run_error("missing_planned", f"{run_id}: planned time missing at {s.spot_name}")
    stops.sort(key=lambda s: (s.planned_departure, s.planned_arrival))
    kms = [s.spot_km for s in stops]
    if any(b <= a for a, b in zip(kms, kms[1:])):
        raise _run_error("non_monotone_km", f"{run_id}: spot_km not increasing in schedule order")
    train_type = (rows[0][1].get("train_type") or "").strip()
    return Run(run_id, train, day, train_type, stops, first_line=rows[0][0])


# -- imputation and indicators ------------------------------------------------


def _minutes(td: timedelta) -> float:
    return td.total_seconds() / 60.0


def impute_locf(
    stops: Sequence[RawStop],
    planned_drive: Sequence[timedelta] | None = None,
    planned_dwell: Sequence[timedelta] | None = None,
) -> list[RawStop]:
    """Fill missing actual times by last observation carried forward.

    Walking the run in schedule order, a missing arrival becomes the latest
    departure plus the planned driving time of the preceding section, and a
    missing departure becomes the latest arrival plus the planned dwell time.
    Each imputed value becomes the new latest time. Imputed fields are flagged.

    Parameters
    ----------
    stops : sequence of RawStop
        One run in schedule order. The first stop must carry an actual
        departure time.
    planned_drive : sequence of timedelta, optional
        Planned driving time of each section (``len(stops) - 1`` entries);
        defaults to planned arrival minus the previous planned departure.
    planned_dwell : sequence of timedelta, optional
        Planned dwell at each stop; defaults to planned departure minus
        planned arrival.
    """
    stops = list(stops)
    if not stops:
        return []
    if stops[0].actual_departure is None:
        raise _run_error("no_locf_seed", f"{stops[0].train_id}: first actual departure missing")
    if planned_drive is None:
        planned_drive = [b.planned_arrival - a.planned_departure for a, b in zip(stops, stops[1:])]
    if planned_dwell is None:
        planned_dwell = [s.planned_departure - s.planned_arrival for s in stops]
    if len(planned_drive) != len(stops) - 1 or len(planned_dwell) != len(stops):
        raise ValueError("planned durations do not match the run length")

    out = []
    first = stops[0]
    if first.actual_arrival is None:
        # nothing to carry forward into the origin; back off the planned dwell
        first = replace(first, actual_arrival=first.actual_departure - planned_dwell[0], imputed_arrival=True)
    out.append(first)
    latest_departure = first.actual_departure
    for k in range(1, len(stops)):
        s = stops[k]
        arr, dep = s.actual_arrival, s.actual_departure
        imp_arr = imp_dep = False
        if arr is None:
            arr = latest_departure + planned_drive[k - 1]
            imp_arr = True
        if dep is None:
            dep = arr + planned_dwell[k]
            imp_dep = True
        latest_departure = dep
        out.append(
            replace(s, actual_arrival=arr, actual_departure=dep, imputed_arrival=imp_arr, imputed_departure=imp_dep)
        )
    return out


def derive_indicators(stops: Sequence[RawStop]) -> list[SectionRecord]:
    """Primary-delay and arrival-state indicators for each section of a run.

    A section is a primary delay when its running time exceeds the planned
    running time by 3 minutes or more; its arrival spot is Delayed when the
    arrival is more than 5 minutes behind schedule.
    """
    records = []
    for a, b in zip(stops, stops[1:]):
        if a.actual_departure is None or b.actual_arrival is None:
            raise DataError(f"{a.train_id}: actual times must be imputed before deriving indicators")
        planned = _minutes(b.planned_arrival - a.planned_departure)
        if planned < 0:
            raise DataError(f"{a.train_id}: negative planned running time {a.spot_name}->{b.spot_name}")
        actual = _minutes(b.actual_arrival - a.actual_departure)
        excess = actual - planned
        late = _minutes(b.actual_arrival - b.planned_arrival)
        records.append(
            SectionRecord(
                train_id=a.train_id,
                start_km=a.spot_km,
                stop_km=b.spot_km,
                primary_delay=int(excess >= PRIMARY_DELAY_MIN),
                arrival_delay_state=DELAYED if late > ARRIVAL_DELAY_MIN else PUNCTUAL,
                missing_class=classify_missing(a.imputed_departure, b.imputed_arrival),
            )
        )
    return records


def assign_strata(records: Sequence[SectionRecord]) -> list[SectionRecord]:
    """Number the event order: stratum ``j`` runs up to and including the ``j``-th primary delay."""
    out = []
    j = 1
    prev_km = -math.inf
    for r in records:
        if r.start_km < prev_km:
            raise ValueError("records must be in ascending distance order")
        prev_km = r.start_km
        out.append(replace(r, stratum=j))
        if r.primary_delay:
            j += 1
    return out


# -- weather -------------------------------------------------------------------


def round_to_hour(t: datetime) -> datetime:
    """Nearest whole hour; half past rounds up."""
    base = t.replace(minute=0, second=0, microsecond=0)
    return base + timedelta(hours=1) if (t - base) >= timedelta(minutes=30) else base


@dataclass
class WeatherGrid:
    """Hourly gridded weather, points sorted lexicographically by (easting, northing)."""

    point_ids: list[str]
    coords: np.ndarray
    hours: list[datetime]
    values: np.ndarray  # (n_points, n_hours, 4); NaN where absent
    _hour_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._hour_index = {h: i for i, h in enumerate(self.hours)}
        e, n = self.coords[:, 0], self.coords[:, 1]
        self._bounds = (
            e.min() - 0.5 * _min_step(e),
            e.max() + 0.5 * _min_step(e),
            n.min() - 0.5 * _min_step(n),
            n.max() + 0.5 * _min_step(n),
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "WeatherGrid":
        missing = [c for c in WEATHER_COLUMNS if c not in df.columns]
        if missing:
            raise SchemaError(f"weather: missing column(s) {', '.join(missing)}")
        if df.empty:
            raise ValidationError("weather grid is empty")
        df = df.copy()
        df["point_id"] = df["point_id"].astype(str)
        df["hour"] = pd.to_datetime(df["hour"]).dt.tz_localize(None)
        if df.duplicated(["point_id", "hour"]).any():
            dup = df[df.duplicated(["point_id", "hour"], keep=False)].iloc[0]
            raise ValidationError(f"weather: duplicate entry for point {dup.point_id} at {dup.hour}")
        pts = df.groupby("point_id")[["easting_km", "northing_km"]].agg(["min", "max"])
        if ((pts[("easting_km", "min")] != pts[("easting_km", "max")]) | (pts[("northing_km", "min")] != pts[("northing_km", "max")])).any():
            raise ValidationError("weather: a point_id has inconsistent coordinates")
        pts = pd.DataFrame(
            {"easting_km": pts[("easting_km", "min")], "northing_km": pts[("northing_km", "min")]}
        ).reset_index()
        pts = pts.sort_values(["easting_km", "northing_km", "point_id"], kind="mergesort").reset_index(drop=True)
        hours = sorted(df["hour"].unique())
        p_index = {pid: i for i, pid in enumerate(pts["point_id"])}
        h_index = {h: i for i, h in enumerate(hours)}
        values = np.full((len(pts), len(hours), len(WEATHER_VARIABLES)), np.nan)
        pi = df["point_id"].map(p_index).to_numpy()
        hi = df["hour"].map(h_index).to_numpy()
        values[pi, hi] = df[list(WEATHER_VARIABLES)].to_numpy(dtype=float)
        return cls(
            point_ids=list(pts["point_id"]),
            coords=pts[["easting_km", "northing_km"]].to_numpy(dtype=float),
            hours=[pd.Timestamp(h).to_pydatetime() for h in hours],
            values=values,
        )

    @classmethod
    def from_csv(cls, path: str | Path) -> "WeatherGrid":
        df = pd.read_csv(path, dtype={"point_id": str})
        df.columns = [c.strip() for c in df.columns]
        return cls.from_frame(df)

    def contains(self, easting: float, northing: float) -> bool:
        e0, e1, n0, n1 = self._bounds
        return e0 <= easting <= e1 and n0 <= northing <= n1

    def nearest_point(self, easting: float, northing: float) -> int:
        # argmin returns the first minimum: ties go to the lexicographically smallest point
        d2 = (self.coords[:, 0] - easting) ** 2 + (self.coords[:, 1] - northing) ** 2
        return int(np.argmin(d2))

    def lookup(self, point: int, hour: datetime) -> np.ndarray:
        i = self._hour_index.get(hour)
        if i is None:
            raise JoinError(f"weather grid has no data for hour {hour.isoformat()}")
        v = self.values[point, i]
        if np.isnan(v).any():
            raise JoinError(f"weather grid point {self.point_ids[point]} has no data for hour {hour.isoformat()}")
        return v


def _min_step(v: np.ndarray) -> float:
    u = np.unique(v)
    return float(np.diff(u).min()) if u.size > 1 else 0.0


@dataclass(frozen=True)
class SpotFix:
    """A measuring spot's position and the time the train passed it."""

    name: str
    easting_km: float
    northing_km: float
    time: datetime


def join_weather(records: Sequence[SectionRecord], grid: WeatherGrid, spots: Sequence[SpotFix]) -> list[SectionRecord]:
    """Attach section-averaged weather covariates.

    Each spot is matched to its nearest grid point at the hour closest to
    the passing time; a section's covariates average its two endpoints.
    Precipitation is averaged in millimetres and then coded 0 (exactly zero)
    or 1.
    """
    if len(spots) != len(records) + 1:
        raise ValueError("need one spot per section endpoint")
    endpoint = []
    for s in spots:
        if not grid.contains(s.easting_km, s.northing_km):
            raise JoinError(f"spot {s.name} ({s.easting_km}, {s.northing_km}) lies outside the weather grid")
        try:
            endpoint.append(grid.lookup(grid.nearest_point(s.easting_km, s.northing_km), round_to_hour(s.time)))
        except JoinError as exc:
            raise JoinError(f"spot {s.name}: {exc}") from None
    out = []
    for k, r in enumerate(records):
        mean = 0.5 * (endpoint[k] + endpoint[k + 1])
        precip_cat = 0.0 if mean[3] == 0.0 else 1.0
        out.append(replace(r, covariates=(float(mean[0]), float(mean[1]), float(mean[2]), precip_cat)))
    return out


# -- pipeline ------------------------------------------------------------------


@dataclass(frozen=True)
class LineSpot:
    name: str
    km: float
    easting_km: float
    northing_km: float


def read_line(path: str | Path) -> dict[str, LineSpot]:
    df = pd.read_csv(path, dtype={"spot_name": str})
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in LINE_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"line: missing column(s) {', '.join(missing)}")
    if df["spot_name"].duplicated().any():
        raise ValidationError("line: duplicate spot_name")
    return {
        r.spot_name.strip(): LineSpot(r.spot_name.strip(), float(r.spot_km), float(r.easting_km), float(r.northing_km))
        for r in df.itertuples(index=False)
    }


@dataclass
class PanelRow:
    train_id: str
    km: float
    state: int
    covariates: tuple[float, ...]


@dataclass
class IngestResult:
    sections: list[SectionRecord]
    panel: list[PanelRow]
    rejects: list[Reject]
    n_runs: int
    covariate_names: tuple[str, ...] = COVARIATE_NAMES


def _panel_rows(run_id: str, stops: Sequence[RawStop], records: Sequence[SectionRecord]) -> list[PanelRow]:
    first = stops[0]
    late0 = _minutes(first.actual_departure - first.planned_departure)
    states = [DELAYED if late0 > ARRIVAL_DELAY_MIN else PUNCTUAL] + [r.arrival_delay_state for r in records]
    covs = [r.covariates for r in records] + [records[-1].covariates]
    return [PanelRow(run_id, s.spot_km, st, cv) for s, st, cv in zip(stops, states, covs)]


def ingest(ops_path: str | Path, line_path: str | Path, weather_path: str | Path) -> IngestResult:
    """Run parsing, imputation, indicator derivation, strata and weather join."""
    runs, rejects = parse_operations(ops_path)
    line = read_line(line_path)
    grid = WeatherGrid.from_csv(weather_path)
    sections: list[SectionRecord] = []
    panel: list[PanelRow] = []
    for run in runs:
        try:
            unknown = [s.spot_name for s in run.stops if s.spot_name not in line]
            if unknown:
                raise _run_error("unknown_spot", f"{run.train_id}: spot(s) {', '.join(unknown)} not in line geometry")
            stops = impute_locf(run.stops)
            records = assign_strata(derive_indicators(stops))
            fixes = [
                SpotFix(
                    s.spot_name,
                    line[s.spot_name].easting_km,
                    line[s.spot_name].northing_km,
                    s.actual_departure if k == 0 else s.actual_arrival,
                )
                for k, s in enumerate(stops)
            ]
            records = join_weather(records, grid, fixes)
        except JoinError as exc:
            rejects.append(Reject("operations", run.first_line, run.train_id, "weather_join", str(exc)))
            continue
        except ValidationError as exc:
            rejects.append(Reject("operations", run.first_line, run.train_id, getattr(exc, "code", "invalid_run"), str(exc)))
            continue
        sections.extend(records)
        panel.extend(_panel_rows(run.train_id, stops, records))
    return IngestResult(sections, panel, rejects, n_runs=len(runs))


def iter_trains(records: Iterable[SectionRecord]) -> dict[str, list[SectionRecord]]:
    """Group records by train, preserving first-seen order."""
    out: dict[str, list[SectionRecord]] = {}
    for r in records:
        out.setdefault(r.train_id, []).append(r)
    return out
