"""Synthetic recurrent-delay and panel CTMC data from known parameters.

Every train draws from its own :func:`railhaz.rng.derive_stream` stream in
a fixed order: first the covariates of each section (section by section,
covariate by covariate), then the event or jump process. Output therefore
depends only on the configuration, never on how trains are scheduled.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctmc import CtmcParams, IntensitySpec, PanelPath
from .ingest import SectionRecord
from .rng import Xoshiro256, derive_stream
from .survival import CoxDataset

__all__ = [
    "CovariateSpec",
    "BaselineHazard",
    "SimConfig",
    "DEFAULT_COVARIATES",
    "simulate_cox_sections",
    "simulate_cox",
    "simulate_ctmc",
]


@dataclass(frozen=True)
class CovariateSpec:
    """Distribution of one section-level covariate.

    ``dist`` is one of ``uniform`` (low, high), ``bernoulli`` (p),
    ``normal`` (mean, sd) or ``constant`` (value).
    """

    name: str
    dist: str = "uniform"
    params: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        arity = {"uniform": 2, "bernoulli": 1, "normal": 2, "constant": 1}
        if self.dist not in arity:
            raise ValueError(f"unknown covariate distribution {self.dist!r}")
        if len(self.params) != arity[self.dist]:
            raise ValueError(f"{self.dist} takes {arity[self.dist]} parameter(s)")

    def draw(self, rng: Xoshiro256) -> float:
        if self.dist == "uniform":
            return rng.uniform_range(*self.params)
        if self.dist == "bernoulli":
            return float(rng.bernoulli(self.params[0]))
        if self.dist == "normal":
            return rng.normal(*self.params)
        return self.params[0]


DEFAULT_COVARIATES = (
    CovariateSpec("temperature_c", "uniform", (-15.0, 5.0)),
    CovariateSpec("humidity_pct", "uniform", (60.0, 100.0)),
    CovariateSpec("snow_depth_cm", "uniform", (0.0, 20.0)),
    CovariateSpec("precip_cat", "bernoulli", (0.3,)),
)


@dataclass(frozen=True)
class BaselineHazard:
    """Piecewise-constant hazard per km: ``rates[i]`` applies on ``[knots[i], knots[i+1])``."""

    knots: tuple[float, ...] = (0.0,)
    rates: tuple[float, ...] = (0.005,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "knots", tuple(float(v) for v in self.knots))
        object.__setattr__(self, "rates", tuple(float(v) for v in self.rates))
        if len(self.knots) != len(self.rates) or not self.knots or self.knots[0] != 0.0:
            raise ValueError("baseline needs one rate per knot, with the first knot at 0")
        if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError("baseline knots must increase")
        if any(r < 0 or not math.isfinite(r) for r in self.rates):
            raise ValueError("baseline rates must be finite and nonnegative")

    def first_crossing(self, g0: float, g1: float, amount: float) -> tuple[float | None, float]:
        """Walk the cumulative hazard from gap ``g0`` towards ``g1``.

        Returns ``(gap, 0)`` where the cumulative hazard has grown by
        ``amount``, or ``(None, remaining)`` if ``g1`` is reached first.
        """
        knots = self.knots
        i = max(0, bisect.bisect_right(knots, g0) - 1)
        g = g0
        while g < g1:
            end = knots[i + 1] if i + 1 < len(knots) else math.inf
            end = min(end, g1)
            rate = self.rates[i]
            mass = rate * (end - g)
            if rate > 0 and mass >= amount:
                return g + amount / rate, 0.0
            amount -= mass
            g = end
            i += 1
        return None, amount


@dataclass
class SimConfig:
    """Ground truth and layout for simulated trains.

    ``spots`` overrides the regular spacing. ``covariate_table`` supplies
    covariates instead of drawing them: shape ``(n_sections, p)`` for all
    trains or ``(n_trains, n_sections, p)``.
    """

    seed: int = 0
    n_trains: int = 100
    line_length_km: float = 711.0
    spot_spacing: float = 10.0
    spots: tuple[float, ...] | None = None
    covariates: tuple[CovariateSpec, ...] = DEFAULT_COVARIATES
    covariate_table: np.ndarray | None = None
    cox_beta: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    cox_baseline: tuple[BaselineHazard, ...] = (BaselineHazard(),)
    ctmc_spec: IntensitySpec = field(default_factory=IntensitySpec)
    ctmc_params: CtmcParams | None = None
    initial_state: int = 1
    resolution_km: float = 0.001

    def __post_init__(self) -> None:
        if self.resolution_km < 0:
            raise ValueError("resolution_km must be nonnegative")
        if self.n_trains < 1:
            raise ValueError("n_trains must be positive")
        if self.line_length_km <= 0 or self.spot_spacing <= 0:
            raise ValueError("line length and spot spacing must be positive")
        self.covariates = tuple(self.covariates)
        self.cox_baseline = tuple(self.cox_baseline)
        if not self.cox_baseline:
            raise ValueError("need at least one stratum baseline")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def spot_km(self) -> np.ndarray:
        if self.spots is not None:
            s = np.asarray(self.spots, dtype=float)
            if s.size < 2 or np.any(np.diff(s) <= 0):
                raise ValueError("spots must be strictly increasing with at least two entries")
            return s
        s = np.arange(0.0, self.line_length_km, self.spot_spacing)
        return np.append(s, self.line_length_km)

    def baseline_for(self, stratum: int) -> BaselineHazard:
        return self.cox_baseline[min(stratum, len(self.cox_baseline)) - 1]

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "n_trains": self.n_trains,
            "line_length_km": self.line_length_km,
            "spot_spacing": self.spot_spacing,
            "spots": None if self.spots is None else list(self.spots),
            "covariates": [{"name": c.name, "dist": c.dist, "params": list(c.params)} for c in self.covariates],
            "cox_beta": list(self.cox_beta),
            "cox_baseline": [{"knots": list(b.knots), "rates": list(b.rates)} for b in self.cox_baseline],
            "ctmc": {
                **self.ctmc_spec.to_dict(),
                "theta": None if self.ctmc_params is None else self.ctmc_params.flatten().tolist(),
            },
            "initial_state": self.initial_state,
            "resolution_km": self.resolution_km,
        }
        if self.covariate_table is not None:
            d["covariate_table"] = np.asarray(self.covariate_table).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        covs = tuple(
            CovariateSpec(c["name"], c.get("dist", "uniform"), tuple(c.get("params", (0.0, 1.0))))
            for c in d["covariates"]
        ) if "covariates" in d else DEFAULT_COVARIATES
        names = tuple(c.name for c in covs)
        ctmc = dict(d.get("ctmc") or {})
        spec = IntensitySpec(
            q=int(ctmc.get("q", 2)),
            transitions=tuple(tuple(t) for t in ctmc.get("transitions", ((1, 2), (2, 1)))),
            covariate_names=tuple(ctmc.get("covariate_names", names)),
            changepoint=ctmc.get("changepoint"),
            split_covariates=bool(ctmc.get("split_covariates", False)),
        )
        params = None
        if ctmc.get("theta") is not None:
            params = CtmcParams.unflatten(np.asarray(ctmc["theta"], dtype=float), spec)
        elif "log_q0" in ctmc:
            m = spec.n_transitions
            params = CtmcParams(
                ctmc["log_q0"],
                ctmc.get("beta", np.zeros((m, spec.n_covariates))),
                ctmc.get("z") if spec.changepoint is not None else None,
                ctmc.get("beta_post") if spec.split_covariates else None,
            )
        table = d.get("covariate_table")
        return cls(
            seed=int(d.get("seed", 0)),
            n_trains=int(d.get("n_trains", 100)),
            line_length_km=float(d.get("line_length_km", 711.0)),
            spot_spacing=float(d.get("spot_spacing", 10.0)),
            spots=None if d.get("spots") is None else tuple(d["spots"]),
            covariates=covs,
            covariate_table=None if table is None else np.asarray(table, dtype=float),
            cox_beta=tuple(d.get("cox_beta", (0.0,) * len(covs))),
            cox_baseline=tuple(
                BaselineHazard(tuple(b["knots"]), tuple(b["rates"])) for b in d.get("cox_baseline", [{"knots": [0.0], "rates": [0.005]}])
            ),
            ctmc_spec=spec,
            ctmc_params=params,
            initial_state=int(d.get("initial_state", 1)),
            resolution_km=float(d.get("resolution_km", 0.001)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _section_covariates(config: SimConfig, rng: Xoshiro256, train: int, n_sections: int) -> list[list[float]]:
    if config.covariate_table is not None:
        table = np.asarray(config.covariate_table, dtype=float)
        if table.ndim == 3:
            table = table[train]
        if table.shape != (n_sections, len(config.covariates)):
            raise ValueError(f"covariate_table must have shape ({n_sections}, {len(config.covariates)})")
        return table.tolist()
    return [[c.draw(rng) for c in config.covariates] for _ in range(n_sections)]


def _quantize(value: float, res: float) -> float:
    if res <= 0:
        return value
    return round(math.ceil(value / res - 1e-9) * res, 9)


def _train_id(i: int) -> str:
    return f"T{i:05d}"


def simulate_cox_sections(config: SimConfig) -> list[SectionRecord]:
    """Recurrent primary delays at their event distances, in counting-process rows.

    Gap distances to successive events are drawn by inverting the cumulative
    hazard ``H0_j(gap) * exp(beta . x)``; a section is split at each event
    and the train is censored at the end of the line. Event distances are
    rounded up to ``config.resolution_km`` (1 m by default) so that written
    sections keep positive length; set it to 0 for unrounded distances.
    """
    spots = config.spot_km()
    beta = np.asarray(config.cox_beta, dtype=float)
    if beta.size != len(config.covariates):
        raise ValueError("cox_beta must have one entry per covariate")
    res = config.resolution_km
    records: list[SectionRecord] = []
    for i in range(config.n_trains):
        rng = derive_stream(config.seed, i)
        X = _section_covariates(config, rng, i, spots.size - 1)
        tid = _train_id(i)
        j = 1
        origin = spots[0]
        target = rng.exponential()
        for k in range(spots.size - 1):
            a, b = float(spots[k]), float(spots[k + 1])
            x = tuple(X[k])
            risk = math.exp(float(beta @ np.asarray(x))) if beta.size else 1.0
            cur = a
            while True:
                gap, remaining = config.baseline_for(j).first_crossing(cur - origin, b - origin, target / risk)
                if gap is None:
                    target = remaining * risk
                    records.append(SectionRecord(tid, cur, b, 0, stratum=j, covariates=x))
                    break
                e = _quantize(origin + gap, res)
                if e <= cur:
                    e = cur + res if res > 0 else math.nextafter(cur, math.inf)
                if e >= b:
                    # the crossing rounded onto the boundary: record the event there
                    records.append(SectionRecord(tid, cur, b, 1, stratum=j, covariates=x))
                    j += 1
                    origin = b
                    target = rng.exponential()
                    break
                records.append(SectionRecord(tid, cur, e, 1, stratum=j, covariates=x))
                j += 1
                origin = cur = e
                target = rng.exponential()
    return records


def simulate_cox(config: SimConfig, layout: str = "gap") -> CoxDataset:
    return CoxDataset.from_sections(simulate_cox_sections(config), config.covariate_names, layout)


def _rates(params: CtmcParams, spec: IntensitySpec, x: np.ndarray, post: bool) -> list[list[tuple[int, float]]]:
    """Outgoing (destination, rate) pairs per state, 0-based."""
    beta = params.beta_post if (post and params.beta_post is not None) else params.beta
    eta = params.log_q0 + (beta @ x if x.size else 0.0)
    if post and params.z is not None:
        eta = eta + params.z
    out: list[list[tuple[int, float]]] = [[] for _ in range(spec.q)]
    for k, (r, s) in enumerate(spec.transitions):
        out[r - 1].append((s - 1, math.exp(float(eta[k]))))
    return out


def simulate_ctmc(config: SimConfig) -> list[PanelPath]:
    """Exact jump-process simulation recorded only at measuring spots.

    Competing exponential clocks are redrawn whenever the intensities change,
    at section boundaries and at the changepoint.
    """
    spec, params = config.ctmc_spec, config.ctmc_params
    if params is None:
        raise ValueError("simulate_ctmc needs ctmc_params")
    if spec.covariate_names != config.covariate_names:
        raise ValueError("CTMC covariates must match the simulated covariates")
    if not 1 <= config.initial_state <= spec.q:
        raise ValueError("initial_state out of range")
    spots = config.spot_km()
    t0 = spec.changepoint
    paths = []
    rate_cache: dict[tuple, list] = {}
    for i in range(config.n_trains):
        rng = derive_stream(config.seed, i)
        X = _section_covariates(config, rng, i, spots.size - 1)
        state = config.initial_state - 1
        states = [state + 1]
        for k in range(spots.size - 1):
            a, b = float(spots[k]), float(spots[k + 1])
            pieces = [(a, b)] if t0 is None or not a < t0 < b else [(a, t0), (t0, b)]
            for u, v in pieces:
                post = t0 is not None and u >= t0
                key = (tuple(X[k]), post)
                out = rate_cache.get(key)
                if out is None:
                    out = rate_cache[key] = _rates(params, spec, np.asarray(X[k], dtype=float), post)
                t = u
                while True:
                    exits = out[state]
                    total = sum(r for _, r in exits)
                    if total <= 0.0:
                        break
                    t += rng.exponential() / total
                    if t >= v:
                        break
                    pick = rng.uniform() * total
                    acc = 0.0
                    for dest, r in exits:
                        acc += r
                        if pick < acc:
                            break
                    state = dest
            states.append(state + 1)
        covs = np.asarray(X + [X[-1]], dtype=float).reshape(spots.size, len(config.covariates))
        paths.append(PanelPath(_train_id(i), spots.copy(), np.asarray(states), covs))
    return paths
