"""Stratified Cox regression for recurrent events in counting-process form.

Each row of a :class:`CoxDataset` is an interval ``(entry, exit]`` on the
analysis clock during which a train is at risk for its ``j``-th event with
constant covariates. Strata are event orders; each has its own baseline
hazard. Ties are handled by Breslow's approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DataError, SingularInformationError, ValidationError
from .inference import wald_interval, wald_pvalue
from .ingest import SectionRecord

__all__ = [
    "CoxDataset",
    "CoxFit",
    "StepFunction",
    "SurvivalCurve",
    "partial_loglik",
    "score_and_information",
    "fit_cox",
    "predict_survival",
]

LAYOUTS = ("gap", "calendar")


@dataclass
class CoxDataset:
    """Counting-process rows grouped into strata.

    Attributes
    ----------
    train_id : ndarray of str
    stratum : ndarray of int
        Event order number ``j`` (1-based).
    entry, exit : ndarray of float
        Row interval ``(entry, exit]`` on the analysis clock.
    event : ndarray of int
        1 when the row ends with an event.
    X : ndarray, shape (n, p)
    covariate_names : list of str
    layout : {'gap', 'calendar'}
        Clock the entry/exit distances are measured on.
    episode : ndarray of int, optional
        Event order of each row within its train, used only to check that a
        train's rows do not overlap. Defaults to ``stratum``; it differs from
        it after pooling strata, where gap-clock episodes legitimately overlap.
    """

    train_id: np.ndarray
    stratum: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    X: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    layout: str = "gap"
    episode: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.train_id = np.asarray(self.train_id, dtype=object)
        self.stratum = np.asarray(self.stratum, dtype=np.int64)
        self.entry = np.asarray(self.entry, dtype=float)
        self.exit = np.asarray(self.exit, dtype=float)
        self.event = np.asarray(self.event, dtype=np.int64)
        n = self.entry.size
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        if not self.covariate_names:
            self.covariate_names = [f"x{k + 1}" for k in range(self.X.shape[1])]
        self.covariate_names = list(self.covariate_names)
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        for name in ("train_id", "stratum", "exit", "event"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"column {name} has the wrong length")
        if len(self.covariate_names) != self.X.shape[1]:
            raise ValidationError("covariate_names do not match X")
        if np.any(~(self.exit > self.entry)):
            raise ValidationError("every row needs exit > entry")
        if not np.all(np.isin(self.event, (0, 1))):
            raise ValidationError("event indicators must be 0 or 1")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("covariates must be finite")
        if n and self.stratum.min() < 1:
            raise ValidationError("strata must be positive")
        self.episode = self.stratum.copy() if self.episode is None else np.asarray(self.episode, dtype=np.int64)
        if self.episode.shape != (n,):
            raise ValidationError("column episode has the wrong length")
        self._check_disjoint()

    def _check_disjoint(self) -> None:
        if self.entry.size == 0:
            return
        order = np.lexsort((self.entry, self.episode, self.train_id.astype(str)))
        tid = self.train_id[order]
        st = self.episode[order]
        same = (tid[1:] == tid[:-1]) & (st[1:] == st[:-1])
        if np.any(self.entry[order][1:][same] < self.exit[order][:-1][same]):
            raise ValidationError("rows of the same train and stratum overlap")

    @property
    def n_rows(self) -> int:
        return self.entry.size

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def k_max(self) -> int:
        """Largest number of events experienced by a single train."""
        if self.n_events == 0:
            return 0
        _, counts = np.unique(self.train_id[self.event == 1].astype(str), return_counts=True)
        return int(counts.max())

    def unstratified(self) -> "CoxDataset":
        """Same rows pooled into a single stratum."""
        return CoxDataset(
            self.train_id, np.ones_like(self.stratum), self.entry, self.exit, self.event, self.X,
            self.covariate_names, self.layout, episode=self.episode,
        )

    @classmethod
    def from_sections(
        cls,
        records: Sequence[SectionRecord],
        covariate_names: Sequence[str] | None = None,
        layout: str = "gap",
    ) -> "CoxDataset":
        """Build the counting-process layout from section records.

        With ``layout='gap'`` the clock restarts at each train's previous
        event, so risk sets compare trains at equal distance since their last
        primary delay. With ``'calendar'`` distances from the line start are used.
        Records without strata are numbered on the fly.
        """
        if layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        by_train: dict[str, list[SectionRecord]] = {}
        for r in records:
            by_train.setdefault(r.train_id, []).append(r)
        tid, strat, ent, ext, ev, xs = [], [], [], [], [], []
        for train, rows in by_train.items():
            rows = sorted(rows, key=lambda r: r.start_km)
            origin = 0.0
            j_expected = 1
            prev_stop = -math.inf
            for r in rows:
                if r.start_km < prev_stop:
                    raise ValidationError(f"{train}: overlapping sections")
                prev_stop = r.stop_km
                j = r.stratum if r.stratum is not None else j_expected
                if j != j_expected:
                    raise ValidationError(f"{train}: stratum {j} at km {r.start_km}, expected {j_expected}")
                shift = origin if layout == "gap" else 0.0
                tid.append(train)
                strat.append(j)
                ent.append(r.start_km - shift)
                ext.append(r.stop_km - shift)
                ev.append(r.primary_delay)
                xs.append(r.covariates)
                if r.primary_delay:
                    j_expected += 1
                    origin = r.stop_km
        p = len(xs[0]) if xs else len(covariate_names or ())
        if any(len(x) != p for x in xs):
            raise ValidationError("records carry different numbers of covariates")
        X = np.asarray(xs, dtype=float).reshape(len(xs), p)
        return cls(np.array(tid, dtype=object), strat, ent, ext, ev, X, list(covariate_names or []), layout)

    @cached_property
    def _strata_index(self) -> list["_Stratum"]:
        return [_Stratum.build(self, s) for s in np.unique(self.stratum)]


@dataclass
class _Stratum:
    """Beta-independent bookkeeping for the risk sets of one stratum."""

    label: int
    rows: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    X: np.ndarray
    times: np.ndarray  # distinct event times
    d: np.ndarray  # events per time
    xsum: np.ndarray  # (n_times, p) covariate sums over events
    event_rows: np.ndarray
    order_exit: np.ndarray
    order_entry: np.ndarray
    pos_exit: np.ndarray
    pos_entry: np.ndarray

    @classmethod
    def build(cls, data: CoxDataset, label: int) -> "_Stratum":
        rows = np.nonzero(data.stratum == label)[0]
        entry, exit_, X = data.entry[rows], data.exit[rows], data.X[rows]
        ev = data.event[rows] == 1
        times, inv = np.unique(exit_[ev], return_inverse=True)
        d = np.bincount(inv.reshape(-1), minlength=times.size).astype(float)
        xsum = np.zeros((times.size, X.shape[1]))
        np.add.at(xsum, inv.reshape(-1), X[ev])
        order_exit = np.argsort(exit_, kind="mergesort")
        order_entry = np.argsort(entry, kind="mergesort")
        # rows with exit >= t start at pos_exit; rows with entry >= t start at pos_entry
        pos_exit = np.searchsorted(exit_[order_exit], times, side="left")
        pos_entry = np.searchsorted(entry[order_entry], times, side="left")
        return cls(label, rows, entry, exit_, X, times, d, xsum, np.nonzero(ev)[0],
                   order_exit, order_entry, pos_exit, pos_entry)


def _revcumsum(a: np.ndarray) -> np.ndarray:
    # out[i] = sum(a[i:]), with a trailing zero row
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    out[:-1] = np.cumsum(a[::-1], axis=0)[::-1]
    return out


def _stratum_terms(st: _Stratum, beta: np.ndarray, order: int):
    """Log partial likelihood contribution, score, information and log risk sums."""
    p = st.X.shape[1]
    if st.times.size == 0:
        return 0.0, np.zeros(p), np.zeros((p, p)), np.zeros(0)
    eta = st.X @ beta
    m = eta.max()
    w = np.exp(eta - m)

    def risk_sum(vals: np.ndarray) -> np.ndarray:
        ce = _revcumsum(vals[st.order_exit])
        cn = _revcumsum(vals[st.order_entry])
        return ce[st.pos_exit] - cn[st.pos_entry]

    S0 = risk_sum(w)
    total = w.sum()
    # Differencing tail sums loses precision when a risk set is a tiny part
    # of the stratum; recompute those directly with their own shift.
    shift = np.full(S0.shape, m)
    bad = np.nonzero(~(S0 > 1e-8 * total))[0]
    direct = {}
    for k in bad:
        t = st.times[k]
        at_risk = (st.entry < t) & (st.exit >= t)
        if not at_risk.any():
            raise DataError(f"empty risk set at event time {t} in stratum {st.label}")
        e = eta[at_risk]
        mk = e.max()
        wk = np.exp(e - mk)
        S0[k] = wk.sum()
        shift[k] = mk
        direct[k] = (at_risk, wk)
    logS = np.log(S0) + shift
    ll = float(eta[st.event_rows].sum() - np.dot(st.d, logS))
    if order == 0:
        return ll, None, None, logS

    wx = w[:, None] * st.X
    S1 = risk_sum(wx)
    for k, (at_risk, wk) in direct.items():
        S1[k] = wk @ st.X[at_risk]
    xbar = S1 / S0[:, None]
    grad = st.xsum.sum(axis=0) - st.d @ xbar
    if order == 1:
        return ll, grad, None, logS

    wxx = wx[:, :, None] * st.X[:, None, :]
    S2 = risk_sum(wxx)
    for k, (at_risk, wk) in direct.items():
        Xr = st.X[at_risk]
        S2[k] = (wk[:, None] * Xr).T @ Xr
    cov = S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :]
    info = np.einsum("t,tij->ij", st.d, cov)
    return ll, grad, info, logS


def _check_beta(beta, data: CoxDataset) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != data.X.shape[1]:
        raise ValueError(f"beta has {beta.size} entries, data have {data.X.shape[1]} covariates")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    return beta


def _terms(beta: np.ndarray, data: CoxDataset, order: int):
    p = data.X.shape[1]
    ll, grad, info = 0.0, np.zeros(p), np.zeros((p, p))
    # fixed stratum order keeps the reduction reproducible
    for st in data._strata_index:
        l, g, i, _ = _stratum_terms(st, beta, order)
        ll += l
        if order >= 1:
            grad += g
        if order >= 2:
            info += i
    return ll, grad, info


def partial_loglik(beta, data: CoxDataset) -> float:
    """Log partial likelihood (Breslow ties), summed over strata."""
    return _terms(_check_beta(beta, data), data, 0)[0]


def score_and_information(beta, data: CoxDataset) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and observed information of the log partial likelihood."""
    _, g, i = _terms(_check_beta(beta, data), data, 2)
    return g, i


@dataclass
class StepFunction:
    """Right-continuous step function, 0 before the first knot."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.x, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.y])[idx]


@dataclass
class CoxFit:
    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    null_loglik: float
    baseline: dict[int, StepFunction]
    iterations: int
    converged: bool
    covariate_names: list[str]
    layout: str = "gap"
    stratified: bool = True
    ridge: float = 0.0

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta)

    def summary(self, level: float = 0.95) -> list[dict]:
        """Hazard ratio, Wald interval and p-value per covariate."""
        rows = []
        for name, b, se in zip(self.covariate_names, self.beta, self.standard_errors):
            lo, hi = wald_interval(b, se, level) if se > 0 else (math.exp(b), math.exp(b))
            rows.append({
                "predictor": name,
                "coef": float(b),
                "se": float(se),
                "hazard_ratio": math.exp(b),
                "ci_lower": lo,
                "ci_upper": hi,
                "p_value": wald_pvalue(b, se) if se > 0 else float("nan"),
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "model": "cox",
            "covariate_names": self.covariate_names,
            "beta": self.beta.tolist(),
            "covariance": self.covariance.tolist(),
            "loglik": self.loglik,
            "null_loglik": self.null_loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "layout": self.layout,
            "stratified": self.stratified,
            "ridge": self.ridge,
            "baseline": {
                str(j): {"km": f.x.tolist(), "cumhaz": f.y.tolist()} for j, f in sorted(self.baseline.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxFit":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float).reshape(len(d["beta"]), len(d["beta"])),
            loglik=float(d["loglik"]),
            null_loglik=float(d["null_loglik"]),
            baseline={int(j): StepFunction(v["km"], v["cumhaz"]) for j, v in d["baseline"].items()},
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            covariate_names=list(d["covariate_names"]),
            layout=d.get("layout", "gap"),
            stratified=bool(d.get("stratified", True)),
            ridge=float(d.get("ridge", 0.0)),
        )


def _breslow(data: CoxDataset, beta: np.ndarray) -> dict[int, StepFunction]:
    out = {}
    for st in data._strata_index:
        if st.times.size == 0:
            continue
        *_, logS = _stratum_terms(st, beta, 0)
        out[int(st.label)] = StepFunction(st.times, np.cumsum(st.d * np.exp(-logS)))
    return out


def fit_cox(
    data: CoxDataset,
    max_iter: int = 100,
    tol: float = 1e-9,
    ridge: float = 0.0,
    gtol: float = 1e-6,
) -> CoxFit:
    """Maximize the stratified partial likelihood by Newton-Raphson.

    Starts from ``beta = 0`` and halves a step up to 10 times when it lowers
    the (optionally ridge-penalized) log-likelihood. Iteration stops when the
    relative change ``|dll| / (|ll| + 1)`` drops below ``tol`` with a score
    max-norm below ``gtol``, or after ``max_iter`` iterations
    (``converged=False``).

    Raises
    ------
    DataError
        If the data contain no events.
    SingularInformationError
        If the information matrix cannot be inverted; a positive ``ridge``
        adds ``ridge * ||beta||**2`` as a penalty.
    """
    if data.n_events == 0:
        raise DataError("no events: the partial likelihood carries no information")
    p = data.X.shape[1]

    def evaluate(b):
        ll, g, info = _terms(b, data, 2)
        return ll - ridge * (b @ b), g - 2.0 * ridge * b, info + 2.0 * ridge * np.eye(p)

    def solve(info, g):
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise SingularInformationError(
                "information matrix is singular (constant or separating covariates?); "
                "try a small ridge penalty"
            ) from None
        return np.linalg.solve(L.T, np.linalg.solve(L, g))

    beta = np.zeros(p)
    ll, g, info = evaluate(beta)
    null_ll = ll
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = solve(info, g)
        new = beta + step
        ll_new, g_new, info_new = evaluate(new)
        halvings = 0
        while (not np.isfinite(ll_new) or ll_new < ll) and halvings < 10:
            step = step / 2.0
            new = beta + step
            ll_new, g_new, info_new = evaluate(new)
            halvings += 1
        delta = ll_new - ll
        beta, ll, g, info = new, ll_new, g_new, info_new
        if abs(delta) / (abs(ll) + 1.0) < tol and np.max(np.abs(g), initial=0.0) < gtol:
            converged = True
            break

    if p:
        solve(info, np.zeros(p))  # raises when singular at the final iterate
        cov = np.linalg.inv(info)
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((0, 0))
    return CoxFit(
        beta=beta,
        covariance=cov,
        loglik=float(_terms(beta, data, 0)[0]),
        null_loglik=float(null_ll),
        baseline=_breslow(data, beta),
        iterations=it,
        converged=converged,
        covariate_names=list(data.covariate_names),
        layout=data.layout,
        stratified=len(np.unique(data.stratum)) > 1,
        ridge=ridge,
    )


@dataclass
class SurvivalCurve:
    stratum: int
    grid: np.ndarray
    survival: np.ndarray


def predict_survival(fit: CoxFit, x: Sequence[float], stratum: int, grid: Sequence[float]) -> SurvivalCurve:
    """Survival ``exp(-H0_j(t) exp(beta . x))`` for event order ``stratum``.

    ``grid`` is on the fit's analysis clock (distance since the previous
    event for the gap layout).
    """
    if stratum not in fit.baseline:
        raise DataError(f"stratum {stratum} has no events and therefore no baseline hazard")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != fit.beta.size or not np.all(np.isfinite(x)):
        raise ValueError(f"x must be {fit.beta.size} finite values")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be ascending")
    H = fit.baseline[stratum](grid) * math.exp(float(fit.beta @ x))
    return SurvivalCurve(stratum, grid, np.clip(np.exp(-H), 0.0, 1.0))
