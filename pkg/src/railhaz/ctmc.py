"""Panel-observed continuous-time Markov chains with covariates and a changepoint.

Off-diagonal intensities follow a log-linear model

    q_rs(t) = exp(log_q0_rs + beta_rs . x + z_rs * 1{t >= t0})

with diagonal entries making each row sum to zero. Transition probabilities
over an observation interval are matrix exponentials, composed across the
changepoint when the interval straddles it. The panel likelihood multiplies
the transition probabilities between consecutive observed states.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import DataError, ValidationError
from .expm import expm_components

__all__ = [
    "IntensitySpec",
    "CtmcParams",
    "CtmcFit",
    "PanelPath",
    "build_intensity",
    "interval_probability",
    "panel_loglik",
    "fit_ctmc",
    "evolution_probabilities",
    "transition_counts",
]

LOG_FLOOR = math.log(1e-300)
_CHUNK = 32768


@dataclass(frozen=True)
class IntensitySpec:
    """Structure of the intensity model.

    States are numbered ``1..q``; ``transitions`` lists the allowed ``(r, s)``
    pairs. With ``split_covariates`` the covariate effects after the
    changepoint get their own coefficients instead of sharing ``beta``.
    """

    q: int = 2
    transitions: tuple[tuple[int, int], ...] = ((1, 2), (2, 1))
    covariate_names: tuple[str, ...] = ()
    changepoint: float | None = None
    split_covariates: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "transitions", tuple((int(r), int(s)) for r, s in self.transitions))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.q < 2:
            raise ValueError("a chain needs at least two states")
        seen = set()
        for r, s in self.transitions:
            if r == s or not (1 <= r <= self.q and 1 <= s <= self.q):
                raise ValueError(f"invalid transition {r}->{s} for {self.q} states")
            if (r, s) in seen:
                raise ValueError(f"duplicate transition {r}->{s}")
            seen.add((r, s))
        if self.split_covariates and self.changepoint is None:
            raise ValueError("split_covariates requires a changepoint")
        if self.changepoint is not None and not math.isfinite(self.changepoint):
            raise ValueError("changepoint must be finite")

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_params(self) -> int:
        m, p = self.n_transitions, self.n_covariates
        n = m + m * p
        if self.changepoint is not None:
            n += m
            if self.split_covariates:
                n += m * p
        return n

    def homogeneous(self) -> "IntensitySpec":
        """The same model without changepoint (``z = 0`` restriction)."""
        return IntensitySpec(self.q, self.transitions, self.covariate_names, None, False)

    def transition_labels(self) -> list[str]:
        return [f"{r}->{s}" for r, s in self.transitions]

    def param_names(self) -> list[str]:
        labels = self.transition_labels()
        names = [f"log_q0[{t}]" for t in labels]
        names += [f"beta[{t}][{c}]" for t in labels for c in self.covariate_names]
        if self.changepoint is not None:
            names += [f"z[{t}]" for t in labels]
            if self.split_covariates:
                names += [f"beta_post[{t}][{c}]" for t in labels for c in self.covariate_names]
        return names

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "transitions": [list(t) for t in self.transitions],
            "covariate_names": list(self.covariate_names),
            "changepoint": self.changepoint,
            "split_covariates": self.split_covariates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensitySpec":
        return cls(
            q=int(d["q"]),
            transitions=tuple(tuple(t) for t in d["transitions"]),
            covariate_names=tuple(d.get("covariate_names", ())),
            changepoint=d.get("changepoint"),
            split_covariates=bool(d.get("split_covariates", False)),
        )


@dataclass(frozen=True)
class CtmcParams:
    log_q0: np.ndarray
    beta: np.ndarray
    z: np.ndarray | None = None
    beta_post: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "log_q0", np.asarray(self.log_q0, dtype=float).reshape(-1))
        m = self.log_q0.size
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(m, -1))
        if self.z is not None:
            object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(m))
        if self.beta_post is not None:
            object.__setattr__(self, "beta_post", np.asarray(self.beta_post, dtype=float).reshape(m, -1))
        for arr in (self.log_q0, self.beta, self.z, self.beta_post):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("CTMC parameters must be finite")

    @classmethod
    def zeros(cls, spec: IntensitySpec) -> "CtmcParams":
        return cls.unflatten(np.zeros(spec.n_params), spec)

    def flatten(self) -> np.ndarray:
        parts = [self.log_q0, self.beta.ravel()]
        if self.z is not None:
            parts.append(self.z)
        if self.beta_post is not None:
            parts.append(self.beta_post.ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, theta: np.ndarray, spec: IntensitySpec) -> "CtmcParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {theta.size}")
        m, p = spec.n_transitions, spec.n_covariates
        log_q0 = theta[:m]
        beta = theta[m : m + m * p].reshape(m, p)
        pos = m + m * p
        z = beta_post = None
        if spec.changepoint is not None:
            z = theta[pos : pos + m]
            pos += m
            if spec.split_covariates:
                beta_post = theta[pos : pos + m * p].reshape(m, p)
        return cls(log_q0, beta, z, beta_post)


def _check_params(params: CtmcParams, spec: IntensitySpec) -> None:
    m, p = spec.n_transitions, spec.n_covariates
    if params.log_q0.size != m or params.beta.shape != (m, p):
        raise ValueError("parameters do not match the intensity spec")
    if (spec.changepoint is not None) != (params.z is not None):
        raise ValueError("changepoint coefficients must be present exactly when a changepoint is set")
    if spec.split_covariates != (params.beta_post is not None):
        raise ValueError("split covariate coefficients do not match the intensity spec")


def _linear_predictors(params: CtmcParams, X: np.ndarray, post: bool) -> np.ndarray:
    # (m, n) log-intensities for covariate rows X (n, p)
    beta = params.beta_post if (post and params.beta_post is not None) else params.beta
    eta = params.log_q0[:, None] + beta @ X.T
    if post and params.z is not None:
        eta = eta + params.z[:, None]
    return eta


def _intensity_components(params: CtmcParams, spec: IntensitySpec, X: np.ndarray, post: bool) -> np.ndarray:
    """Intensity matrices in component layout ``(q, q, n)``."""
    rates = np.exp(_linear_predictors(params, X, post))
    n = X.shape[0]
    Q = np.zeros((spec.q, spec.q, n))
    for k, (r, s) in enumerate(spec.transitions):
        Q[r - 1, s - 1] = rates[k]
    for r in range(spec.q):
        Q[r, r] = -sum(Q[r, s] for s in range(spec.q) if s != r)
    return Q


def build_intensity(params: CtmcParams, x: Sequence[float], t: float, spec: IntensitySpec) -> np.ndarray:
    """Intensity matrix at distance ``t`` for covariate vector ``x``."""
    _check_params(params, spec)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != spec.n_covariates:
        raise ValueError(f"expected {spec.n_covariates} covariates, got {x.shape[1]}")
    post = spec.changepoint is not None and t >= spec.changepoint
    return _intensity_components(params, spec, x, post)[:, :, 0]


def _segment_lengths(spec: IntensitySpec, t_start: np.ndarray, t_end: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if spec.changepoint is None:
        return t_end - t_start, np.zeros_like(t_start)
    t0 = spec.changepoint
    pre = np.clip(np.minimum(t_end, t0) - t_start, 0.0, None)
    post = np.clip(t_end - np.maximum(t_start, t0), 0.0, None)
    return pre, post


def _probabilities(params: CtmcParams, spec: IntensitySpec, X: np.ndarray, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Interval transition matrices ``(q, q, n)``, clamped to [0, 1]."""
    q, n = spec.q, X.shape[0]
    P = np.zeros((q, q, n))
    for r in range(q):
        P[r, r] = 1.0
    on_pre = pre > 0
    on_post = post > 0
    if on_pre.any():
        idx = np.nonzero(on_pre)[0]
        Q = _intensity_components(params, spec, X[idx], post=False)
        P[:, :, idx] = expm_components(Q * pre[idx])
    if on_post.any():
        idx = np.nonzero(on_post)[0]
        Q = _intensity_components(params, spec, X[idx], post=True)
        E = expm_components(Q * post[idx])
        both = on_pre[idx]
        if both.any():
            A = P[:, :, idx[both]]
            B = E[:, :, both]
            E[:, :, both] = np.einsum("ikn,kjn->ijn", A, B)
        P[:, :, idx] = E
    return np.clip(P, 0.0, 1.0)


def interval_probability(
    params: CtmcParams, x: Sequence[float], t_start: float, t_end: float, spec: IntensitySpec
) -> np.ndarray:
    """Transition probability matrix from distance ``t_start`` to ``t_end``."""
    _check_params(params, spec)
    if not t_end >= t_start:
        raise ValueError("t_end must not precede t_start")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != spec.n_covariates:
        raise ValueError(f"expected {spec.n_covariates} covariates, got {x.shape[1]}")
    pre, post = _segment_lengths(spec, np.array([float(t_start)]), np.array([float(t_end)]))
    return _probabilities(params, spec, x, pre, post)[:, :, 0]


@dataclass(frozen=True)
class PanelPath:
    """States of one train observed at measuring-spot distances.

    ``covariates[j]`` holds the covariates of the interval that starts at
    ``distances[j]``; the last row is not used by the likelihood.
    """

    train_id: str
    distances: np.ndarray
    states: np.ndarray
    covariates: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.distances, dtype=float).reshape(-1)
        s = np.asarray(self.states).reshape(-1)
        if s.size and not np.all(np.equal(np.mod(s, 1), 0)):
            raise ValidationError(f"path {self.train_id}: states must be integers")
        s = s.astype(np.int64)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(d.size, -1) if d.size else x.reshape(0, 0)
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "covariates", x)
        if d.size < 1:
            raise ValidationError(f"path {self.train_id}: no observations")
        if s.size != d.size or x.shape[0] != d.size:
            raise ValidationError(f"path {self.train_id}: distances, states and covariates differ in length")
        if np.any(np.diff(d) <= 0):
            raise ValidationError(f"path {self.train_id}: distances must be strictly increasing")
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(x)):
            raise ValidationError(f"path {self.train_id}: non-finite distance or covariate")


@dataclass
class _Design:
    """Unique interval designs with transition counts."""

    X: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    counts: np.ndarray  # (n_unique, q, q)
    n_intervals: int


def _compile(paths: Sequence[PanelPath], spec: IntensitySpec) -> _Design:
    q, p = spec.q, spec.n_covariates
    froms, tos, Xs, starts, ends = [], [], [], [], []
    for path in paths:
        if path.states.min() < 1 or path.states.max() > q:
            raise ValidationError(f"path {path.train_id}: states outside 1..{q}")
        if path.covariates.shape[1] != p:
            raise ValidationError(
                f"path {path.train_id}: {path.covariates.shape[1]} covariates, expected {p}"
            )
        if path.distances.size < 2:
            continue
        froms.append(path.states[:-1])
        tos.append(path.states[1:])
        Xs.append(path.covariates[:-1])
        starts.append(path.distances[:-1])
        ends.append(path.distances[1:])
    if not froms:
        return _Design(np.zeros((0, p)), np.zeros(0), np.zeros(0), np.zeros((0, q, q)), 0)
    fr = np.concatenate(froms) - 1
    to = np.concatenate(tos) - 1
    X = np.concatenate(Xs).reshape(fr.size, p)
    pre, post = _segment_lengths(spec, np.concatenate(starts), np.concatenate(ends))
    keys = np.column_stack([X, pre, post])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.zeros((uniq.shape[0], q, q))
    np.add.at(counts, (inv, fr, to), 1.0)
    return _Design(uniq[:, :p], uniq[:, p], uniq[:, p + 1], counts, fr.size)


def _design_loglik(params: CtmcParams, spec: IntensitySpec, design: _Design, n_threads: int = 1) -> tuple[float, int]:
    n = design.X.shape[0]
    if n == 0:
        return 0.0, 0
    bounds = [(a, min(a + _CHUNK, n)) for a in range(0, n, _CHUNK)]

    def chunk(b: tuple[int, int]) -> tuple[float, int]:
        lo, hi = b
        P = _probabilities(params, spec, design.X[lo:hi], design.pre[lo:hi], design.post[lo:hi])
        C = design.counts[lo:hi].transpose(1, 2, 0)
        used = C > 0
        Pu = P[used]
        floored = Pu <= 1e-300
        with np.errstate(divide="ignore"):
            logs = np.where(floored, LOG_FLOOR, np.log(np.where(floored, 1.0, Pu)))
        return float(np.dot(C[used], logs)), int(np.count_nonzero(floored))

    if n_threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(chunk, bounds))
    else:
        parts = [chunk(b) for b in bounds]
    total = 0.0
    floored = 0
    for ll, nf in parts:
        total += ll
        floored += nf
    return total, floored


def panel_loglik(
    params: CtmcParams,
    paths: Sequence[PanelPath],
    spec: IntensitySpec,
    n_threads: int = 1,
    return_diagnostics: bool = False,
):
    """Log-likelihood of panel-observed paths.

    Each consecutive pair of observations contributes ``log P[Y_j, Y_j+1]``
    using the covariates attached to the left observation. Probabilities
    that underflow contribute ``log(1e-300)``; with ``return_diagnostics``
    the number of such floored terms is returned as well.
    """
    _check_params(params, spec)
    ll, floored = _design_loglik(params, spec, _compile(paths, spec), n_threads)
    if floored:
        warnings.warn(f"{floored} observed transition(s) had probability below 1e-300", RuntimeWarning)
    return (ll, floored) if return_diagnostics else ll


def transition_counts(paths: Sequence[PanelPath], q: int) -> tuple[np.ndarray, np.ndarray]:
    """Observed consecutive-pair counts ``(q, q)`` and distance spent per starting state."""
    counts = np.zeros((q, q))
    exposure = np.zeros(q)
    for path in paths:
        fr = path.states[:-1] - 1
        to = path.states[1:] - 1
        np.add.at(counts, (fr, to), 1.0)
        np.add.at(exposure, fr, np.diff(path.distances))
    return counts, exposure


def _initial_theta(paths: Sequence[PanelPath], spec: IntensitySpec) -> np.ndarray:
    counts, exposure = transition_counts(paths, spec.q)
    theta = np.zeros(spec.n_params)
    for k, (r, s) in enumerate(spec.transitions):
        n_rs = counts[r - 1, s - 1]
        time_r = exposure[r - 1]
        # half a count keeps the log finite for unobserved transitions
        rate = max(n_rs, 0.5) / time_r if time_r > 0 else 1.0
        theta[k] = math.log(rate)
    return theta


def _standardizer(spec: IntensitySpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column centers, scales and the linear map from standardized to raw parameters."""
    p, m = spec.n_covariates, spec.n_transitions
    if X.shape[0]:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
    else:
        center, scale = np.zeros(p), np.ones(p)
    scale = np.where(scale > 0, scale, 1.0)
    T = np.eye(spec.n_params)
    # raw beta = std beta / scale; raw log_q0 absorbs -sum(std beta * center / scale)
    for k in range(m):
        for c in range(p):
            b = m + k * p + c
            T[b, b] = 1.0 / scale[c]
            T[k, b] = -center[c] / scale[c]
    if spec.changepoint is not None and spec.split_covariates:
        zoff = m + m * p
        boff = zoff + m
        for k in range(m):
            for c in range(p):
                b_pre = m + k * p + c
                b_post = boff + k * p + c
                T[b_post, b_post] = 1.0 / scale[c]
                # post intercept is log_q0 + z, so z carries the pre/post centering difference
                T[zoff + k, b_post] = -center[c] / scale[c]
                T[zoff + k, b_pre] = center[c] / scale[c]
    return center, scale, T


def _num_gradient(f, theta: np.ndarray) -> np.ndarray:
    g = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-6 * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (tp[i] - tm[i])
    return g


def _num_hessian(f, theta: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    n = theta.size
    h = rel_step * (1.0 + np.abs(theta))
    f0 = f(theta)
    H = np.empty((n, n))

    def at(i, si, j=None, sj=0):
        t = theta.copy()
        t[i] += si * h[i]
        if j is not None:
            t[j] += sj * h[j]
        return f(t)

    fp = [at(i, 1) for i in range(n)]
    fm = [at(i, -1) for i in range(n)]
    for i in range(n):
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / h[i] ** 2
        for j in range(i):
            v = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1) + at(i, -1, j, -1)) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


@dataclass
class CtmcFit:
    params: CtmcParams
    spec: IntensitySpec
    loglik: float
    converged: bool
    covariance: np.ndarray | None
    n_iter: int = 0
    n_intervals: int = 0
    max_abs_gradient: float = float("nan")
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def param_names(self) -> list[str]:
        return self.spec.param_names()

    @property
    def theta(self) -> np.ndarray:
        return self.params.flatten()

    @property
    def standard_errors(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "model": "ctmc",
            "spec": self.spec.to_dict(),
            "param_names": self.param_names,
            "theta": self.theta.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "n_intervals": self.n_intervals,
            "max_abs_gradient": self.max_abs_gradient,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CtmcFit":
        spec = IntensitySpec.from_dict(d["spec"])
        cov = d.get("covariance")
        return cls(
            params=CtmcParams.unflatten(np.asarray(d["theta"], dtype=float), spec),
            spec=spec,
            loglik=float(d["loglik"]),
            converged=bool(d["converged"]),
            covariance=None if cov is None else np.asarray(cov, dtype=float),
            n_iter=int(d.get("n_iter", 0)),
            n_intervals=int(d.get("n_intervals", 0)),
            max_abs_gradient=float(d.get("max_abs_gradient", float("nan"))),
            message=d.get("message", ""),
        )


def fit_ctmc(
    paths: Sequence[PanelPath],
    spec: IntensitySpec,
    max_iter: int = 500,
    tol: float = 1e-5,
    n_threads: int = 1,
    hessian: bool = True,
    start: CtmcParams | None = None,
) -> CtmcFit:
    """Maximum likelihood fit of the panel CTMC by BFGS.

    Gradients are central differences with step ``1e-6 (1 + |theta|)``.
    Covariates are standardized during optimization; estimates and the
    covariance (inverse finite-difference Hessian) are reported on the raw
    covariate scale.

    Parameters
    ----------
    paths : sequence of PanelPath
    spec : IntensitySpec
    max_iter : int
        BFGS iteration limit.
    tol : float
        Convergence threshold on the max-norm of the gradient of the
        log-likelihood.
    n_threads : int
        Worker threads for likelihood evaluation; results do not depend on it.
    hessian : bool
        Skip the covariance computation when False.
    start : CtmcParams, optional
        Starting values on the raw covariate scale, e.g. the estimates of a
        nested model. Defaults to crude transition rates with zero effects.
    """
    design = _compile(paths, spec)
    if design.n_intervals == 0:
        raise DataError("no observation intervals to fit")
    counts, _ = transition_counts(paths, spec.q)
    for r, s in spec.transitions:
        if counts[r - 1, s - 1] == 0:
            warnings.warn(f"transition {r}->{s} is never observed between consecutive spots", UserWarning)

    center, scale, T = _standardizer(spec, design.X)
    std_design = _Design((design.X - center) / scale, design.pre, design.post, design.counts, design.n_intervals)

    if start is None:
        theta0 = _initial_theta(paths, spec)
    else:
        _check_params(start, spec)
        theta0 = start.flatten()
    phi0 = np.linalg.solve(T, theta0)

    def negll(phi: np.ndarray) -> float:
        ll, _ = _design_loglik(CtmcParams.unflatten(phi, spec), spec, std_design, n_threads)
        return -ll

    res = minimize(
        negll,
        phi0,
        jac=lambda phi: _num_gradient(negll, phi),
        method="BFGS",
        options={"gtol": tol, "maxiter": max_iter},
    )
    phi = res.x
    grad = _num_gradient(negll, phi)
    gmax = float(np.max(np.abs(grad)))
    converged = bool(res.success) or gmax < 10 * tol
    theta = T @ phi
    params = CtmcParams.unflatten(theta, spec)
    loglik, floored = _design_loglik(params, spec, design, n_threads)
    if floored:
        warnings.warn(f"{floored} observed transition(s) had probability below 1e-300 at the optimum", RuntimeWarning)

    covariance = None
    if hessian:
        H = _num_hessian(negll, phi)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            warnings.warn("Hessian at the optimum is not positive definite; covariance omitted", UserWarning)
        else:
            cov_phi = np.linalg.inv(H)
            covariance = T @ cov_phi @ T.T
            covariance = 0.5 * (covariance + covariance.T)

    return CtmcFit(
        params=params,
        spec=spec,
        loglik=float(loglik),
        converged=converged,
        covariance=covariance,
        n_iter=int(res.nit),
        n_intervals=design.n_intervals,
        max_abs_gradient=gmax,
        message=str(res.message),
    )


def evolution_probabilities(
    fit: CtmcFit | tuple[CtmcParams, IntensitySpec],
    x: Sequence[float],
    grid: Sequence[float],
    initial_state: int = 1,
) -> np.ndarray:
    """State occupancy ``e_initial P(0, d)`` for each distance ``d`` in ``grid``.

    Returns an array of shape ``(len(grid), q)``.
    """
    params, spec = (fit.params, fit.spec) if isinstance(fit, CtmcFit) else fit
    _check_params(params, spec)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or grid[0] != 0.0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be ascending and start at 0")
    if not 1 <= initial_state <= spec.q:
        raise ValueError(f"initial state must lie in 1..{spec.q}")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != spec.n_covariates:
        raise ValueError(f"expected {spec.n_covariates} covariates, got {x.shape[1]}")
    X = np.repeat(x, grid.size, axis=0)
    pre, post = _segment_lengths(spec, np.zeros_like(grid), grid)
    P = _probabilities(params, spec, X, pre, post)
    occ = P[initial_state - 1].T
    return occ / occ.sum(axis=1, keepdims=True)
