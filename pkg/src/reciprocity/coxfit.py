"""Counting-process Cox proportional-hazards fitting.

The objective is the negative Efron partial log-likelihood plus a ridge
term ``penalizer / 2 * ||beta||^2``.  A row ``(start, stop]`` is at risk at
event time ``t`` when ``start < t <= stop``.

Risk-set sums are obtained from reverse cumulative sums over rows sorted by
``stop`` minus those over rows sorted by ``start``, so one evaluation costs
``O(n p^2)`` after an ``O(n log n)`` setup.  All reductions are sequential
numpy cumulative sums or ``einsum`` contractions, which keeps results
bitwise reproducible.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

ETA_CLAMP = 30.0
Z_95 = 1.959963984540054


class CoxError(ValueError):
    pass


def _rev_cumsum(a: np.ndarray) -> np.ndarray:
    """``out[i] = a[i:].sum(axis=0)`` with a trailing zero row."""
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    out[:-1] = np.cumsum(a[::-1], axis=0)[::-1]
    return out


def _gram(weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.einsum("i,ij,ik->jk", weights, X, X)


class CoxDataset:
    """Interval rows prepared for fitting: centred covariates plus risk-set index.

    Build instances with :func:`prepare`.
    """

    def __init__(self, start, stop, event, X_raw, names, subject=None, drop_constant=True):
        self.start = np.asarray(start, dtype=float)
        self.stop = np.asarray(stop, dtype=float)
        self.event = np.asarray(event, dtype=bool)
        X_raw = np.asarray(X_raw, dtype=float).reshape(len(self.start), -1)
        n = len(self.start)
        if n == 0:
            raise CoxError("no interval rows")
        if not (len(self.stop) == n == len(self.event) == X_raw.shape[0]):
            raise CoxError("row arrays have inconsistent lengths")
        if not (self.stop > self.start).all():
            bad = int(np.flatnonzero(~(self.stop > self.start))[0])
            raise CoxError(f"row {bad} has stop <= start")
        if not np.isfinite(X_raw).all():
            bad = int(np.flatnonzero(~np.isfinite(X_raw).all(axis=1))[0])
            raise CoxError(f"row {bad} has a non-finite covariate")
        if not self.event.any():
            raise CoxError("dataset contains no events")

        names = list(names)
        self.warnings: list[str] = []
        self.dropped: list[str] = []
        keep = []
        for j, name in enumerate(names):
            col = X_raw[:, j]
            if drop_constant and np.all(col == col[0]):
                self.dropped.append(name)
                msg = f"dropped constant covariate {name!r}"
                self.warnings.append(msg)
                logger.warning(msg)
            else:
                keep.append(j)
        self.names = [names[j] for j in keep]
        self.X_raw = X_raw[:, keep]
        self.centering = self.X_raw.mean(axis=0)
        self.X = self.X_raw - self.centering
        self.subject = None if subject is None else np.asarray(subject)
        self._index()

    def _index(self):
        self.stop_order = np.argsort(self.stop, kind="stable")
        self.start_order = np.argsort(self.start, kind="stable")
        self.stop_sorted = self.stop[self.stop_order]
        self.start_sorted = self.start[self.start_order]
        ev = np.flatnonzero(self.event)
        ev = ev[np.argsort(self.stop[ev], kind="stable")]
        self.event_rows = ev
        self.times, first, counts = np.unique(self.stop[ev], return_index=True, return_counts=True)
        self.tie_size = counts
        self.event_group = np.repeat(np.arange(len(self.times)), counts)
        self.tie_rank = np.arange(len(ev)) - first[self.event_group]
        # positions of the first row with stop >= t and with start >= t
        self.stop_pos = np.searchsorted(self.stop_sorted, self.times, side="left")
        self.start_pos = np.searchsorted(self.start_sorted, self.times, side="left")
        self.clamp_count = 0

    @property
    def n_rows(self) -> int:
        return len(self.start)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def linear_predictor(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.p,):
            raise CoxError(f"beta has shape {beta.shape}, expected ({self.p},)")
        eta = self.X @ beta
        if not np.isfinite(eta).all():
            bad = int(np.flatnonzero(~np.isfinite(eta))[0])
            raise CoxError(f"non-finite linear predictor at row {bad}")
        over = np.abs(eta) > ETA_CLAMP
        if over.any():
            self.clamp_count += int(over.sum())
            eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        return eta

    def risk_sums(self, w: np.ndarray, Xw: np.ndarray | None = None):
        """``S0`` (and ``S1`` if ``Xw = w[:, None] * X`` is given) at each event time."""
        s0 = _rev_cumsum(w[self.stop_order])[self.stop_pos] - \
            _rev_cumsum(w[self.start_order])[self.start_pos]
        if Xw is None:
            return s0
        s1 = _rev_cumsum(Xw[self.stop_order])[self.stop_pos] - \
            _rev_cumsum(Xw[self.start_order])[self.start_pos]
        return s0, s1

    def _efron_terms(self, w, Xw):
        s0, s1 = self.risk_sums(w, Xw)
        g = self.event_group
        ev = self.event_rows
        e0 = np.bincount(g, w[ev], minlength=len(self.times))
        e1 = np.zeros_like(s1)
        np.add.at(e1, g, Xw[ev])
        frac = self.tie_rank / self.tie_size[g]
        denom = s0[g] - frac * e0[g]
        num = s1[g] - frac[:, None] * e1[g]
        return denom, num, frac


def prepare(rows, covariate_names=None, subject=None) -> CoxDataset:
    """Centre covariates and index risk sets.

    ``rows`` is an :class:`~reciprocity.windows.IntervalTable`, a sequence of
    :class:`~reciprocity.windows.IntervalRow`, or a ``(start, stop, event, X)``
    tuple.  Constant columns are dropped and reported in ``warnings``.
    """
    if hasattr(rows, "X") and hasattr(rows, "names"):
        names = list(covariate_names or rows.names)
        cols = [rows.names.index(n) for n in names]
        return CoxDataset(rows.start, rows.stop, rows.event, rows.X[:, cols], names,
                          subject=rows.window if subject is None else subject)
    if isinstance(rows, tuple):
        start, stop, event, X = rows
        X = np.asarray(X, dtype=float).reshape(len(start), -1)
        names = covariate_names or [f"x{j}" for j in range(X.shape[1])]
        return CoxDataset(start, stop, event, X, names, subject=subject)
    rows = list(rows)
    if not rows:
        raise CoxError("no interval rows")
    names = list(covariate_names or rows[0].covariates)
    X = np.array([[r.covariates[n] for n in names] for r in rows], dtype=float)
    return CoxDataset([r.start for r in rows], [r.stop for r in rows],
                      [r.event for r in rows], X, names,
                      subject=np.array([r.window_id for r in rows]) if subject is None else subject)


def _check_penalizer(penalizer):
    if not penalizer >= 0:
        raise CoxError("penalizer must be non-negative")


def neg_log_partial_likelihood(data: CoxDataset, beta, penalizer: float = 0.0) -> float:
    """``-loglik(beta) + penalizer / 2 * ||beta||^2`` with Efron ties."""
    _check_penalizer(penalizer)
    beta = np.asarray(beta, dtype=float)
    eta = data.linear_predictor(beta)
    w = np.exp(eta)
    s0 = data.risk_sums(w)
    g = data.event_group
    e0 = np.bincount(g, w[data.event_rows], minlength=len(data.times))
    frac = data.tie_rank / data.tie_size[g]
    denom = s0[g] - frac * e0[g]
    ll = eta[data.event_rows].sum() - np.log(denom).sum()
    return float(-ll + 0.5 * penalizer * beta @ beta)


def gradient_and_hessian(data: CoxDataset, beta, penalizer: float = 0.0):
    """Gradient and Hessian of :func:`neg_log_partial_likelihood`."""
    _check_penalizer(penalizer)
    beta = np.asarray(beta, dtype=float)
    X = data.X
    w = np.exp(data.linear_predictor(beta))
    Xw = X * w[:, None]
    denom, num, frac = data._efron_terms(w, Xw)
    mean = num / denom[:, None]
    grad = -(X[data.event_rows].sum(axis=0) - mean.sum(axis=0)) + penalizer * beta

    g = data.event_group
    nt = len(data.times)
    c = np.bincount(g, 1.0 / denom, minlength=nt)
    b = np.bincount(g, frac / denom, minlength=nt)
    cum_c = np.concatenate([[0.0], np.cumsum(c)])
    a = cum_c[np.searchsorted(data.times, data.stop, side="right")] - \
        cum_c[np.searchsorted(data.times, data.start, side="right")]
    ev = data.event_rows
    hess = (_gram(w * a, X) - _gram(w[ev] * b[g], X[ev])
            - np.einsum("ij,ik->jk", mean, mean))
    hess = 0.5 * (hess + hess.T) + penalizer * np.eye(data.p)
    return grad, hess


def score_residuals(data: CoxDataset, beta) -> np.ndarray:
    """Per-row contributions to the (unpenalised) score under Efron ties.

    Rows sum to the gradient of the log partial likelihood.  Summed within
    clusters they give the "meat" of the robust sandwich variance.
    """
    beta = np.asarray(beta, dtype=float)
    X = data.X
    w = np.exp(data.linear_predictor(beta))
    Xw = X * w[:, None]
    denom, num, frac = data._efron_terms(w, Xw)
    mean = num / denom[:, None]
    g = data.event_group
    ev = data.event_rows
    nt = len(data.times)
    inv = 1.0 / denom

    def per_time(v):
        out = np.zeros((nt,) + v.shape[1:])
        np.add.at(out, g, v)
        return out

    # full-weight risk-set terms, accumulated over event times in (start, stop]
    cum_a = np.concatenate([[0.0], np.cumsum(per_time(inv))])
    cum_m = np.vstack([np.zeros((1, data.p)), np.cumsum(per_time(mean * inv[:, None]), axis=0)])
    hi = np.searchsorted(data.times, data.stop, side="right")
    lo = np.searchsorted(data.times, data.start, side="right")
    a = cum_a[hi] - cum_a[lo]
    m = cum_m[hi] - cum_m[lo]
    resid = -w[:, None] * (X * a[:, None] - m)

    # tied event rows carry weight (1 - l/d) in the l-th Efron denominator
    b = per_time(frac * inv)
    bm = per_time(mean * (frac * inv)[:, None])
    resid[ev] += w[ev, None] * (X[ev] * b[g][:, None] - bm[g])
    mbar = per_time(mean) / data.tie_size[:, None]
    resid[ev] += X[ev] - mbar[g]
    return resid


def robust_covariance(data: CoxDataset, beta, hessian: np.ndarray, cluster=None) -> np.ndarray:
    """Cluster-robust sandwich ``H^-1 (sum_c U_c U_c') H^-1``.

    ``cluster`` labels rows; rows sharing a label are treated as one
    independent unit.  Defaults to one cluster per row.
    """
    resid = score_residuals(data, beta)
    if cluster is not None:
        _, codes = np.unique(np.asarray(cluster), return_inverse=True)
        U = np.zeros((codes.max() + 1, data.p))
        np.add.at(U, codes, resid)
    else:
        U = resid
    bread = np.linalg.inv(hessian)
    return bread @ (U.T @ U) @ bread


@dataclass
class FitResult:
    names: list[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    penalizer: float
    n_rows: int = 0
    n_events: int = 0
    gradient_max: float = float("nan")
    objective: float = float("nan")
    dropped: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.coefficients)

    @property
    def ci_lower(self) -> np.ndarray:
        return np.exp(self.coefficients - Z_95 * self.standard_errors)

    @property
    def ci_upper(self) -> np.ndarray:
        return np.exp(self.coefficients + Z_95 * self.standard_errors)

    @property
    def z(self) -> np.ndarray:
        return self.coefficients / self.standard_errors

    @property
    def p_values(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def __getitem__(self, name: str) -> dict:
        """Summary of one coefficient."""
        j = self.names.index(name)
        return {"name": name, "coef": float(self.coefficients[j]),
                "se": float(self.standard_errors[j]), "hr": float(self.hazard_ratios[j]),
                "ci_lower": float(self.ci_lower[j]), "ci_upper": float(self.ci_upper[j]),
                "p": float(self.p_values[j])}

    def table(self) -> list[dict]:
        return [self[n] for n in self.names]

    def to_dict(self) -> dict:
        return {"coefficients": self.table(), "n_rows": self.n_rows, "n_events": self.n_events,
                "unidentified": list(self.diagnostics.get("unidentified", [])),
                "iterations": self.iterations, "converged": self.converged,
                "penalizer": self.penalizer, "log_likelihood": self.log_likelihood,
                "dropped": list(self.dropped)}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def summary(self) -> str:
        lines = [f"{'covariate':<24}{'coef':>10}{'se':>10}{'HR':>9}{'95% CI':>20}{'p':>10}"]
        flagged = set(self.diagnostics.get("unidentified", []))
        for r in self.table():
            if r["name"] in flagged:
                lines.append(f"{r['name']:<24}{'not identified (no within-risk-set variation)':>59}")
                continue
            ci = f"[{r['ci_lower']:.3f}, {r['ci_upper']:.3f}]"
            lines.append(f"{r['name']:<24}{r['coef']:>10.4f}{r['se']:>10.4f}{r['hr']:>9.4f}"
                         f"{ci:>20}{r['p']:>10.2g}")
        lines.append(f"rows={self.n_rows} events={self.n_events} iterations={self.iterations} "
                     f"converged={self.converged} penalizer={self.penalizer:g}")
        return "\n".join(lines)


def fit(data: CoxDataset, penalizer: float = 5e-3, tol: float = 1e-7, max_iter: int = 100,
        beta0=None) -> FitResult:
    """Damped Newton minimisation of the penalised objective.

    Steps are halved until the objective does not increase; a non positive
    definite Hessian falls back to a scaled gradient step.  Convergence
    requires the relative objective change to drop below ``tol`` and the
    gradient max-norm to drop below ``10 * tol * max(1, |objective|)``.
    Standard errors come from the inverse penalised Hessian.
    """
    _check_penalizer(penalizer)
    beta = np.zeros(data.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    f = neg_log_partial_likelihood(data, beta, penalizer)
    history = [f]
    converged = False
    rel = np.inf
    it = 0
    gradient_steps = 0
    for it in range(1, max_iter + 1):
        grad, hess = gradient_and_hessian(data, beta, penalizer)
        gmax = float(np.abs(grad).max()) if data.p else 0.0
        if rel < tol and gmax < 10 * tol * max(1.0, abs(f)):
            converged = True
            it -= 1
            break
        try:
            chol = np.linalg.cholesky(hess)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        except np.linalg.LinAlgError:
            gradient_steps += 1
            step = grad / max(1.0, float(np.abs(np.diag(hess)).max()))
        t = 1.0
        while True:
            cand = beta - t * step
            f_new = neg_log_partial_likelihood(data, cand, penalizer)
            if np.isfinite(f_new) and f_new <= f:
                break
            t *= 0.5
            if t < 1e-12:
                cand, f_new = beta, f
                break
        rel = abs(f - f_new) / max(1.0, abs(f_new))
        beta, f = cand, f_new
        history.append(f)
        if t < 1e-12:
            # no descent possible along the step: at numerical optimum or stuck
            grad, hess = gradient_and_hessian(data, beta, penalizer)
            gmax = float(np.abs(grad).max()) if data.p else 0.0
            converged = gmax < 10 * tol * max(1.0, abs(f))
            break
    else:
        grad, hess = gradient_and_hessian(data, beta, penalizer)
        gmax = float(np.abs(grad).max()) if data.p else 0.0

    if data.p:
        w, V = np.linalg.eigh(hess)
        if w.min() <= 1e-12 * max(1.0, w.max()):
            raise CoxError("Hessian is singular at the optimum; inspect collinear covariates")
        cov = (V / w) @ V.T
        se = np.sqrt(np.diag(cov))
        # columns carrying no partial-likelihood information (e.g. a function
        # of time alone) are held at zero by the penalty only
        info = np.diag(hess) - penalizer
        unidentified = [n for n, v in zip(data.names, info)
                        if v <= 1e-9 * max(1.0, float(np.abs(info).max()))]
    else:
        se = np.zeros(0)
        unidentified = []
    if not converged:
        warnings.warn(f"Cox fit did not converge in {max_iter} iterations", RuntimeWarning)
    return FitResult(
        names=list(data.names), coefficients=beta, standard_errors=se,
        log_likelihood=-(f - 0.5 * penalizer * beta @ beta), iterations=it,
        converged=converged, penalizer=penalizer, n_rows=data.n_rows, n_events=data.n_events,
        gradient_max=gmax, objective=f, dropped=list(data.dropped),
        diagnostics={"objective_history": history, "gradient_steps": gradient_steps,
                     "clamped_predictors": data.clamp_count, "unidentified": unidentified},
    )


class CumulativeHazard:
    """Right-continuous step function ``t -> H0(t)``."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = times
        self.values = values

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.values])[idx]


def predict_baseline_hazard(data: CoxDataset, result: FitResult) -> CumulativeHazard:
    """Breslow cumulative baseline hazard at the centred covariate profile."""
    beta = np.asarray(result.coefficients, dtype=float)
    w = np.exp(data.linear_predictor(beta))
    jumps = data.tie_size / data.risk_sums(w)
    return CumulativeHazard(data.times.copy(), np.cumsum(jumps))
