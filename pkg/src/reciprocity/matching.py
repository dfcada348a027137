"""Propensity scores, exact-stratum caliper matching and balance diagnostics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np
import pandas as pd

from .covariates import PROPENSITY_COVARIATES

logger = logging.getLogger(__name__)

STRATUM = ["calendar_year", "top_tag"]
CALIPER_EPS = 1e-12


class PropensityError(RuntimeError):
    pass


@dataclass
class PropensityModel:
    features: list[str]
    coefficients: dict[str, float]
    feature_means: np.ndarray
    feature_sds: np.ndarray
    fit_metadata: dict = field(default_factory=dict)

    def design(self, covariates: pd.DataFrame) -> np.ndarray:
        Z = np.column_stack([covariates[f].to_numpy(dtype=float) for f in self.features]) \
            if self.features else np.zeros((len(covariates), 0))
        return (Z - self.feature_means) / self.feature_sds

    def linear_predictor(self, covariates: pd.DataFrame) -> np.ndarray:
        beta = np.array([self.coefficients[f] for f in self.features])
        eta = self.coefficients["intercept"] + self.design(covariates) @ beta
        return eta

    def predict(self, covariates: pd.DataFrame) -> np.ndarray:
        return _expit(self.linear_predictor(covariates))

    def to_dict(self) -> dict:
        return {"features": self.features, "coefficients": self.coefficients,
                "feature_means": self.feature_means.tolist(),
                "feature_sds": self.feature_sds.tolist(), "fit_metadata": self.fit_metadata}


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logistic_newton(Z: np.ndarray, y: np.ndarray, tol: float = 1e-10, max_iter: int = 50):
    """Maximum-likelihood logistic regression by Newton-Raphson.

    ``Z`` must already contain an intercept column.  Returns
    ``(beta, loglik, iterations)``.
    """
    beta = np.zeros(Z.shape[1])
    ll_old = -np.inf
    for it in range(1, max_iter + 1):
        p = _expit(Z @ beta)
        W = p * (1 - p)
        grad = Z.T @ (y - p)
        H = (Z * W[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise PropensityError("singular information matrix; inspect the features "
                                  "for separation or collinearity") from exc
        beta = beta + step
        if np.abs(beta).max() > 25:
            raise PropensityError("coefficients diverge (perfect or quasi-complete separation); "
                                  "inspect the features that predict treatment exactly")
        eta = Z @ beta
        ll = float(np.sum(y * eta - np.logaddexp(0, eta)))
        if abs(ll - ll_old) < tol * max(1.0, abs(ll)) and np.abs(step).max() < 1e-8:
            return beta, ll, it
        ll_old = ll
    raise PropensityError(f"propensity model did not converge in {max_iter} iterations "
                          f"(last log-likelihood {ll_old:.6g})")


def fit_propensity(covariates: pd.DataFrame, treated: Sequence[bool] | None = None,
                   features: Sequence[str] = PROPENSITY_COVARIATES) -> PropensityModel:
    """Logistic propensity model on z-scored covariates (constant ones dropped)."""
    y = np.asarray(covariates["treated"] if treated is None else treated, dtype=float)
    if y.sum() < 1 or (1 - y).sum() < 1:
        raise PropensityError("need at least one treated and one control observation")
    kept, dropped = [], []
    for f in features:
        col = covariates[f].to_numpy(dtype=float)
        (kept if np.unique(col).size >= 2 else dropped).append(f)
    if dropped:
        logger.warning("dropping constant propensity features: %s", ", ".join(dropped))
    Z = np.column_stack([covariates[f].to_numpy(dtype=float) for f in kept]) if kept else np.zeros((len(y), 0))
    means = Z.mean(axis=0)
    sds = Z.std(axis=0)
    Zs = np.column_stack([np.ones(len(y)), (Z - means) / sds])
    beta, ll, it = logistic_newton(Zs, y)
    coefs = {"intercept": float(beta[0])}
    coefs.update({f: float(b) for f, b in zip(kept, beta[1:])})
    return PropensityModel(kept, coefs, means, sds,
                           {"iterations": it, "log_likelihood": ll, "dropped_features": dropped,
                            "feature_transform": "z-score", "n": int(len(y)), "n_treated": int(y.sum())})


@dataclass(frozen=True)
class MatchedPair:
    treated_window_id: str
    control_window_id: str
    treated_score: float
    control_score: float
    response_time_hours: float


@dataclass
class MatchResult:
    pairs: list[MatchedPair]
    unmatched: list[str]
    empty_strata: list[tuple]

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def n_unmatched(self) -> int:
        return len(self.unmatched)


def match(scored: pd.DataFrame, caliper: float = 0.05, seed: int = 0) -> MatchResult:
    """1:1 nearest-neighbour matching with replacement inside exact strata.

    ``scored`` needs ``window_id``, ``treated``, ``score``, the stratum
    columns ``calendar_year``/``top_tag`` and, for treated rows,
    ``response_time_hours``.  Treated units are visited in a seeded random
    order; each takes the closest control score in its stratum if the
    distance is within ``caliper``.  Equidistant controls resolve to the lower
    score, then the smaller window id.
    """
    if not caliper > 0:
        raise ValueError("caliper must be positive")
    df = scored.reset_index(drop=True)
    treated = df["treated"].to_numpy().astype(bool)
    rng = np.random.default_rng(seed)
    order = rng.permutation(np.flatnonzero(treated))

    keys = list(zip(*(df[c].to_numpy() for c in STRATUM)))
    controls: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    ctrl_idx = np.flatnonzero(~treated)
    by_key: dict[tuple, list[int]] = {}
    for i in ctrl_idx:
        by_key.setdefault(keys[i], []).append(i)
    scores = df["score"].to_numpy(dtype=float)
    wid = df["window_id"].to_numpy().astype(str)
    for k, idx in by_key.items():
        idx = np.array(idx)
        idx = idx[np.lexsort((wid[idx], scores[idx]))]
        controls[k] = (idx, scores[idx])

    rt = df["response_time_hours"].to_numpy(dtype=float) if "response_time_hours" in df else \
        np.full(len(df), np.nan)
    pairs, unmatched, empty = [], [], set()
    for i in order:
        k = keys[i]
        if k not in controls:
            empty.add(k)
            unmatched.append(wid[i])
            continue
        idx, cs = controls[k]
        j = int(np.searchsorted(cs, scores[i]))
        cand = [c for c in (j - 1, j) if 0 <= c < len(cs)]
        best = min(cand, key=lambda c: (abs(cs[c] - scores[i]), c))
        if abs(cs[best] - scores[i]) <= caliper + CALIPER_EPS:
            c = idx[best]
            pairs.append(MatchedPair(wid[i], wid[c], float(scores[i]), float(cs[best]), float(rt[i])))
        else:
            unmatched.append(wid[i])
    for k in sorted(empty, key=str):
        logger.warning("stratum %s has no controls; its treated units stay unmatched", k)
    return MatchResult(pairs, unmatched, sorted(empty, key=str))


PAIR_COLUMNS = ["treated_window_id", "control_window_id", "treated_score", "control_score",
                "response_time_hours"]


def write_pairs(pairs: Sequence[MatchedPair], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PAIR_COLUMNS)
    for p in pairs:
        writer.writerow([p.treated_window_id, p.control_window_id, repr(p.treated_score),
                         repr(p.control_score), repr(p.response_time_hours)])


def read_pairs(stream) -> list[MatchedPair]:
    df = pd.read_csv(stream, dtype={"treated_window_id": str, "control_window_id": str})
    return [MatchedPair(str(a), str(b), float(c), float(d), float(e))
            for a, b, c, d, e in df[PAIR_COLUMNS].itertuples(index=False)]


def pooled_sd(x_t: np.ndarray, x_c: np.ndarray) -> float:
    """``sqrt((var_T + var_C) / 2)`` with sample variances (ddof 1)."""
    x_t = np.asarray(x_t, dtype=float)
    x_c = np.asarray(x_c, dtype=float)
    v_t = x_t.var(ddof=1) if len(x_t) > 1 else 0.0
    v_c = x_c.var(ddof=1) if len(x_c) > 1 else 0.0
    return float(np.sqrt((v_t + v_c) / 2))


def smd(x_t: np.ndarray, x_c: np.ndarray, sd: float | None = None) -> float:
    """Standardised mean difference.

    ``sd`` defaults to the pooled SD of the two samples given.  With a zero
    denominator the SMD is 0 when the means agree and ``nan`` otherwise.
    """
    diff = float(np.mean(x_t) - np.mean(x_c))
    sd = pooled_sd(x_t, x_c) if sd is None else sd
    if sd == 0:
        return 0.0 if diff == 0 else float("nan")
    return diff / sd


@dataclass
class CovariateBalance:
    covariate: str
    treated_mean: float
    control_mean: float
    smd_unmatched: float
    smd_matched: float


@dataclass
class BalanceReport:
    rows: list[CovariateBalance]

    @property
    def worst_matched_smd(self) -> float:
        """Largest |SMD| after matching (``nan`` if any SMD is undefined)."""
        return float(np.max(np.abs([r.smd_matched for r in self.rows])))

    @property
    def worst_unmatched_smd(self) -> float:
        return float(np.max(np.abs([r.smd_unmatched for r in self.rows])))

    def to_dict(self) -> dict:
        return {"covariates": [asdict(r) for r in self.rows],
                "worst_matched_smd": self.worst_matched_smd}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def table(self) -> str:
        lines = [f"{'covariate':<18}{'Tr mean':>12}{'Ct mean':>12}{'SMD unm.':>11}{'SMD m.':>10}"]
        for r in self.rows:
            lines.append(f"{r.covariate:<18}{r.treated_mean:>12.3f}{r.control_mean:>12.3f}"
                         f"{r.smd_unmatched:>11.3f}{r.smd_matched:>10.3f}")
        lines.append(f"worst matched |SMD| = {self.worst_matched_smd:.3f}")
        return "\n".join(lines)


def balance(pairs: Sequence[MatchedPair], covariates: pd.DataFrame,
            names: Sequence[str] = PROPENSITY_COVARIATES) -> BalanceReport:
    """Means and SMDs of the raw covariates before and after matching.

    Both SMD columns divide by the pooled SD of the unmatched groups, so they
    share one scale.  Matched controls enter once per pair, so reused
    controls carry weight.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("balance needs at least one matched pair")
    cov = covariates.set_index("window_id")
    t_all = cov[cov["treated"].astype(bool)]
    c_all = cov[~cov["treated"].astype(bool)]
    t_m = cov.loc[[p.treated_window_id for p in pairs]]
    c_m = cov.loc[[p.control_window_id for p in pairs]]
    rows = []
    for n in names:
        sd = pooled_sd(t_all[n].to_numpy(), c_all[n].to_numpy())
        rows.append(CovariateBalance(
            n, float(t_m[n].mean()), float(c_m[n].mean()),
            smd(t_all[n].to_numpy(), c_all[n].to_numpy(), sd),
            smd(t_m[n].to_numpy(), c_m[n].to_numpy(), sd)))
    return BalanceReport(rows)
