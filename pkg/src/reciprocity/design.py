"""Estimation designs built from matched pairs.

Three model variants share one assembly path:

* ``Model.MAIN``: treatment, phase and treatment-by-phase indicators.
* ``Model.RESPONSE_TIME``: adds the two log response-time interactions,
  clipped to percentile bounds and z-scored over their non-zero entries.
* ``Model.DISCRETE_BINS``: replaces ``is_treated_active`` by one indicator per
  response-time bin of the pair.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .covariates import BUCKETS_BY_LABEL, TENURE_BUCKETS, TenureBucket
from .coxfit import CoxDataset, CoxError, FitResult, fit, prepare
from .events import HOUR
from .matching import MatchedPair
from .windows import RT_COVARIATES, WindowSet, expand_windows

logger = logging.getLogger(__name__)

DEFAULT_BINS = ((0, 15), (15, 30), (30, 60), (60, 120), (120, 240), (240, 480), (480, 720))
MAIN_PENALIZER = 5e-3
INTERACTION_PENALIZER = 1e-2
FOCAL = "is_treated_active"


class DesignError(ValueError):
    pass


class Model(str, Enum):
    MAIN = "main"
    RESPONSE_TIME = "response_time"
    DISCRETE_BINS = "bins"


def bin_label(lo: float, hi: float) -> str:
    return f"{FOCAL}_bin_{lo:g}_{hi:g}"


def validate_bins(bins) -> tuple[tuple[float, float], ...]:
    bins = tuple((float(lo), float(hi)) for lo, hi in bins)
    if not bins:
        raise DesignError("bin list is empty")
    for (lo, hi), nxt in zip(bins, bins[1:] + (None,)):
        if not (0 <= lo < hi):
            raise DesignError(f"invalid bin ({lo}, {hi}]")
        if nxt is not None and nxt[0] != hi:
            raise DesignError("bins must be ordered and contiguous")
    return bins


def assign_bins(rt_minutes, bins) -> np.ndarray:
    """Index of the right-closed bin ``(lo, hi]`` holding each value, -1 if none."""
    rt = np.asarray(rt_minutes, dtype=float)
    uppers = np.array([hi for _, hi in bins])
    idx = np.searchsorted(uppers, rt, side="left")
    ok = (rt > bins[0][0]) & (idx < len(bins))
    return np.where(ok, idx, -1)


@dataclass
class DesignSpec:
    model: Model = Model.MAIN
    tenure_filter: TenureBucket | None = None
    bins: tuple | None = None
    clip_percentiles: tuple[float, float] = (5.0, 95.0)
    penalizer: float | None = None
    seed: int = 0
    subsample_pairs: int | None = None
    row_budget: int | None = None

    def __post_init__(self):
        self.model = Model(self.model)
        if isinstance(self.tenure_filter, str):
            self.tenure_filter = BUCKETS_BY_LABEL[self.tenure_filter]
        if self.model is Model.DISCRETE_BINS:
            self.bins = validate_bins(self.bins or DEFAULT_BINS)
        lo, hi = self.clip_percentiles
        if not 0 <= lo < hi <= 100:
            raise DesignError("clip percentiles must satisfy 0 <= low < high <= 100")

    @property
    def uses_response_time(self) -> bool:
        return self.model is Model.RESPONSE_TIME

    @property
    def effective_penalizer(self) -> float:
        if self.penalizer is not None:
            return self.penalizer
        return INTERACTION_PENALIZER if self.uses_response_time else MAIN_PENALIZER


@dataclass
class ResponseTimeTransform:
    column: str
    clip_bounds: tuple[float, float]
    mean: float
    sd: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.clip(values, *self.clip_bounds) - self.mean) / self.sd


def clip_standardize(col: np.ndarray, percentiles=(5.0, 95.0), name: str = "") -> tuple[np.ndarray, ResponseTimeTransform]:
    """Clip non-zero entries to their percentile range, then z-score them.

    Zero entries are structural (inactive rows) and are left at zero.
    """
    out = np.array(col, dtype=float)
    nz = out != 0
    if not nz.any():
        raise DesignError(f"column {name!r} has no active entries")
    vals = out[nz]
    lo, hi = np.percentile(vals, percentiles)
    clipped = np.clip(vals, lo, hi)
    sd = clipped.std()
    if not hi > lo or sd == 0:
        raise DesignError(f"degenerate percentile bounds for {name!r}: all active values equal")
    tr = ResponseTimeTransform(name, (float(lo), float(hi)), float(clipped.mean()), float(sd))
    out[nz] = (clipped - tr.mean) / tr.sd
    return out, tr


@dataclass
class MatchedSample:
    """Pairs resolved to window positions, with per-pair metadata."""
    pairs: list[MatchedPair]
    windows: WindowSet
    treated_pos: np.ndarray
    control_pos: np.ndarray
    response_seconds: np.ndarray
    tenure_days: np.ndarray | None = None

    @classmethod
    def build(cls, pairs: Sequence[MatchedPair], windows: WindowSet,
              tenure: Mapping[str, float] | None = None) -> "MatchedSample":
        pairs = list(pairs)
        t_pos = windows.positions([p.treated_window_id for p in pairs])
        c_pos = windows.positions([p.control_window_id for p in pairs])
        if len(pairs):
            if not windows.treated[t_pos].all():
                raise DesignError("a pair's treated window is not treated")
            if windows.treated[c_pos].any():
                raise DesignError("a pair's control window is treated")
        rt = windows.t_answer[t_pos] - windows.t_question[t_pos]
        ten = None
        if tenure is not None:
            ten = np.array([float(tenure[p.treated_window_id]) for p in pairs])
        return cls(pairs, windows, t_pos, c_pos, rt, ten)

    def __len__(self):
        return len(self.pairs)

    def subset(self, keep: np.ndarray) -> "MatchedSample":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return MatchedSample([self.pairs[i] for i in keep], self.windows, self.treated_pos[keep],
                             self.control_pos[keep], self.response_seconds[keep],
                             None if self.tenure_days is None else self.tenure_days[keep])

    def bucket_mask(self, bucket: TenureBucket) -> np.ndarray:
        if self.tenure_days is None:
            raise DesignError("tenure values are required for tenure filtering")
        return np.array([t in bucket for t in self.tenure_days], dtype=bool)

    def paired_windows(self) -> tuple[WindowSet, np.ndarray]:
        """Treated and control windows interleaved (pair i -> rows 2i, 2i+1),
        controls carrying the synthetic transition of their partner."""
        n = len(self)
        idx = np.empty(2 * n, dtype=np.int64)
        idx[0::2] = self.treated_pos
        idx[1::2] = self.control_pos
        ws = self.windows.take(idx)
        t_answer = ws.t_answer.copy()
        synthetic = np.minimum(ws.t_question[1::2] + self.response_seconds, ws.t_window_end[1::2])
        t_answer[1::2] = synthetic
        ids = np.empty(2 * n, dtype=object)
        ids[0::2] = [f"{i}:{p.treated_window_id}" for i, p in enumerate(self.pairs)]
        ids[1::2] = [f"{i}:{p.control_window_id}" for i, p in enumerate(self.pairs)]
        return ws.with_answers(t_answer), ids


def _as_sample(pairs, windows, tenure) -> MatchedSample:
    if isinstance(pairs, MatchedSample):
        return pairs
    return MatchedSample.build(pairs, windows, tenure)


def select_pairs(sample: MatchedSample, spec: DesignSpec) -> MatchedSample:
    """Apply tenure filter, bin range restriction and pair-preserving subsampling."""
    if spec.tenure_filter is not None:
        sample = sample.subset(sample.bucket_mask(spec.tenure_filter))
        if not len(sample):
            raise DesignError(f"tenure bucket {spec.tenure_filter.label} has no pairs")
    if spec.model is Model.DISCRETE_BINS:
        in_range = assign_bins(sample.response_seconds / 60.0, spec.bins) >= 0
        sample = sample.subset(in_range)
    n = len(sample)
    target = spec.subsample_pairs
    if spec.row_budget is not None and n:
        w = sample.windows
        est_rows = 6 * n + int(w.n_help[sample.treated_pos].sum() + w.n_help[sample.control_pos].sum())
        if est_rows > spec.row_budget:
            budget_pairs = int(n * spec.row_budget / est_rows)
            target = budget_pairs if target is None else min(target, budget_pairs)
    if target is not None and target < n:
        rng = np.random.default_rng(spec.seed)
        sample = sample.subset(np.sort(rng.choice(n, size=target, replace=False)))
    if not len(sample):
        raise DesignError("no pairs left to assemble")
    return sample


def assemble(pairs, windows: WindowSet | None, spec: DesignSpec,
             tenure: Mapping[str, float] | None = None) -> CoxDataset:
    """Build the Cox dataset for ``spec`` from matched pairs.

    ``pairs`` is a sequence of :class:`MatchedPair` (resolved against
    ``windows``) or a prepared :class:`MatchedSample`.  ``tenure`` maps
    treated window ids to asker tenure in days and is needed for tenure
    filtering.  The returned dataset carries ``design_info`` with the pair
    count and any response-time transforms.
    """
    sample = select_pairs(_as_sample(pairs, windows, tenure), spec)
    ws, ids = sample.paired_windows()
    table = expand_windows(ws, response_time=spec.uses_response_time, window_ids=ids)
    X = table.X
    names = list(table.names)
    info: dict = {"n_pairs": len(sample), "model": spec.model.value}

    if spec.uses_response_time:
        transforms = []
        X = X.copy()
        for name in RT_COVARIATES:
            j = names.index(name)
            X[:, j], tr = clip_standardize(X[:, j], spec.clip_percentiles, name)
            transforms.append(tr)
        info["transforms"] = transforms
    elif spec.model is Model.DISCRETE_BINS:
        pair_bin = assign_bins(sample.response_seconds / 60.0, spec.bins)
        row_bin = pair_bin[table.window // 2]
        j = names.index(FOCAL)
        active = X[:, j]
        cols = [active * (row_bin == b) for b in range(len(spec.bins))]
        keep = [k for k in range(len(names)) if k != j]
        X = np.column_stack([X[:, keep]] + cols)
        names = [names[k] for k in keep] + [bin_label(lo, hi) for lo, hi in spec.bins]
        info["bins"] = spec.bins
        info["bin_pairs"] = np.bincount(pair_bin, minlength=len(spec.bins)).tolist()

    data = CoxDataset(table.start, table.stop, table.event, X, names, subject=table.window)
    data.design_info = info
    data.window_id = table.window_id
    return data


def fit_design(pairs, windows, spec: DesignSpec, tenure=None, tol: float = 1e-7,
               max_iter: int = 100) -> FitResult:
    data = assemble(pairs, windows, spec, tenure)
    res = fit(data, penalizer=spec.effective_penalizer, tol=tol, max_iter=max_iter)
    res.diagnostics["n_pairs"] = data.design_info["n_pairs"]
    return res


@dataclass
class SweepResult:
    fits: dict[str, FitResult] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def __getitem__(self, label: str) -> FitResult:
        return self.fits[label]

    def __contains__(self, label) -> bool:
        return label in self.fits

    def __iter__(self):
        return iter(self.fits)

    def items(self):
        return self.fits.items()

    def records(self, coefficient: str = FOCAL) -> list[dict]:
        return [stratum_record(label, res, coefficient) for label, res in self.fits.items()]


def stratum_record(label: str, res: FitResult, coefficient: str = FOCAL) -> dict:
    if coefficient not in res.names:
        return {"stratum": label, "n": res.diagnostics.get("n_pairs"), "events": res.n_events,
                "coef": None, "se": None, "hr": None, "ci": None, "p": None}
    r = res[coefficient]
    return {"stratum": label, "n": res.diagnostics.get("n_pairs"), "events": res.n_events,
            "coef": r["coef"], "se": r["se"], "hr": r["hr"],
            "ci": [r["ci_lower"], r["ci_upper"]], "p": r["p"]}


def run_tenure_sweep(pairs, windows, base_spec: DesignSpec, tenure=None,
                     threads: int = 1, buckets: Sequence[TenureBucket] = TENURE_BUCKETS) -> SweepResult:
    """One fit per tenure bucket, using every pair in the bucket.

    Buckets without pairs are listed in ``skipped``; fits that fail are
    recorded in ``errors`` rather than aborting the sweep.
    """
    sample = _as_sample(pairs, windows, tenure)
    out = SweepResult()
    jobs = []
    for bucket in buckets:
        mask = sample.bucket_mask(bucket)
        if not mask.any():
            logger.warning("tenure bucket %s has no pairs; skipped", bucket.label)
            out.skipped.append(bucket.label)
            continue
        spec = DesignSpec(base_spec.model, bucket, base_spec.bins, base_spec.clip_percentiles,
                          base_spec.penalizer, base_spec.seed, None, None)
        jobs.append((bucket.label, spec))

    def run(job):
        label, spec = job
        try:
            return label, fit_design(sample, None, spec)
        except (CoxError, DesignError, np.linalg.LinAlgError) as exc:
            logger.warning("tenure bucket %s failed: %s", label, exc)
            return label, exc

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, jobs))
    for label, res in results:
        if isinstance(res, Exception):
            out.errors[label] = str(res)
        else:
            out.fits[label] = res
    return out


@dataclass
class BinEstimate:
    bin: tuple[float, float]
    n_pairs: int
    estimate: dict | None


def run_bins(pairs, windows, spec: DesignSpec, tenure=None) -> list[BinEstimate]:
    """Per-bin hazard ratios of the post-answer treatment effect.

    Pairs are binned by the treated response time in minutes; bins are
    right-closed and responses beyond the last bin are left out.  An empty
    bin is reported with ``estimate=None``.
    """
    if spec.model is not Model.DISCRETE_BINS:
        spec = DesignSpec(Model.DISCRETE_BINS, spec.tenure_filter, spec.bins, spec.clip_percentiles,
                          spec.penalizer, spec.seed, spec.subsample_pairs, spec.row_budget)
    data = assemble(pairs, windows, spec, tenure)
    res = fit(data, penalizer=spec.effective_penalizer)
    counts = data.design_info["bin_pairs"]
    out = []
    for (lo, hi), n in zip(spec.bins, counts):
        name = bin_label(lo, hi)
        out.append(BinEstimate((lo, hi), int(n), res[name] if name in res.names else None))
    return out


def naive_estimate(windows: WindowSet, penalizer: float = MAIN_PENALIZER) -> FitResult:
    """Unmatched comparison of post-question help hazards, answered vs unanswered.

    Uses every window, no matching and no pre-period baseline: the kind of
    contrast that mistakes general engagement for reciprocity.
    """
    table = expand_windows(windows.with_answers(np.where(windows.treated, windows.t_answer, -1)))
    half_h = (windows.t_question - windows.t_window_start)[table.window] / HOUR
    keep = table.start >= half_h
    start = table.start[keep] - half_h[keep]
    stop = table.stop[keep] - half_h[keep]
    data = prepare((start, stop, table.event[keep], table.column("treatment")[keep][:, None]),
                   ["treatment"])
    return fit(data, penalizer=penalizer)


def tenure_map(covariates) -> dict[str, float]:
    return dict(zip(covariates["window_id"].astype(str), covariates["user_tenure"].astype(float)))


