"""Descriptive help-rate curves over the observation window.

Rates are help events per user-hour.  Each series is normalised by its own
pre-question mean rate; confidence half-widths use the normal approximation
to Poisson counts.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .covariates import TENURE_BUCKETS, bucket_index
from .events import HOUR
from .windows import WindowSet

Z_95 = 1.959963984540054
CURVE_COLUMNS = ["series", "bin_start_h", "bin_end_h", "rate", "normalized_rate", "ci_half_width"]


@dataclass
class HelpRateCurve:
    label: str
    edges: np.ndarray
    counts: np.ndarray
    exposure: np.ndarray
    normalizer: float
    normalized: bool = True
    poisson: bool = True

    @property
    def rate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.exposure > 0, self.counts / self.exposure, 0.0)

    @property
    def normalized_rate(self) -> np.ndarray:
        return self.rate / self.normalizer if self.normalized else self.rate

    @property
    def ci_half_width(self) -> np.ndarray:
        if not self.poisson:
            return np.zeros_like(self.rate)
        with np.errstate(invalid="ignore", divide="ignore"):
            hw = np.where(self.exposure > 0, Z_95 * np.sqrt(self.counts) / self.exposure, 0.0)
        return hw / self.normalizer if self.normalized else hw

    def records(self) -> list[list]:
        return [[self.label, float(a), float(b), float(r), float(n), float(c)]
                for a, b, r, n, c in zip(self.edges[:-1], self.edges[1:], self.rate,
                                         self.normalized_rate, self.ci_half_width)]


def _edges(length_h: float, bin_hours: float) -> np.ndarray:
    n = length_h / bin_hours
    if not bin_hours > 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"bin width {bin_hours}h does not divide {length_h}h evenly")
    return np.arange(int(round(n)) + 1) * bin_hours


def _window_geometry(windows: WindowSet) -> tuple[float, float]:
    length = np.unique(windows.t_window_end - windows.t_window_start)
    half = np.unique(windows.t_question - windows.t_window_start)
    if len(length) != 1 or len(half) != 1:
        raise ValueError("all windows must share the same geometry")
    return length[0] / HOUR, half[0] / HOUR


def _help_offsets_hours(windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    owner = np.repeat(np.arange(len(windows)), windows.n_help)
    return owner, (windows.help_times - windows.t_window_start[owner]) / HOUR


def _bin_of(offset_h: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.floor(offset_h / (edges[1] - edges[0])).astype(np.int64)
    return np.clip(idx, 0, len(edges) - 2)


def _finish(label, edges, counts, exposure, pre_mask) -> HelpRateCurve:
    with np.errstate(invalid="ignore", divide="ignore"):
        pre = np.where(exposure[pre_mask] > 0, counts[pre_mask] / exposure[pre_mask], 0.0)
    base = float(pre.mean()) if pre.size else 0.0
    if base > 0:
        return HelpRateCurve(label, edges, counts, exposure, base, True)
    return HelpRateCurve(label, edges, counts, exposure, 1.0, False)


def help_rate_curves(groups: Mapping[str, WindowSet], bin_hours: float = 1.0) -> list[HelpRateCurve]:
    """One normalised help-rate curve per group over the full window.

    A group without pre-question events cannot be normalised; its curve is
    returned with ``normalized=False`` and raw rates.
    """
    out = []
    for label, ws in groups.items():
        length_h, half_h = _window_geometry(ws)
        edges = _edges(length_h, bin_hours)
        _, off = _help_offsets_hours(ws)
        counts = np.bincount(_bin_of(off, edges), minlength=len(edges) - 1).astype(float)
        exposure = np.full(len(edges) - 1, len(ws) * bin_hours, dtype=float)
        out.append(_finish(label, edges, counts, exposure, edges[1:] <= half_h + 1e-12))
    return out


def split_by_tenure(groups: Mapping[str, WindowSet], tenure_days: Mapping[str, np.ndarray]
                    ) -> dict[str, WindowSet]:
    """Refine each group by tenure bucket; labels become ``"<group> <bucket>"``.

    ``tenure_days`` gives, per group, one tenure value per window.  Empty
    bucket groups are left out.
    """
    out = {}
    for label, ws in groups.items():
        idx = bucket_index(np.asarray(tenure_days[label], dtype=float))
        for k, bucket in enumerate(TENURE_BUCKETS):
            sel = np.flatnonzero(idx == k)
            if len(sel):
                out[f"{label} {bucket.label}"] = ws.take(sel)
    return out


def adoption_curves(treated: WindowSet, control: WindowSet, bin_hours: float = 1.0) -> list[HelpRateCurve]:
    """Post-question help rates by answer status, plus the answered share.

    A treated window counts as "answer received" in a bin when its answer
    arrived at or before the bin start, and as "no answer yet" otherwise;
    the whole bin's exposure and events go to that status.  Each series is
    normalised by the pre-question rate of the windows it is drawn from.
    The last series holds the cumulative share of treated windows answered by
    each bin's end (stored as counts, so ``rate`` returns it unchanged).
    """
    _, half_h = _window_geometry(treated)
    edges = _edges(half_h, bin_hours)
    nb = len(edges) - 1

    def pre_rate(ws: WindowSet) -> float:
        _, off = _help_offsets_hours(ws)
        return float((off <= half_h).sum()) / (len(ws) * half_h) if len(ws) else 0.0

    rt = treated.response_time_hours()
    received = rt[:, None] <= edges[None, :-1] + 1e-12  # window x bin
    owner, off = _help_offsets_hours(treated)
    after_q = off - half_h
    post = after_q > 0
    b = _bin_of(after_q[post], edges)
    status = received[owner[post], b]
    recv_counts = np.bincount(b[status], minlength=nb).astype(float)
    wait_counts = np.bincount(b[~status], minlength=nb).astype(float)
    recv_exp = received.sum(axis=0) * bin_hours
    wait_exp = (~received).sum(axis=0) * bin_hours

    _, c_off = _help_offsets_hours(control)
    c_after = c_off - half_h
    ctrl_counts = np.bincount(_bin_of(c_after[c_after > 0], edges), minlength=nb).astype(float)
    ctrl_exp = np.full(nb, len(control) * bin_hours, dtype=float)

    t_base, c_base = pre_rate(treated), pre_rate(control)
    curves = []
    for label, counts, exposure, base in [("answer_received", recv_counts, recv_exp, t_base),
                                          ("no_answer_yet", wait_counts, wait_exp, t_base),
                                          ("control", ctrl_counts, ctrl_exp, c_base)]:
        curves.append(HelpRateCurve(label, edges, counts, exposure.astype(float),
                                    base if base > 0 else 1.0, base > 0))
    share = (rt[:, None] <= edges[None, 1:] + 1e-12).mean(axis=0) if len(rt) else np.zeros(nb)
    curves.append(HelpRateCurve("answered_share", edges, share, np.ones(nb), 1.0, False, poisson=False))
    return curves


def answered_share(curves: Sequence[HelpRateCurve]) -> np.ndarray:
    return next(c for c in curves if c.label == "answered_share").counts


def write_curves(curves: Sequence[HelpRateCurve], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for c in curves:
        for rec in c.records():
            writer.writerow([rec[0]] + [f"{v:.10g}" for v in rec[1:]])
