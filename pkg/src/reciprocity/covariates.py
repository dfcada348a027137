"""Pre-treatment matching covariates and tenure buckets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .events import DAY, HOUR, Corpus
from .windows import ObservationWindow, WindowSet

PROPENSITY_COVARIATES = ["user_tenure", "asked_at", "help_at", "asked_30d", "help_30d",
                         "asked_7d", "help_7d", "tag_answer_rate"]
COVARIATE_COLUMNS = ["window_id"] + PROPENSITY_COVARIATES + ["calendar_year", "top_tag", "treated"]

# answer rate used when nothing at all has been asked before a window
COLD_START_RATE = 0.5


@dataclass(frozen=True)
class TenureBucket:
    label: str
    lower_days: float
    upper_days: float

    def __contains__(self, days: float) -> bool:
        if self.lower_days == 0.0:
            return 0.0 <= days <= self.upper_days
        return self.lower_days < days <= self.upper_days


TENURE_BUCKETS = (
    TenureBucket("<1W", 0.0, 7.0),
    TenureBucket("1W-1M", 7.0, 30.0),
    TenureBucket("1-6M", 30.0, 180.0),
    TenureBucket("6-12M", 180.0, 365.0),
    TenureBucket("1-3Y", 365.0, 1095.0),
    TenureBucket("3-6Y", 1095.0, 2190.0),
    TenureBucket(">6Y", 2190.0, math.inf),
)
BUCKETS_BY_LABEL = {b.label: b for b in TENURE_BUCKETS}
_UPPER = np.array([b.upper_days for b in TENURE_BUCKETS[:-1]])


def bucket_of(tenure_days: float) -> TenureBucket:
    """Bucket containing ``tenure_days``; intervals are right-closed."""
    if not tenure_days >= 0:
        raise ValueError(f"tenure must be non-negative, got {tenure_days}")
    return TENURE_BUCKETS[int(np.searchsorted(_UPPER, tenure_days, side="left"))]


def bucket_index(tenure_days) -> np.ndarray:
    days = np.asarray(tenure_days, dtype=float)
    if (days < 0).any() or np.isnan(days).any():
        raise ValueError("tenure must be non-negative")
    return np.searchsorted(_UPPER, days, side="left")


def bucket_labels(tenure_days) -> np.ndarray:
    labels = np.array([b.label for b in TENURE_BUCKETS], dtype=object)
    return labels[bucket_index(tenure_days)]


@dataclass(frozen=True)
class MatchingCovariates:
    user_tenure_days: float
    num_questions_asked_at: int
    num_help_provided_at: int
    num_questions_asked_30d: int
    num_help_provided_30d: int
    num_questions_asked_7d: int
    num_help_provided_7d: int
    tag_answer_rate_avg: float
    calendar_year: int
    top_level_tag: str


class _SortedKeys:
    """Grouped sorted timestamps supporting 'how many before t in group g' queries."""

    _SPAN = np.int64(1) << np.int64(36)

    def __init__(self, group_codes: np.ndarray, times: np.ndarray, origin: int):
        self.origin = origin
        self.keys = np.sort(group_codes.astype(np.int64) * self._SPAN + (times - origin))

    def count_before(self, group_codes: np.ndarray, t: np.ndarray) -> np.ndarray:
        q = group_codes.astype(np.int64) * self._SPAN + (np.asarray(t, np.int64) - self.origin)
        lo = np.searchsorted(self.keys, group_codes.astype(np.int64) * self._SPAN, side="left")
        return np.searchsorted(self.keys, q, side="left") - lo


class ActivityIndex:
    """Time-indexed aggregates of a corpus, built once and queried per window.

    A question counts as answered at the time of its first non-self answer
    with score >= 0, provided that answer arrives within ``half_length``
    hours of the question (the treatment definition).
    """

    def __init__(self, corpus: Corpus, half_length: float = 48.0):
        half = int(round(half_length * HOUR))
        origin = min(corpus.corpus_start, int(corpus.timestamp.min()) if len(corpus) else 0) - 100 * DAY
        self.origin = origin
        qt = corpus.question_table()
        df = corpus.frame()

        asker = pd.Series(qt["user_id"].to_numpy(), index=qt["post_id"].to_numpy())
        ans = df.loc[corpus.is_answer, ["user_id", "parent_post_id", "timestamp"]]
        ans = ans[ans["parent_post_id"].map(asker).to_numpy() != ans["user_id"].to_numpy()]

        self.user_codes = {u: i for i, u in enumerate(pd.unique(corpus.user_id))}
        code = lambda s: np.array([self.user_codes[u] for u in s], dtype=np.int64)  # noqa: E731
        uq = qt["user_id"].to_numpy()
        self._asked = _SortedKeys(code(uq), qt["timestamp"].to_numpy(np.int64), origin)
        self._helped = _SortedKeys(code(ans["user_id"].to_numpy()),
                                   ans["timestamp"].to_numpy(np.int64), origin)
        first = df.groupby("user_id", sort=False)["timestamp"].min()
        self._first_seen = dict(zip(first.index, first.to_numpy(np.int64)))

        tq = qt["timestamp"].to_numpy(np.int64)
        fa = qt["first_answer"].to_numpy(np.int64)
        answered = (fa >= 0) & (fa <= tq + half)
        tag_lists = qt["tags"].str.split("|")
        exploded = pd.DataFrame({"tag": tag_lists, "t": tq, "ans": np.where(answered, fa, -1)}).explode("tag")
        self.tag_codes = {t: i for i, t in enumerate(pd.unique(exploded["tag"]))}
        tcode = exploded["tag"].map(self.tag_codes).to_numpy(np.int64)
        et = exploded["t"].to_numpy(np.int64)
        ea = exploded["ans"].to_numpy(np.int64)
        self._tag_q = _SortedKeys(tcode, et, origin)
        self._tag_a = _SortedKeys(tcode[ea >= 0], ea[ea >= 0], origin)
        self._all_q = np.sort(tq)
        self._all_a = np.sort(fa[answered])

    def global_rate(self, t) -> np.ndarray:
        t = np.asarray(t, np.int64)
        nq = np.searchsorted(self._all_q, t, side="left")
        na = np.searchsorted(self._all_a, t, side="left")
        return np.where(nq > 0, na / np.maximum(nq, 1), COLD_START_RATE)

    def tag_rate(self, tags, t) -> np.ndarray:
        """Answer rate of each tag among questions posted strictly before ``t``."""
        codes = np.array([self.tag_codes.get(tag, -1) for tag in tags], dtype=np.int64)
        t = np.asarray(t, np.int64)
        known = codes >= 0
        safe = np.where(known, codes, 0)
        nq = np.where(known, self._tag_q.count_before(safe, t), 0)
        na = np.where(known, self._tag_a.count_before(safe, t), 0)
        return np.where(nq > 0, na / np.maximum(nq, 1), self.global_rate(t))

    def covariates(self, windows: WindowSet, questions: pd.DataFrame) -> pd.DataFrame:
        ws = windows.t_window_start
        users = np.array([self.user_codes.get(u, -1) for u in windows.user_id], dtype=np.int64)
        if (users < 0).any():
            raise KeyError("window user not present in corpus")
        out = {"window_id": windows.question_id}
        first = np.array([self._first_seen[u] for u in windows.user_id], dtype=np.int64)
        out["user_tenure"] = np.where(first < ws, (ws - first) / DAY, 0.0)
        for name, idx in [("asked", self._asked), ("help", self._helped)]:
            at = idx.count_before(users, ws)
            out[f"{name}_at"] = at
            out[f"{name}_30d"] = at - idx.count_before(users, ws - 30 * DAY)
            out[f"{name}_7d"] = at - idx.count_before(users, ws - 7 * DAY)

        tags = questions["tags"].to_numpy()
        tag_lists = [s.split("|") for s in tags]
        flat = [t for lst in tag_lists for t in lst]
        owner = np.repeat(np.arange(len(tag_lists)), [len(lst) for lst in tag_lists])
        rates = self.tag_rate(flat, ws[owner])
        out["tag_answer_rate"] = np.bincount(owner, rates, minlength=len(tag_lists)) / \
            np.bincount(owner, minlength=len(tag_lists))
        out["calendar_year"] = pd.to_datetime(windows.t_question, unit="s").year.to_numpy()
        out["top_tag"] = np.array([lst[0] for lst in tag_lists], dtype=object)
        out["treated"] = windows.treated.astype(int)
        return pd.DataFrame(out)[COVARIATE_COLUMNS]


def compute_covariates_many(corpus: Corpus, windows: WindowSet,
                            index: ActivityIndex | None = None,
                            half_length: float = 48.0) -> pd.DataFrame:
    """Covariate table (one row per window, covariates-file column layout)."""
    if index is None:
        index = ActivityIndex(corpus, half_length)
    qt = corpus.question_table().set_index("post_id")
    questions = qt.loc[list(windows.question_id)]
    return index.covariates(windows, questions)


def compute_covariates(corpus: Corpus, window: ObservationWindow,
                       index: ActivityIndex | None = None) -> MatchingCovariates:
    half = (window.t_question - window.t_window_start) / HOUR
    row = compute_covariates_many(corpus, WindowSet.from_windows([window]), index, half).iloc[0]
    return MatchingCovariates(
        user_tenure_days=float(row["user_tenure"]),
        num_questions_asked_at=int(row["asked_at"]), num_help_provided_at=int(row["help_at"]),
        num_questions_asked_30d=int(row["asked_30d"]), num_help_provided_30d=int(row["help_30d"]),
        num_questions_asked_7d=int(row["asked_7d"]), num_help_provided_7d=int(row["help_7d"]),
        tag_answer_rate_avg=float(row["tag_answer_rate"]),
        calendar_year=int(row["calendar_year"]), top_level_tag=str(row["top_tag"]),
    )
