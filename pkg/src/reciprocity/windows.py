"""Question-centred observation windows and their counting-process expansion.

Each eligible question gets a ``2H``-long window (default ``H = 48h``)
running from ``t_question - H`` to ``t_question + H``.  The window is split
into a pre-question phase, a waiting period, and a post-answer phase; controls
receive a synthetic answer time copied from their matched treated partner.

Times on windows are integer epoch seconds.  Interval rows are expressed in
hours from the window start.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import IO, TYPE_CHECKING, Iterator, Sequence

import numpy as np
import pandas as pd

from .events import HOUR, Corpus, filter_questions

if TYPE_CHECKING:
    from .design import DesignSpec

BASE_COVARIATES = ["treatment", "phase_post_question", "treated_post_question",
                   "phase_post_answer", "is_treated_active"]
RT_COVARIATES = ["rt_interaction_active", "rt_interaction_postq"]


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationWindow:
    question_id: str
    user_id: str
    t_window_start: int
    t_question: int
    t_answer: int | None
    t_window_end: int
    treated: bool
    help_times: tuple[int, ...] = ()

    @property
    def half_length(self) -> int:
        return self.t_question - self.t_window_start

    @property
    def response_time_hours(self) -> float | None:
        if self.t_answer is None:
            return None
        return (self.t_answer - self.t_question) / HOUR


@dataclass(frozen=True)
class IntervalRow:
    window_id: str
    start: float
    stop: float
    event: bool
    covariates: dict[str, float] = field(default_factory=dict)


class WindowSet:
    """Column-oriented collection of observation windows.

    ``t_answer`` uses ``-1`` for "no answer"; help times are stored in CSR
    layout (``help_ptr`` offsets into ``help_times``).
    """

    def __init__(self, question_id, user_id, t_window_start, t_question, t_answer,
                 t_window_end, treated, help_ptr, help_times):
        self.question_id = np.asarray(question_id, dtype=object).astype(str)
        self.user_id = np.asarray(user_id, dtype=object).astype(str)
        self.t_window_start = np.asarray(t_window_start, dtype=np.int64)
        self.t_question = np.asarray(t_question, dtype=np.int64)
        self.t_answer = np.asarray(t_answer, dtype=np.int64)
        self.t_window_end = np.asarray(t_window_end, dtype=np.int64)
        self.treated = np.asarray(treated, dtype=bool)
        self.help_ptr = np.asarray(help_ptr, dtype=np.int64)
        self.help_times = np.asarray(help_times, dtype=np.int64)
        if len(self.help_ptr) != len(self.question_id) + 1:
            raise ValueError("help_ptr must have one more entry than there are windows")
        self._index = None

    def __len__(self) -> int:
        return len(self.question_id)

    def __getitem__(self, i: int) -> ObservationWindow:
        a = int(self.t_answer[i])
        return ObservationWindow(
            self.question_id[i], self.user_id[i], int(self.t_window_start[i]),
            int(self.t_question[i]), None if a < 0 else a, int(self.t_window_end[i]),
            bool(self.treated[i]),
            tuple(int(t) for t in self.help_times[self.help_ptr[i]:self.help_ptr[i + 1]]),
        )

    def __iter__(self) -> Iterator[ObservationWindow]:
        return (self[i] for i in range(len(self)))

    @property
    def n_help(self) -> np.ndarray:
        return np.diff(self.help_ptr)

    @property
    def has_answer(self) -> np.ndarray:
        return self.t_answer >= 0

    def response_time_hours(self) -> np.ndarray:
        """Answer (or synthetic transition) minus question time; NaN if unset."""
        rt = (self.t_answer - self.t_question) / HOUR
        return np.where(self.has_answer, rt, np.nan)

    def position(self, question_id: str) -> int:
        if self._index is None:
            self._index = {q: i for i, q in enumerate(self.question_id)}
        try:
            return self._index[question_id]
        except KeyError:
            raise WindowError(f"no window for question {question_id!r}") from None

    def positions(self, question_ids) -> np.ndarray:
        return np.array([self.position(q) for q in question_ids], dtype=np.int64)

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        counts = self.n_help[idx]
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        src = (np.repeat(self.help_ptr[idx] - ptr[:-1], counts)
               + np.arange(ptr[-1], dtype=np.int64))
        return WindowSet(self.question_id[idx], self.user_id[idx], self.t_window_start[idx],
                         self.t_question[idx], self.t_answer[idx], self.t_window_end[idx],
                         self.treated[idx], ptr, self.help_times[src])

    def with_answers(self, t_answer) -> "WindowSet":
        """Copy with replaced answer/transition times (treatment flags kept)."""
        return WindowSet(self.question_id, self.user_id, self.t_window_start, self.t_question,
                         t_answer, self.t_window_end, self.treated, self.help_ptr, self.help_times)

    @classmethod
    def from_windows(cls, windows: Sequence[ObservationWindow]) -> "WindowSet":
        counts = [len(w.help_times) for w in windows]
        return cls(
            [w.question_id for w in windows], [w.user_id for w in windows],
            [w.t_window_start for w in windows], [w.t_question for w in windows],
            [-1 if w.t_answer is None else w.t_answer for w in windows],
            [w.t_window_end for w in windows], [w.treated for w in windows],
            np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
            np.array([t for w in windows for t in w.help_times], dtype=np.int64),
        )

    def write_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["question_id", "user_id", "t_window_start", "t_question", "t_answer",
                         "t_window_end", "treated", "help_times"])
        ht = self.help_times.astype(str)
        for i in range(len(self)):
            writer.writerow([self.question_id[i], self.user_id[i], self.t_window_start[i],
                             self.t_question[i], "" if self.t_answer[i] < 0 else self.t_answer[i],
                             self.t_window_end[i], int(self.treated[i]),
                             "|".join(ht[self.help_ptr[i]:self.help_ptr[i + 1]])])

    @classmethod
    def read_csv(cls, stream) -> "WindowSet":
        df = pd.read_csv(stream, dtype=str, keep_default_na=False)
        helps = [np.array(s.split("|"), dtype=np.int64) if s else np.zeros(0, np.int64)
                 for s in df["help_times"]]
        counts = np.array([len(h) for h in helps], dtype=np.int64)
        return cls(df["question_id"].to_numpy(), df["user_id"].to_numpy(),
                   df["t_window_start"].astype(np.int64), df["t_question"].astype(np.int64),
                   np.array([int(s) if s else -1 for s in df["t_answer"]], dtype=np.int64),
                   df["t_window_end"].astype(np.int64), df["treated"].astype(int).astype(bool),
                   np.concatenate([[0], np.cumsum(counts)]),
                   np.concatenate(helps) if len(helps) else np.zeros(0, np.int64))


def build_windows(corpus: Corpus, question_ids: Sequence[str] | None = None,
                  half_length: float = 48.0, check_eligible: bool = True) -> WindowSet:
    """Build windows for many questions at once.

    ``question_ids`` defaults to every eligible question.  Help events are the
    user's answers to questions asked by somebody else (orphaned answers
    included) with timestamps inside the closed window.
    """
    half = int(round(half_length * HOUR))
    eligible = filter_questions(corpus, half_length)
    if question_ids is None:
        question_ids = eligible
    elif check_eligible:
        ok = set(eligible)
        bad = [q for q in question_ids if q not in ok]
        if bad:
            raise WindowError(f"question {bad[0]!r} is not eligible for analysis")

    qt = corpus.question_table().set_index("post_id")
    missing = [q for q in question_ids if q not in qt.index]
    if missing:
        raise WindowError(f"question {missing[0]!r} not found in corpus")
    sel = qt.loc[list(question_ids)]
    tq = sel["timestamp"].to_numpy(np.int64)
    first = sel["first_answer"].to_numpy(np.int64)
    treated = (first >= 0) & (first <= tq + half)
    t_answer = np.where(treated, np.maximum(first, tq + 1), -1)
    users = sel["user_id"].to_numpy().astype(str)

    # help events: answers whose parent was not asked by the answerer
    df = corpus.frame()
    asker = pd.Series(corpus.user_id[corpus.is_question], index=corpus.post_id[corpus.is_question])
    ans = df.loc[corpus.is_answer, ["user_id", "parent_post_id", "timestamp"]]
    parent_asker = ans["parent_post_id"].map(asker)
    ans = ans[parent_asker.to_numpy() != ans["user_id"].to_numpy()]

    codes, uniq = pd.factorize(np.concatenate([ans["user_id"].to_numpy().astype(str), users]))
    a_code = codes[:len(ans)].astype(np.int64)
    w_code = codes[len(ans):].astype(np.int64)
    t0 = min(int(corpus.corpus_start), int(ans["timestamp"].min()) if len(ans) else 0) - 1
    span = np.int64(1) << np.int64(36)
    keys = a_code * span + (ans["timestamp"].to_numpy(np.int64) - t0)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    a_times = ans["timestamp"].to_numpy(np.int64)[order]
    lo = np.searchsorted(keys, w_code * span + (tq - half - t0), side="left")
    hi = np.searchsorted(keys, w_code * span + (tq + half - t0), side="right")
    counts = hi - lo
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    total = int(ptr[-1])
    if total:
        rep = np.repeat(np.arange(len(counts)), counts)
        src = lo[rep] + (np.arange(total) - ptr[rep])
        help_times = a_times[src]
    else:
        help_times = np.zeros(0, np.int64)
    return WindowSet(np.asarray(question_ids, dtype=object), users, tq - half, tq, t_answer,
                     tq + half, treated, ptr, help_times)


def build_window(corpus: Corpus, question_id: str, half_length: float = 48.0) -> ObservationWindow:
    """Single-question convenience wrapper around :func:`build_windows`."""
    if question_id not in set(corpus.post_id[corpus.is_question]):
        raise WindowError(f"question {question_id!r} not found in corpus")
    return build_windows(corpus, [question_id], half_length)[0]


def assign_synthetic_transition(control: ObservationWindow,
                                treated_partner: ObservationWindow) -> ObservationWindow:
    """Give ``control`` a post-phase boundary at its partner's response time."""
    if not treated_partner.treated or treated_partner.t_answer is None:
        raise WindowError("treated partner has no answer")
    if control.treated:
        raise WindowError("control window is treated")
    rt = treated_partner.t_answer - treated_partner.t_question
    t = min(control.t_question + rt, control.t_window_end)
    return replace(control, t_answer=t)


def _separate_help_offsets(offsets: np.ndarray, ptr: np.ndarray, length: np.ndarray) -> np.ndarray:
    """Make help offsets strictly increasing within each window and keep them in
    ``[1, length]`` (1-second shifts; an event at the window start moves to +1s)."""
    out = offsets.copy()
    n = len(ptr) - 1
    if not len(out):
        return out
    win = np.repeat(np.arange(n), np.diff(ptr))
    same_win = np.r_[False, win[1:] == win[:-1]]
    clash = (out <= 0) | (same_win & (np.r_[0, np.diff(out)] <= 0))
    if not clash.any() and (out <= length[win]).all():
        return out
    for w in np.unique(win[clash | (out > length[win])]):
        seg = out[ptr[w]:ptr[w + 1]]
        seg.sort()
        seg[0] = max(seg[0], 1)
        for k in range(1, len(seg)):
            seg[k] = max(seg[k], seg[k - 1] + 1)
        seg[-1] = min(seg[-1], length[w])
        for k in range(len(seg) - 2, -1, -1):
            seg[k] = min(seg[k], seg[k + 1] - 1)
        out[ptr[w]:ptr[w + 1]] = seg
    return out


@dataclass
class IntervalTable:
    """Counting-process rows for a set of windows (hours from window start)."""
    window: np.ndarray        # index into the window set
    window_id: np.ndarray     # string id per row
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    X: np.ndarray
    names: list[str]

    def __len__(self) -> int:
        return len(self.start)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def rows(self) -> list[IntervalRow]:
        return [IntervalRow(str(self.window_id[i]), float(self.start[i]), float(self.stop[i]),
                            bool(self.event[i]),
                            {n: float(v) for n, v in zip(self.names, self.X[i])})
                for i in range(len(self))]

    def write_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["window_id", "start", "stop", "event"] + self.names)
        start = np.char.mod("%.6f", self.start)
        stop = np.char.mod("%.6f", self.stop)
        X = np.char.mod("%.6f", self.X) if self.X.size else self.X.astype(str)
        for i in range(len(self)):
            writer.writerow([self.window_id[i], start[i], stop[i], int(self.event[i]), *X[i]])

    @classmethod
    def read_csv(cls, stream) -> "IntervalTable":
        df = pd.read_csv(stream, dtype={"window_id": str})
        names = [c for c in df.columns if c not in ("window_id", "start", "stop", "event")]
        wid = df["window_id"].to_numpy().astype(str)
        codes, _ = pd.factorize(wid)
        return cls(codes.astype(np.int64), wid, df["start"].to_numpy(float),
                   df["stop"].to_numpy(float), df["event"].to_numpy().astype(bool),
                   df[names].to_numpy(float), names)


def expand_windows(windows: WindowSet, response_time: bool = False,
                   window_ids: Sequence[str] | None = None) -> IntervalTable:
    """Expand every window into piecewise-constant interval rows.

    Rows are cut at the question time, the (actual or synthetic) answer time
    and every help time.  A help event sits on the row that ends at it, so an
    event exactly on a phase boundary belongs to the earlier phase.  With
    ``response_time=True`` the two raw ``log1p`` response-time interaction
    columns are appended (hours measured from the window start).
    """
    n = len(windows)
    if (windows.treated & ~windows.has_answer).any():
        raise WindowError("treated window without an answer time")
    length = windows.t_window_end - windows.t_window_start
    q_off = windows.t_question - windows.t_window_start
    a_off = np.where(windows.has_answer, windows.t_answer - windows.t_window_start, -1)
    rep = np.repeat(np.arange(n), windows.n_help)
    h_off = _separate_help_offsets(windows.help_times - windows.t_window_start[rep],
                                   windows.help_ptr, length)

    idx = np.arange(n)
    cut_win = np.concatenate([idx, idx, idx[a_off >= 0], idx, rep])
    cut_t = np.concatenate([np.zeros(n, np.int64), q_off, a_off[a_off >= 0], length, h_off])
    cut_help = np.concatenate([np.zeros(3 * n + int((a_off >= 0).sum()), bool),
                               np.ones(len(h_off), bool)])
    order = np.lexsort((~cut_help, cut_t, cut_win))
    cut_win, cut_t, cut_help = cut_win[order], cut_t[order], cut_help[order]
    first = np.r_[True, (cut_win[1:] != cut_win[:-1]) | (cut_t[1:] != cut_t[:-1])]
    # help events sort first within a duplicate cut, so `first` keeps the flag
    cut_win, cut_t, cut_help = cut_win[first], cut_t[first], cut_help[first]

    nxt_same = np.r_[cut_win[1:] == cut_win[:-1], False]
    r = np.flatnonzero(nxt_same)
    win = cut_win[r]
    start_s = cut_t[r]
    stop_s = cut_t[r + 1]
    event = cut_help[r + 1]

    treated = windows.treated[win].astype(float)
    post_q = (start_s >= q_off[win]).astype(float)
    post_a = ((a_off[win] >= 0) & (start_s >= a_off[win])).astype(float)
    cols = [treated, post_q, treated * post_q, post_a, treated * post_a]
    names = list(BASE_COVARIATES)
    if response_time:
        log_rt = np.where(windows.treated, np.log1p(np.maximum(a_off, 0) / HOUR), 0.0)[win]
        cols += [treated * post_a * log_rt, treated * post_q * log_rt]
        names += RT_COVARIATES
    ids = windows.question_id if window_ids is None else np.asarray(window_ids, dtype=object)
    return IntervalTable(win.astype(np.int64), np.asarray(ids)[win], start_s / HOUR,
                         stop_s / HOUR, event, np.column_stack(cols), names)


def expand_to_intervals(window: ObservationWindow, design: "DesignSpec | None" = None) -> list[IntervalRow]:
    """Interval rows for a single window.

    Response-time interaction columns are included when ``design`` asks for
    the response-time model.
    """
    if window.t_answer is None:
        raise WindowError("window has no answer or synthetic transition assigned")
    with_rt = design is not None and design.uses_response_time
    return expand_windows(WindowSet.from_windows([window]), response_time=with_rt).rows()


def eligible_windows(corpus: Corpus, half_length: float = 48.0) -> WindowSet:
    return build_windows(corpus, None, half_length, check_eligible=False)
