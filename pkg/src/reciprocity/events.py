"""Raw question/answer event logs: data model, CSV I/O and sample filtering.

A :class:`Corpus` stores events column-wise (one numpy array per field) so
that downstream stages can work on millions of rows without materialising
Python objects.  Iterating a corpus yields :class:`Event` records.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

HOUR = 3600
DAY = 24 * HOUR

COLUMNS = ["user_id", "kind", "post_id", "parent_post_id", "timestamp", "score", "tags"]


class EventFormatError(ValueError):
    """Raised when an events file row cannot be parsed."""

    def __init__(self, line: int, field: str, message: str):
        self.line = line
        self.field = field
        super().__init__(f"line {line}, field '{field}': {message}")


class Kind(str, Enum):
    QUESTION = "question"
    ANSWER = "answer"


@dataclass(frozen=True)
class Event:
    user_id: str
    kind: Kind
    post_id: str
    parent_post_id: str | None
    timestamp: int  # seconds since the Unix epoch, UTC
    score: int
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.kind is Kind.ANSWER) != (self.parent_post_id is not None):
            raise ValueError("parent_post_id must be set exactly for answers")
        if self.kind is Kind.QUESTION and not self.tags:
            raise ValueError("questions need at least one tag")


def format_timestamp(seconds: int) -> str:
    return pd.Timestamp(int(seconds), unit="s").strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> int:
    ts = pd.Timestamp(text)
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC").tz_localize(None)
    return int(ts.value // 10**9)


def _id_sort_key(ids: np.ndarray) -> np.ndarray:
    """Ascending order key for opaque ids: numeric when every id is an integer."""
    if len(ids) and all(s.isdigit() for s in ids):
        return ids.astype(np.int64)
    return ids


class Corpus:
    """Immutable, time-sorted collection of events with corpus bounds.

    Parameters
    ----------
    user_id, kind, post_id, parent_post_id, timestamp, score, tags : array-like
        One entry per event.  ``kind`` holds ``"question"``/``"answer"``,
        ``parent_post_id`` is ``""`` for questions and ``tags`` is the
        pipe-joined tag string (``""`` for answers).
    corpus_start, corpus_end : int, optional
        Observation bounds in epoch seconds.  Default to the first and last
        timestamps.
    """

    def __init__(self, user_id, kind, post_id, parent_post_id, timestamp, score, tags,
                 corpus_start: int | None = None, corpus_end: int | None = None):
        user_id = np.asarray(user_id, dtype=object).astype(str)
        kind = np.asarray(kind, dtype=object).astype(str)
        post_id = np.asarray(post_id, dtype=object).astype(str)
        parent = np.asarray(parent_post_id, dtype=object).astype(str)
        timestamp = np.asarray(timestamp, dtype=np.int64)
        score = np.asarray(score, dtype=np.int64)
        tags = np.asarray(tags, dtype=object).astype(str)
        n = len(timestamp)
        for name, arr in [("user_id", user_id), ("kind", kind), ("post_id", post_id),
                          ("parent_post_id", parent), ("score", score), ("tags", tags)]:
            if len(arr) != n:
                raise ValueError(f"column {name} has length {len(arr)}, expected {n}")

        order = np.lexsort((_id_sort_key(post_id), timestamp)) if n else np.arange(0)
        self.user_id = user_id[order]
        self.kind = kind[order]
        self.post_id = post_id[order]
        self.parent_post_id = parent[order]
        self.timestamp = timestamp[order]
        self.score = score[order]
        self.tags = tags[order]
        for arr in self._arrays():
            arr.flags.writeable = False

        if corpus_start is None:
            corpus_start = int(self.timestamp[0]) if n else 0
        if corpus_end is None:
            corpus_end = int(self.timestamp[-1]) if n else 0
        self.corpus_start = int(corpus_start)
        self.corpus_end = int(corpus_end)
        if n and (self.timestamp[0] < self.corpus_start or self.timestamp[-1] > self.corpus_end):
            raise ValueError("event timestamps fall outside the corpus bounds")

        self.is_question = self.kind == Kind.QUESTION.value
        self.is_answer = ~self.is_question
        question_ids = self.post_id[self.is_question]
        self.orphaned = self.is_answer & ~np.isin(self.parent_post_id, question_ids)
        self.is_question.flags.writeable = False
        self.is_answer.flags.writeable = False
        self.orphaned.flags.writeable = False
        self._frame = None

    def _arrays(self):
        return (self.user_id, self.kind, self.post_id, self.parent_post_id,
                self.timestamp, self.score, self.tags)

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self) -> Iterator[Event]:
        for u, k, p, par, t, s, tg in zip(*self._arrays()):
            kind = Kind(k)
            yield Event(u, kind, p, par if kind is Kind.ANSWER else None, int(t), int(s),
                        tuple(tg.split("|")) if tg else ())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.corpus_start == other.corpus_start
                and self.corpus_end == other.corpus_end
                and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def __repr__(self) -> str:
        return (f"Corpus(n_events={len(self)}, questions={int(self.is_question.sum())}, "
                f"orphans={int(self.orphaned.sum())})")

    @property
    def n_orphans(self) -> int:
        return int(self.orphaned.sum())

    @classmethod
    def from_events(cls, events: Iterable[Event], corpus_start=None, corpus_end=None) -> "Corpus":
        events = list(events)
        return cls(
            [e.user_id for e in events],
            [Kind(e.kind).value for e in events],
            [e.post_id for e in events],
            [e.parent_post_id or "" for e in events],
            [e.timestamp for e in events],
            [e.score for e in events],
            ["|".join(e.tags) for e in events],
            corpus_start=corpus_start, corpus_end=corpus_end,
        )

    def frame(self) -> pd.DataFrame:
        """Events as a DataFrame (cached; treat as read-only)."""
        if self._frame is None:
            self._frame = pd.DataFrame({
                "user_id": self.user_id, "kind": self.kind, "post_id": self.post_id,
                "parent_post_id": self.parent_post_id, "timestamp": self.timestamp,
                "score": self.score, "tags": self.tags, "orphaned": self.orphaned,
            })
        return self._frame

    def question_table(self) -> pd.DataFrame:
        """One row per question with its asker, time, tags and answer summary.

        Columns ``first_answer`` (earliest answer with score >= 0 by someone
        other than the asker, or -1) and ``self_answered`` are derived from
        the answers in the corpus.
        """
        df = self.frame()
        q = df.loc[self.is_question, ["user_id", "post_id", "timestamp", "tags"]].reset_index(drop=True)
        a = df.loc[self.is_answer & ~self.orphaned, ["user_id", "parent_post_id", "timestamp", "score"]]
        a = a.merge(q[["post_id", "user_id"]].rename(columns={"post_id": "parent_post_id",
                                                              "user_id": "asker"}),
                    on="parent_post_id", how="left")
        self_ans = set(a.loc[a["user_id"] == a["asker"], "parent_post_id"])
        ok = a[(a["user_id"] != a["asker"]) & (a["score"] >= 0)]
        first = ok.groupby("parent_post_id")["timestamp"].min()
        q["first_answer"] = q["post_id"].map(first).fillna(-1).astype(np.int64)
        q["self_answered"] = q["post_id"].isin(self_ans)
        return q


def parse_events(stream: IO[str] | IO[bytes] | str, corpus_start: int | None = None,
                 corpus_end: int | None = None) -> Corpus:
    """Parse an events CSV into a :class:`Corpus`.

    ``stream`` may be a text or binary file object, or a path.  Raises
    :class:`EventFormatError` naming the (1-based, header = line 1) line and
    field of the first malformed row.
    """
    if isinstance(stream, (str, bytes)) and not hasattr(stream, "read"):
        with open(stream, "rb") as fh:
            return parse_events(fh, corpus_start, corpus_end)
    raw = stream.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    df = pd.read_csv(io.StringIO(raw), dtype=str, keep_default_na=False, na_filter=False)
    if list(df.columns) != COLUMNS:
        raise EventFormatError(1, "header", f"expected {','.join(COLUMNS)}")
    line = np.arange(len(df)) + 2

    def fail(mask, field, message):
        bad = np.flatnonzero(mask)
        if len(bad):
            raise EventFormatError(int(line[bad[0]]), field, message)

    kind = df["kind"].to_numpy()
    fail(~np.isin(kind, [Kind.QUESTION.value, Kind.ANSWER.value]), "kind",
         "must be 'question' or 'answer'")
    is_q = kind == Kind.QUESTION.value
    fail(df["user_id"].to_numpy() == "", "user_id", "empty identifier")
    fail(df["post_id"].to_numpy() == "", "post_id", "empty identifier")
    parent = df["parent_post_id"].to_numpy()
    fail(is_q & (parent != ""), "parent_post_id", "questions must not have a parent")
    fail(~is_q & (parent == ""), "parent_post_id", "answers need a parent post id")
    tags = df["tags"].to_numpy()
    fail(is_q & (tags == ""), "tags", "questions need at least one tag")

    score = pd.to_numeric(df["score"], errors="coerce")
    fail(score.isna().to_numpy() | (score.to_numpy() % 1 != 0), "score", "not an integer")

    ts = pd.to_datetime(df["timestamp"], utc=True, errors="coerce", format="ISO8601")
    fail(ts.isna().to_numpy(), "timestamp", "not a representable ISO-8601 instant")
    seconds = ts.astype("int64").to_numpy() // 10**9 if len(df) else np.zeros(0, np.int64)

    return Corpus(df["user_id"].to_numpy(), kind, df["post_id"].to_numpy(), parent, seconds,
                  score.to_numpy().astype(np.int64), tags,
                  corpus_start=corpus_start, corpus_end=corpus_end)


def write_events(corpus: Corpus, stream: IO[str]) -> None:
    """Serialise ``corpus`` in the events CSV format (inverse of :func:`parse_events`)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS)
    stamps = pd.to_datetime(corpus.timestamp, unit="s").strftime("%Y-%m-%dT%H:%M:%SZ")
    writer.writerows(zip(corpus.user_id, corpus.kind, corpus.post_id, corpus.parent_post_id,
                         stamps, corpus.score.tolist(), corpus.tags))


def filter_questions(corpus: Corpus, window_half_length: float = 48.0) -> list[str]:
    """Post ids of questions whose full window fits in the corpus and that
    have no answer from their own asker.

    ``window_half_length`` is in hours.  Returned ids follow corpus order.
    """
    if window_half_length <= 0:
        raise ValueError("window_half_length must be positive")
    half = int(round(window_half_length * HOUR))
    q = corpus.question_table()
    keep = ((q["timestamp"] - half >= corpus.corpus_start)
            & (q["timestamp"] + half <= corpus.corpus_end)
            & ~q["self_answered"])
    return q.loc[keep, "post_id"].tolist()


def corpus_summary(corpus: Corpus) -> dict:
    return {
        "n_events": len(corpus),
        "n_questions": int(corpus.is_question.sum()),
        "n_answers": int(corpus.is_answer.sum()),
        "n_orphaned_answers": corpus.n_orphans,
        "n_users": int(len(np.unique(corpus.user_id))),
        "corpus_start": format_timestamp(corpus.corpus_start),
        "corpus_end": format_timestamp(corpus.corpus_end),
    }


def events_from_rows(rows: Sequence[Sequence], corpus_start=None, corpus_end=None) -> Corpus:
    """Build a corpus from ``(user, kind, post, parent, iso_time, score, tags)`` tuples.

    Convenience for small hand-built corpora.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(rows)
    buf.seek(0)
    return parse_events(buf, corpus_start, corpus_end)
