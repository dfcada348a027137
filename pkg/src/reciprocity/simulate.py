"""Synthetic question/answer platforms with a planted help-hazard model.

Every simulated user has a latent activity level that scales both their
help rate and their chance of getting answers, so treatment is confounded
with engagement.  Inside each question window the user's help events follow
a piecewise-constant intensity

    activity * baseline_help_rate * exp(b0*T + b1*PQ + b2*T*PQ + b3*PA + b4_eff*T*PA)

which is exactly the model the Cox fitter estimates.  ``b4_eff`` is ``b4``
scaled by the tenure-bucket and response-time-bin multipliers and shifted by
the continuous response-time slope.  Outside windows users help at a
background rate.

Questions of one user are spaced more than one window apart so that windows
never overlap.  Help answers point at parent posts outside the corpus
(orphans), which count as help but never make a question "answered".

Users are simulated in fixed-size blocks, each with its own random stream
derived from ``(seed, block)``, so output does not depend on worker count.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from .covariates import BUCKETS_BY_LABEL, TENURE_BUCKETS, bucket_index
from .design import DEFAULT_BINS, assign_bins
from .events import DAY, HOUR, Corpus

LATENCY_MEDIAN_HOURS = 0.34
LATENCY_MEAN_HOURS = 5.09


@dataclass
class SimConfig:
    n_users: int = 20000
    horizon_days: float = 3650.0
    start: str = "2008-07-31"
    half_length_hours: float = 48.0
    # help intensities (events per hour at activity 1)
    baseline_help_rate: float = 0.2
    background_help_rate: float = 0.001
    # question process
    questions_per_user: float = 3.0
    question_rate: float = 1.0 / (10 * 24)
    activity_sd: float = 0.25
    n_tags: int = 8
    n_secondary_tags: int = 20
    # answer model: logit P(answer) = intercept + activity*log(activity) + tag*difficulty
    answer_intercept: float = 0.3
    answer_activity_coef: float = 2.0
    answer_tag_coef: float = 0.7
    latency_median_hours: float = LATENCY_MEDIAN_HOURS
    latency_sigma: float = math.sqrt(2 * math.log(LATENCY_MEAN_HOURS / LATENCY_MEDIAN_HOURS))
    downvote_prob: float = 0.1
    self_answer_prob: float = 0.02
    # planted hazard coefficients
    beta_treatment: float = 0.0
    beta_post_question: float = 0.05
    beta_treated_post_question: float = -0.005
    beta_post_answer: float = 0.0
    beta_treated_active: float = 0.0562
    tenure_profile: dict = field(default_factory=dict)
    rt_slope: float = 0.0
    rt_center: float = 3.9
    rt_scale: float = 0.1
    bin_multipliers: dict = field(default_factory=dict)
    seed: int = 0
    block_size: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("baseline_help_rate", "background_help_rate", "question_rate",
                     "latency_median_hours", "latency_sigma", "horizon_days", "half_length_hours"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("downvote_prob", "self_answer_prob"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.n_users < 1 or self.block_size < 1 or self.n_tags < 1:
            raise ValueError("n_users, block_size and n_tags must be positive")
        if self.questions_per_user < 1:
            raise ValueError("questions_per_user must be at least 1")
        for label in self.tenure_profile:
            if label not in BUCKETS_BY_LABEL:
                raise ValueError(f"unknown tenure bucket {label!r}")
        for b in self.bin_multipliers:
            _parse_bin(b)

    @property
    def true_beta(self) -> dict:
        return {"treatment": self.beta_treatment, "phase_post_question": self.beta_post_question,
                "treated_post_question": self.beta_treated_post_question,
                "phase_post_answer": self.beta_post_answer,
                "is_treated_active": self.beta_treated_active}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                v = ",".join(f"{k}:{float(x)!r}" for k, x in v.items())
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SimConfig":
        kw = {}
        types = {f.name: f for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown simulation key {key!r}")
            default = getattr(cls(), key) if key not in ("tenure_profile", "bin_multipliers") else {}
            if isinstance(default, dict):
                kw[key] = {k.strip(): float(x) for k, x in
                           (item.rsplit(":", 1) for item in value.split(",") if item.strip())}
            elif isinstance(default, bool):
                kw[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)


def _parse_bin(key) -> tuple[float, float]:
    if isinstance(key, tuple):
        return float(key[0]), float(key[1])
    lo, hi = str(key).split("-")
    return float(lo), float(hi)


def _bin_table(config: SimConfig):
    """(bins, multiplier per bin) with unspecified bins at 1.0."""
    if not config.bin_multipliers:
        return None, None
    given = {_parse_bin(k): float(v) for k, v in config.bin_multipliers.items()}
    bins = tuple(sorted(set(map(tuple, DEFAULT_BINS)) | set(given)))
    return bins, np.array([given.get(b, 1.0) for b in bins])


def planted_truth(config: SimConfig) -> dict:
    """Ground-truth coefficients, per tenure bucket and response-time bin."""
    b4 = config.beta_treated_active
    buckets = {b.label: b4 * float(config.tenure_profile.get(b.label, 1.0)) for b in TENURE_BUCKETS}
    truth = {"beta": config.true_beta, "is_treated_active": b4,
             "tenure_buckets": buckets, "rt_slope": config.rt_slope}
    bins, mult = _bin_table(config)
    if bins is not None:
        truth["bins"] = [{"bin": [lo, hi], "coef": b4 * m} for (lo, hi), m in zip(bins, mult)]
    return truth


def truth_json(config: SimConfig) -> str:
    return json.dumps(planted_truth(config), indent=2, sort_keys=True)


def tag_difficulty(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2**32 - 1,)))
    return rng.normal(0, 1, config.n_tags), rng.normal(0, 0.5, config.n_secondary_tags)


def thin_piecewise(rng, starts, ends, rates, owner, n_owner):
    """Sample a piecewise-constant intensity by thinning a dominating process.

    ``starts``/``ends``/``rates`` describe pieces; ``owner`` maps each piece to
    a window whose pieces are contiguous.  Returns (owner, time) of accepted
    points.
    """
    span_lo = np.full(n_owner, np.inf)
    span_hi = np.full(n_owner, -np.inf)
    lam_max = np.zeros(n_owner)
    np.minimum.at(span_lo, owner, starts)
    np.maximum.at(span_hi, owner, ends)
    np.maximum.at(lam_max, owner, rates)
    counts = rng.poisson(lam_max * (span_hi - span_lo))
    who = np.repeat(np.arange(n_owner), counts)
    t = span_lo[who] + rng.random(len(who)) * (span_hi - span_lo)[who]
    # intensity at each candidate: last piece of its owner starting at or before t
    order = np.lexsort((starts, owner))
    s_sorted = starts[order]
    n_pieces = np.bincount(owner, minlength=n_owner)
    first = np.concatenate([[0], np.cumsum(n_pieces)[:-1]])
    base = first[who]
    pos = np.zeros(len(who), dtype=np.int64)
    for j in range(1, int(n_pieces.max()) if len(who) else 0):
        has = j < n_pieces[who]
        pos += has & (s_sorted[np.where(has, base + j, 0)] <= t)
    lam = rates[order[base + pos]]
    accept = rng.random(len(who)) * lam_max[who] < lam
    return who[accept], t[accept]


def _simulate_block(config: SimConfig, block: int, user_lo: int, user_hi: int,
                    t_start: float, t_end: float, top_diff, sec_diff):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(block,)))
    H = config.half_length_hours * HOUR
    n = user_hi - user_lo
    uid = np.arange(user_lo, user_hi)
    sd = config.activity_sd
    activity = np.exp(rng.normal(-sd * sd / 2, sd, n))

    # tenure at the start of the active period: uniform over buckets
    bucket = rng.integers(0, len(TENURE_BUCKETS), n)
    lo = np.array([b.lower_days for b in TENURE_BUCKETS])[bucket]
    hi = np.array([min(b.upper_days, 2900.0) for b in TENURE_BUCKETS])[bucket]
    lo = np.where(bucket == 0, 0.0, lo)
    hi = np.where(bucket == 0, 5.0, hi)
    lead = (lo + rng.random(n) * (hi - lo)) * DAY
    newcomer = (bucket == 0) & (rng.random(n) < 0.3)
    lead = np.where(newcomer, 0.0, lead)

    n_q = 1 + rng.poisson(config.questions_per_user - 1, n)
    mean_gap = 1.0 / (config.question_rate * activity)  # hours
    latest_first = t_end - lead - 2 * H - n_q * (2 * H + mean_gap * HOUR)
    arrival = t_start + rng.random(n) * np.maximum(latest_first - t_start, 0.0)

    # questions: first one a window after the active period starts
    qu = np.repeat(np.arange(n), n_q)
    first_q = np.r_[True, qu[1:] != qu[:-1]]
    gaps = 2 * H + HOUR + rng.exponential(1.0, len(qu)) * mean_gap[qu] * HOUR
    gaps[first_q] = 0.0
    offset = np.cumsum(gaps)
    offset -= np.repeat(offset[first_q], n_q)
    tq = np.floor(arrival[qu] + lead[qu] + np.where(newcomer[qu], 0.0, H) + offset)
    first_event = np.where(newcomer, tq[first_q], arrival)
    nq = len(tq)

    top = rng.integers(0, config.n_tags, nq)
    has_sec = rng.random(nq) < 0.5
    sec = rng.integers(0, config.n_secondary_tags, nq)
    difficulty = top_diff[top] + np.where(has_sec, sec_diff[sec], 0.0)
    logit = (config.answer_intercept + config.answer_activity_coef * np.log(activity[qu])
             + config.answer_tag_coef * difficulty)
    answered = rng.random(nq) < 1.0 / (1.0 + np.exp(-logit))
    lat = np.exp(np.log(config.latency_median_hours) + config.latency_sigma * rng.normal(size=nq))
    lat_s = np.maximum(np.floor(lat * HOUR), 1.0)
    t_ans = tq + lat_s
    treated = answered & (lat_s <= H)
    latent = tq + np.minimum(np.maximum(np.floor(np.exp(np.log(config.latency_median_hours)
                             + config.latency_sigma * rng.normal(size=nq)) * HOUR), 1.0), H)
    t_switch = np.where(treated, t_ans, latent)
    self_ans = rng.random(nq) < config.self_answer_prob
    downvoted = ~answered & (rng.random(nq) < config.downvote_prob)
    t_down = tq + np.maximum(np.floor(rng.exponential(3.0, nq) * HOUR), 1.0)

    # help intensity inside each window
    ws = tq - H
    tenure = np.maximum(ws - first_event[qu], 0.0) / DAY
    bidx = bucket_index(tenure)
    tmult = np.array([float(config.tenure_profile.get(b.label, 1.0)) for b in TENURE_BUCKETS])[bidx]
    b4 = config.beta_treated_active * tmult
    bins, bmult = _bin_table(config)
    if bins is not None:
        k = assign_bins((t_switch - tq) / 60.0, bins)
        b4 = b4 * np.where(k >= 0, bmult[np.maximum(k, 0)], 1.0)
    b4 = b4 + config.rt_slope * (np.log1p((t_switch - ws) / HOUR) - config.rt_center) / config.rt_scale
    T = treated.astype(float)
    base = activity[qu] * config.baseline_help_rate / HOUR
    eta_pre = config.beta_treatment * T
    eta_wait = eta_pre + config.beta_post_question + config.beta_treated_post_question * T
    eta_post = eta_wait + config.beta_post_answer + b4 * T
    p_start = np.concatenate([ws, tq, t_switch])
    p_end = np.concatenate([tq, t_switch, tq + H])
    p_rate = base[np.tile(np.arange(nq), 3)] * np.exp(np.concatenate([eta_pre, eta_wait, eta_post]))
    p_owner = np.tile(np.arange(nq), 3)
    keep = p_end > p_start
    h_q, h_t = thin_piecewise(rng, p_start[keep], p_end[keep], p_rate[keep], p_owner[keep], nq)
    h_t = np.floor(h_t)

    # background help outside windows, over the user's active span
    last_end = np.zeros(n)
    np.maximum.at(last_end, qu, tq + H)
    span = np.maximum(last_end - arrival, 0.0)
    nb = rng.poisson(activity * config.background_help_rate / HOUR * span)
    b_u = np.repeat(np.arange(n), nb)
    b_t = np.floor(arrival[b_u] + rng.random(len(b_u)) * span[b_u])
    wkeys = qu * 1e11 + ws
    pos = np.searchsorted(wkeys, b_u * 1e11 + b_t, side="right") - 1
    inside = (pos >= 0) & (qu[np.maximum(pos, 0)] == b_u) & (b_t <= tq[np.maximum(pos, 0)] + H)
    b_u, b_t = b_u[~inside], b_t[~inside]
    intro = ~newcomer  # a first help answer marks the start of the user's history

    return {
        "uid": uid, "qu": qu, "tq": tq, "top": top, "sec": np.where(has_sec, sec, -1),
        "answered": answered, "t_ans": t_ans, "score": rng.integers(0, 6, nq),
        "downvoted": downvoted, "t_down": t_down, "self_ans": self_ans,
        "t_self": tq + np.maximum(np.floor(rng.exponential(5.0, nq) * HOUR), 1.0),
        "answerer": rng.integers(0, max(1, config.n_users // 4), nq),
        "help_u": np.concatenate([qu[h_q], b_u, np.flatnonzero(intro)]),
        "help_t": np.concatenate([h_t, b_t, arrival[intro]]),
    }


def generate(config: SimConfig, threads: int = 1) -> Corpus:
    """Simulate a corpus.  Output is identical for any ``threads`` value."""
    config.validate()
    t_start = float(pd.Timestamp(config.start).value // 10**9)
    t_end = t_start + config.horizon_days * DAY
    top_diff, sec_diff = tag_difficulty(config)
    bounds = [(b, lo, min(lo + config.block_size, config.n_users))
              for b, lo in enumerate(range(0, config.n_users, config.block_size))]

    def run(args):
        return _simulate_block(config, *args, t_start, t_end, top_diff, sec_diff)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run, bounds))
    else:
        blocks = [run(b) for b in bounds]
    return _assemble_corpus(blocks, config, int(t_start), int(t_end))


def _assemble_corpus(blocks, config: SimConfig, t_start: int, t_end: int) -> Corpus:
    users, kinds, posts, parents, times, scores, tags = [], [], [], [], [], [], []
    top_names = np.array([f"tag{i}" for i in range(config.n_tags)], dtype=object)
    sec_names = np.array([f"sub{i}" for i in range(config.n_secondary_tags)], dtype=object)
    next_id = 1
    for blk in blocks:
        uid = blk["uid"]
        qu = blk["qu"]
        nq = len(qu)
        qid = np.arange(next_id, next_id + nq)
        next_id += nq
        asker = np.char.add("u", uid[qu].astype(str)).astype(object)
        tag_str = top_names[blk["top"]].copy()
        has_sec = blk["sec"] >= 0
        tag_str[has_sec] = tag_str[has_sec] + "|" + sec_names[blk["sec"][has_sec]]
        users.append(asker); kinds.append(np.full(nq, "question", dtype=object))
        posts.append(qid); parents.append(np.full(nq, "", dtype=object))
        times.append(blk["tq"]); scores.append(np.zeros(nq, np.int64)); tags.append(tag_str)

        for mask, t, who, score in [
            (blk["answered"], blk["t_ans"],
             np.char.add("c", blk["answerer"].astype(str)).astype(object), blk["score"]),
            (blk["downvoted"], blk["t_down"],
             np.char.add("c", blk["answerer"].astype(str)).astype(object), np.full(nq, -1)),
            (blk["self_ans"], blk["t_self"], asker, np.zeros(nq, np.int64)),
        ]:
            m = int(mask.sum())
            users.append(who[mask]); kinds.append(np.full(m, "answer", dtype=object))
            posts.append(np.arange(next_id, next_id + m)); next_id += m
            parents.append(qid[mask].astype(str).astype(object)); times.append(t[mask])
            scores.append(score[mask].astype(np.int64)); tags.append(np.full(m, "", dtype=object))

        hu, ht = blk["help_u"], blk["help_t"]
        order = np.lexsort((ht, hu))
        hu, ht = hu[order], ht[order]
        m = len(hu)
        users.append(np.char.add("u", uid[hu].astype(str)).astype(object))
        kinds.append(np.full(m, "answer", dtype=object))
        posts.append(np.arange(next_id, next_id + m)); next_id += m
        parents.append(np.full(m, None, dtype=object)); times.append(ht)
        scores.append(np.ones(m, np.int64)); tags.append(np.full(m, "", dtype=object))

    parent = np.concatenate(parents)
    orphan = np.array([p is None for p in parent])
    # orphan parents get ids beyond every post id in the corpus
    parent[orphan] = (next_id + np.arange(int(orphan.sum()))).astype(str)
    t = np.concatenate(times).astype(np.int64)
    keep = (t >= t_start) & (t <= t_end)
    return Corpus(np.concatenate(users)[keep], np.concatenate(kinds)[keep],
                  np.concatenate(posts).astype(str)[keep], parent[keep], t[keep],
                  np.concatenate(scores)[keep], np.concatenate(tags)[keep],
                  corpus_start=t_start, corpus_end=t_end)


def config_dict(config: SimConfig) -> dict:
    return asdict(config)
