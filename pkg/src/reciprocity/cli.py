"""Command-line driver: simulate -> ingest -> windows -> match -> fit/sweep/bins -> report.

Stages hand off through flat files in ``--out``.  Each stage writes its
artifacts atomically together with ``<stage>.manifest.json`` recording the
config hash, the stage seed, input/output digests and counts.  A stage that
fails removes whatever it had already written.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import __version__
from .covariates import BUCKETS_BY_LABEL, TENURE_BUCKETS, compute_covariates_many
from .design import (DEFAULT_BINS, INTERACTION_PENALIZER, MAIN_PENALIZER, DesignSpec, MatchedSample,
                     Model, fit_design, naive_estimate, run_bins, run_tenure_sweep, tenure_map)
from .events import corpus_summary, parse_events, parse_timestamp, write_events
from .matching import balance, fit_propensity, match, read_pairs, write_pairs
from .pipeline import score_windows
from .report import adoption_curves, help_rate_curves, split_by_tenure, write_curves
from .simulate import SimConfig, generate, planted_truth
from .windows import WindowSet, eligible_windows

logger = logging.getLogger("reciprocity")

STAGES = ["simulate", "ingest", "windows", "match", "fit", "sweep", "bins", "report"]


class MissingInput(Exception):
    def __init__(self, artifact: str, producer: str | None):
        hint = f" (produced by the '{producer}' stage)" if producer else ""
        super().__init__(f"missing input artifact: {artifact}{hint}")
        self.artifact = artifact


def _format_bins(bins) -> str:
    return ",".join(f"{lo:g}-{hi:g}" for lo, hi in bins)


def _parse_bins(text: str) -> tuple:
    out = []
    for item in text.split(","):
        lo, hi = item.strip().split("-")
        out.append((float(lo), float(hi)))
    return tuple(out)


@dataclass
class PipelineConfig:
    """Run configuration.  Defaults follow the study design."""
    out: str = "run"
    events: str | None = None
    corpus_start: str | None = None
    corpus_end: str | None = None
    half_length: float = 48.0
    caliper: float = 0.05
    penalizer_main: float = MAIN_PENALIZER
    penalizer_interaction: float = INTERACTION_PENALIZER
    clip_percentiles: tuple = (5.0, 95.0)
    tenure_buckets: tuple = tuple(b.label for b in TENURE_BUCKETS)
    bins: tuple = DEFAULT_BINS
    seed: int = 0
    subsample_pairs: int | None = None
    row_budget: int | None = 6_000_000
    bin_hours: float = 1.0
    threads: int = 1
    sim: dict = field(default_factory=dict)

    # fields that do not influence any artifact
    _NOT_HASHED = ("out", "threads")

    def __post_init__(self):
        for label in self.tenure_buckets:
            if label not in BUCKETS_BY_LABEL:
                raise ValueError(f"unknown tenure bucket {label!r}")

    def set(self, key: str, value: str) -> None:
        """Apply one ``key = value`` setting given as text."""
        if key.startswith("sim."):
            self.sim[key[4:]] = value
            return
        names = {f.name: f for f in fields(self)}
        if key not in names or key == "sim":
            raise ValueError(f"unknown config key {key!r}")
        default = getattr(PipelineConfig(), key)
        if value.strip().lower() in ("", "none"):
            parsed = None
        elif key == "bins":
            parsed = _parse_bins(value)
        elif key == "tenure_buckets":
            parsed = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key == "clip_percentiles":
            parsed = tuple(float(v) for v in value.split(","))
        elif key in ("seed", "subsample_pairs", "row_budget", "threads"):
            parsed = int(value)
        elif isinstance(default, float):
            parsed = float(value)
        else:
            parsed = value.strip()
        setattr(self, key, parsed)
        self.__post_init__()

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        cfg = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValueError(f"config line without '=': {raw!r}")
            cfg.set(key, value)
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["bins"] = _format_bins(self.bins)
        d["tenure_buckets"] = list(self.tenure_buckets)
        d["clip_percentiles"] = list(self.clip_percentiles)
        d["sim"] = dict(sorted(self.sim.items()))
        return d

    def overrides(self) -> dict:
        base = PipelineConfig(out=self.out).to_dict()
        return {k: v for k, v in self.to_dict().items()
                if v != base[k] and k not in self._NOT_HASHED}

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._NOT_HASHED}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}/{stage}".encode()).digest()
        return int.from_bytes(digest[:8], "big") >> 1

    def bounds(self) -> tuple[int | None, int | None]:
        return (None if self.corpus_start is None else parse_timestamp(self.corpus_start),
                None if self.corpus_end is None else parse_timestamp(self.corpus_end))

    def sim_config(self) -> SimConfig:
        text = "\n".join(f"{k} = {v}" for k, v in self.sim.items())
        sc = SimConfig.from_text(text)
        if "seed" not in self.sim:
            sc = dataclasses.replace(sc, seed=self.stage_seed("simulate"))
        return sc

    def design(self, model: Model, stage: str) -> DesignSpec:
        pen = self.penalizer_interaction if model is Model.RESPONSE_TIME else self.penalizer_main
        return DesignSpec(model, None, self.bins if model is Model.DISCRETE_BINS else None,
                          tuple(self.clip_percentiles), pen, self.stage_seed(stage),
                          self.subsample_pairs, self.row_budget)


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        raise TypeError(f"cannot serialise {type(o).__name__}")
    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


PRODUCERS = {"events.csv": "simulate", "corpus.csv": "ingest", "windows.csv": "windows",
             "covariates.csv": "windows", "pairs.csv": "match"}


class StageRun:
    """Bookkeeping for one stage: inputs, atomic outputs, manifest."""

    def __init__(self, name: str, cfg: PipelineConfig):
        self.name = name
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.counts: dict = {}
        self.t0 = time.perf_counter()

    def need(self, artifact: str, path: str | Path | None = None) -> Path:
        p = Path(path) if path is not None else self.dir / artifact
        if not p.is_file():
            raise MissingInput(str(p), PRODUCERS.get(artifact))
        self.inputs[artifact] = _digest(p)
        return p

    def write(self, artifact: str, writer: Callable[[io.TextIOBase], None] | str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.dir / artifact
        tmp = final.with_name(final.name + ".partial")
        self.outputs.append(final)
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            if isinstance(writer, str):
                fh.write(writer)
            else:
                writer(fh)
        os.replace(tmp, final)
        return final

    def abort(self) -> None:
        for p in self.outputs:
            for q in (p, p.with_name(p.name + ".partial")):
                if q.exists():
                    q.unlink()

    def finish(self) -> dict:
        manifest = {
            "stage": self.name,
            "package_version": __version__,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.stage_seed(self.name),
            "overrides": self.cfg.overrides(),
            "inputs": self.inputs,
            "outputs": {p.name: _digest(p) for p in self.outputs},
            "counts": self.counts,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        self.write(f"{self.name}.manifest.json", _json(manifest))
        return manifest


def _load_corpus(run: StageRun):
    start, end = run.cfg.bounds()
    return parse_events(str(run.need("corpus.csv")), start, end)


def _load_matched(run: StageRun):
    with open(run.need("windows.csv"), encoding="utf-8") as fh:
        windows = WindowSet.read_csv(fh)
    cov = pd.read_csv(run.need("covariates.csv"), dtype={"window_id": str, "top_tag": str})
    with open(run.need("pairs.csv"), encoding="utf-8") as fh:
        pairs = read_pairs(fh)
    return windows, cov, MatchedSample.build(pairs, windows, tenure_map(cov))


def stage_simulate(run: StageRun) -> None:
    sc = run.cfg.sim_config()
    corpus = generate(sc, threads=run.cfg.threads)
    run.write("events.csv", lambda fh: write_events(corpus, fh))
    run.write("sim_config.txt", sc.to_text())
    run.write("truth.json", _json(planted_truth(sc)))
    run.counts = {"n_events": len(corpus), "n_users_simulated": sc.n_users,
                  "simulation_seed": sc.seed}


def stage_ingest(run: StageRun) -> None:
    src = run.need("events.csv", run.cfg.events)
    start, end = run.cfg.bounds()
    corpus = parse_events(str(src), start, end)
    run.write("corpus.csv", lambda fh: write_events(corpus, fh))
    run.counts = corpus_summary(corpus)


def stage_windows(run: StageRun) -> None:
    corpus = _load_corpus(run)
    windows = eligible_windows(corpus, run.cfg.half_length)
    cov = compute_covariates_many(corpus, windows, half_length=run.cfg.half_length)
    run.write("windows.csv", windows.write_csv)
    run.write("covariates.csv", lambda fh: cov.to_csv(fh, index=False, lineterminator="\n"))
    run.counts = {"n_windows": len(windows), "n_treated": int(windows.treated.sum()),
                  "n_help_events": int(windows.n_help.sum())}


def stage_match(run: StageRun) -> None:
    with open(run.need("windows.csv"), encoding="utf-8") as fh:
        windows = WindowSet.read_csv(fh)
    cov = pd.read_csv(run.need("covariates.csv"), dtype={"window_id": str, "top_tag": str})
    model = fit_propensity(cov)
    scored = score_windows(windows, cov, model)
    result = match(scored, caliper=run.cfg.caliper, seed=run.cfg.stage_seed("match"))
    if not result.pairs:
        raise RuntimeError("matching produced no pairs")
    bal = balance(result.pairs, cov)
    run.write("pairs.csv", lambda fh: write_pairs(result.pairs, fh))
    run.write("propensity.json", _json(model.to_dict()))
    run.write("balance.json", _json(bal.to_dict()))
    n = len(result.pairs)
    run.counts = {"n_windows": len(windows), "n_treated": int(windows.treated.sum()),
                  "n_pairs": n, "n_unmatched_treated": result.n_unmatched,
                  "n_distinct_controls": len({p.control_window_id for p in result.pairs}),
                  "empty_strata": len(result.empty_strata),
                  "matched_treatment_rate": n / (2 * n),
                  "worst_smd_unmatched": bal.worst_unmatched_smd,
                  "worst_smd_matched": bal.worst_matched_smd}
    print(bal.table())


def stage_fit(run: StageRun) -> None:
    windows, _, sample = _load_matched(run)
    out = {}
    for model, artifact in [(Model.MAIN, "fit_main.json"),
                            (Model.RESPONSE_TIME, "fit_response_time.json")]:
        res = fit_design(sample, None, run.cfg.design(model, "fit"))
        run.write(artifact, _json(res.to_dict() | {"n_pairs": res.diagnostics["n_pairs"]}))
        out[model.value] = res
        print(f"[{model.value}]\n{res.summary()}\n")
    naive = naive_estimate(windows, run.cfg.penalizer_main)
    run.write("fit_naive.json", _json(naive.to_dict()))
    run.counts = {"n_pairs": len(sample),
                  "n_pairs_main": out[Model.MAIN.value].diagnostics["n_pairs"],
                  "n_rows_main": out[Model.MAIN.value].n_rows,
                  "n_events_main": out[Model.MAIN.value].n_events}


def _table(records: list[dict], title: str) -> str:
    lines = [title, f"{'stratum':<10}{'pairs':>8}{'events':>9}{'coef':>10}{'se':>9}{'HR':>8}"
                    f"{'95% CI':>18}{'p':>10}"]
    for r in records:
        if r["coef"] is None:
            lines.append(f"{r['stratum']:<10}{r['n'] or 0:>8}{'-':>9}{'n/a':>10}")
            continue
        ci = f"[{r['ci'][0]:.3f}, {r['ci'][1]:.3f}]"
        events = "-" if r["events"] is None else r["events"]
        lines.append(f"{r['stratum']:<10}{r['n']:>8}{events:>9}{r['coef']:>10.4f}"
                     f"{r['se']:>9.4f}{r['hr']:>8.3f}{ci:>18}{r['p']:>10.2g}")
    return "\n".join(lines)


def stage_sweep(run: StageRun) -> None:
    _, _, sample = _load_matched(run)
    buckets = [BUCKETS_BY_LABEL[b] for b in run.cfg.tenure_buckets]
    counts = {}
    for model, coef, artifact in [(Model.MAIN, "is_treated_active", "sweep.json"),
                                  (Model.RESPONSE_TIME, "rt_interaction_active",
                                   "sweep_response_time.json")]:
        res = run_tenure_sweep(sample, None, run.cfg.design(model, "sweep"),
                               threads=run.cfg.threads, buckets=buckets)
        records = res.records(coef)
        records += [{"stratum": k, "n": 0, "events": 0, "coef": None, "se": None, "hr": None,
                     "ci": None, "p": None, "error": v} for k, v in res.errors.items()]
        order = {b.label: i for i, b in enumerate(TENURE_BUCKETS)}
        records.sort(key=lambda r: order[r["stratum"]])
        run.write(artifact, _json(records))
        print(_table(records, f"{model.value}: {coef} by tenure"))
        counts[model.value] = {"fitted": len(res.fits), "skipped": res.skipped,
                               "failed": sorted(res.errors)}
    run.counts = counts


def stage_bins(run: StageRun) -> None:
    _, _, sample = _load_matched(run)
    est = run_bins(sample, None, run.cfg.design(Model.DISCRETE_BINS, "bins"))
    records = []
    for e in est:
        r = e.estimate
        records.append({"stratum": f"{e.bin[0]:g}-{e.bin[1]:g}", "n": e.n_pairs,
                        "events": None, "coef": None if r is None else r["coef"],
                        "se": None if r is None else r["se"], "hr": None if r is None else r["hr"],
                        "ci": None if r is None else [r["ci_lower"], r["ci_upper"]],
                        "p": None if r is None else r["p"]})
    run.write("bins.json", _json(records))
    print(_table(records, "is_treated_active by response-time bin (minutes)"))
    run.counts = {"n_pairs_binned": int(sum(e.n_pairs for e in est)),
                  "empty_bins": [r["stratum"] for r in records if r["coef"] is None]}


def stage_report(run: StageRun) -> None:
    _, _, sample = _load_matched(run)
    ws, _ = sample.paired_windows()
    treated = ws.take(np.arange(0, len(ws), 2))
    control = ws.take(np.arange(1, len(ws), 2))
    groups = {"treated": treated, "control": control}
    curves = help_rate_curves(groups, run.cfg.bin_hours)
    by_tenure = split_by_tenure(groups, {"treated": sample.tenure_days,
                                         "control": sample.tenure_days})
    curves += help_rate_curves(by_tenure, run.cfg.bin_hours)
    curves += adoption_curves(treated, control, run.cfg.bin_hours)
    run.write("curves.csv", lambda fh: write_curves(curves, fh))
    run.counts = {"n_series": len(curves),
                  "unnormalized_series": [c.label for c in curves
                                          if not c.normalized and c.label != "answered_share"]}


STAGE_FUNCS = {"simulate": stage_simulate, "ingest": stage_ingest, "windows": stage_windows,
               "match": stage_match, "fit": stage_fit, "sweep": stage_sweep, "bins": stage_bins,
               "report": stage_report}


def run_stage(name: str, cfg: PipelineConfig) -> dict:
    run = StageRun(name, cfg)
    try:
        STAGE_FUNCS[name](run)
        return run.finish()
    except BaseException:
        run.abort()
        raise


def run_all(cfg: PipelineConfig) -> dict:
    """Run every stage in order; simulation is skipped when ``events`` is set."""
    manifests = {}
    for name in STAGES:
        if name == "simulate" and cfg.events is not None:
            continue
        manifests[name] = run_stage(name, cfg)
    return manifests


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reciprocity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--out", help="output directory (default: run)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker cap; does not change results")
    common.add_argument("--events", help="events CSV to ingest instead of simulating")
    common.add_argument("--half-length", type=float, help="window half-length in hours")
    common.add_argument("--caliper", type=float)
    common.add_argument("--penalizer-main", type=float)
    common.add_argument("--penalizer-interaction", type=float)
    common.add_argument("--clip-percentiles", help="low,high")
    common.add_argument("--tenure-buckets", help="comma-separated bucket labels")
    common.add_argument("--bins", help="response-time bins in minutes, e.g. 0-15,15-30")
    common.add_argument("--subsample-pairs", type=int)
    common.add_argument("--row-budget", type=int)
    common.add_argument("--bin-hours", type=float)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="any config key, including sim.<field>")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["all"]:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = PipelineConfig.from_text(fh.read())
    else:
        cfg = PipelineConfig()
    for key in ("out", "seed", "threads", "events", "half_length", "caliper", "penalizer_main",
                "penalizer_interaction", "clip_percentiles", "tenure_buckets", "bins",
                "subsample_pairs", "row_budget", "bin_hours"):
        value = getattr(args, key)
        if value is not None:
            cfg.set(key, str(value))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "all":
            manifests = run_all(cfg)
            m = manifests["match"]["counts"]
            print(f"matched pairs: {m['n_pairs']}  treatment rate among matched windows: "
                  f"{m['matched_treatment_rate']:.0%}")
        else:
            run_stage(args.command, cfg)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # stage failure: outputs already removed
        logger.debug("stage failed", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
