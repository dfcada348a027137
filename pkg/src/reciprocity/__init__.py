"""Matched-pair survival analysis of generalized reciprocity on Q&A platforms.

The package turns a question/answer event log into per-question observation
windows, matches answered to unanswered questions on pre-question activity,
and fits counting-process Cox models of the asker's subsequent helping.
"""
__version__ = "0.1.0"

from .coxfit import CoxDataset, FitResult, fit, neg_log_partial_likelihood, prepare
from .design import DesignSpec, Model, assemble, run_bins, run_tenure_sweep
from .events import Corpus, Event, parse_events, write_events
from .matching import balance, fit_propensity, match
from .simulate import SimConfig, generate, planted_truth
from .windows import ObservationWindow, WindowSet, build_windows, expand_windows

__all__ = [
    "Corpus", "CoxDataset", "DesignSpec", "Event", "FitResult", "Model", "ObservationWindow",
    "SimConfig", "WindowSet", "assemble", "balance", "build_windows", "expand_windows", "fit",
    "fit_propensity", "generate", "match", "neg_log_partial_likelihood", "parse_events",
    "planted_truth", "prepare", "run_bins", "run_tenure_sweep", "write_events",
]
