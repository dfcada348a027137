"""In-memory composition of the stages: corpus -> windows -> matched pairs."""
from __future__ import annotations

from dataclasses import dataclass

import pandas as pd

from .covariates import compute_covariates_many
from .design import MatchedSample, tenure_map
from .events import Corpus
from .matching import BalanceReport, MatchResult, PropensityModel, balance, fit_propensity, match
from .windows import WindowSet, eligible_windows


@dataclass
class MatchedAnalysis:
    windows: WindowSet
    covariates: pd.DataFrame
    propensity: PropensityModel
    scored: pd.DataFrame
    matching: MatchResult
    balance: BalanceReport

    @property
    def pairs(self):
        return self.matching.pairs

    def sample(self) -> MatchedSample:
        return MatchedSample.build(self.pairs, self.windows, tenure_map(self.covariates))


def score_windows(windows: WindowSet, covariates: pd.DataFrame, model: PropensityModel) -> pd.DataFrame:
    scored = covariates.copy()
    scored["score"] = model.predict(covariates)
    scored["response_time_hours"] = windows.response_time_hours()
    return scored


def match_corpus(corpus: Corpus, half_length: float = 48.0, caliper: float = 0.05,
                 seed: int = 0) -> MatchedAnalysis:
    windows = eligible_windows(corpus, half_length)
    cov = compute_covariates_many(corpus, windows, half_length=half_length)
    model = fit_propensity(cov)
    scored = score_windows(windows, cov, model)
    result = match(scored, caliper=caliper, seed=seed)
    return MatchedAnalysis(windows, cov, model, scored, result, balance(result.pairs, cov))
