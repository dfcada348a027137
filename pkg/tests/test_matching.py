import io
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from reciprocity.matching import (MatchedPair, PropensityError, PropensityModel, balance,
                                  fit_propensity, match, pooled_sd, read_pairs, smd, write_pairs)


def scored(rows):
    """rows: (window_id, treated, score[, year, tag])"""
    out = []
    for r in rows:
        wid, t, s = r[:3]
        year, tag = (r[3], r[4]) if len(r) > 3 else (2015, "py")
        out.append({"window_id": wid, "treated": int(t), "score": s, "calendar_year": year,
                    "top_tag": tag, "response_time_hours": 1.5 if t else np.nan})
    return pd.DataFrame(out)


def test_nearest_within_caliper():
    res = match(scored([("t", 1, 0.50), ("a", 0, 0.48), ("b", 0, 0.56)]))
    assert [(p.treated_window_id, p.control_window_id) for p in res] == [("t", "a")]


def test_caliper_excludes_far_control():
    res = match(scored([("t", 1, 0.50), ("b", 0, 0.56)]))
    assert len(res) == 0 and res.unmatched == ["t"]


def test_controls_reused_with_replacement():
    res = match(scored([("t1", 1, 0.50), ("t2", 1, 0.51), ("t3", 1, 0.49), ("c", 0, 0.5)]))
    assert len(res) == 3
    assert {p.control_window_id for p in res} == {"c"}
    assert len({p.treated_window_id for p in res}) == 3


def test_exact_strata_respected_and_empty_stratum_warned(caplog):
    df = scored([("t1", 1, 0.5, 2015, "py"), ("t2", 1, 0.5, 2016, "py"),
                 ("c1", 0, 0.5, 2015, "go"), ("c2", 0, 0.51, 2016, "py")])
    res = match(df)
    assert [(p.treated_window_id, p.control_window_id) for p in res] == [("t2", "c2")]
    assert res.empty_strata == [(2015, "py")]
    assert "no controls" in caplog.text


def test_equidistant_tie_goes_to_smaller_id():
    res = match(scored([("t", 1, 0.5), ("z", 0, 0.52), ("a", 0, 0.52)]))
    assert res[0].control_window_id == "a"


def test_invalid_caliper():
    with pytest.raises(ValueError):
        match(scored([("t", 1, 0.5)]), caliper=0)


def test_pairs_round_trip():
    pairs = [MatchedPair("t1", "c1", 0.1234567890123, 0.13, 2.5)]
    buf = io.StringIO()
    write_pairs(pairs, buf)
    buf.seek(0)
    assert read_pairs(buf) == pairs


def test_null_model_scores_one_half():
    model = PropensityModel(["x"], {"intercept": 0.0, "x": 0.0}, np.zeros(1), np.ones(1))
    assert model.predict(pd.DataFrame({"x": [-3.0, 0.0, 17.0]})).tolist() == [0.5, 0.5, 0.5]


def test_balanced_binary_feature_has_zero_coefficient():
    df = pd.DataFrame({"x": [0, 1, 0, 1, 0, 1], "treated": [1, 1, 0, 0, 1, 1]})
    model = fit_propensity(df, features=["x"])
    assert abs(model.coefficients["x"]) < 1e-6


def test_eight_row_oracle():
    df = pd.DataFrame({"a": [0.5, 1.2, -0.3, 2.2, 0.0, 1.1, -1.4, 0.7],
                       "b": [3, 1, 4, 1, 5, 9, 2, 6],
                       "treated": [1, 0, 0, 1, 1, 0, 0, 1]})
    model = fit_propensity(df, features=["a", "b"])
    Z = df[["a", "b"]].to_numpy(float)
    Z = (Z - Z.mean(axis=0)) / Z.std(axis=0)
    expect = oracles.logistic_mle(Z, df["treated"].to_numpy())
    got = [model.coefficients[k] for k in ("intercept", "a", "b")]
    np.testing.assert_allclose(got, expect, atol=1e-6)
    assert 0 < model.predict(df).min() and model.predict(df).max() < 1


def test_separation_reported():
    df = pd.DataFrame({"x": [0.0, 1.0, 2.0, 3.0], "treated": [0, 0, 1, 1]})
    with pytest.raises(PropensityError, match="separation"):
        fit_propensity(df, features=["x"])


def test_needs_both_groups():
    with pytest.raises(PropensityError):
        fit_propensity(pd.DataFrame({"x": [0.0, 1.0], "treated": [1, 1]}), features=["x"])


def test_constant_feature_dropped():
    df = pd.DataFrame({"x": [0.1, 0.4, 0.2, 0.9, 0.3], "k": [2.0] * 5, "treated": [1, 0, 0, 1, 0]})
    model = fit_propensity(df, features=["x", "k"])
    assert model.features == ["x"]
    assert model.fit_metadata["dropped_features"] == ["k"]
    assert (model.feature_sds > 0).all()


def test_rescaling_a_feature_leaves_scores_unchanged(rng):
    n = 300
    df = pd.DataFrame({"a": rng.normal(size=n), "b": rng.poisson(3, n).astype(float)})
    df["treated"] = (rng.random(n) < 1 / (1 + np.exp(-(0.5 * df["a"] - 0.2 * df["b"])))).astype(int)
    p1 = fit_propensity(df, features=["a", "b"]).predict(df)
    df2 = df.assign(b=df["b"] * 1000.0)
    p2 = fit_propensity(df2, features=["a", "b"]).predict(df2)
    assert np.abs(p1 - p2).max() < 1e-10


def test_smd_identity_and_hand_example():
    x = np.array([0.2, 0.4, 0.9])
    assert smd(x, x.copy()) == 0.0
    # two points per group: var = 0.5*(a-b)^2
    t, c = np.array([1.0, 3.0]), np.array([0.0, 1.0])
    expect = (2.0 - 0.5) / math.sqrt((2.0 + 0.5) / 2)
    assert abs(smd(t, c) - expect) < 1e-12
    assert abs(smd(t, c) - oracles.smd(t.tolist(), c.tolist())) < 1e-12


def test_reconstructs_published_tag_rate_smd():
    assert (0.51 - 0.44) / 0.1007 == pytest.approx(0.695, abs=5e-4)
    assert smd(np.array([0.51]), np.array([0.44]), sd=0.1007) == pytest.approx(0.695, abs=5e-4)


def test_zero_variance_smd():
    assert smd(np.ones(3), np.ones(4)) == 0.0
    assert math.isnan(smd(np.ones(3), np.zeros(4)))


def _covariates(rng, n_t, n_c, shift):
    rows = []
    for i in range(n_t + n_c):
        t = i < n_t
        rows.append({"window_id": f"w{i}", "treated": int(t),
                     "x": rng.normal(shift if t else 0.0), "y": rng.random()})
    return pd.DataFrame(rows)


def test_balance_uses_unmatched_sd_and_multiplicity(rng):
    cov = _covariates(rng, 4, 6, 1.0)
    pairs = [MatchedPair("w0", "w4", .5, .5, 1), MatchedPair("w1", "w4", .5, .5, 1),
             MatchedPair("w2", "w5", .5, .5, 1)]
    rep = balance(pairs, cov, names=["x", "y"])
    t_all, c_all = cov.x[:4].to_numpy(), cov.x[4:].to_numpy()
    sd = pooled_sd(t_all, c_all)
    expect = (cov.x[[0, 1, 2]].mean() - cov.x[[4, 4, 5]].mean()) / sd
    assert rep.rows[0].smd_matched == pytest.approx(expect, abs=1e-12)
    assert rep.rows[0].smd_unmatched == pytest.approx((t_all.mean() - c_all.mean()) / sd, abs=1e-12)
    assert rep.rows[0].control_mean == pytest.approx(cov.x[[4, 4, 5]].mean(), abs=1e-12)
    assert rep.worst_matched_smd == max(abs(r.smd_matched) for r in rep.rows)


def test_balance_needs_pairs(rng):
    with pytest.raises(ValueError):
        balance([], _covariates(rng, 2, 2, 0.0), names=["x"])


def test_randomized_treatment_balances():
    rng = np.random.default_rng(3)
    n = 4000
    cov = pd.DataFrame({"window_id": [f"w{i}" for i in range(n)],
                        "a": rng.normal(size=n), "b": rng.poisson(2, n).astype(float),
                        "calendar_year": rng.integers(2012, 2015, n), "top_tag": "py",
                        "treated": (rng.random(n) < 0.5).astype(int)})
    model = fit_propensity(cov, features=["a", "b"])
    res = match(cov.assign(score=model.predict(cov), response_time_hours=1.0), seed=5)
    rep = balance(res.pairs, cov, names=["a", "b"])
    assert rep.worst_matched_smd < 0.1


@st.composite
def scored_frames(draw):
    n = draw(st.integers(2, 30))
    rows = []
    for i in range(n):
        rows.append((f"w{i:02d}", draw(st.booleans()),
                     draw(st.floats(0.01, 0.99)), draw(st.sampled_from([2014, 2015])),
                     draw(st.sampled_from(["py", "c"]))))
    return scored(rows)


@settings(max_examples=80, deadline=None)
@given(scored_frames(), st.sampled_from([0.01, 0.05, 0.2]), st.integers(0, 5))
def test_pair_constraints_and_determinism(df, caliper, seed):
    res = match(df, caliper=caliper, seed=seed)
    info = df.set_index("window_id")
    treated_ids = [p.treated_window_id for p in res]
    assert len(set(treated_ids)) == len(treated_ids)
    for p in res:
        t, c = info.loc[p.treated_window_id], info.loc[p.control_window_id]
        assert t.treated == 1 and c.treated == 0
        assert abs(p.treated_score - p.control_score) <= caliper + 1e-12
        assert (t.calendar_year, t.top_tag) == (c.calendar_year, c.top_tag)
        # nearest: no in-stratum control is strictly closer
        pool = info[(info.treated == 0) & (info.calendar_year == t.calendar_year)
                    & (info.top_tag == t.top_tag)]
        assert abs(p.control_score - t.score) <= (pool.score - t.score).abs().min() + 1e-15
    assert len(res) + res.n_unmatched == int(df.treated.sum())
    again = match(df, caliper=caliper, seed=seed)
    assert again.pairs == res.pairs
