import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gated_res2net.metrics import (
    MetricError,
    ScoreRecord,
    TdcfParams,
    accuracy_at_eer,
    eer,
    min_tdcf,
    read_scores,
    read_tdcf_params,
    write_scores,
)

from oracles import eer_ref, min_tdcf_ref

PARAMS = dict(pi_target=0.9405, pi_nontarget=0.0095, pi_spoof=0.05, c_miss_asv=1.0, c_fa_asv=10.0,
              c_miss_cm=1.0, c_fa_cm=10.0, p_miss_asv=0.02, p_fa_asv=0.02, p_fa_spoof_asv=0.4)


def recs(bona, spoof):
    return [ScoreRecord(f"b{i}", "bonafide", s) for i, s in enumerate(bona)] + [
        ScoreRecord(f"s{i}", "spoof", s) for i, s in enumerate(spoof)
    ]


def test_separated_and_identical():
    assert eer(recs([1, 2, 3], [-3, -2, -1]))[0] == 0.0
    assert eer(recs([0.5, 1.0, 1.5], [0.5, 1.0, 1.5]))[0] == 0.5
    assert eer(recs([1.0] * 4, [1.0] * 3))[0] == 0.5


def test_small_worked_example():
    bona, spoof = [0.8, 0.6, 0.4], [0.5, 0.3, 0.1]
    rate, thr = eer(recs(bona, spoof))
    assert rate == eer_ref(bona, spoof)
    # at threshold 0.45: FAR 1/3 (0.5), FRR 1/3 (0.4)
    assert rate == pytest.approx(1 / 3)
    assert thr == pytest.approx(0.45)


def test_threshold_operating_point():
    rng = np.random.default_rng(0)
    bona, spoof = rng.normal(1, 1, 40), rng.normal(-1, 1, 40)
    rate, thr = eer(recs(bona, spoof))
    far = np.mean(spoof >= thr)
    frr = np.mean(bona < thr)
    assert abs(far - rate) <= 1 / 40 + 1e-12 and abs(frr - rate) <= 1 / 40 + 1e-12


def test_inverted_scores_exceed_half():
    # a detector that ranks classes backwards
    assert eer(recs([-1, -2], [1, 2]))[0] == 1.0


def test_single_class_error():
    with pytest.raises(MetricError):
        eer([ScoreRecord("a", "bonafide", 1.0)])
    with pytest.raises(MetricError):
        ScoreRecord("a", "human", 1.0)
    with pytest.raises(MetricError):
        ScoreRecord("a", "spoof", math.nan)


scores = st.lists(st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 2)), min_size=1, max_size=25)


@settings(max_examples=150, deadline=None)
@given(scores, scores)
def test_eer_equals_oracle(bona, spoof):
    assert eer(recs(bona, spoof))[0] == eer_ref(bona, spoof)


@settings(max_examples=150, deadline=None)
@given(scores, scores)
def test_tdcf_equals_oracle(bona, spoof):
    assert min_tdcf(recs(bona, spoof), TdcfParams(**PARAMS)) == min_tdcf_ref(bona, spoof, PARAMS)


@settings(max_examples=60, deadline=None)
@given(scores, scores, st.floats(0.1, 10), st.floats(-10, 10))
def test_monotone_invariance(bona, spoof, a, b):
    base = eer(recs(bona, spoof))[0]
    p = TdcfParams(**PARAMS)
    t = min_tdcf(recs(bona, spoof), p)
    for f in (np.exp, lambda v: a * v + b):
        mb = [float(f(v)) for v in bona]
        ms = [float(f(v)) for v in spoof]
        if len(set(mb + ms)) != len(set(bona + spoof)):
            continue  # rounding merged distinct scores; not strictly increasing in floats
        assert eer(recs(mb, ms))[0] == base
        assert min_tdcf(recs(mb, ms), p) == t


def test_tdcf_extremes():
    p = TdcfParams(**PARAMS)
    assert min_tdcf(recs([2, 3], [0, 1]), p) == 0.0
    c1, c2 = p.constants()
    # all scores tied: only the accept-all (cost C2) and reject-all (cost C1) points exist
    assert min_tdcf(recs([1.0, 1.0], [1.0, 1.0]), p) == min(c1, c2) / min(c1, c2) == 1.0


def test_tdcf_validation():
    with pytest.raises(MetricError):
        TdcfParams(**{**PARAMS, "pi_spoof": 0.5}).validate()
    with pytest.raises(MetricError):
        TdcfParams(**{**PARAMS, "c_fa_cm": 0.0}).validate()
    with pytest.raises(MetricError):
        TdcfParams(**{**PARAMS, "p_fa_asv": 1.5}).validate()
    degenerate = TdcfParams(**{**PARAMS, "p_fa_spoof_asv": 0.0})
    with pytest.raises(MetricError):
        min_tdcf(recs([1], [0]), degenerate)


def test_sample_params_file_parses():
    from importlib.resources import files

    p = read_tdcf_params(files("gated_res2net") / "data" / "tdcf_params.sample.txt")
    c1, c2 = p.constants()
    assert c1 > 0 and c2 > 0


def test_params_file_errors(tmp_path):
    f = tmp_path / "p.txt"
    f.write_text("pi_target = 0.5\n")
    with pytest.raises(MetricError):
        read_tdcf_params(f)
    f.write_text("oops\n")
    with pytest.raises(MetricError):
        read_tdcf_params(f)


def test_accuracy_at_eer_hand_count():
    records = [
        ScoreRecord("t1", "bonafide", 0.9),
        ScoreRecord("t2", "bonafide", 0.2),
        ScoreRecord("t3", "spoof", 0.1),
        ScoreRecord("t4", "spoof", 0.7),
        ScoreRecord("t5", "spoof", 0.3),
        ScoreRecord("t6", "spoof", 0.0),
        ScoreRecord("t7", "spoof", 0.6),
        ScoreRecord("t8", "spoof", 0.45),
        ScoreRecord("t9", "bonafide", 0.8),
        ScoreRecord("t10", "spoof", 0.2),
    ]
    groups = {"t1": "-", "t2": "-", "t9": "-", "t3": "A01", "t4": "A01", "t5": "A02", "t6": "A02",
              "t7": "A03", "t8": "A03", "t10": "A03"}
    table = accuracy_at_eer(records, 0.5, groups)
    assert table["bonafide"] == (3, 2 / 3)
    assert table["A01"] == (2, 0.5)
    assert table["A02"] == (2, 1.0)
    assert table["A03"] == (3, 2 / 3)


def test_accuracy_empty_group_and_unknown_trial():
    records = recs([1.0], [0.0])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        table = accuracy_at_eer(records, 0.5, {"b0": "-", "s0": "A01", "x": "A09"})
    assert "A09" not in table and table["A01"] == (1, 1.0)
    assert any("A09" in str(m.message) for m in w)
    with pytest.raises(MetricError):
        accuracy_at_eer(records, 0.5, {"b0": "-"})


def test_score_file_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    records = recs(rng.normal(size=5).tolist(), (rng.normal(size=4) * 1e-20).tolist())
    write_scores(tmp_path / "s.txt", records)
    assert read_scores(tmp_path / "s.txt") == records


def test_score_file_comments_and_errors(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("# header\n\nT1 bonafide 0.5\nT2 spoof -1\n")
    assert [r.trial_id for r in read_scores(f)] == ["T1", "T2"]
    f.write_text("T1 bonafide\n")
    with pytest.raises(MetricError, match=":1:"):
        read_scores(f)
    f.write_text("T1 maybe 1.0\n")
    with pytest.raises(MetricError):
        read_scores(f)
