import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slt.boxgeom import Box, iou
from slt.metrics import (
    NORM_PRECISION_THRESHOLDS,
    EvalReport,
    average_overlap,
    center_errors,
    episode_reward,
    normalized_precision_auc,
    precision,
    score_sequence,
    success_auc,
    success_rate,
)

unit = st.floats(0, 1, allow_nan=False)
seqs = st.lists(unit, min_size=1, max_size=60)


def test_average_overlap_examples():
    assert average_overlap([1, 1, 1]) == 1.0
    assert average_overlap([0.2, 0.4, 0.6]) == pytest.approx(0.4)
    assert average_overlap([0.37]) == 0.37


def test_empty_sequences_rejected():
    for fn in (average_overlap, lambda s: success_rate(s, 0.5), success_auc, precision):
        with pytest.raises(ValueError):
            fn([])


def test_success_rate_examples():
    assert success_rate([1, 1], 0.5) == 1.0
    assert success_rate([0.2, 0.4, 0.6], 0.5) == pytest.approx(1 / 3)
    assert success_rate([0.5], 0.5) == 0.0  # strict comparison


@given(seqs)
def test_success_rate_tau_one_is_zero(s):
    assert success_rate(s, 1.0) == 0.0


def test_success_auc_examples():
    assert success_auc([1.0, 1.0], 21) == 1.0
    assert success_auc([1.0], 1000) == 1.0
    assert success_auc([0.5], 21) == pytest.approx(10 / 21)


def test_success_auc_rejects_small_grid():
    with pytest.raises(ValueError):
        success_auc([0.5], 1)


@settings(max_examples=50)
@given(seqs)
def test_success_auc_converges_to_ao(s):
    assert abs(success_auc(s, 10_000) - average_overlap(s)) <= 1e-3


@given(seqs, st.data())
def test_success_auc_monotone(s, data):
    drops = data.draw(st.lists(unit, min_size=len(s), max_size=len(s)))
    lower = [v * d for v, d in zip(s, drops)]
    assert success_auc(lower, 21) <= success_auc(s, 21)


@given(seqs, st.randoms())
def test_metrics_permutation_invariant(s, r):
    p = list(s)
    r.shuffle(p)
    assert average_overlap(p) == pytest.approx(average_overlap(s))
    assert success_auc(p) == success_auc(s)
    assert success_rate(p, 0.5) == success_rate(s, 0.5)


def test_precision_examples():
    assert precision([0, 0, 0]) == 1.0
    assert precision([10, 30], 20) == 0.5
    assert precision([20.0], 20) == 1.0
    assert precision([0.1, 3], 0) == 0.0


def test_norm_precision_grid():
    assert len(NORM_PRECISION_THRESHOLDS) == 51
    assert NORM_PRECISION_THRESHOLDS[0] == 0.0 and NORM_PRECISION_THRESHOLDS[-1] == 0.5


def test_norm_precision_examples():
    gt = [Box(0, 0, 10, 20), Box(5, 5, 4, 4)]
    assert normalized_precision_auc(gt, gt) == 1.0
    # error 0.25 of the width along x: thresholds 0.26 .. 0.50 count
    g = Box(0, 0, 8, 8)
    p = g.translate(2.0, 0.0)
    assert normalized_precision_auc([p], [g]) == pytest.approx(25 / 51)
    far = [b.translate(100, 100) for b in gt]
    assert normalized_precision_auc(far, gt) == 0.0


def test_norm_precision_rejects_zero_area_gt():
    with pytest.raises(ValueError):
        normalized_precision_auc([Box(0, 0, 1, 1)], [Box(0, 0, 0, 1)])


def test_episode_reward_examples():
    g = [Box(0, 0, 2, 2), Box(3, 3, 2, 2)]
    assert episode_reward(g, g) == 1.0
    assert episode_reward([b.translate(50, 50) for b in g], g) == 0.0
    pred = [Box(1, 1, 2, 2), Box(3, 3, 2, 2)]
    assert episode_reward(pred, g) == pytest.approx((iou(pred[0], g[0]) + 1) / 2)
    assert episode_reward(pred, g) == pytest.approx(4 / 7)


def test_episode_reward_length_mismatch():
    with pytest.raises(ValueError):
        episode_reward([Box(0, 0, 1, 1)], [Box(0, 0, 1, 1)] * 2)


box_st = st.builds(Box, st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 20), st.floats(0.5, 20))


@given(st.lists(st.tuples(box_st, box_st), min_size=1, max_size=10))
def test_episode_reward_symmetric(pairs):
    a = [p for p, _ in pairs]
    b = [q for _, q in pairs]
    assert episode_reward(a, b) == pytest.approx(episode_reward(b, a), abs=1e-12)


def _random_report(rng, n=7):
    per = {}
    for i in range(n):
        T = int(rng.integers(2, 30))
        gt = np.column_stack([rng.uniform(0, 50, (T, 2)), rng.uniform(2, 20, (T, 2))])
        pred = gt + rng.normal(0, 3, gt.shape)
        pred[:, 2:] = np.abs(pred[:, 2:])
        per[f"seq{i:02d}"] = score_sequence(pred, gt)
    return EvalReport.aggregate(per)


def test_report_aggregate_is_mean():
    rep = _random_report(np.random.default_rng(0))
    for f in ("ao", "sr_050", "sr_075", "success_auc", "precision", "norm_precision"):
        vals = [getattr(s, f) for s in rep.per_sequence_breakdown.values()]
        assert abs(getattr(rep, f) - np.mean(vals)) <= 1e-12
        assert 0.0 <= getattr(rep, f) <= 1.0


def test_report_aggregation_order_independent():
    rep = _random_report(np.random.default_rng(1))
    items = list(rep.per_sequence_breakdown.items())[::-1]
    assert EvalReport.aggregate(dict(items)).summary() == rep.summary()


def test_report_serialisation_round_trip():
    rep = _random_report(np.random.default_rng(2))
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "sequence,ao,sr_050,sr_075,success_auc,precision,norm_precision"
    assert len(rows) == len(rep.per_sequence_breakdown) + 2
    assert rows[-1].startswith("__aggregate__,")
    assert float(rows[-1].split(",")[1]) == rep.ao


def test_center_errors_simple():
    e = center_errors([Box(0, 0, 2, 2)], [Box(3, 4, 2, 2)])
    assert e[0] == pytest.approx(5.0)
