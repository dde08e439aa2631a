import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmask.metrics import ConfusionCounts, accumulate, compute, format_report


def test_perfect_positive_and_total_disagreement():
    ones = np.ones((4, 4), np.uint8)
    assert accumulate(ones, ones) == ConfusionCounts(tp=16)
    gt = np.eye(4, dtype=np.uint8)
    c = accumulate(1 - gt, gt)
    assert c.tp == 0 and c.tn == 0 and c.fp == 12 and c.fn == 4


def test_random_pair_matches_counting_oracle():
    rng = np.random.default_rng(0)
    pred, gt = rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))
    want = ConfusionCounts()
    for p, g in zip(pred.flat, gt.flat):
        want.tp += p == 1 and g == 1
        want.tn += p == 0 and g == 0
        want.fp += p == 1 and g == 0
        want.fn += p == 0 and g == 1
    assert accumulate(pred, gt) == want
    assert accumulate(pred.astype(bool), gt.astype(bool)) == want


def test_accumulate_validation():
    with pytest.raises(ValueError):
        accumulate(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        accumulate(np.zeros((2, 2)), np.zeros((2, 3)))


def test_compute_examples():
    assert compute(ConfusionCounts(tp=9)) == {"F1": 1.0, "Pre": 1.0, "Rec": 1.0, "IoU": 1.0, "OA": 1.0}
    m = compute(ConfusionCounts(tp=2, fp=1, fn=1, tn=0))
    assert m["Pre"] == pytest.approx(2 / 3) and m["Rec"] == pytest.approx(2 / 3)
    assert m["F1"] == pytest.approx(2 / 3) and m["IoU"] == 0.5 and m["OA"] == 0.5
    z = compute(ConfusionCounts(tp=0, fp=3, fn=2, tn=5))
    assert z["Pre"] == z["Rec"] == z["F1"] == z["IoU"] == 0
    assert compute(ConfusionCounts(tn=7))["F1"] == 1.0
    assert compute(ConfusionCounts(fn=2, tn=7))["Pre"] == 0.0
    with pytest.raises(ValueError):
        compute(ConfusionCounts())


counts_st = st.builds(
    ConfusionCounts,
    tp=st.integers(0, 1000),
    tn=st.integers(0, 1000),
    fp=st.integers(0, 1000),
    fn=st.integers(0, 1000),
).filter(lambda c: c.total > 0)


@given(counts_st)
@settings(max_examples=300, deadline=None)
def test_metric_invariants(c):
    m = compute(c)
    assert all(0 <= v <= 1 for v in m.values())
    if c.tp > 0:
        lo, hi = sorted((m["Pre"], m["Rec"]))
        assert lo - 1e-12 <= m["F1"] <= hi + 1e-12
        assert m["IoU"] <= m["F1"] + 1e-12


def test_order_independence_and_merge():
    rng = np.random.default_rng(3)
    pairs = [(rng.integers(0, 2, (5, 5)), rng.integers(0, 2, (5, 5))) for _ in range(6)]
    fwd = ConfusionCounts()
    for p, g in pairs:
        fwd = accumulate(p, g, fwd)
    rev = ConfusionCounts()
    for p, g in reversed(pairs):
        rev = accumulate(p, g, rev)
    assert fwd == rev
    halves = accumulate(*map(np.stack, zip(*pairs[:3]))) + accumulate(*map(np.stack, zip(*pairs[3:])))
    assert halves == fwd and fwd.total == 150


def test_format_report():
    text = format_report(compute(ConfusionCounts(tp=2, fp=1, fn=1)), ConfusionCounts(tp=2, fp=1, fn=1))
    lines = text.splitlines()
    assert lines[:5] == ["F1: 66.67", "Pre: 66.67", "Rec: 66.67", "IoU: 50.00", "OA: 50.00"]
    assert "TP: 2" in lines
