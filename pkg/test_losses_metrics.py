#!/usr/bin/env python3
"""
Tests for task losses, survival binning and evaluation metrics
"""

import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from core import autodiff as ad
from core import losses_metrics as lm
from core.losses_metrics import SurvivalRecord


def test_bce_values():
    assert lm.bce(0.0, 1).item() == pytest.approx(math.log(2.0))
    assert lm.bce(0.0, 0).item() == pytest.approx(math.log(2.0))
    assert lm.bce(2.0, 1).item() == pytest.approx(math.log1p(math.exp(-2.0)))
    assert np.isfinite(lm.bce(-800.0, 1).item())
    with pytest.raises(ValueError):
        lm.bce(0.0, 2)


def test_cross_entropy_values():
    assert lm.cross_entropy([0.0, 0.0, 0.0], 1).item() == pytest.approx(math.log(3.0))
    logits = np.array([1.0, 2.0, 0.5])
    expected = -(logits[1] - np.log(np.exp(logits).sum()))
    assert lm.cross_entropy(logits, 1).item() == pytest.approx(expected)
    with pytest.raises(ValueError):
        lm.cross_entropy(logits, 3)


def test_survival_nll_on_even_hazards():
    zeros = np.zeros(3)
    assert lm.survival_nll(zeros, 1, 1).item() == pytest.approx(2 * math.log(2.0))
    assert lm.survival_nll(zeros, 1, 0).item() == pytest.approx(2 * math.log(2.0))
    assert lm.survival_nll(zeros, 0, 0).item() == pytest.approx(math.log(2.0))
    assert lm.survival_nll(zeros, 0, 1).item() == pytest.approx(math.log(2.0))


def test_survival_nll_alpha_reweights_toward_uncensored_term():
    zeros = np.zeros(3)
    assert lm.survival_nll(zeros, 2, 0, alpha=1.0).item() == pytest.approx(0.0, abs=1e-12)
    assert lm.survival_nll(zeros, 2, 0, alpha=0.5).item() == pytest.approx(0.5 * 3 * math.log(2.0))


def test_survival_nll_is_finite_at_extreme_logits():
    assert lm.survival_nll(np.full(3, -60.0), 0, 1).item() == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert np.isfinite(lm.survival_nll(np.full(3, 60.0), 2, 0).item())


def test_survival_nll_gradient_matches_finite_differences():
    logits = ad.Tensor(np.array([0.3, -0.2, 0.8, 0.1]), requires_grad=True)
    assert ad.grad_check(lambda z: lm.survival_nll(z, 2, 1, alpha=0.3), [logits]) < 1e-6


def test_survival_nll_rejects_bad_inputs():
    with pytest.raises(ValueError):
        lm.survival_nll(np.zeros(3), 3, 1)
    with pytest.raises(ValueError):
        lm.survival_nll(np.zeros(3), 0, 2)


def test_survival_curve_and_risk():
    assert np.allclose(lm.survival_curve(np.zeros(3)), [0.5, 0.25, 0.125])
    assert lm.risk_score(np.zeros(3)) == pytest.approx(-0.875)
    assert lm.risk_score(np.full(3, 5.0)) > lm.risk_score(np.full(3, -5.0))
    with pytest.raises(ValueError):
        lm.risk_score(np.zeros(1))


def test_survival_record_validation():
    with pytest.raises(ValueError):
        SurvivalRecord(time=-1.0, event=1)
    with pytest.raises(ValueError):
        SurvivalRecord(time=1.0, event=3)


def test_time_bins_use_quantiles_of_uncensored_times():
    records = [SurvivalRecord(time=float(t), event=1) for t in range(1, 9)]
    records.append(SurvivalRecord(time=100.0, event=0))
    edges, indices = lm.time_bins(records, 2)
    assert edges.tolist() == [4.5]
    assert indices == [0, 0, 0, 0, 1, 1, 1, 1, 1]
    assert records[-1].bin_index == 1


def test_time_bin_edges_close_bins_above():
    assert lm.assign_bins([4.5, 4.6, 0.0], np.array([4.5])) == [0, 1, 0]


def test_time_bins_reject_degenerate_inputs():
    records = [SurvivalRecord(time=float(t), event=1) for t in range(1, 5)]
    with pytest.raises(ValueError):
        lm.time_bins(records, 1)
    with pytest.raises(ValueError):
        lm.time_bins([SurvivalRecord(time=1.0, event=0)], 2)
    with pytest.raises(ValueError):
        lm.time_bins([SurvivalRecord(time=2.0, event=1) for _ in range(4)], 2)


def test_c_index():
    records = [SurvivalRecord(time=float(t), event=1) for t in (1, 2, 3)]
    assert lm.c_index([3.0, 2.0, 1.0], records) == 1.0
    assert lm.c_index([1.0, 2.0, 3.0], records) == 0.0
    assert lm.c_index([1.0, 1.0, 1.0], records) == 0.5
    with pytest.raises(ValueError):
        lm.c_index([1.0, 2.0], [SurvivalRecord(time=1.0, event=0), SurvivalRecord(time=2.0, event=0)])
    with pytest.raises(ValueError):
        lm.c_index([1.0], records)


def test_c_index_skips_censored_anchors():
    records = [SurvivalRecord(time=1.0, event=0), SurvivalRecord(time=2.0, event=1),
               SurvivalRecord(time=3.0, event=1)]
    # only the pair (2, 3) is comparable
    assert lm.c_index([0.0, 5.0, 1.0], records) == 1.0


def test_c_index_matches_lifelines():
    lifelines_utils = pytest.importorskip('lifelines.utils')
    rng = np.random.default_rng(8)
    times = rng.exponential(size=300)
    events = (rng.random(300) < 0.7).astype(int)
    risks = np.round(rng.normal(size=300) - times, 1)
    records = [SurvivalRecord(time=float(t), event=int(e)) for t, e in zip(times, events)]
    # lifelines ranks by predicted survival, so higher scores mean lower risk
    expected = lifelines_utils.concordance_index(times, -risks, events)
    assert lm.c_index(risks, records) == pytest.approx(expected, abs=1e-12)


def test_auc_matches_sklearn_with_ties():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 4, size=40) / 4.0
    labels = rng.integers(0, 2, size=40)
    assert lm.auc_score(scores, labels) == pytest.approx(roc_auc_score(labels, scores))
    with pytest.raises(ValueError):
        lm.auc_score([0.1, 0.2], [1, 1])


def test_binary_metrics():
    metrics = lm.binary_metrics([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
    assert metrics['accuracy'] == 0.5
    assert metrics['f1'] == pytest.approx(0.5)
    assert metrics['auc'] == pytest.approx(0.75)
    assert math.isnan(lm.binary_metrics([0.9, 0.8], [1, 1])['auc'])


def test_multiclass_metrics():
    probabilities = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.5, 0.4, 0.1]])
    metrics = lm.multiclass_metrics(probabilities, [0, 1, 2, 1])
    assert metrics['accuracy'] == 0.75
    assert 0.0 < metrics['f1'] < 1.0
