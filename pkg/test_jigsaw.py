#!/usr/bin/env python3
"""
Tests for the equivalence loss, AdamW and the Siamese trainer
"""

import math

import numpy as np
import pandas as pd
import pytest

from core import autodiff as ad
from core import permutation
from core.autodiff import Tensor
from core.jigsaw import (OptimizerState, SiameseTrainer, adamw_update, equivalence_loss, final_loss,
                         learning_rate)
from core.nets import ModelConfig, build_model
from core.permutation import Permutation
from core.synthetic import SynthConfig, SyntheticBagGenerator


def _config(**changes):
    base = dict(variant='transformer', input_dim=4, embed_dim=8, attn_dim=4, pe_mode='ppeg', epochs=2,
                lr=5e-3, eval_every=1)
    base.update(changes)
    return ModelConfig(**base)


def _bags(count=8, survival=False, **synth):
    cfg = SynthConfig(grid=3, dim=4, delta=3.0, blob_min=1, blob_max=2, **synth)
    return SyntheticBagGenerator(cfg).generate(count, survival=survival)


def _trainer(**changes):
    config = _config(**changes)
    return SiameseTrainer(build_model(config))


# -- objective ---------------------------------------------------------------

def test_equivalence_loss_hand_example():
    F_u = Tensor([[1.0, 0.0], [0.0, 1.0]])
    F_s = Tensor([[0.0, 1.0], [1.0, 0.0]])
    assert equivalence_loss(F_u, F_s, Permutation.identity(2)).item() == pytest.approx(1.0)


def test_equivalence_loss_vanishes_for_equivariant_pairs():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(9, 3))
    perm = permutation.sample(9, rng)
    assert equivalence_loss(F, F, Permutation.identity(9)).item() == 0.0
    assert equivalence_loss(F, permutation.apply(perm, F), perm).item() == 0.0


def test_equivalence_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        equivalence_loss(np.zeros((4, 2)), np.zeros((4, 3)), Permutation.identity(4))
    with pytest.raises(ValueError):
        equivalence_loss(np.zeros((4, 2)), np.zeros((4, 2)), Permutation.identity(3))


def test_equivalence_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    perm = permutation.sample(4, rng)
    F_u = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    F_s = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    assert ad.grad_check(lambda a, b: equivalence_loss(a, b, perm), [F_u, F_s]) < 1e-6


def test_final_loss():
    assert final_loss(0.7, 0.3, 1.0).item() == pytest.approx(1.0)
    assert final_loss(0.7, 0.3, 0.0).item() == pytest.approx(0.7)
    with pytest.raises(ValueError):
        final_loss(0.7, 0.3, -0.5)


# -- optimizer ---------------------------------------------------------------

def test_adamw_zero_gradient_without_decay_leaves_parameters():
    state = OptimizerState(weight_decay=0.0)
    params = {'w': np.array([1.0, -2.0])}
    updated = adamw_update(state, params, {'w': np.zeros(2)})
    assert np.array_equal(updated['w'], params['w'])


def test_adamw_zero_gradient_applies_decoupled_decay():
    state = OptimizerState(lr=5e-4, weight_decay=1e-4)
    updated = adamw_update(state, {'w': np.array([2.0, 3.0])}, {'w': None})
    assert np.allclose(updated['w'], np.array([2.0, 3.0]) * (1.0 - 5e-8), rtol=0, atol=1e-15)


def test_adamw_single_scalar_step_matches_closed_form():
    state = OptimizerState()
    updated = adamw_update(state, {'p': np.array(1.0)}, {'p': np.array(2.0)})
    lr, wd, eps = 5e-4, 1e-4, 1e-8
    expected = 1.0 * (1.0 - lr * wd) - lr * 2.0 / (2.0 + eps)
    assert float(updated['p']) == pytest.approx(expected, abs=1e-15)
    assert state.step == 1


def test_adamw_rejects_mismatched_gradient():
    with pytest.raises(ValueError):
        adamw_update(OptimizerState(), {'w': np.zeros(3)}, {'w': np.zeros(2)})


def test_learning_rate_schedules():
    assert learning_rate(_config(), 5) == pytest.approx(5e-3)
    warm = _config(warmup_epochs=4)
    assert learning_rate(warm, 0) == pytest.approx(5e-3 / 4)
    assert learning_rate(warm, 4) == pytest.approx(5e-3)
    cosine = _config(lr_schedule='cosine', epochs=10)
    assert learning_rate(cosine, 0) == pytest.approx(5e-3)
    assert learning_rate(cosine, 5) == pytest.approx(0.5 * 5e-3 * (1.0 + math.cos(math.pi * 0.5)))


# -- Siamese steps -----------------------------------------------------------

def test_stacked_and_sequential_modes_agree():
    trainer = _trainer()
    bag = _bags(1)[0]
    perm = trainer.permutation_for(0, 0, trainer.slot_count(bag))
    stacked = [t.item() for t in trainer.siamese_losses(bag, perm, 'stacked')[:3]]
    sequential = [t.item() for t in trainer.siamese_losses(bag, perm, 'sequential')[:3]]
    assert np.allclose(stacked, sequential, atol=1e-6)


def test_step_output_total_loss_identity():
    trainer = _trainer(lam=0.5)
    out = trainer.siamese_step(_bags(1)[0])
    assert out.total_loss == pytest.approx(out.task_loss + 0.5 * out.equivalence_loss, abs=1e-12)
    assert out.logits_unshuffled.shape == out.logits_shuffled.shape == (1,)


def test_lambda_zero_step_equals_single_branch_update():
    bag = _bags(1)[0]
    siamese, single = _trainer(lam=0.0, step_mode='sequential'), _trainer(lam=0.0)
    perm = siamese.permutation_for(0, 0, siamese.slot_count(bag))
    siamese.siamese_step(bag, perm)
    single.single_branch_step(bag)
    for name, value in siamese.model.state_dict().items():
        assert np.allclose(value, single.model.state_dict()[name], atol=1e-10), name


def test_per_instance_baseline_has_zero_equivalence_loss():
    trainer = _trainer(variant='mean', pe_mode='none')
    bag = _bags(1)[0]
    perm = trainer.permutation_for(0, 0, trainer.slot_count(bag))
    assert trainer.slot_count(bag) == bag.n
    _, eqv, _, _, _ = trainer.siamese_losses(bag, perm)
    assert eqv.item() == pytest.approx(0.0, abs=1e-12)


def test_permutations_come_from_a_counter_stream():
    trainer = _trainer()
    assert trainer.permutation_for(3, 5, 9) == trainer.permutation_for(3, 5, 9)
    assert trainer.permutation_for(3, 5, 9) != trainer.permutation_for(4, 5, 9)


def test_empty_bag_list_is_rejected():
    with pytest.raises(ValueError):
        _trainer().train([])


# -- training loop -----------------------------------------------------------

def test_zero_epochs_leave_initialization_unchanged():
    trainer = _trainer(epochs=0)
    before = trainer.model.state_dict()
    report = trainer.train(_bags(2))
    assert report.epochs == []
    for name, value in trainer.model.state_dict().items():
        assert np.array_equal(value, before[name])


def test_training_lowers_the_loss_and_records_finite_equivalence():
    bags = _bags(8)
    trainer = _trainer(epochs=25, lam=1.0)
    report = trainer.train(bags, bags)
    first, last = report.epochs[0], report.epochs[-1]
    assert last.task_loss + last.eqv_loss < first.task_loss + first.eqv_loss
    assert all(np.isfinite(record.eqv_loss) for record in report.epochs)
    assert set(report.final_metrics) == {'accuracy', 'f1', 'auc'}
    assert [r['epoch'] for r in report.to_records()] == list(range(1, 26))


def test_training_is_reproducible_per_seed():
    bags = _bags(4)
    first = _trainer(seed=3).train(bags, bags)
    second = _trainer(seed=3).train(bags, bags)
    pd.testing.assert_frame_equal(pd.DataFrame(first.to_records()), pd.DataFrame(second.to_records()))


def test_survival_training_bins_records_and_reports_c_index():
    bags = _bags(12, survival=True, hazard_scale=4.0)
    trainer = _trainer(task='survival', bins=3, variant='cnn', epochs=2)
    report = trainer.train(bags[:8], bags[8:])
    assert report.bin_edges is not None and len(report.bin_edges) == 2
    assert all(bag.survival.bin_index is not None for bag in bags)
    assert 'c_index' in report.final_metrics


def test_multiclass_training_reports_macro_f1():
    bags = _bags(6)
    trainer = _trainer(task='multiclass', num_classes=2, epochs=1)
    report = trainer.train(bags, bags)
    assert set(report.final_metrics) == {'accuracy', 'f1'}


def test_step_timing_reports_ratios():
    trainer = _trainer()
    timings = trainer.time_step_modes(_bags(1)[0], steps=2, warmup=1)
    assert set(timings) == {'single_ms', 'stacked_ms', 'sequential_ms', 'stacked_ratio', 'sequential_ratio'}
    assert timings['stacked_ratio'] > 0


@pytest.mark.parametrize('variant', ['transformer', 'cnn'])
def test_sequential_branches_cost_close_to_two_single_steps(variant):
    cfg = SynthConfig(grid=12, dim=16, delta=1.0, blob_min=2, blob_max=4)
    bag = SyntheticBagGenerator(cfg).bag(0)
    trainer = _trainer(variant=variant, input_dim=16, embed_dim=64, attn_dim=16)
    timings = trainer.time_step_modes(bag, steps=15, warmup=3)
    assert timings['sequential_ratio'] > 1.5
    assert 0.5 < timings['stacked_ratio'] < timings['sequential_ratio'] * 1.5
