"""Schedules, discriminative rates, freezing, and optimizer updates."""

import hashlib

import numpy as np
import pytest

from ulmfit.autodiff import ContractError, Tensor
from ulmfit.schedules import (AdamOptimizer, LayerGroup, LayerGroups,
                              SgdOptimizer, StlrSchedule, UnfreezePolicy,
                              apply_update, assign_discriminative_lrs,
                              clip_gradients, cosine_lr, make_optimizer,
                              schedule_factor, stlr_lr, unfreeze_step)

CANON = StlrSchedule(T=1000, cut_frac=0.1, ratio=32.0, eta_max=0.01)


# ---------------------------------------------------------------------------
# slanted triangular schedule
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("t,expected", [
    (0, 3.125e-4),
    (50, 5.15625e-3),
    (100, 0.01),
    (550, 5.15625e-3),
    (1000, 3.125e-4),
])
def test_stlr_closed_form_values(t, expected):
    assert abs(stlr_lr(CANON, t) - expected) <= 1e-12


def test_stlr_cut_is_floor():
    assert CANON.cut == 100
    assert StlrSchedule(T=70, cut_frac=0.1).cut == 7
    assert StlrSchedule(T=10, cut_frac=0.3).cut == 3


def test_stlr_boundary_identities():
    for T, cut_frac in [(1000, 0.1), (200, 0.25), (640, 0.05)]:
        sched = StlrSchedule(T=T, cut_frac=cut_frac, ratio=32.0, eta_max=0.01)
        low = sched.eta_max / sched.ratio
        assert abs(stlr_lr(sched, 0) - low) <= 1e-12
        assert abs(stlr_lr(sched, T) - low) <= 1e-12
        assert abs(stlr_lr(sched, sched.cut) - sched.eta_max) <= 1e-12


def test_stlr_monotone_up_then_down():
    values = [stlr_lr(CANON, t) for t in range(1001)]
    cut = CANON.cut
    assert all(values[t] < values[t + 1] for t in range(cut))
    assert all(values[t] > values[t + 1] for t in range(cut, 1000))


def test_stlr_domain_contract():
    with pytest.raises(ContractError):
        stlr_lr(CANON, -1)
    with pytest.raises(ContractError):
        stlr_lr(CANON, 1001)


def test_stlr_invalid_params():
    with pytest.raises(ContractError):
        StlrSchedule(T=100, cut_frac=1.5)
    with pytest.raises(ContractError):
        StlrSchedule(T=100, ratio=0.5)
    with pytest.raises(ContractError):
        StlrSchedule(T=5, cut_frac=0.1)  # empty warm-up


# ---------------------------------------------------------------------------
# cosine comparator
# ---------------------------------------------------------------------------

def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.01, 0.001) == pytest.approx(0.01)
    assert cosine_lr(100, 100, 0.01, 0.001) == pytest.approx(0.001)
    assert cosine_lr(50, 100, 0.01, 0.001) == pytest.approx(0.0055)


# ---------------------------------------------------------------------------
# discriminative learning rates
# ---------------------------------------------------------------------------

def _groups(n, with_params=False):
    return LayerGroups([
        LayerGroup(f"g{i}",
                   [Tensor(np.ones(2), requires_grad=True)] if with_params else [])
        for i in range(n)])


def test_discriminative_ladder_values():
    groups = assign_discriminative_lrs(_groups(5), eta_last=0.01)
    expected = [2.18830e-4, 5.68958e-4, 1.47929e-3, 3.84615e-3, 0.01]
    for g, want in zip(groups, expected):
        assert g.lr == pytest.approx(want, rel=1e-5)
    # head value is exact, and each adjacent ratio is 2.6
    assert groups[-1].lr == 0.01
    for low, high in zip(groups.groups, groups.groups[1:]):
        assert abs(high.lr / low.lr - 2.6) <= 1e-12


def test_discriminative_requires_positive():
    with pytest.raises(ContractError):
        assign_discriminative_lrs(_groups(3), eta_last=-1.0)


def test_groups_partition_enforced():
    shared = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        LayerGroups([LayerGroup("a", [shared]), LayerGroup("b", [shared])])


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def test_sgd_single_step_hand_value():
    p = Tensor(np.array([1.0]), requires_grad=True)
    groups = LayerGroups([LayerGroup("all", [p], lr=0.1)])
    grads = {p.uid: Tensor(np.array([2.0]))}
    apply_update(SgdOptimizer(), groups, 1.0, grads)
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_two_group_ratio():
    p1 = Tensor(np.array([0.0]), requires_grad=True)
    p2 = Tensor(np.array([0.0]), requires_grad=True)
    groups = assign_discriminative_lrs(
        LayerGroups([LayerGroup("low", [p1]), LayerGroup("high", [p2])]),
        eta_last=0.01)
    grads = {p1.uid: Tensor(np.array([1.0])), p2.uid: Tensor(np.array([1.0]))}
    apply_update(SgdOptimizer(), groups, 1.0, grads)
    assert abs(p2.data[0]) / abs(p1.data[0]) == pytest.approx(2.6, rel=1e-12)


def test_frozen_group_bytes_identical():
    p = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    before = hashlib.sha256(p.data.tobytes()).hexdigest()
    groups = LayerGroups([LayerGroup("only", [p], lr=0.5, frozen=True)])
    apply_update(AdamOptimizer(), groups, 1.0, {})
    assert hashlib.sha256(p.data.tobytes()).hexdigest() == before


def test_frozen_group_keeps_adam_state_untouched():
    p = Tensor(np.array([1.0]), requires_grad=True)
    groups = LayerGroups([LayerGroup("only", [p], lr=0.1)])
    opt = AdamOptimizer()
    grads = {p.uid: Tensor(np.array([1.0]))}
    opt.step(groups, grads, 1.0)
    m_after_one = opt.m[p.uid].copy()
    t_after_one = opt.t[p.uid]
    groups[0].frozen = True
    opt.step(groups, {}, 1.0)
    assert opt.t[p.uid] == t_after_one
    assert np.array_equal(opt.m[p.uid], m_after_one)


def test_missing_gradient_is_contract_error():
    p = Tensor(np.array([1.0]), requires_grad=True)
    groups = LayerGroups([LayerGroup("only", [p], lr=0.1)])
    with pytest.raises(ContractError, match="missing gradient"):
        apply_update(SgdOptimizer(), groups, 1.0, {})


def test_adam_moments_and_bias_correction():
    p = Tensor(np.array([0.0]), requires_grad=True)
    groups = LayerGroups([LayerGroup("only", [p], lr=0.1)])
    opt = AdamOptimizer(beta1=0.7, beta2=0.99, eps=1e-8)
    grads = {p.uid: Tensor(np.array([2.0]))}
    opt.step(groups, grads, 1.0)
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_sgd_updates_scale_linearly_with_common_lr_factor():
    rng = np.random.default_rng(0)
    base = rng.standard_normal(4)
    grad = rng.standard_normal(4)
    deltas = []
    for scale in (1.0, 3.0):
        p = Tensor(base.copy(), requires_grad=True)
        groups = LayerGroups([LayerGroup("only", [p], lr=0.05 * scale)])
        apply_update(SgdOptimizer(), groups, 1.0, {p.uid: Tensor(grad.copy())})
        deltas.append(p.data - base)
    assert np.allclose(deltas[1], 3.0 * deltas[0], rtol=1e-12)


def test_sched_factor_domain():
    p = Tensor(np.array([1.0]), requires_grad=True)
    groups = LayerGroups([LayerGroup("only", [p], lr=0.1)])
    with pytest.raises(ContractError):
        apply_update(SgdOptimizer(), groups, 0.0, {p.uid: Tensor(np.array([1.0]))})


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ContractError):
        make_optimizer("momentum")


def test_clip_gradients_global_norm():
    p1 = Tensor(np.array([3.0]), requires_grad=True)
    p2 = Tensor(np.array([4.0]), requires_grad=True)
    grads = {p1.uid: Tensor(np.array([3.0])), p2.uid: Tensor(np.array([4.0]))}
    norm = clip_gradients(grads, [p1, p2], max_norm=1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.sqrt(grads[p1.uid].data[0] ** 2 + grads[p2.uid].data[0] ** 2)
    assert clipped == pytest.approx(1.0)


def test_schedule_factor_matches_schedules():
    assert schedule_factor("constant", 5, 10, None, 0.01) == 1.0
    sched = StlrSchedule(T=100, eta_max=0.01)
    assert schedule_factor("stlr", 10, 100, sched, 0.01) == pytest.approx(1.0)
    assert schedule_factor("cosine", 0, 100, None, 0.01) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# unfreezing policies
# ---------------------------------------------------------------------------

def _unfrozen(groups):
    return {i for i, g in enumerate(groups) if not g.frozen}


def test_gradual_unfreezing_schedule():
    policy = UnfreezePolicy("gradual")
    groups = _groups(4)
    assert _unfrozen(unfreeze_step(policy, groups, 1)) == {3}
    assert _unfrozen(unfreeze_step(policy, groups, 3)) == {1, 2, 3}
    assert _unfrozen(unfreeze_step(policy, groups, 4)) == {0, 1, 2, 3}
    assert _unfrozen(unfreeze_step(policy, groups, 9)) == {0, 1, 2, 3}


def test_gradual_unfrozen_set_non_decreasing():
    policy = UnfreezePolicy("gradual")
    groups = _groups(5)
    previous: set = set()
    for epoch in range(1, 9):
        current = _unfrozen(unfreeze_step(policy, groups, epoch))
        assert previous <= current
        previous = current


def test_chain_thaw_one_group_at_a_time():
    policy = UnfreezePolicy("chain_thaw")
    groups = _groups(4)
    assert _unfrozen(unfreeze_step(policy, groups, 1)) == {3}
    assert _unfrozen(unfreeze_step(policy, groups, 2)) == {2}
    assert _unfrozen(unfreeze_step(policy, groups, 4)) == {0}
    assert _unfrozen(unfreeze_step(policy, groups, 5)) == {0, 1, 2, 3}


def test_last_only_and_full():
    groups = _groups(3)
    assert _unfrozen(unfreeze_step(UnfreezePolicy("last_only"), groups, 7)) == {2}
    assert _unfrozen(unfreeze_step(UnfreezePolicy("full"), groups, 1)) == {0, 1, 2}


def test_epochs_per_stage():
    policy = UnfreezePolicy("gradual", epochs_per_stage=2)
    groups = _groups(3)
    assert _unfrozen(unfreeze_step(policy, groups, 2)) == {2}
    assert _unfrozen(unfreeze_step(policy, groups, 3)) == {1, 2}


def test_unfreeze_contracts():
    with pytest.raises(ContractError):
        UnfreezePolicy("sideways")
    with pytest.raises(ContractError):
        unfreeze_step(UnfreezePolicy("full"), _groups(2), 0)
