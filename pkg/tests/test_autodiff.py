"""Tensor engine: op semantics, backward rules, gradient checking."""

import numpy as np
import pytest

from ulmfit import autodiff as ad
from ulmfit.autodiff import (BatchNormState, ContractError, DegenerateBatchError,
                             GradCheckReport, ShapeError, Tape, Tensor,
                             grad_check, no_tape, op_forward)

from conftest import to_scalar


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    out = ad.matmul(a, eye)
    assert np.array_equal(out.data, a.data)


def test_matmul_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_pooling_hand_values():
    h = Tensor([[1.0, 2.0], [3.0, 0.0], [2.0, 2.0]])
    assert np.allclose(ad.max_over_time(h).data, [3.0, 2.0])
    assert np.allclose(ad.mean_over_time(h).data, [2.0, 4.0 / 3.0])


def test_softmax_cross_entropy_uniform_logits():
    loss = ad.softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), np.array([1]))
    assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)


def test_softmax_rows_sum_to_one(rng):
    probs = ad.softmax(Tensor(rng.standard_normal((5, 7))))
    assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def test_add_bias_broadcast_only_rank1():
    x = Tensor(np.ones((2, 3)))
    assert np.allclose(ad.add(x, Tensor([1.0, 2.0, 3.0])).data,
                       [[2, 3, 4], [2, 3, 4]])
    with pytest.raises(ShapeError):
        ad.add(x, Tensor(np.ones((3, 2))))


def test_concat_axis_handling(rng):
    a, b = Tensor(rng.random((2, 3))), Tensor(rng.random((2, 5)))
    assert ad.concat([a, b], axis=-1).shape == (2, 8)
    with pytest.raises(ShapeError):
        ad.concat([a, Tensor(rng.random((3, 3)))], axis=-1)


def test_embedding_lookup_out_of_range():
    emb = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        ad.embedding_lookup(emb, np.array([[0, 4]]))


def test_batch_norm_degenerate_batch():
    state = BatchNormState(3)
    with pytest.raises(DegenerateBatchError):
        ad.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)),
                      Tensor(np.zeros(3)), state, train=True)


def test_op_forward_dispatch_matches_wrappers(rng):
    a = Tensor(rng.random((2, 3)))
    b = Tensor(rng.random((3, 4)))
    via_dispatch = op_forward("matmul", [a, b])
    assert np.array_equal(via_dispatch.data, ad.matmul(a, b).data)
    with pytest.raises(ContractError):
        op_forward("not_an_op", [a])


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        sq = ad.mul(x, x)
        loss = ad.mean_over_time(ad.reshape(sq, (3, 1)))
        grads = tape.backward(loss, params=[x])
    # loss = mean(x^2) so d/dx = 2x/3
    assert np.allclose(grads[x.uid].data, np.array([2.0, 4.0, 6.0]) / 3.0)


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        loss = ad.sigmoid(x)
        tape.backward(loss)
    assert x.grad == pytest.approx(0.25, abs=1e-12)


def test_gradient_accumulation_two_paths():
    x = Tensor([1.5], requires_grad=True)
    with Tape() as tape:
        doubled = ad.add(x, x)
        loss = ad.mean_over_time(ad.reshape(doubled, (1, 1)))
        grads = tape.backward(loss, params=[x])
    assert np.allclose(grads[x.uid].data, [2.0])


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    orphan = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.mean_over_time(ad.reshape(ad.mul(x, x), (2, 1)))
        grads = tape.backward(loss, params=[x, orphan])
    assert np.array_equal(grads[orphan.uid].data, [0.0])


def test_non_scalar_loss_is_contract_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_no_grad_for_non_requiring_tensors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    const = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = ad.mean_over_time(ad.reshape(ad.mul(x, const), (2, 1)))
        tape.backward(loss, params=[x])
    assert const.grad is None
    assert x.grad is not None


def test_ops_do_not_record_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    with no_tape():
        y = ad.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_three_layer_mlp_matches_finite_differences(rng):
    dims = [4, 5, 4, 3]
    weights = [Tensor(rng.standard_normal((dims[i], dims[i + 1])) * 0.5)
               for i in range(3)]
    x = rng.standard_normal((2, 4))
    targets = np.array([0, 2])

    def f(ts):
        h = Tensor(x)
        for i, w in enumerate(ts):
            h = ad.matmul(h, w)
            if i < 2:
                h = ad.tanh(h)
        return ad.softmax_cross_entropy(h, targets)

    report = grad_check(f, weights, h=1e-5, tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_square():
    def f(ts):
        return ad.mean_over_time(ad.reshape(ad.mul(ts[0], ts[0]), (1, 1)))

    report = grad_check(f, [Tensor([3.0])])
    assert report.passed and report.max_rel_err < 1e-7


def test_grad_check_reports_failure_without_raising():
    # a deliberately wrong "gradient" via a discontinuous function
    def f(ts):
        rounded = Tensor(np.round(ts[0].data))  # constant w.r.t. tape
        return ad.mean_over_time(ad.reshape(ad.mul(ts[0], rounded), (1, 1)))

    report = grad_check(f, [Tensor([0.49999])], h=1e-2)
    assert isinstance(report, GradCheckReport)
    assert not report.passed


# ---------------------------------------------------------------------------
# per-op gradient correctness, 20 seeds each
# ---------------------------------------------------------------------------

def _case_matmul(r):
    a, b = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal((4, 2)))
    w = r.standard_normal((3, 2))
    return lambda ts: to_scalar(ad.matmul(ts[0], ts[1]), w), [a, b]


def _case_matmul_trans(r):
    a, b = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal((2, 4)))
    w = r.standard_normal((3, 2))
    return lambda ts: to_scalar(ad.matmul(ts[0], ts[1], trans_b=True), w), [a, b]


def _case_add(r):
    a, b = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.add(ts[0], ts[1]), w), [a, b]


def _case_add_bias(r):
    a, b = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal(4))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.add(ts[0], ts[1]), w), [a, b]


def _case_mul(r):
    a, b = Tensor(r.standard_normal((3, 4))), Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.mul(ts[0], ts[1]), w), [a, b]


def _case_sigmoid(r):
    x = Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.sigmoid(ts[0]), w), [x]


def _case_tanh(r):
    x = Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.tanh(ts[0]), w), [x]


def _case_relu(r):
    x = Tensor(r.standard_normal((3, 4)) + 0.05)
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.relu(ts[0]), w), [x]


def _case_concat(r):
    a, b = Tensor(r.standard_normal((2, 3))), Tensor(r.standard_normal((2, 2)))
    w = r.standard_normal((2, 5))
    return lambda ts: to_scalar(ad.concat(ts, axis=-1), w), [a, b]


def _case_concat_time(r):
    a, b = Tensor(r.standard_normal((2, 3))), Tensor(r.standard_normal((4, 3)))
    w = r.standard_normal((6, 3))
    return lambda ts: to_scalar(ad.concat(ts, axis=0), w), [a, b]


def _case_embedding(r):
    emb = Tensor(r.standard_normal((5, 3)))
    ids = r.integers(0, 5, (4, 2))
    w = r.standard_normal((4, 2, 3))
    return lambda ts: to_scalar(ad.embedding_lookup(ts[0], ids), w), [emb]


def _case_dropout(r):
    x = Tensor(r.standard_normal((3, 4)))
    mask = ad.make_dropout_mask((3, 4), 0.4, r)
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.dropout_mask_apply(ts[0], mask), w), [x]


def _case_batch_norm_train(r):
    x = Tensor(r.standard_normal((8, 3)))
    gamma = Tensor(1.0 + 0.1 * r.standard_normal(3))
    beta = Tensor(0.1 * r.standard_normal(3))
    w = r.standard_normal((8, 3))

    def f(ts):
        state = BatchNormState(3)
        return to_scalar(ad.batch_norm(ts[0], ts[1], ts[2], state, train=True), w)

    return f, [x, gamma, beta]


def _case_batch_norm_eval(r):
    x = Tensor(r.standard_normal((4, 3)))
    gamma = Tensor(1.0 + 0.1 * r.standard_normal(3))
    beta = Tensor(0.1 * r.standard_normal(3))
    state = BatchNormState(3)
    state.running_mean[:] = r.standard_normal(3)
    state.running_var[:] = 0.5 + r.random(3)
    w = r.standard_normal((4, 3))
    return (lambda ts: to_scalar(
        ad.batch_norm(ts[0], ts[1], ts[2], state, train=False), w),
        [x, gamma, beta])


def _case_max_over_time(r):
    x = Tensor(r.standard_normal((5, 2, 3)))
    mask = r.random((5, 2)) < 0.7
    mask[0] = True
    w = r.standard_normal((2, 3))
    return lambda ts: to_scalar(ad.max_over_time(ts[0], mask), w), [x]


def _case_mean_over_time(r):
    x = Tensor(r.standard_normal((5, 2, 3)))
    mask = r.random((5, 2)) < 0.7
    mask[0] = True
    w = r.standard_normal((2, 3))
    return lambda ts: to_scalar(ad.mean_over_time(ts[0], mask), w), [x]


def _case_softmax_xent(r):
    logits = Tensor(r.standard_normal((4, 3)))
    targets = r.integers(0, 3, 4)
    return lambda ts: ad.softmax_cross_entropy(ts[0], targets), [logits]


def _case_softmax(r):
    logits = Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    return lambda ts: to_scalar(ad.softmax(ts[0]), w), [logits]


def _case_slice_cols(r):
    x = Tensor(r.standard_normal((3, 6)))
    w = r.standard_normal((3, 3))
    return lambda ts: to_scalar(ad.slice_cols(ts[0], 1, 4), w), [x]


def _case_select_time(r):
    x = Tensor(r.standard_normal((4, 2, 3)))
    w = r.standard_normal((2, 3))
    return lambda ts: to_scalar(ad.select_time(ts[0], 2), w), [x]


def _case_reshape(r):
    x = Tensor(r.standard_normal((3, 4)))
    w = r.standard_normal((4, 3))
    return lambda ts: to_scalar(ad.reshape(ts[0], (4, 3)), w), [x]


def _case_lstm_unroll(r):
    t_len, batch, hd = 3, 2, 3
    gx = Tensor(r.standard_normal((t_len, batch, 4 * hd)))
    hc0 = Tensor(r.standard_normal((batch, 2 * hd)))
    wh = Tensor(r.standard_normal((hd, 4 * hd)) * 0.5)
    bias = Tensor(r.standard_normal(4 * hd) * 0.1)
    w = r.standard_normal((t_len, batch, 2 * hd))
    return (lambda ts: to_scalar(ad.lstm_unroll(ts[0], ts[1], ts[2], ts[3]), w),
            [gx, hc0, wh, bias])


OP_CASES = {
    "matmul": _case_matmul,
    "matmul_trans_b": _case_matmul_trans,
    "add": _case_add,
    "add_bias": _case_add_bias,
    "mul": _case_mul,
    "sigmoid": _case_sigmoid,
    "tanh": _case_tanh,
    "relu": _case_relu,
    "concat": _case_concat,
    "concat_time": _case_concat_time,
    "embedding_lookup": _case_embedding,
    "dropout_mask_apply": _case_dropout,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "max_over_time": _case_max_over_time,
    "mean_over_time": _case_mean_over_time,
    "softmax_cross_entropy": _case_softmax_xent,
    "softmax": _case_softmax,
    "slice_cols": _case_slice_cols,
    "select_time": _case_select_time,
    "reshape": _case_reshape,
    "lstm_unroll": _case_lstm_unroll,
}


CASE_TO_OP = {
    "matmul_trans_b": "matmul", "add_bias": "add", "concat_time": "concat",
    "batch_norm_train": "batch_norm", "batch_norm_eval": "batch_norm",
}


def test_every_registered_op_kind_has_a_grad_case():
    covered = {CASE_TO_OP.get(name, name) for name in OP_CASES}
    assert set(ad.OPS) <= covered


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_20_seeds(name):
    for seed in range(20):
        r = np.random.default_rng(seed)
        f, point = OP_CASES[name](r)
        report = grad_check(f, point, h=1e-5, tol=1e-4)
        assert report.passed, f"{name} seed {seed}: {report}"


def test_single_lstm_cell_gradients(rng):
    """All four gate weight matrices of one cell, via a T=1 unroll."""
    hd, batch, in_dim = 4, 3, 5
    x = Tensor(rng.standard_normal((1, batch, in_dim)))
    hc0 = Tensor(rng.standard_normal((batch, 2 * hd)))
    wx = Tensor(rng.standard_normal((in_dim, 4 * hd)) * 0.5)
    wh = Tensor(rng.standard_normal((hd, 4 * hd)) * 0.5)
    bias = Tensor(rng.standard_normal(4 * hd) * 0.1)
    w = rng.standard_normal((1, batch, 2 * hd))

    def f(ts):
        xx, hc, wxx, whh, b = ts
        gx = ad.reshape(ad.matmul(ad.reshape(xx, (batch, in_dim)), wxx),
                        (1, batch, 4 * hd))
        return to_scalar(ad.lstm_unroll(gx, hc, whh, b), w)

    report = grad_check(f, [x, hc0, wx, wh, bias], h=1e-5, tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# dropout mask properties
# ---------------------------------------------------------------------------

def test_dropout_eval_mode_is_identity():
    # evaluation path never applies a mask: the op with a ones mask is
    # bit-exact, and model code skips the op entirely when not training
    x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
    out = ad.dropout_mask_apply(x, Tensor(np.ones((5, 5))))
    assert np.array_equal(out.data, x.data)


def test_inverted_dropout_preserves_expectation(rng):
    x = rng.random(50) + 0.5
    total = np.zeros_like(x)
    n = 40_000
    for _ in range(n):
        mask = ad.make_dropout_mask(x.shape, 0.5, rng)
        total += x * mask.data
    mean = total / n
    assert np.all(np.abs(mean - x) / x < 0.02)


def test_dropout_mask_extremes(rng):
    assert np.all(ad.make_dropout_mask((4, 4), 0.0, rng).data == 1.0)
    assert np.all(ad.make_dropout_mask((4, 4), 1.0, rng).data == 0.0)


def test_pool_contract_all_masked_column():
    x = Tensor(np.ones((3, 2, 2)))
    mask = np.array([[True, False], [True, False], [True, False]])
    with pytest.raises(ContractError):
        ad.max_over_time(x, mask)
