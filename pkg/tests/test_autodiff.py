"""Tensor core: forward semantics, backward rules, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from slmt import autodiff as ad


def t64(data, tracked=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), tracked=tracked)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# forward semantics


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rand(rng, 3, 5)
    out = ad.matmul(t64(np.eye(3)), t64(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_shape_error_names_kind_and_shapes():
    with pytest.raises(ad.OpError) as err:
        ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))
    assert err.value.kind == "matmul"
    assert err.value.shapes == ((2, 3), (4, 5))


def test_softmax_uniform_rows():
    out = ad.softmax(t64([0.0, 0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-15)


def test_softmax_empty_axis_errors():
    with pytest.raises(ad.OpError):
        ad.softmax(t64(np.zeros((3, 0))), axis=-1)


def test_cosine_self_similarity_is_one():
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = t64(rand(rng, 8))
        out = ad.cosine_similarity(v, v)
        assert abs(out.item() - 1.0) < 1e-6


def test_masked_mean_ignores_masked_rows():
    rng = np.random.default_rng(2)
    x = rand(rng, 4, 6)
    base = ad.masked_mean(t64(x), np.ones(4), axis=0)
    padded = np.concatenate([x, rand(rng, 3, 6)], axis=0)
    mask = np.array([1, 1, 1, 1, 0, 0, 0])
    extended = ad.masked_mean(t64(padded), mask, axis=0)
    np.testing.assert_array_equal(base.data, extended.data)


def test_masked_mean_all_masked_errors():
    with pytest.raises(ad.OpError):
        ad.masked_mean(t64(np.ones((2, 3))), np.zeros(2), axis=0)


def test_dropout_eval_mode_is_identity():
    x = t64(np.arange(6.0).reshape(2, 3), tracked=True)
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
    assert out is x


def test_dropout_train_mode_scales_kept_values():
    rng = np.random.default_rng(3)
    x = np.ones((200, 50))
    out = ad.dropout(t64(x), 0.25, rng, training=True)
    kept = out.data[out.data != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert 0.6 < (out.data != 0).mean() < 0.9


def test_cross_entropy_uniform_logits_is_log_vocab():
    v = 11
    logits = t64(np.zeros((4, v)))
    targets = np.array([0, 3, 7, 10])
    for smoothing in (0.0, 0.1, 0.5):
        loss = ad.label_smoothed_cross_entropy(logits, targets, smoothing=smoothing)
        assert abs(loss.item() - np.log(v)) < 1e-12


# ---------------------------------------------------------------------------
# backward basics


def test_sum_gradient_is_ones():
    x = t64(np.arange(12.0).reshape(3, 4), tracked=True)
    ad.backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_half_squared_norm_gradient_is_x():
    rng = np.random.default_rng(4)
    x = t64(rand(rng, 5, 3), tracked=True)
    loss = ad.scale(ad.tensor_sum(ad.mul(x, x)), 0.5)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_loss_grad_wrt_itself_is_one():
    x = t64([[2.0]], tracked=True)
    loss = ad.tensor_sum(x)
    ad.backward(loss)
    assert loss.grad.reshape(()) == 1.0


def test_backward_rejects_non_scalar_and_untracked():
    x = t64(np.ones((2, 2)), tracked=True)
    with pytest.raises(ad.OpError):
        ad.backward(ad.mul(x, x))
    with pytest.raises(ad.OpError):
        ad.backward(t64([1.0]))


def test_double_backward_without_rebuild_errors():
    x = t64([1.0, 2.0], tracked=True)
    loss = ad.tensor_sum(x)
    ad.backward(loss)
    with pytest.raises(ad.OpError):
        ad.backward(loss)


def test_diamond_graph_visits_each_node_once():
    # y = x + x: if the add node ran twice the gradient would be 4, not 2.
    x = t64([3.0], tracked=True)
    y = ad.add(x, x)
    ad.backward(ad.tensor_sum(y))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_no_grad_suppresses_tracking():
    x = t64([1.0, 2.0], tracked=True)
    with ad.no_grad():
        out = ad.mul(x, x)
    assert not out.tracked


def test_cosine_gradient_matches_central_differences():
    rng = np.random.default_rng(5)
    u = rand(rng, 8)
    v = rand(rng, 8)
    report = ad.grad_check(lambda x: ad.cosine_similarity(x, t64(v)), t64(u), step=1e-5, tol=1e-6)
    assert report.passed, report.max_rel_err


# ---------------------------------------------------------------------------
# finite-difference checks for every primitive with a backward rule


def _check(f, x, tol=1e-4):
    report = ad.grad_check(f, t64(x), tol=tol)
    assert report.passed, f"max rel err {report.max_rel_err}"


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    b = t64(rand(rng, 4, 3))
    w = t64(rand(rng, 2, 5, 3))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.matmul(x, b), w)), rand(rng, 2, 5, 4))
    c = t64(rand(rng, 2, 3, 4))
    _check(lambda x: ad.tensor_sum(ad.matmul(c, x)), rand(rng, 2, 4, 2))


@pytest.mark.parametrize("seed", [13, 14, 15])
def test_grad_add_mul_broadcast(seed):
    rng = np.random.default_rng(seed)
    y = t64(rand(rng, 6))
    w = t64(rand(rng, 3, 6))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.add(w, x), w)), rand(rng, 6))
    _check(lambda x: ad.tensor_sum(ad.mul(x, y)), rand(rng, 3, 6))
    _check(lambda x: ad.tensor_sum(ad.sub(x, w)), rand(rng, 3, 6))


@pytest.mark.parametrize("seed", [16, 17, 18])
def test_grad_relu(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 5)
    x += np.sign(x) * 0.1  # keep probes away from the kink at zero
    weights = t64(rand(rng, 4, 5))
    _check(lambda t: ad.tensor_sum(ad.mul(ad.relu(t), weights)), x)


@pytest.mark.parametrize("seed", [19, 20, 21])
def test_grad_softmax(seed):
    rng = np.random.default_rng(seed)
    weights = t64(rand(rng, 3, 7))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.softmax(x, axis=-1), weights)), rand(rng, 3, 7))


@pytest.mark.parametrize("seed", [22, 23, 24])
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    gain = t64(rand(rng, 6))
    bias = t64(rand(rng, 6))
    weights = t64(rand(rng, 2, 4, 6))
    x = rand(rng, 2, 4, 6)
    _check(lambda t: ad.tensor_sum(ad.mul(ad.layer_norm(t, gain, bias), weights)), x)
    _check(lambda t: ad.tensor_sum(ad.mul(ad.layer_norm(t64(x), t, bias), weights)), rand(rng, 6))
    _check(lambda t: ad.tensor_sum(ad.mul(ad.layer_norm(t64(x), gain, t), weights)), rand(rng, 6))


@pytest.mark.parametrize("seed", [25, 26, 27])
def test_grad_embedding(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, size=(3, 4))
    weights = t64(rand(rng, 3, 4, 6))
    _check(lambda t: ad.tensor_sum(ad.mul(ad.embedding(t, ids), weights)), rand(rng, 5, 6))


@pytest.mark.parametrize("seed", [28, 29, 30])
def test_grad_concat(seed):
    rng = np.random.default_rng(seed)
    other = t64(rand(rng, 2, 3))
    weights = t64(rand(rng, 2, 7))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.concat([x, other], axis=1), weights)),
           rand(rng, 2, 4))


@pytest.mark.parametrize("seed", [31, 32, 33])
def test_grad_masked_mean(seed):
    rng = np.random.default_rng(seed)
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 1]])
    weights = t64(rand(rng, 2, 5))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.masked_mean(x, mask, axis=1), weights)),
           rand(rng, 2, 4, 5))


@pytest.mark.parametrize("seed", [34, 35, 36])
def test_grad_l2_norm(seed):
    rng = np.random.default_rng(seed)
    _check(lambda x: ad.l2_norm(x), rand(rng, 4, 3))
    weights = t64(rand(rng, 2))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.l2_norm(x, axis=(1, 2)), weights)),
           rand(rng, 2, 3, 4))


@pytest.mark.parametrize("seed", [37, 38, 39])
def test_grad_cosine_batched(seed):
    rng = np.random.default_rng(seed)
    v = t64(rand(rng, 3, 6))
    weights = t64(rand(rng, 3))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.cosine_similarity(x, v, axis=-1), weights)),
           rand(rng, 3, 6))
    u = t64(rand(rng, 3, 6))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.cosine_similarity(u, x, axis=-1), weights)),
           rand(rng, 3, 6))


@pytest.mark.parametrize("seed", [40, 41, 42])
def test_grad_scale_transpose_reshape(seed):
    rng = np.random.default_rng(seed)
    weights = t64(rand(rng, 4, 2, 3))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.transpose(x, (2, 0, 1)), weights)),
           rand(rng, 2, 3, 4))
    w5 = t64(rand(rng, 5))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.scale(x, -1.7), w5)), rand(rng, 5))
    w62 = t64(rand(rng, 6, 2))
    _check(lambda x: ad.tensor_sum(ad.mul(ad.reshape(x, (6, 2)), w62)), rand(rng, 3, 4))


@pytest.mark.parametrize("seed", [43, 44, 45])
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 7, size=5)
    mask = np.array([1, 1, 0, 1, 1])
    _check(lambda x: ad.label_smoothed_cross_entropy(x, targets, mask, smoothing=0.1),
           rand(rng, 5, 7))


def test_grad_dropout_with_replayed_mask():
    rng = np.random.default_rng(46)
    x = rand(rng, 4, 4)

    def f(t):
        return ad.tensor_sum(ad.dropout(t, 0.5, np.random.default_rng(99), training=True))

    _check(f, x)


# ---------------------------------------------------------------------------
# grad_check harness itself


def test_grad_check_constant_function_reports_zero_error():
    report = ad.grad_check(lambda x: ad.scale(ad.tensor_sum(ad.mul(x, ad.Tensor(np.zeros((3,))))), 1.0),
                           t64(np.ones(3)))
    assert report.max_rel_err == 0.0
    assert report.passed


def test_grad_check_rejects_float32():
    x = ad.Tensor(np.ones(3, dtype=np.float32), tracked=True)
    with pytest.raises(ad.OpError):
        ad.grad_check(ad.tensor_sum, x)


def test_grad_check_flags_non_finite_probe():
    def f(x):
        out = ad.tensor_sum(x)
        if not np.isfinite(out.data).all() or out.item() > 1e6:
            raise ad.OpError("grad-check", "boom")
        return out

    bad = np.full(2, 1e7)
    with pytest.raises(ad.OpError):
        ad.grad_check(f, t64(bad))


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    out = ad.softmax(t64(rng.standard_normal((rows, cols)) * 10), axis=-1)
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, rtol=0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2 ** 31 - 1))
def test_layer_norm_standardizes_before_affine(width, seed):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((3, width)) * 3 + 1
    assume(raw.var(axis=-1).min() >= 0.01)  # eps dominates on degenerate rows
    x = t64(raw)
    out = ad.layer_norm(x, t64(np.ones(width)), t64(np.zeros(width)))
    mean = out.data.mean(axis=-1)
    var = out.data.var(axis=-1)
    assert np.abs(mean).max() <= 1e-6
    assert np.abs(var - 1.0).max() <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_masked_mean_padding_append_property(rows, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, 3))
    base = ad.masked_mean(t64(x), np.ones(rows), axis=0)
    padded = np.concatenate([x, rng.standard_normal((pad, 3))], axis=0)
    mask = np.concatenate([np.ones(rows), np.zeros(pad)])
    out = ad.masked_mean(t64(padded), mask, axis=0)
    np.testing.assert_array_equal(base.data, out.data)
