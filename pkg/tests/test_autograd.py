"""Numeric core: forward oracles, gradient checks, and distribution invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import tokenprune.autograd as ag
from tokenprune import Rng, Tensor, adamw_step, grad_check
from tokenprune.errors import ContractError, DimensionError, DistributionError


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    out = ag.matmul(Tensor(np.eye(2, dtype=np.float32)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_value():
    out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_batched_broadcast():
    a = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    b = np.random.default_rng(1).normal(size=(5, 6))
    out = ag.matmul(t64(a), t64(b))
    np.testing.assert_allclose(out.data, a @ b, rtol=1e-12)


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    out = ag.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def test_softmax_sentinel_underflows_to_exact_zero():
    for dtype in (np.float32, np.float64):
        out = ag.softmax(Tensor(np.asarray([-65000.0, 0.0], dtype=dtype)), axis=-1)
        assert out.data[0] == 0.0
        assert out.data[1] == 1.0


def test_softmax_closed_form_logs():
    out = ag.softmax(t64([math.log(1), math.log(2), math.log(3)]), axis=-1)
    np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)


def test_softmax_invalid_axis():
    with pytest.raises(DimensionError):
        ag.softmax(Tensor([1.0, 2.0]), axis=3)


@given(
    arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)),
    st.lists(st.booleans(), min_size=5, max_size=5),
)
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one_with_sentinels(x, sentinel_cols):
    x = x.copy()
    sentinel_cols = np.asarray(sentinel_cols)
    if sentinel_cols.all():
        sentinel_cols[0] = False  # keep one live column
    x[:, sentinel_cols] = -65000.0
    out32 = ag.softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out32.data.sum(axis=-1), 1.0, atol=1e-6)
    out64 = ag.softmax(Tensor(x.astype(np.float64)), axis=-1)
    np.testing.assert_allclose(out64.data.sum(axis=-1), 1.0, atol=1e-12)


# -- layer_norm ------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = Tensor([[3.0, 3.0, 3.0]])
    out = ag.layer_norm(x, Tensor([1.0, 1.0, 1.0]), Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_two_point_row():
    out = ag.layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_beta_shifts():
    x = t64([[2.0, 4.0]])
    gamma = t64([1.0, 1.0])
    base = ag.layer_norm(x, gamma, t64([0.0, 0.0]))
    shifted = ag.layer_norm(x, gamma, t64([5.0, 5.0]))
    np.testing.assert_array_equal(shifted.data, base.data + 5.0)


def test_layer_norm_bad_affine_shape():
    with pytest.raises(DimensionError):
        ag.layer_norm(Tensor([[1.0, 2.0]]), Tensor([1.0]), Tensor([0.0]))


# -- gelu --------------------------------------------------------------------


def test_gelu_values():
    out = ag.gelu(t64([0.0, 10.0, 1.0]))
    assert out.data[0] == 0.0
    np.testing.assert_allclose(out.data[1], 10.0, rtol=1e-9)
    # exact-erf form: x * Phi(x) at 1
    np.testing.assert_allclose(out.data[2], 0.8413447460685429, rtol=1e-12)
    np.testing.assert_allclose(out.data[2], 0.8412, atol=2e-4)


# -- cross_entropy ------------------------------------------------------------


def test_cross_entropy_confident_correct_is_near_zero():
    loss = ag.cross_entropy(t64([[40.0, 0.0, 0.0]]), np.array([0]))
    assert 0.0 <= float(loss.data) < 1e-9


def test_cross_entropy_uniform_is_log_c():
    loss = ag.cross_entropy(t64(np.zeros((1, 10))), np.array([4]))
    np.testing.assert_allclose(float(loss.data), math.log(10.0), rtol=1e-12)


def test_cross_entropy_batch_mean():
    a = t64([[2.0, -1.0, 0.5]])
    b = t64([[0.0, 3.0, 1.0]])
    both = t64([[2.0, -1.0, 0.5], [0.0, 3.0, 1.0]])
    la = float(ag.cross_entropy(a, np.array([0])).data)
    lb = float(ag.cross_entropy(b, np.array([2])).data)
    lboth = float(ag.cross_entropy(both, np.array([0, 2])).data)
    np.testing.assert_allclose(lboth, (la + lb) / 2.0, rtol=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor([[0.0, 1.0]]), np.array([2]))


# -- kl_divergence -------------------------------------------------------------


def test_kl_identical_is_exactly_zero():
    p = t64([0.3, 0.7])
    assert float(ag.kl_divergence(p, t64([0.3, 0.7])).data) == 0.0


def test_kl_closed_form_log2():
    out = ag.kl_divergence(t64([1.0, 0.0]), t64([0.5, 0.5]))
    np.testing.assert_allclose(float(out.data), math.log(2.0), rtol=1e-12)


def test_kl_floor_keeps_q_zero_finite():
    out = ag.kl_divergence(t64([0.5, 0.5]), t64([1.0, 0.0]))
    val = float(out.data)
    assert math.isfinite(val)
    # 0.5*(ln 0.5 - ln 1e-12) + 0.5*(ln 0.5 - ln 1.0)
    expected = 0.5 * (math.log(0.5) - math.log(1e-12)) + 0.5 * math.log(0.5)
    np.testing.assert_allclose(val, expected, rtol=1e-9)


def test_kl_rejects_unnormalized():
    with pytest.raises(DistributionError):
        ag.kl_divergence(Tensor([0.5, 0.2]), Tensor([0.5, 0.5]))
    with pytest.raises(DistributionError):
        ag.kl_divergence(Tensor([0.5, 0.5]), Tensor([0.9, 0.3]))


def test_kl_rejects_negative():
    with pytest.raises(DistributionError):
        ag.kl_divergence(Tensor([-0.1, 1.1]), Tensor([0.5, 0.5]))


def test_kl_multirow_is_mean_of_rows():
    p1, q1 = [0.2, 0.8], [0.5, 0.5]
    p2, q2 = [0.9, 0.1], [0.4, 0.6]
    single1 = float(ag.kl_divergence(t64(p1), t64(q1)).data)
    single2 = float(ag.kl_divergence(t64(p2), t64(q2)).data)
    both = float(ag.kl_divergence(t64([p1, p2]), t64([q1, q2])).data)
    np.testing.assert_allclose(both, (single1 + single2) / 2.0, rtol=1e-12)


@given(
    arrays(np.float64, (4,), elements=st.floats(0.01, 10.0)),
    arrays(np.float64, (4,), elements=st.floats(0.01, 10.0)),
)
@settings(max_examples=100, deadline=None)
def test_kl_non_negative_property(raw_p, raw_q):
    p = raw_p / raw_p.sum()
    q = raw_q / raw_q.sum()
    val = float(ag.kl_divergence(t64(p), t64(q)).data)
    assert val >= -1e-12
    assert float(ag.kl_divergence(t64(p), t64(p)).data) == 0.0


# -- backward / grad_check ----------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    ag.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = t64([1.0, 2.0], requires_grad=True)
    ag.sum_(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_backward_accumulates_until_reset():
    x = t64([1.0, 2.0], requires_grad=True)
    ag.sum_(x * x).backward()
    first = x.grad.copy()
    ag.sum_(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_grad_check_sum_is_zero_error():
    x = t64(np.random.default_rng(1).normal(size=(3,)), requires_grad=True)
    assert grad_check(lambda: ag.sum_(x), x) < 1e-10


def test_grad_check_ce_of_softmax_chain():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(3, 4)), requires_grad=True)
    labels = np.array([0, 2, 1])

    def f():
        return ag.cross_entropy(ag.softmax(x, axis=-1), labels)

    assert grad_check(f, x) < 1e-6


def test_grad_check_chained_matmul_softmax_ce():
    rng = np.random.default_rng(6)
    w = t64(rng.normal(size=(4, 3)), requires_grad=True)
    x = t64(rng.normal(size=(2, 4)))
    labels = np.array([1, 2])

    def f():
        return ag.cross_entropy(ag.matmul(x, w), labels)

    assert grad_check(f, w) < 1e-6


@pytest.mark.parametrize(
    "name",
    ["matmul", "softmax", "layer_norm", "gelu", "cross_entropy", "kl_divergence",
     "where", "getitem", "fancy_getitem", "concat", "sum", "mean", "transpose",
     "reshape", "exp", "log", "mul", "add", "pow", "extract_patches",
     "take_tokens", "expand"],
)
def test_grad_check_every_primitive(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = t64(rng.normal(size=(2, 3, 4)), requires_grad=True)

    if name == "matmul":
        w = t64(rng.normal(size=(4, 5)), requires_grad=True)
        f = lambda: ag.sum_(ag.matmul(x, w) * ag.matmul(x, w))
        assert grad_check(f, [x, w]) < 1e-6
        return
    if name == "softmax":
        probe = Tensor(rng.normal(size=(2, 3, 4)))
        f = lambda: ag.sum_(ag.softmax(x, axis=-1) * probe)
    elif name == "layer_norm":
        g = t64(rng.normal(size=(4,)), requires_grad=True)
        b = t64(rng.normal(size=(4,)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 3, 4)))
        f = lambda: ag.sum_(ag.layer_norm(x, g, b) * probe)
        assert grad_check(f, [x, g, b]) < 1e-6
        return
    if name == "gelu":
        f = lambda: ag.sum_(ag.gelu(x))
    elif name == "cross_entropy":
        logits = t64(rng.normal(size=(3, 5)), requires_grad=True)
        labels = np.array([0, 4, 2])
        assert grad_check(lambda: ag.cross_entropy(logits, labels), logits) < 1e-6
        return
    if name == "kl_divergence":
        raw = t64(rng.normal(size=(2, 5)), requires_grad=True)
        q = np.abs(rng.normal(size=(2, 5))) + 0.1
        q = Tensor(q / q.sum(axis=-1, keepdims=True))
        f = lambda: ag.kl_divergence(ag.softmax(raw, axis=-1), q)
        assert grad_check(f, raw) < 1e-6
        return
    if name == "where":
        cond = rng.normal(size=(2, 3, 4)) > 0
        f = lambda: ag.sum_(ag.where(cond, x * 2.0, x * -3.0))
    elif name == "getitem":
        f = lambda: ag.sum_(x[:, 1:, ::2] * 3.0)
    elif name == "fancy_getitem":
        idx = np.array([2, 0, 2])
        f = lambda: ag.sum_(x[:, idx] * 2.0)
    elif name == "concat":
        y = t64(rng.normal(size=(2, 2, 4)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 5, 4)))
        f = lambda: ag.sum_(ag.concat([x, y], axis=1) * probe)
        assert grad_check(f, [x, y]) < 1e-6
        return
    if name == "sum":
        f = lambda: ag.sum_(ag.sum_(x, axis=1) ** 2.0)
    elif name == "mean":
        f = lambda: ag.sum_(ag.mean(x, axis=-1, keepdims=True) ** 2.0)
    elif name == "transpose":
        f = lambda: ag.sum_(ag.transpose(x, (2, 0, 1)) ** 2.0)
    elif name == "reshape":
        f = lambda: ag.sum_(ag.reshape(x, (6, 4)) ** 2.0)
    elif name == "exp":
        f = lambda: ag.sum_(ag.exp(x * 0.3))
    elif name == "log":
        f = lambda: ag.sum_(ag.log(ag.exp(x) + 1.0))
    elif name == "mul":
        f = lambda: ag.sum_(x * x * 0.5)
    elif name == "add":
        f = lambda: ag.sum_((x + 2.0) ** 2.0)
    elif name == "pow":
        f = lambda: ag.sum_((x * x + 1.0) ** 1.5)
    elif name == "extract_patches":
        img = t64(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 4, 12)))
        f = lambda: ag.sum_(ag.extract_patches(img, 2) * probe)
        assert grad_check(f, img) < 1e-6
        return
    if name == "take_tokens":
        idx = np.array([[0, 2], [1, 1]])
        probe = Tensor(rng.normal(size=(2, 2, 4)))
        f = lambda: ag.sum_(ag.take_tokens(x, idx) * probe)
    elif name == "expand":
        small = t64(rng.normal(size=(1, 1, 4)), requires_grad=True)
        probe = Tensor(rng.normal(size=(2, 3, 4)))
        f = lambda: ag.sum_(ag.expand(small, (2, 3, 4)) * probe)
        assert grad_check(f, small) < 1e-6
        return
    assert grad_check(f, x) < 1e-6


def test_no_grad_disables_graph():
    x = t64([1.0, 2.0], requires_grad=True)
    with ag.no_grad():
        y = ag.sum_(x * x)
    assert not y.requires_grad
    assert y._backward_fn is None


def test_tensor_rejects_more_than_four_axes():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_all_finite_detects_nan_and_inf():
    assert Tensor([1.0, 2.0]).all_finite()
    assert not Tensor([1.0, np.nan]).all_finite()
    assert not Tensor([np.inf, 2.0]).all_finite()


# -- adamw -----------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_leaves_params():
    p = np.array([1.0, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    adamw_step(p, np.zeros(2), m, v, t=1, lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    p = np.array([1.0])
    adamw_step(p, np.array([1.0]), np.zeros(1), np.zeros(1), t=1, lr=0.1,
               betas=(0.9, 0.999), weight_decay=0.0)
    # bias-corrected m_hat = v_hat = 1 so the step is exactly lr/(1+eps)
    np.testing.assert_allclose(p, [0.9], atol=1e-8)


def test_adamw_decay_only_scales():
    p = np.array([1.0])
    adamw_step(p, np.zeros(1), np.zeros(1), np.zeros(1), t=1, lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose(p, [0.99], rtol=1e-12)


def test_adamw_shape_mismatch():
    with pytest.raises(DimensionError):
        adamw_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), t=1, lr=0.1)


# -- rng -----------------------------------------------------------------------


def test_rng_same_seed_same_sequence():
    a = Rng(123).normal((4, 4))
    b = Rng(123).normal((4, 4))
    np.testing.assert_array_equal(a, b)


def test_rng_state_roundtrip_resumes_stream():
    r = Rng(9)
    r.normal((3,))
    state = r.state()
    next_draws = r.normal((5,))
    r2 = Rng(9)
    r2.set_state(state)
    np.testing.assert_array_equal(r2.normal((5,)), next_draws)


def test_rng_rejects_bad_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)
