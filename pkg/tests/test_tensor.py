import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from filterxl import tensor as tn
from filterxl.errors import ContractError, DimensionError, LabelError, NormalizationError
from filterxl.tensor import Tape, Tensor

from helpers import grad_of, numeric_grad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def T(x, grad=True):
    return Tensor(x, requires_grad=grad)


# ------------------------------------------------------------------ matmul


def test_matmul_identity(rng):
    M = rng.normal(size=(2, 2))
    assert np.array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(M)).data, M)


def test_matmul_hand_example():
    out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    A, B = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    ga, gb = grad_of(lambda: tn.sum_all(tn.matmul(A, B)), A, B)
    na = numeric_grad(lambda: (A.data @ B.data).sum(), A.data)
    nb = numeric_grad(lambda: (A.data @ B.data).sum(), B.data)
    np.testing.assert_allclose(ga, na, rtol=1e-6)
    np.testing.assert_allclose(gb, nb, rtol=1e-6)


# ------------------------------------------------------------- elementwise


def test_add_zero_is_identity(rng):
    A = rng.normal(size=(3, 3))
    assert np.array_equal(tn.elementwise("add", Tensor(A), Tensor(np.zeros((3, 3)))).data, A)


def test_gelu_at_zero_is_exactly_zero():
    assert tn.gelu(Tensor([[0.0]])).item() == 0.0


def test_gelu_gradient_at_half():
    x = T([[0.5]])
    assert tn.finite_diff_check(tn.gelu, x) < 1e-6


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_elementwise_gradients(kind, rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 3)))
    assert tn.finite_diff_check(lambda ps: tn.sum_all(tn.elementwise(kind, ps[0], ps[1])), [a, b]) < 1e-6


def test_scale_and_shape_mismatch(rng):
    a = T(rng.normal(size=(2, 3)))
    assert tn.finite_diff_check(lambda x: tn.sum_all(tn.elementwise("scale", tn.gelu(x), 2.5)), a) < 1e-6
    with pytest.raises(DimensionError):
        tn.add(a, Tensor(np.ones((3, 2))))


# ----------------------------------------------------------------- softmax


def test_softmax_symmetric_row():
    assert tn.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_softmax_against_high_precision():
    mpmath.mp.dps = 40
    e = [mpmath.e**i for i in (1, 2, 3)]
    expected = [float(v / sum(e)) for v in e]
    got = tn.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(got, [0.090031, 0.244728, 0.665241], atol=5e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_normalised_and_shift_invariant(x, c):
    y = tn.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1) < 1e-12)
    assert np.all((y > 0) & (y < 1))
    np.testing.assert_allclose(tn.softmax_rows(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_gradient(rng):
    a = T(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    assert tn.finite_diff_check(lambda x: tn.sum_all(tn.mul(tn.softmax_rows(x), w)), a) < 1e-6


def test_softmax_rejects_non_finite():
    with pytest.raises(tn.NumericError):
        tn.softmax_rows(Tensor([[np.inf, 0.0]]))


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    out = tn.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))))
    assert out.data.tolist() == [[0.0, 0.0, 0.0]]


def test_layer_norm_population_variance():
    out = tn.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))), eps=1e-14)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_gradient(rng):
    a = T(rng.normal(size=(3, 4)))
    g = T(rng.normal(size=(1, 4)))
    b = T(rng.normal(size=(1, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    err = tn.finite_diff_check(lambda ps: tn.sum_all(tn.mul(tn.layer_norm(ps[0], ps[1], ps[2]), w)), [a, g, b])
    assert err < 1e-6


def test_layer_norm_axis0_equals_transposed(rng):
    x = rng.normal(size=(4, 3))
    g, b = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    cols = tn.layer_norm(Tensor(x), Tensor(g), Tensor(b), axis=0).data
    rows = tn.layer_norm(Tensor(x.T), Tensor(g.T), Tensor(b.T)).data.T
    np.testing.assert_allclose(cols, rows, atol=1e-14)
    a, gt, bt = T(x), T(g), T(b)
    w = Tensor(rng.normal(size=(4, 3)))
    assert tn.finite_diff_check(lambda ps: tn.sum_all(tn.mul(tn.layer_norm(ps[0], ps[1], ps[2], axis=0), w)), [a, gt, bt]) < 1e-6


# ----------------------------------------------------------- concat/split


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_concat_split_roundtrip_bitwise(d, p, q, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(d, p)), r.normal(size=(d, q))
    joint = tn.concat_cols(Tensor(a), Tensor(b))
    assert joint.shape == (d, p + q)
    left, right = tn.split_cols(joint, p)
    assert left.data.tobytes() == a.tobytes() and right.data.tobytes() == b.tobytes()


def test_concat_gradient_of_sum_is_ones(rng):
    a, b = T(rng.normal(size=(3, 5))), T(rng.normal(size=(3, 7)))
    ga, gb = grad_of(lambda: tn.sum_all(tn.concat_cols(a, b)), a, b)
    assert np.array_equal(ga, np.ones((3, 5))) and np.array_equal(gb, np.ones((3, 7)))


def test_split_routes_gradients(rng):
    x = T(rng.normal(size=(2, 5)))
    w1, w2 = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 3)))

    def f(x):
        left, right = tn.split_cols(x, 2)
        return tn.add(tn.sum_all(tn.mul(left, w1)), tn.sum_all(tn.mul(right, w2)))

    (g,) = grad_of(lambda: f(x), x)
    np.testing.assert_array_equal(g, np.concatenate([w1.data, w2.data], axis=1))


def test_concat_split_errors():
    with pytest.raises(DimensionError):
        tn.concat_cols(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        tn.split_cols(Tensor(np.ones((2, 3))), 3)


def test_take_cols_scatter_adds(rng):
    table = T(rng.normal(size=(3, 6)))
    w = Tensor(rng.normal(size=(3, 4)))
    assert tn.finite_diff_check(lambda t: tn.sum_all(tn.mul(tn.take_cols(t, [1, 4, 1, 0]), w)), table) < 1e-6


# ------------------------------------------------------------------ losses


def test_cross_entropy_uniform_is_log_c():
    assert tn.cross_entropy(Tensor(np.zeros((1, 4))), 2).item() == pytest.approx(math.log(4), abs=1e-15)
    assert round(math.log(4), 6) == 1.386294


def test_cross_entropy_confident():
    expected = math.log1p(math.exp(-20.0))
    assert tn.cross_entropy(Tensor([[10.0, -10.0]]), 0).item() == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(2.06e-9, rel=1e-3)


def test_cross_entropy_gradient(rng):
    logits = T(rng.normal(size=(3, 5)))
    assert tn.finite_diff_check(lambda x: tn.cross_entropy(x, [0, 4, 2]), logits) < 1e-6
    (g,) = grad_of(lambda: tn.cross_entropy(logits, [0, 4, 2]), logits)
    p = tn.softmax_rows(Tensor(logits.data)).data
    p[[0, 1, 2], [0, 4, 2]] -= 1
    np.testing.assert_allclose(g, p / 3, atol=1e-15)


def test_cross_entropy_label_error():
    with pytest.raises(LabelError):
        tn.cross_entropy(Tensor(np.zeros((1, 3))), 3)


def test_kl_of_identical_distributions_is_zero(rng):
    q = rng.normal(size=(1, 4))
    p = tn.softmax_rows(Tensor(q)).data
    assert abs(tn.kl_divergence(p, Tensor(q)).item()) < 1e-12


def test_kl_closed_form():
    assert tn.kl_divergence([1.0, 0.0], Tensor([[0.0, 0.0]])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_kl_nonnegative_on_random_pairs(rng):
    for _ in range(1000):
        c = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(c) * 0.5)
        q = rng.normal(scale=3, size=(1, c))
        assert tn.kl_divergence(p, Tensor(q)).item() >= 0.0


def test_kl_rejects_unnormalised():
    with pytest.raises(NormalizationError):
        tn.kl_divergence([0.7, 0.7], Tensor([[0.0, 0.0]]))


def test_kl_gradient_flows_only_into_logits(rng):
    p = rng.dirichlet(np.ones(4), size=2)
    q = T(rng.normal(size=(2, 4)))
    assert tn.finite_diff_check(lambda x: tn.kl_divergence(p, x), q) < 1e-6
    p_before = p.copy()
    grad_of(lambda: tn.kl_divergence(p, q), q)
    assert np.array_equal(p, p_before)


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones(rng):
    A = T(rng.normal(size=(2, 3)))
    (g,) = grad_of(lambda: tn.sum_all(A), A)
    assert np.array_equal(g, np.ones((2, 3)))


def test_two_uses_accumulate(rng):
    A = T(rng.normal(size=(2, 2)))
    B = Tensor(rng.normal(size=(2, 2)))
    (g,) = grad_of(lambda: tn.add(tn.sum_all(tn.mul(A, B)), tn.sum_all(A)), A)
    np.testing.assert_allclose(g, B.data + 1, atol=1e-15)


def test_backward_requires_scalar(rng):
    A = T(rng.normal(size=(2, 2)))
    with Tape() as tape:
        out = tn.add(A, A)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_constant_inputs_never_receive_grad(rng):
    A, C = T(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2)))
    grad_of(lambda: tn.sum_all(tn.matmul(A, C)), A)
    assert C.grad is None


def test_backward_runs_once(rng):
    A = T(rng.normal(size=(2, 2)))
    with Tape() as tape:
        loss = tn.sum_all(A)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_no_grad_records_nothing(rng):
    A = T(rng.normal(size=(2, 2)))
    with Tape() as tape:
        with tn.no_grad():
            out = tn.sum_all(A)
    assert len(tape) == 0 and out._tape is None and not out.requires_grad


def test_deterministic(rng):
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))

    def run():
        a, b = T(A), T(B)
        ga, gb = grad_of(lambda: tn.sum_all(tn.gelu(tn.matmul(a, tn.softmax_rows(b)))), a, b)
        return ga.tobytes() + gb.tobytes()

    assert run() == run()


def test_tape_is_bound_to_its_thread(rng):
    A = T(rng.normal(size=(2, 2)))
    tape = Tape()
    errors = []

    def worker():
        try:
            with tape:
                pass
        except ContractError as e:
            errors.append(e)

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert errors


# ------------------------------------------------------- finite-diff oracle


def test_finite_diff_quadratic():
    x = T([[1.0, 2.0]])
    (g,) = grad_of(lambda: tn.sum_all(tn.mul(x, x)), x)
    np.testing.assert_allclose(g, [[2.0, 4.0]], atol=1e-15)
    assert tn.finite_diff_check(lambda v: tn.sum_all(tn.mul(v, v)), x) < 1e-8
    assert tn.DEFAULT_FD_STEP == 1e-5


def test_finite_diff_softmax_cross_entropy(rng):
    x = T(rng.normal(size=(2, 3)))
    w = T(rng.normal(size=(3, 4)))
    assert tn.finite_diff_check(lambda ps: tn.cross_entropy(tn.matmul(ps[0], ps[1]), [1, 3]), [x, w]) < 1e-6


def test_finite_diff_detects_wrong_gradient(rng):
    x = T(rng.normal(size=(2, 2)))

    def doubled_square_sum(v):
        # forward sum(v^2), backward deliberately 4v instead of 2v
        return tn._record("bad", np.array([[np.sum(v.data**2)]]), (v,), lambda g: (4 * v.data * g[0, 0],))

    assert tn.finite_diff_check(doubled_square_sum, x) > 0.4


# ---------------------------------------------------------------- attention


def _reference_attention(q, k, v, heads, mask_add):
    """Head-by-head composition of primitive ops."""
    d, n = q.shape
    dh = d // heads
    outs = []
    for h in range(heads):
        qh = tn.transpose(tn.slice_cols(tn.transpose(q), h * dh, (h + 1) * dh))
        kh = tn.transpose(tn.slice_cols(tn.transpose(k), h * dh, (h + 1) * dh))
        vh = tn.transpose(tn.slice_cols(tn.transpose(v), h * dh, (h + 1) * dh))
        scores = tn.scale(tn.matmul(tn.transpose(qh), kh), 1 / math.sqrt(dh))
        a = tn.softmax_rows(tn.add_constant(scores, mask_add))
        outs.append(tn.transpose(tn.matmul(vh, tn.transpose(a))))
    joined = outs[0]
    for o in outs[1:]:
        joined = tn.concat_cols(joined, o)
    return tn.transpose(joined)


def test_attention_matches_primitive_composition(rng):
    d, n, heads = 6, 4, 3
    qs = [T(rng.normal(size=(d, n))) for _ in range(3)]
    mask = np.zeros((n, n))
    mask[:, 2] = tn.MASK_VALUE
    w = Tensor(rng.normal(size=(d, n)))
    fused = grad_of(lambda: tn.sum_all(tn.mul(tn.attention(*qs, heads, mask), w)), *qs)
    ref = grad_of(lambda: tn.sum_all(tn.mul(_reference_attention(*qs, heads, mask), w)), *qs)
    for a, b in zip(fused, ref):
        np.testing.assert_allclose(a, b, atol=1e-13)
    np.testing.assert_allclose(tn.attention(*qs, heads, mask).data, _reference_attention(*qs, heads, mask).data, atol=1e-14)


def test_attention_gradient_check(rng):
    qs = [T(rng.normal(size=(4, 3))) for _ in range(3)]
    w = Tensor(rng.normal(size=(4, 3)))
    assert tn.finite_diff_check(lambda ps: tn.sum_all(tn.mul(tn.attention(ps[0], ps[1], ps[2], 2), w)), qs) < 1e-6
