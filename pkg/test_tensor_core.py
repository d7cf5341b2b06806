"""
test_tensor_core.py
Primitive ops, the tape, the generator and tensor serialization.
"""
import io
import math

import numpy as np
import pytest

import config
import tensor_core as tc
from exceptions import FormatError, LabelError, NonFiniteError, ShapeError, TapeError


def randn(rng, *shape):
    return tc.Tensor(rng.normal(0.0, 1.0, size=shape))


# ------------------------------------------------------------------ matmul

def test_matmul_identity_left_factor():
    out = tc.matmul(tc.Tensor([[1.0, 0.0], [0.0, 1.0]]), tc.Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])


def test_matmul_row_times_column():
    out = tc.matmul(tc.Tensor([[1.0, 2.0]]), tc.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_inner_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        tc.matmul(tc.Tensor(np.ones((2, 3))), tc.Tensor(np.ones((4, 2))))
    assert '(2, 3)' in str(err.value) and '(4, 2)' in str(err.value)


def test_matmul_broadcasts_leading_dims(rng):
    a = randn(rng, 3, 2, 4)
    b = randn(rng, 4, 5)
    np.testing.assert_allclose(tc.matmul(a, b).data, a.data @ b.data, atol=1e-12)


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = randn(rng, 3, 4), randn(rng, 4, 2), randn(rng, 2, 5)
        left = tc.matmul(tc.matmul(a, b), c).data
        right = tc.matmul(a, tc.matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-9


# ----------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax_lastdim(tc.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = tc.softmax_lastdim(tc.Tensor([1000.0, 0.0])).data
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    third = tc.softmax_lastdim(tc.Tensor([math.log(1), math.log(2), math.log(3)])).data
    np.testing.assert_allclose(third, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    for _ in range(20):
        x = randn(rng, 3, 4, 6)
        y = tc.softmax_lastdim(x).data
        assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12
        shifted = tc.softmax_lastdim(tc.Tensor(x.data + rng.uniform(-5, 5))).data
        assert np.max(np.abs(y - shifted)) < 1e-12


# ------------------------------------------------------------------ linear

def test_linear_examples():
    out = tc.linear(tc.Tensor([1.0, 1.0]), tc.Tensor(np.eye(2)), tc.Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1.0, 1.0])
    out = tc.linear(tc.Tensor([2.0]), tc.Tensor([[3.0]]), tc.Tensor([1.0]))
    assert out.data.tolist() == [7.0]


def test_linear_wrong_bias_length():
    with pytest.raises(ShapeError):
        tc.linear(tc.Tensor([1.0, 1.0]), tc.Tensor(np.eye(2)), tc.Tensor([0.0, 0.0, 0.0]))


def test_unfold_matches_patch_loop(rng):
    x = randn(rng, 2, 3, 8, 8)
    cols = tc.unfold(x, kernel=3, stride=2, padding=1).data
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    assert cols.shape == (2, 16, 27)
    for b in range(2):
        for i in range(4):
            for j in range(4):
                patch = padded[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].reshape(-1)
                np.testing.assert_array_equal(cols[b, i * 4 + j], patch)


# ---------------------------------------------------------------- backward

def test_backward_of_weighted_sum_is_input():
    x = tc.Tensor([1.0, -2.0, 3.0])
    w = tc.Tensor([0.5, 0.5, 0.5], requires_grad=True)
    with tc.trace():
        loss = tc.sum(tc.mul(w, x))
    grads = tc.backward(loss)
    np.testing.assert_array_equal(grads[w], x.data)


def test_softmax_cross_entropy_gradient():
    logits = tc.Tensor([[0.0, 0.0]], requires_grad=True)
    with tc.trace():
        loss = tc.cross_entropy(logits, np.array([0]))
    np.testing.assert_allclose(tc.backward(loss)[logits], [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(LabelError):
        tc.cross_entropy(tc.Tensor([[0.0, 0.0]]), np.array([2]))


def test_backward_needs_traced_scalar():
    w = tc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        tc.backward(tc.sum(w))
    with tc.trace():
        vec = tc.scale(w, 2.0)
    with pytest.raises(TapeError):
        tc.backward(vec)


def test_gradient_accumulates_over_reused_input():
    w = tc.Tensor([3.0], requires_grad=True)
    with tc.trace():
        loss = tc.sum(tc.add(tc.mul(w, w), w))
    assert tc.backward(loss)[w].tolist() == [7.0]


def test_tracing_leaves_forward_bit_identical(rng):
    x, w, b = randn(rng, 2, 5, 4), randn(rng, 4, 3), randn(rng, 3)
    plain = tc.gelu(tc.linear(x, w, b)).data
    with tc.trace():
        traced = tc.gelu(tc.linear(x, tc.Tensor(w.data, requires_grad=True), b)).data
    assert np.array_equal(plain, traced)


def test_nonfinite_values_are_surfaced():
    with pytest.raises(NonFiniteError):
        tc.mul(tc.Tensor([1e200]), tc.Tensor([1e200]))


def test_full_reductions_are_rank_zero():
    total = tc.sum(tc.Tensor(np.ones((2, 3))))
    assert total.shape == ()
    assert tc.mean(tc.Tensor(np.ones((4,)))).shape == ()
    assert total.item() == 6.0


def test_item_requires_single_element():
    assert tc.Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ShapeError):
        tc.Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------- fd_check

def test_fd_check_square():
    w = tc.Tensor([3.0])
    with tc.trace():
        leaf = tc.Tensor(w.data, requires_grad=True)
        loss = tc.sum(tc.mul(leaf, leaf))
    assert tc.backward(loss)[leaf].tolist() == [6.0]
    assert tc.fd_check(lambda p: tc.sum(tc.mul(p, p)), [w]) < 1e-9


def test_fd_check_constant_function():
    assert tc.fd_check(lambda p: tc.Tensor(4.0), [tc.Tensor([1.0, 2.0])]) == 0.0


def _op_cases(rng):
    """(name, f, params) triples with random small shapes; f returns a scalar."""
    b, n, d = (rng.integers(1, 4), rng.integers(1, 5), rng.integers(2, 6))
    r = tc.Tensor(rng.normal(0.0, 1.0, size=(b, n, d)))
    x, y = randn(rng, b, n, d), randn(rng, b, n, d)
    w, bias = randn(rng, d, d), randn(rng, d)
    labels = np.array([rng.integers(0, d) for _ in range(b * n)]).reshape(b, n)
    img = randn(rng, 1, 2, 6, 6)
    r_img = tc.Tensor(rng.normal(0.0, 1.0, size=(1, 9, 18)))

    def weighted(out):
        return tc.sum(tc.mul(out, r))

    return [
        ('add', lambda p, q: weighted(tc.add(p, q)), [x, y]),
        ('sub', lambda p, q: weighted(tc.sub(p, q)), [x, y]),
        ('mul', lambda p, q: weighted(tc.mul(p, q)), [x, y]),
        ('mean', lambda p: tc.sum(tc.mean(tc.mul(p, r), axis=1)), [x]),
        ('permute', lambda p: weighted(tc.transpose_last(tc.transpose_last(p))), [x]),
        ('reshape', lambda p: weighted(tc.reshape(tc.reshape(p, (b * n * d,)), (b, n, d))), [x]),
        ('concat', lambda p, q: tc.sum(tc.mul(tc.concat([p, q], axis=2), tc.concat([r, r], axis=2))), [x, y]),
        ('matmul', lambda p, q: weighted(tc.matmul(p, q)), [x, w]),
        ('linear', lambda p, q, c: weighted(tc.linear(p, q, c)), [x, w, bias]),
        ('softmax', lambda p: weighted(tc.softmax_lastdim(p)), [x]),
        ('layer_norm', lambda p, g, c: weighted(tc.layer_norm(p, g, c)), [x, bias, randn(rng, d)]),
        ('gelu', lambda p: weighted(tc.gelu(p)), [x]),
        ('cross_entropy', lambda p: tc.cross_entropy(p, labels), [x]),
        ('unfold', lambda p: tc.sum(tc.mul(tc.unfold(p, 3, 2, 1), r_img)), [img]),
    ]


def test_backward_matches_finite_differences_for_every_op(rng):
    checked = 0
    while checked < 112:
        for name, f, params in _op_cases(rng):
            err = tc.fd_check(f, params, floor=config.GRADCHECK_FLOOR)
            assert err < 1e-5, f"{name}: {err:.3e}"
            checked += 1


# --------------------------------------------------------------------- rng

def test_rng_same_seed_same_stream():
    a, b = tc.Rng(42), tc.Rng(42)
    assert [a.next_u64() for _ in range(16)] == [b.next_u64() for _ in range(16)]
    assert tc.Rng(42).next_u64() != tc.Rng(43).next_u64()


def test_rng_ranges(rng):
    values = [rng.random() for _ in range(1000)]
    assert 0.0 <= min(values) and max(values) < 1.0
    ints = {rng.integers(2, 5) for _ in range(200)}
    assert ints == {2, 3, 4}
    assert np.all(np.abs(rng.truncated_normal(1.0, (500,))) <= 2.0)
    assert sorted(rng.permutation(10).tolist()) == list(range(10))


def test_derive_seed_is_order_independent():
    forward = [tc.derive_seed(7, i) for i in range(5)]
    backward = [tc.derive_seed(7, i) for i in reversed(range(5))][::-1]
    assert forward == backward
    assert len(set(forward)) == 5


# ----------------------------------------------------------- serialization

def test_tensor_serialization_layout(rng):
    t = randn(rng, 2, 3)
    buf = io.BytesIO()
    tc.write_tensor(buf, t)
    raw = buf.getvalue()
    assert raw[:4] == b'IBAT' and raw[4] == 1
    assert len(raw) == 4 + 1 + 4 + 2 * 4 + 6 * 8
    buf.seek(0)
    assert np.array_equal(tc.read_tensor(buf).data, t.data)


def test_read_tensor_rejects_bad_magic():
    with pytest.raises(FormatError):
        tc.read_tensor(io.BytesIO(b'NOPE' + b'\x00' * 16))


def test_read_tensor_rejects_truncated_input(rng):
    buf = io.BytesIO()
    tc.write_tensor(buf, randn(rng, 2, 3))
    raw = buf.getvalue()
    for cut in (6, 11, len(raw) - 1):
        with pytest.raises(FormatError):
            tc.read_tensor(io.BytesIO(raw[:cut]))
