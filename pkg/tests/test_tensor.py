import io

import numpy as np
import pytest

from occlureid.tensor import (
    ShapeError,
    TensorFileError,
    activate,
    elementwise,
    matvec,
    outer,
    read_tensor,
    relu6,
    require_finite,
    sigmoid,
    softmax,
    write_tensor,
)

rng = np.random.default_rng(7)


def test_elementwise_ops_match_numpy():
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    assert np.array_equal(elementwise("add", a, b), a + b)
    assert np.array_equal(elementwise("sub", a, b), a - b)
    assert np.array_equal(elementwise("mul", a, b), a * b)


def test_elementwise_rejects_shape_mismatch_and_unknown_op():
    with pytest.raises(ShapeError):
        elementwise("add", np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        elementwise("pow", np.zeros(3), np.zeros(3))


def test_mul_commutative_add_associative():
    for _ in range(20):
        a = rng.normal(size=17)
        b = rng.normal(size=17)
        c = rng.normal(size=17)
        assert np.allclose(elementwise("mul", a, b), elementwise("mul", b, a), atol=1e-12)
        lhs = elementwise("add", elementwise("add", a, b), c)
        rhs = elementwise("add", a, elementwise("add", b, c))
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_matvec_definition():
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=4)
    expected = np.array([sum(w[i, j] * x[j] for j in range(4)) for i in range(3)])
    assert np.allclose(matvec(w, x), expected, atol=1e-12)
    with pytest.raises(ShapeError):
        matvec(w, np.zeros(5))
    with pytest.raises(ShapeError):
        matvec(np.zeros(3), x)


def test_outer_definition():
    a = rng.normal(size=3)
    b = rng.normal(size=5)
    got = outer(a, b)
    assert got.shape == (3, 5)
    for i in range(3):
        for j in range(5):
            assert got[i, j] == a[i] * b[j]
    with pytest.raises(ShapeError):
        outer(np.zeros(0), b)


def test_activation_ranges():
    # |x| kept small enough that neither sigmoid nor tanh rounds onto its
    # open bound in double precision (tanh saturates first, near 19).
    x = rng.uniform(-15, 15, size=1000)
    s = sigmoid(x)
    assert np.all((s > 0) & (s < 1))
    t = activate("tanh", x)
    assert np.all((t > -1) & (t < 1))
    r = relu6(x)
    assert np.all((r >= 0) & (r <= 6))
    assert relu6(np.array([7.0]))[0] == 6.0
    assert relu6(np.array([-1.0]))[0] == 0.0


def test_sigmoid_extremes_stay_finite():
    v = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(v))
    assert v[0] >= 0.0 and v[1] <= 1.0


def test_softmax_normalizes_and_is_positive():
    for _ in range(50):
        x = rng.normal(scale=5, size=rng.integers(1, 12))
        p = softmax(x)
        assert abs(p.sum() - 1.0) <= 1e-6
        assert np.all(p > 0)


def test_softmax_shift_invariance():
    for shift in (-1e4, -3.7, 0.0, 2.5, 1e4):
        x = rng.normal(size=9)
        assert np.allclose(softmax(x), softmax(x + shift), atol=1e-9)


def test_softmax_survives_extreme_logits():
    p = softmax(np.array([0.0, -1e9, 1e9]))
    assert np.all(np.isfinite(p))
    assert np.all(p > 0)


def test_softmax_rejects_bad_rank():
    with pytest.raises(ShapeError):
        softmax(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        softmax(np.zeros(0))


def test_activate_unknown_kind():
    with pytest.raises(ValueError):
        activate("swish", np.zeros(3))


def test_require_finite():
    require_finite("ok", np.ones(3))
    with pytest.raises(ValueError):
        require_finite("bad", np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        require_finite("bad", np.array([np.inf]))


def test_tensor_file_round_trip():
    for shape in ((), (5,), (3, 4), (2, 3, 4), (1, 2, 3, 4)):
        arr = rng.normal(size=shape).astype(np.float32).astype(np.float64)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_tensor_file_round_trip_on_disk(tmp_path):
    arr = rng.normal(size=(4, 6)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "t.bin")
    write_tensor(path, arr)
    assert np.array_equal(read_tensor(path), arr)


def test_tensor_file_distinct_errors():
    arr = np.ones((2, 2), dtype=np.float64)
    buf = io.BytesIO()
    write_tensor(buf, arr)
    raw = buf.getvalue()

    with pytest.raises(TensorFileError, match="magic"):
        read_tensor(io.BytesIO(b"BOGUS1\n" + raw[7:]))
    with pytest.raises(TensorFileError):
        read_tensor(io.BytesIO(raw[:-3]))  # truncated payload
    # Rank/extent line corrupted.
    with pytest.raises(TensorFileError):
        read_tensor(io.BytesIO(raw.replace(b"2 2 2", b"2 x 2", 1)))
