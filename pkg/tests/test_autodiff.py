import numpy as np
import pytest
import scipy.sparse as sp

from npgnn import autodiff as ad
from npgnn.errors import ContractError, NumericError, ShapeError


def contract(out, r):
    """Scalar sum(out * R) so every output entry gets a distinct weight."""
    return ad.sum_all(ad.mul(out, ad.const(r)))


def _nudge(a, eps=1e-3):
    # keep inputs away from the ReLU kink
    return np.where(np.abs(a) < eps, eps, a)


def _cases():
    return {
        "matmul": ((3, 4), (4, 2), lambda a, b: ad.matmul(a, b)),
        "transpose": ((3, 4), None, lambda a, b: ad.transpose(a)),
        "add_row_bias": ((5, 3), (1, 3), lambda a, b: ad.add_row_bias(a, b)),
        "concat_broadcast_row": ((4, 2), (1, 3), lambda a, b: ad.concat_broadcast_row(a, b)),
        "relu": ((4, 3), None, lambda a, b: ad.relu(a)),
        "sigmoid": ((4, 3), None, lambda a, b: ad.sigmoid(a)),
        "exp": ((4, 3), None, lambda a, b: ad.exp(a)),
        "identity": ((4, 3), None, lambda a, b: ad.identity(a)),
        "add": ((4, 3), (4, 3), lambda a, b: ad.add(a, b)),
        "sub": ((4, 3), (4, 3), lambda a, b: ad.sub(a, b)),
        "mul": ((4, 3), (4, 3), lambda a, b: ad.mul(a, b)),
        "scale": ((4, 3), None, lambda a, b: ad.scale(a, -2.5)),
        "sum_all": ((4, 3), None, lambda a, b: ad.sum_all(a)),
        "mean_rows": ((5, 3), None, lambda a, b: ad.mean_rows(a)),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(name, seed):
    shape_a, shape_b, op = _cases()[name]
    rng = np.random.default_rng(seed)
    params = {"a": _nudge(rng.normal(size=shape_a))}
    if shape_b is not None:
        params["b"] = rng.normal(size=shape_b)
    out_shape = op(ad.const(params["a"]), ad.const(params.get("b", np.zeros((1, 1))))).shape
    r = rng.normal(size=out_shape)

    def f(tape, p):
        return contract(op(p["a"], p.get("b")), r)

    rep = ad.gradient_check(f, params, h=1e-6, tol=1e-6)
    assert rep.passed, rep.lines()


@pytest.mark.parametrize("seed", range(20))
def test_sparse_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    s = sp.random(6, 6, density=0.4, random_state=seed, format="csr")
    r = rng.normal(size=(6, 3))
    rep = ad.gradient_check(lambda t, p: contract(ad.sparse_matmul(s, p["b"]), r), {"b": rng.normal(size=(6, 3))},
                            tol=1e-6)
    assert rep.passed, rep.lines()
    # dense-left matmul with a sparse right operand is not supported, sparse-left dispatches
    v = ad.matmul(s, ad.const(np.ones((6, 1))))
    np.testing.assert_allclose(v.value, s @ np.ones((6, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_weighted_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    # 2x2 keeps the summed loss small; with 25 terms the central difference
    # loses ~eps*|loss|/h to cancellation, which is comparable to the tiny
    # gradients at |t| ~ 6 and swamps the 1e-6 relative tolerance.
    y = (rng.random((2, 2)) < 0.5).astype(float)
    w = float(rng.uniform(0.5, 5))
    rep = ad.gradient_check(
        lambda t, p: ad.weighted_bce_with_logits(p["t"], y, w), {"t": rng.normal(scale=3, size=(2, 2))}, tol=1e-6
    )
    assert rep.passed, rep.lines()


def test_weighted_bce_value_matches_naive():
    rng = np.random.default_rng(0)
    t = rng.normal(scale=4, size=(6, 6))
    y = (rng.random((6, 6)) < 0.4).astype(float)
    w = 2.5
    p = 1 / (1 + np.exp(-t))
    naive = sum(
        w * y[i, j] * np.log(p[i, j]) + (1 - y[i, j]) * np.log(1 - p[i, j]) for i in range(6) for j in range(6)
    )
    got = ad.weighted_bce_with_logits(ad.const(t), y, w).item()
    assert abs(got - naive) < 1e-10


def test_weighted_bce_extreme_logits_finite():
    t = np.array([[800.0, -800.0]])
    v = ad.weighted_bce_with_logits(ad.const(t), np.array([[1.0, 0.0]]), 3.0)
    assert v.item() == 0.0
    v = ad.weighted_bce_with_logits(ad.const(t), np.array([[0.0, 1.0]]), 1.0)
    assert v.item() == -1600.0


def test_relu_mask_and_sigmoid_slope():
    tape = ad.Tape()
    x = tape.param("x", [[-1.0, 2.0]])
    g = ad.backward(ad.sum_all(ad.relu(x)))
    assert g["x"].tolist() == [[0.0, 1.0]]
    tape = ad.Tape()
    x = tape.param("x", [[0.0]])
    assert ad.backward(ad.sum_all(ad.sigmoid(x)))["x"][0, 0] == 0.25


def test_concat_broadcast_row_value():
    v = ad.concat_broadcast_row(ad.const([[1.0], [2.0]]), ad.const([[3.0, 4.0]]))
    assert v.value.tolist() == [[1, 3, 4], [2, 3, 4]]


def test_backward_examples():
    tape = ad.Tape()
    w = tape.param("W", np.arange(4.0).reshape(2, 2))
    assert ad.backward(ad.sum_all(w))["W"].tolist() == [[1, 1], [1, 1]]
    tape = ad.Tape()
    w = tape.param("W", [[-1.0, 1.0], [2.0, -2.0]])
    assert ad.backward(ad.sum_all(ad.relu(w)))["W"].tolist() == [[0, 1], [1, 0]]


def test_backward_accumulates_shared_use():
    tape = ad.Tape()
    w = tape.param("W", [[3.0]])
    loss = ad.sum_all(ad.add(ad.mul(w, w), w))  # w^2 + w
    assert ad.backward(loss)["W"][0, 0] == 7.0


def test_backward_contracts():
    tape = ad.Tape()
    w = tape.param("W", np.ones((2, 2)))
    with pytest.raises(ContractError):
        ad.backward(w)
    with pytest.raises(ContractError):
        ad.add(w, ad.Tape().param("V", np.ones((2, 2))))
    with pytest.raises(ShapeError):
        ad.mul(w, ad.const(np.ones((3, 2))))
    with pytest.raises(Exception):
        tape.param("W", np.ones(1))


def test_gradient_check_quadratic_exact():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 3))
    rep = ad.gradient_check(lambda t, p: ad.scale(ad.sum_all(ad.mul(p["W"], p["W"])), 0.5), {"W": w}, tol=1e-9)
    assert rep.passed and rep.max_error < 1e-9


def test_gradient_check_report_tolerance_semantics():
    rep = ad.gradient_check(lambda t, p: ad.sum_all(ad.exp(p["W"])), {"W": np.ones((2, 2))}, tol=1e-14)
    assert not rep.passed and rep.failing() == ["W"]
    assert "FAIL" in rep.lines()[0]


def test_gradient_check_non_finite():
    with np.errstate(over="ignore"),  pytest.raises(NumericError):
        ad.gradient_check(lambda t, p: ad.sum_all(ad.exp(p["W"])), {"W": np.full((1, 1), 1e4)})


def test_untracked_ops_build_no_tape():
    v = ad.relu(ad.const([[1.0, -1.0]]))
    assert not v.tracked
