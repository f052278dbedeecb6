import numpy as np
import pytest

from multinex import autodiff as ad
from multinex.metrics import gaussian_taps

from gradcheck import analytic_grads, check

SEEDS = range(5)
TOL = 1e-3


def project(out, seed):
    """Scalar loss sum(out * R) with a fixed random R, so the whole Jacobian is exercised."""
    shape = ad.data_of(out).shape
    R = np.random.default_rng(seed + 100).normal(size=shape)
    return ad.sum_(ad.mul(out, R))


def away_from(x, points, gap=0.05):
    # keep samples off the kinks so the central difference is smooth
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-12) * gap, x)
    return x


UNARY = {
    "neg": (ad.neg, None),
    "relu": (ad.relu, [0.0]),
    "sigmoid": (ad.sigmoid, None),
    "tanh": (ad.tanh, None),
    "clamp": (ad.clamp, [0.0, 1.0]),
    "power2": (lambda a: ad.power(a, 2), None),
    "power3": (lambda a: ad.power(a, 3), None),
    "sum": (ad.sum_, None),
    "sum_axis": (lambda a: ad.sum_(a, axis=1), None),
    "mean": (ad.mean, None),
    "mean_keep": (lambda a: ad.mean(a, axis=(0, 2), keepdims=True), None),
    "gap": (ad.gap, None),
    "avg_pool2_odd": (ad.avg_pool2, None),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_primitives(op, seed):
    fn, kinks = UNARY[op]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3, 2)) if op == "avg_pool2_odd" else rng.normal(size=(3, 3, 2))
    if kinks:
        x = away_from(x, kinks)
    assert check(lambda v: project(fn(v["x"]), seed), {"x": x}) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_fractional_power(seed):
    x = np.random.default_rng(seed).uniform(0.2, 2.0, size=(3, 3, 2))
    assert check(lambda v: project(ad.power(v["x"], 0.5), seed), {"x": x}) <= TOL
    assert check(lambda v: project(ad.power(v["x"], -1.5), seed), {"x": x}) <= TOL


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(BINARY))
@pytest.mark.parametrize("b_shape", [(3, 3, 2), (3, 3, 1)])
def test_binary_primitives(op, b_shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3, 2))
    b = rng.normal(size=b_shape)
    if op == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)
    assert check(lambda v: project(BINARY[op](v["a"], v["b"]), seed), {"a": a, "b": b}) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1x1(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 3, 3, 2)), "w": rng.normal(size=(2, 4)), "b": rng.normal(size=4)}
    assert check(lambda v: project(ad.conv1x1(v["x"], v["w"], v["b"]), seed), arrays) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dense(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 1, 1, 4)), "w": rng.normal(size=(3, 4))}
    assert check(lambda v: project(ad.dense(v["x"], v["w"]), seed), arrays) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k", [3, 7])
def test_dwconv(seed, k):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(2, 5, 4, 2)), "k": rng.normal(size=(k, k, 2)), "b": rng.normal(size=2)}
    assert check(lambda v: project(ad.dwconv(v["x"], v["k"], v["b"]), seed), arrays) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.normal(size=(3, 3, 4)), "s": rng.normal(size=4), "t": rng.normal(size=4)}
    assert check(lambda v: project(ad.layer_norm(v["x"], v["s"], v["t"]), seed), arrays) <= TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_gaussian_filter(seed):
    x = np.random.default_rng(seed).normal(size=(13, 12, 2))
    assert check(lambda v: project(ad.gaussian_filter_valid(v["x"], gaussian_taps()), seed), {"x": x}) <= TOL


def test_sigmoid_at_zero():
    g = analytic_grads(lambda v: ad.sum_(ad.sigmoid(v["x"])), {"x": np.zeros(1)})
    assert g["x"][0] == 0.25


def test_value_operators_match_primitives():
    tape = ad.Tape()
    x = tape.param("x", np.array([1.0, 2.0, 4.0]))
    arr = np.array([2.0, 2.0, 2.0])
    y = arr * x + 1.0 - x / 2.0 + (-x) ** 2 + 3.0 / x - arr
    assert isinstance(y, ad.Value)
    np.testing.assert_allclose(y.data, 2 * x.data + 1 - x.data / 2 + x.data ** 2 + 3 / x.data - 2)
    g = ad.backward(tape, ad.sum_(y))
    np.testing.assert_allclose(g["x"], 2 - 0.5 + 2 * x.data - 3 / x.data ** 2)


def test_reused_value_accumulates():
    g = analytic_grads(lambda v: ad.sum_(ad.mul(v["x"], v["x"])), {"x": np.array([3.0, -1.0])})
    np.testing.assert_array_equal(g["x"], [6.0, -2.0])


def test_unreached_parameter_gets_zero():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    tape.param("unused", np.ones((2, 2)))
    g = ad.backward(tape, ad.sum_(x))
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_needs_scalar():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, ad.mul(x, 2.0))


def test_plain_arrays_bypass_tape():
    out = ad.relu(np.array([-1.0, 2.0]))
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, [0.0, 2.0])


def test_duplicate_param_rejected():
    tape = ad.Tape()
    tape.param("w", np.ones(1))
    with pytest.raises(KeyError):
        tape.param("w", np.ones(1))


def test_tape_is_topological():
    tape = ad.Tape()
    x = tape.param("x", np.ones((2, 2, 2)))
    y = ad.tanh(ad.mul(ad.relu(x), x))
    ad.sum_(y)
    seen = {x.vid}
    for node in tape.nodes:
        for inp in node.inputs:
            if isinstance(inp, ad.Value):
                assert inp.vid in seen
        seen.add(node.output.vid)


def test_float32_gradients_keep_dtype():
    g = analytic_grads(lambda v: ad.sum_(ad.tanh(v["x"])), {"x": np.ones(3, np.float32)})
    assert g["x"].dtype == np.float32
