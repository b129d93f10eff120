"""Finite-difference verification of every differentiable op."""

import numpy as np
import pytest

from televit.errors import GraphError
from televit.gradcheck import grad_check, numerical_gradient
from televit.tensor import (
    Tensor,
    concat,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    power,
    reshape,
    softmax,
    tanh,
    tensor_mean,
    tensor_sum,
    tile_leading,
    transpose,
)


def test_linear_case_is_exact():
    err = grad_check(tensor_sum, Tensor(np.arange(5, dtype=float)))
    assert err <= 1e-10


def test_softmax_pick_first():
    f = lambda t: getitem(softmax(t, axis=0), 0)
    err = grad_check(f, Tensor([0.1, 0.2, 0.3]))
    assert err < 1e-6


def test_step_domain_validated():
    with pytest.raises(ValueError):
        grad_check(tensor_sum, Tensor([1.0]), step=0.5)
    with pytest.raises(ValueError):
        grad_check(tensor_sum, Tensor([1.0]), step=0.0)


def test_non_scalar_function_rejected():
    with pytest.raises(GraphError, match="scalar"):
        grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))


def test_numerical_gradient_of_quadratic():
    grad = numerical_gradient(lambda arr: float((arr ** 2).sum()), np.array([1.0, -3.0]))
    np.testing.assert_allclose(grad, [2.0, -6.0], atol=1e-8)


# One scalar-valued probe per differentiable op; the spec demands max
# relative error < 1e-4 over 10 seeds at step 1e-5.
OP_PROBES = {
    "add": lambda t: tensor_sum((t + t) * 0.5 + 1.0),
    "sub": lambda t: tensor_sum(t - t * 0.3),
    "mul": lambda t: tensor_sum(t * t),
    "div": lambda t: tensor_sum(div(t, t * t + 2.0)),
    "neg": lambda t: tensor_sum(-t),
    "pow": lambda t: tensor_sum(power(t * t + 1.0, 1.5)),
    "exp": lambda t: tensor_sum(exp(t * 0.5)),
    "log": lambda t: tensor_sum(log(t * t + 1.0)),
    "tanh": lambda t: tensor_sum(tanh(t)),
    "gelu": lambda t: tensor_sum(gelu(t)),
    "matmul": lambda t: tensor_sum(matmul(t, transpose(t))),
    "reshape": lambda t: tensor_sum(reshape(t, (-1,)) * 2.0),
    "transpose": lambda t: tensor_sum(transpose(t) * transpose(t)),
    "getitem": lambda t: tensor_sum(t[1:, :2] * 3.0),
    "concat": lambda t: tensor_sum(concat([t, t * 2.0], axis=0)),
    "tile_leading": lambda t: tensor_sum(tile_leading(t, 3) * 0.5),
    "sum_axis": lambda t: tensor_sum(tensor_sum(t, axis=0) * 2.0),
    "mean": lambda t: tensor_mean(t * t),
    "softmax": lambda t: tensor_sum(softmax(t, axis=1) * softmax(t, axis=1)),
    "log_softmax": lambda t: tensor_sum(log_softmax(t, axis=1) * 0.25),
    # A fixed weighting: an unweighted reduction of layer_norm output is
    # nearly constant by construction, which starves finite differences.
    "layer_norm": lambda t: tensor_sum(
        layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        * Tensor(np.linspace(-1.0, 2.0, 12).reshape(3, 4))
    ),
}


@pytest.mark.parametrize("name", sorted(OP_PROBES))
def test_op_gradients_ten_seeds(name):
    probe = OP_PROBES[name]
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 4)))
        worst = max(worst, grad_check(probe, x, step=1e-5))
    assert worst < 1e-4, f"{name}: max relative error {worst}"


def test_layer_norm_gamma_beta_gradients():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 4))
    weights = rng.standard_normal((5, 4))
    for which in ("gamma", "beta"):
        def probe(t):
            gamma = t if which == "gamma" else Tensor(np.ones(4))
            beta = t if which == "beta" else Tensor(np.zeros(4))
            return tensor_sum(layer_norm(Tensor(x), gamma, beta, 1e-5) * Tensor(weights))

        err = grad_check(probe, Tensor(rng.standard_normal(4)))
        assert err < 1e-4
