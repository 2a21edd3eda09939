import numpy as np
import pytest

from taco.autodiff import (
    LOG_FLOOR,
    Tensor,
    finite_difference_check,
    log_softmax,
    stack,
)
from taco.errors import StructuralError
from taco.seeding import substream


def test_product_forward_and_grad():
    x, y = Tensor(2.0), Tensor(3.0)
    out = x * y
    assert out.item() == 6.0
    out.backward()
    assert x.grad == 3.0
    assert y.grad == 2.0


def test_sigmoid_at_zero():
    z = Tensor(0.0)
    out = z.sigmoid()
    assert out.item() == 0.5
    out.backward()
    assert z.grad == pytest.approx(0.25, abs=1e-15)


def test_logsumexp_of_zeros():
    z = Tensor(np.zeros(2))
    out = z.exp().sum().log()
    assert out.item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_backward_requires_scalar_seed():
    with pytest.raises(StructuralError):
        Tensor(np.ones(3)).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(StructuralError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_log_floor_blocks_minus_inf():
    z = Tensor(np.array([0.0, 1.0]))
    out = z.log().sum()
    assert np.isfinite(out.item())
    out.backward()
    assert np.all(np.isfinite(z.grad))
    assert z.grad[0] == 1.0 / LOG_FLOOR


def _mlp_scalar(ws, x):
    h = (Tensor(x) @ ws[0]).tanh()
    return (h @ ws[1]).sum()


def test_linear_graph_fd_is_exact():
    w = Tensor(np.array([[0.3], [0.7]]))
    x = np.array([[1.0, 2.0]])
    err = finite_difference_check(lambda: (Tensor(x) @ w).sum(), w, step=1e-5)
    assert err <= 1e-10


def test_mlp_fd_check():
    rng = substream(0, "autodiff-mlp")
    w1 = Tensor(rng.normal(size=(4, 5)))
    w2 = Tensor(rng.normal(size=(5, 1)))
    x = rng.normal(size=(3, 4))
    for leaf in (w1, w2):
        err = finite_difference_check(lambda: _mlp_scalar([w1, w2], x), leaf, 1e-5)
        assert err <= 1e-4


@pytest.mark.parametrize("trial", range(8))
def test_primitive_gradients_match_finite_differences(trial):
    rng = substream(trial, "autodiff-prims")
    a_data = rng.normal(size=(3, 4))
    # strictly positive, away from zero: keeps div and log well conditioned
    b_data = np.abs(rng.normal(size=(3, 4))) + 0.5
    builders = {
        "add": lambda a, b: (a + b).sum(),
        "sub": lambda a, b: (a - b).sum(),
        "mul": lambda a, b: (a * b).sum(),
        "div": lambda a, b: (a / b).sum(),
        "tanh": lambda a, b: a.tanh().sum(),
        "sigmoid": lambda a, b: a.sigmoid().sum(),
        "exp": lambda a, b: a.exp().sum(),
        "log": lambda a, b: (b.log()).sum(),
        "pow": lambda a, b: (a**3).sum(),
        "sum_axis": lambda a, b: ((a.sum(axis=1)) ** 2).sum(),
        "getitem": lambda a, b: (a[1] * a[1]).sum(),
        "shift1": lambda a, b: (a.sum(axis=1).shift1() * b.sum(axis=1)).sum(),
        "stack": lambda a, b: (stack([a.sum(axis=1), b.sum(axis=1)], axis=1)).sum(),
        "logsoftmax": lambda a, b: (log_softmax(a) * b).sum(),
    }
    a, b = Tensor(a_data.copy()), Tensor(b_data.copy())
    for name, build in builders.items():
        for leaf in (a, b):
            err = finite_difference_check(lambda: build(a, b), leaf, 1e-6)
            assert err <= 1e-6, f"{name} gradient off by {err}"


def test_broadcast_add_and_mul_gradients():
    rng = substream(1, "autodiff-bcast")
    m = Tensor(rng.normal(size=(4, 3)))
    v = Tensor(rng.normal(size=(3,)))
    for leaf in (m, v):
        err = finite_difference_check(lambda: ((m + v) * v).sum(), leaf, 1e-6)
        assert err <= 1e-6


def test_evaluation_is_pure():
    rng = substream(2, "autodiff-pure")
    w = Tensor(rng.normal(size=(3, 3)))
    x = rng.normal(size=(2, 3))

    def run():
        out = ((Tensor(x) @ w).tanh().sum() * 2.0).exp()
        out.backward()
        return out.item(), np.array(w.grad)

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_gradient_of_sum_of_graphs_is_sum_of_gradients():
    rng = substream(3, "autodiff-linear")
    w = Tensor(rng.normal(size=(3, 2)))
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]

    def loss_of(x):
        return ((Tensor(x) @ w) ** 2).sum()

    total = loss_of(xs[0]) + loss_of(xs[1]) + loss_of(xs[2])
    total.backward()
    combined = np.array(w.grad)

    parts = np.zeros_like(w.data)
    for x in xs:
        loss_of(x).backward()
        parts = parts + w.grad
    assert np.allclose(combined, parts, rtol=1e-12, atol=1e-12)


def test_backward_resets_stale_gradients():
    w = Tensor(np.array([[2.0]]))
    (Tensor(np.array([[1.0]])) @ w).sum().backward()
    first = np.array(w.grad)
    (Tensor(np.array([[1.0]])) @ w).sum().backward()
    assert np.array_equal(first, w.grad)
