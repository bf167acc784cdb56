import numpy as np
import pytest

from cib import diffcore as D


def rel_err(a, b, floor=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def test_identity_forward():
    x = D.Tensor(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(x.data, [1.0, 2.0, 3.0])


def test_sum_of_squares():
    x = D.Tensor(np.array([3.0]))
    assert D.tsum(D.square(x)).item() == 9.0


def test_softplus_at_zero():
    out = D.softplus(D.Tensor(np.array([0.0])))
    assert out.data[0] == pytest.approx(np.log(2.0), abs=1e-12)


def test_backward_square():
    w = D.Tensor(np.array(3.0))
    (g,) = D.backward(D.square(w), [w])
    assert g == pytest.approx(6.0, abs=1e-12)


def test_backward_constant_graph_is_zero():
    w = D.Tensor(np.array(2.0))
    c = D.Tensor(np.array(5.0))
    (g,) = D.backward(D.mul(c, D.as_tensor(1.0)), [w])
    assert g == 0.0


def test_backward_softplus_at_zero():
    w = D.Tensor(np.array(0.0))
    (g,) = D.backward(D.softplus(w), [w])
    assert g == pytest.approx(0.5, abs=1e-12)


def test_backward_requires_scalar_output():
    x = D.Tensor(np.array([1.0, 2.0]))
    with pytest.raises(D.ShapeError):
        D.backward(D.square(x), [x])


def test_matmul_shape_error_names_op():
    a = D.Tensor(np.zeros((2, 3)))
    b = D.Tensor(np.zeros((2, 3)))
    with pytest.raises(D.ShapeError, match="matmul"):
        D.matmul(a, b)


def test_seed_scales_gradient():
    w = D.Tensor(np.array(3.0))
    (g,) = D.backward(D.square(w), [w], seed=2.0)
    assert g == pytest.approx(12.0, abs=1e-12)


def test_finite_difference_on_square():
    fd = D.finite_difference_gradient(lambda p: float(p[0] ** 2),
                                      np.array([3.0]), h=1e-5)
    assert fd[0] == pytest.approx(6.0, abs=1e-8)


def test_finite_difference_on_exp():
    fd = D.finite_difference_gradient(lambda p: float(np.exp(p[0])),
                                      np.array([0.0]), h=1e-5)
    assert fd[0] == pytest.approx(1.0, abs=1e-8)


def test_finite_difference_rejects_bad_h():
    with pytest.raises(ValueError):
        D.finite_difference_gradient(lambda p: 0.0, np.zeros(1), h=0.0)


def test_stop_gradient_blocks_backward():
    w = D.Tensor(np.array(2.0))
    out = D.square(D.stop_gradient(w))
    (g,) = D.backward(out, [w])
    assert g == 0.0
    assert out.item() == 4.0


def test_forward_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 2))

    def run():
        return D.tsum(D.elu(D.matmul(D.Tensor(x), D.Tensor(w)))).item()

    assert run() == run()


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    w = D.Tensor(rng.normal(size=(4,)))
    f1 = D.tsum(D.square(w))
    f2 = D.tsum(D.exp(D.mul(w, D.as_tensor(0.3))))
    (g_sum,) = D.backward(D.add(f1, f2), [w])
    (g1,) = D.backward(f1, [w])
    (g2,) = D.backward(f2, [w])
    assert np.allclose(g_sum, g1 + g2, rtol=0, atol=1e-12)


# one scalar-valued composition per differentiable op kind; inputs are drawn
# from each op's safe domain
OP_CASES = {
    "add": (lambda a, b: D.tsum(D.add(a, b)), 2, None),
    "sub": (lambda a, b: D.tsum(D.square(D.sub(a, b))), 2, None),
    "mul": (lambda a, b: D.tsum(D.mul(a, b)), 2, None),
    "div": (lambda a, b: D.tsum(D.div(a, b)), 2, "positive"),
    "neg": (lambda a: D.tsum(D.neg(D.square(a))), 1, None),
    "exp": (lambda a: D.tsum(D.exp(a)), 1, None),
    "log": (lambda a: D.tsum(D.log(a)), 1, "positive"),
    "square": (lambda a: D.tsum(D.square(a)), 1, None),
    "sqrt": (lambda a: D.tsum(D.sqrt(a)), 1, "positive"),
    "softplus": (lambda a: D.tsum(D.softplus(a)), 1, None),
    "sigmoid": (lambda a: D.tsum(D.sigmoid(a)), 1, None),
    "elu": (lambda a: D.tsum(D.elu(a)), 1, None),
    "relu": (lambda a: D.tsum(D.relu(a)), 1, "away_from_zero"),
    "matmul": (lambda a, b: D.tsum(D.matmul(a, b)), "matmul", None),
    "transpose": (lambda a: D.tsum(D.square(D.transpose(a))), "matrix", None),
    "reshape": (lambda a: D.tsum(D.square(D.reshape(a, (1, 4)))), 1, None),
    "broadcast": (lambda a: D.tsum(D.square(D.broadcast_to(a, (3, 4)))), 1, None),
    "concat_slice": ("concat", None, None),
    "sum_axis": ("sum_axis", None, None),
    "mean": (lambda a: D.mean(D.square(a)), 1, None),
}


def _draw(rng, domain, shape=(4,)):
    v = rng.normal(size=shape)
    if domain == "positive":
        v = np.abs(v) + 0.5
    elif domain == "away_from_zero":
        v = np.where(np.abs(v) < 0.2, v + 0.5, v)
    return v


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, arity, domain = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        if arity == 2:
            a = _draw(rng, domain)
            b = _draw(rng, domain)

            def loss(av, a=a, b=b):
                return fn(D.Tensor(av), D.Tensor(b)).item()

            out = fn(ta := D.Tensor(a), D.Tensor(b))
            (g,) = D.backward(out, [ta])
            fd = D.finite_difference_gradient(loss, a)
        elif arity == "matmul":
            a = rng.normal(size=(3, 2))
            b = rng.normal(size=(2, 4))

            def loss(av, b=b):
                return fn(D.Tensor(av.reshape(3, 2)), D.Tensor(b)).item()

            out = fn(ta := D.Tensor(a), D.Tensor(b))
            (g,) = D.backward(out, [ta])
            fd = D.finite_difference_gradient(loss, a.ravel()).reshape(3, 2)
        elif arity == "matrix":
            a = rng.normal(size=(3, 2))

            def loss(av):
                return fn(D.Tensor(av.reshape(3, 2))).item()

            out = fn(ta := D.Tensor(a))
            (g,) = D.backward(out, [ta])
            fd = D.finite_difference_gradient(loss, a.ravel()).reshape(3, 2)
        elif fn == "concat":
            a = rng.normal(size=(3, 2))

            def loss(av):
                t = D.Tensor(av.reshape(3, 2))
                cat = D.concat_cols([t, D.square(t)])
                return D.tsum(D.square(D.slice_cols(cat, 1, 3))).item()

            ta = D.Tensor(a)
            cat = D.concat_cols([ta, D.square(ta)])
            (g,) = D.backward(D.tsum(D.square(D.slice_cols(cat, 1, 3))), [ta])
            fd = D.finite_difference_gradient(loss, a.ravel()).reshape(3, 2)
        elif fn == "sum_axis":
            a = rng.normal(size=(3, 2))

            def loss(av):
                t = D.Tensor(av.reshape(3, 2))
                return D.tsum(D.square(D.tsum(t, axis=1, keepdims=True))).item()

            ta = D.Tensor(a)
            out = D.tsum(D.square(D.tsum(ta, axis=1, keepdims=True)))
            (g,) = D.backward(out, [ta])
            fd = D.finite_difference_gradient(loss, a.ravel()).reshape(3, 2)
        else:
            a = _draw(rng, domain)

            def loss(av):
                return fn(D.Tensor(av)).item()

            out = fn(ta := D.Tensor(a))
            (g,) = D.backward(out, [ta])
            fd = D.finite_difference_gradient(loss, a)
        assert rel_err(g, fd) < 1e-4


def test_second_order_through_backward():
    # d/dW of the squared input-gradient of f(x) = sum(elu(xW)) matches FD
    rng = np.random.default_rng(11)
    w0 = rng.normal(size=(3, 4))
    x0 = rng.normal(size=(5, 3))

    def penalty(wflat):
        w = D.Tensor(wflat.reshape(3, 4))
        x = D.Tensor(x0)
        (gx,) = D.grad(D.tsum(D.elu(D.matmul(x, w))), [x])
        return D.tsum(D.square(gx)).item()

    w = D.Tensor(w0)
    x = D.Tensor(x0)
    (gx,) = D.grad(D.tsum(D.elu(D.matmul(x, w))), [x])
    (gw,) = D.backward(D.tsum(D.square(gx)), [w])
    fd = D.finite_difference_gradient(penalty, w0.ravel()).reshape(3, 4)
    assert rel_err(gw, fd) < 1e-4


def test_unreached_parameter_gets_exact_zero():
    w = D.Tensor(np.ones((2, 2)))
    u = D.Tensor(np.ones((3,)))
    (gu,) = D.backward(D.tsum(D.square(w)), [u])
    assert gu.shape == (3,)
    assert np.all(gu == 0.0)


def test_each_node_visited_once_in_shared_subgraphs():
    # y = s + s with s shared; gradient through s must be 2, not 4
    w = D.Tensor(np.array(1.5))
    s = D.square(w)
    (g,) = D.backward(D.add(s, s), [w])
    assert g == pytest.approx(2 * 2 * 1.5, abs=1e-12)
