import zlib

import numpy as np
import pytest

from scalecalc.graph import (
    AvgPool,
    BiasAdd,
    Conv,
    Dropout,
    EdgeShape,
    FixedScalar,
    LearnableScalar,
    Linear,
    MaxPool,
    NetworkGraph,
    ReLU,
    Residual,
    infer_shapes,
)
from scalecalc.verify.engine import (
    SampledNet,
    ShapeMismatchError,
    backward,
    conv_forward,
    expected_weight_shapes,
    run_network,
    weight_tangent,
    window_padding,
)
from scalecalc.zoo import strided_lenet

FD_STEP = 1e-6
FD_TOL = 1e-5


def naive_conv(x, w, stride):
    """Loop-by-loop convolution with the engine's padding convention."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    lo, _ = window_padding(k, stride)
    ho, wo = h // stride, wd // stride
    y = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                rr, ss = r * stride + i - lo, s * stride + j - lo
                                if 0 <= rr < h and 0 <= ss < wd:
                                    acc += w[oc, ic, i, j] * x[n, ic, rr, ss]
                    y[n, oc, r, s] = acc
    return y


@pytest.mark.parametrize("k, stride", [(1, 1), (2, 2), (3, 1), (3, 3), (3, 2), (2, 1)])
def test_conv_matches_loops(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k))
    np.testing.assert_allclose(conv_forward(x, w, stride), naive_conv(x, w, stride), rtol=1e-12, atol=1e-12)


def random_net(graph, rng):
    g = infer_shapes(graph)
    weights = {p: rng.standard_normal(s) * 0.7 for p, s in expected_weight_shapes(g).items()}
    net = SampledNet.from_arrays(g, weights)
    for p in net.biases:
        net.biases[p] = rng.standard_normal(net.biases[p].shape)
    for p in net.scalars:
        net.scalars[p] = float(rng.uniform(0.5, 2.0))
    return net


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def loss(net, x, v, seed):
    rng = np.random.default_rng(seed) if seed is not None else None
    return float(np.sum(run_network(net, x, rng).output * v))


def fd_grad(f, arr):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + FD_STEP
        up = f()
        arr[i] = old - FD_STEP
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * FD_STEP)
    return g


S = EdgeShape(2, 4, 4)
OP_CASES = {
    "linear": (Linear(3),),
    "conv1": (Conv(3, 1),),
    "conv3-same": (Conv(3, 3),),
    "conv2-stride2": (Conv(3, 2, 2),),
    "conv3-stride2": (Conv(2, 3, 2),),
    "avgpool2": (AvgPool(2, 2),),
    "avgpool3-same": (AvgPool(3, 1),),
    "maxpool2": (MaxPool(2, 2),),
    "maxpool3-same": (MaxPool(3, 1),),
    "relu": (ReLU(),),
    "dropout": (Dropout(0.3),),
    "scalar": (FixedScalar(1.7),),
    "learnable": (LearnableScalar(1.3),),
    "bias": (BiasAdd(),),
    "residual": (Residual(0.6, 0.8, (ReLU(), Conv(2, 3), BiasAdd()), (Conv(2, 1),)),),
    "residual-identity": (Residual(0.8, 0.6, (Conv(2, 1), LearnableScalar(0.9)), ()),),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradient_check(name):
    """Reverse-mode gradients of every op against central differences."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    # a trailing linear layer gives every op a non-trivial upstream gradient
    g = infer_shapes(NetworkGraph(S, OP_CASES[name] + (Linear(3),)))
    net = random_net(g, rng)
    x = rng.standard_normal((2,) + (S.n, S.h, S.w))
    v = rng.standard_normal((2, 3, 1, 1))
    seed = 7 if name == "dropout" else None
    trace = run_network(net, x, np.random.default_rng(seed) if seed is not None else None)
    grads = backward(net, trace, v)

    def f():
        return loss(net, x, v, seed)

    assert rel_err(grads.edges[()], fd_grad(f, x)) < FD_TOL
    for p, w in net.weights.items():
        assert rel_err(grads.weight[p], fd_grad(f, w)) < FD_TOL
    for p, b in net.biases.items():
        assert rel_err(grads.bias[p], fd_grad(f, b)) < FD_TOL
    for p in net.scalars:
        box = np.array([net.scalars[p]])

        def fs():
            net.scalars[p] = float(box[0])
            return f()

        fd = fd_grad(fs, box)
        net.scalars[p] = float(box[0])
        assert rel_err(np.array([grads.scalar[p]]), fd) < FD_TOL


def test_per_sample_squared_norms():
    rng = np.random.default_rng(3)
    g = infer_shapes(NetworkGraph(S, (Conv(3, 2, 2), BiasAdd(), ReLU(), LearnableScalar(1.2), Linear(4))))
    net = random_net(g, rng)
    x = rng.standard_normal((5, 2, 4, 4))
    v = rng.standard_normal((5, 4, 1, 1))
    full = backward(net, run_network(net, x), v)
    for b in range(5):
        one = backward(net, run_network(net, x[b : b + 1]), v[b : b + 1])
        for p in net.weights:
            assert full.weight_sq[p][b] == pytest.approx(np.sum(one.weight[p] ** 2), rel=1e-12)
        for p in net.biases:
            assert full.bias_sq[p][b] == pytest.approx(np.sum(one.bias[p] ** 2), rel=1e-12)
        for p in net.scalars:
            assert full.scalar_sq[p][b] == pytest.approx(one.scalar[p] ** 2, rel=1e-12)


@pytest.mark.parametrize("per_sample", [False, True])
def test_weight_tangent_matches_finite_differences(per_sample):
    rng = np.random.default_rng(11)
    g = infer_shapes(
        NetworkGraph(S, (Conv(3, 2, 2), ReLU(), Residual(0.6, 0.8, (Conv(3, 1), ReLU()), ()), MaxPool(2, 2), Linear(2)))
    )
    net = random_net(g, rng)
    x = rng.standard_normal((3, 2, 4, 4))
    trace = run_network(net, x)
    for layer in g.weighted_layers():
        w0 = net.weights[layer].copy()
        shape = ((3,) if per_sample else ()) + w0.shape
        d = rng.standard_normal(shape)
        t = weight_tangent(net, trace, layer, d)
        fd = np.zeros_like(t)
        for b in range(3):
            db = d[b] if per_sample else d
            net.weights[layer] = w0 + FD_STEP * db
            up = run_network(net, x[b : b + 1]).output
            net.weights[layer] = w0 - FD_STEP * db
            down = run_network(net, x[b : b + 1]).output
            fd[b] = ((up - down) / (2 * FD_STEP))[0]
        net.weights[layer] = w0
        assert rel_err(t, fd) < FD_TOL


def test_weight_tangent_errors():
    g = infer_shapes(NetworkGraph(S, (Conv(3, 1), ReLU())))
    net = random_net(g, np.random.default_rng(0))
    trace = run_network(net, np.ones((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        weight_tangent(net, trace, (1,), np.ones((3, 2, 1, 1)))
    with pytest.raises(ShapeMismatchError):
        weight_tangent(net, trace, (0,), np.ones((3, 2, 2, 2)))


class TestRunNetwork:
    def test_identity_scalar(self):
        g = infer_shapes(NetworkGraph(S, (FixedScalar(1.0),)))
        x = np.random.default_rng(0).standard_normal((4, 2, 4, 4))
        np.testing.assert_array_equal(run_network(SampledNet.from_arrays(g, {}), x).output, x)

    def test_one_by_one_conv(self):
        g = infer_shapes(NetworkGraph(EdgeShape(1), (Conv(1, 1),)))
        net = SampledNet.from_arrays(g, {(0,): np.array([2.0])})
        assert run_network(net, np.full((1, 1, 1, 1), 3.0)).output.item() == 6.0

    def test_lenet_output_shape(self):
        g = strided_lenet()
        rng = np.random.default_rng(0)
        net = random_net(g, rng)
        out = run_network(net, rng.standard_normal((8, 3, 32, 32))).output
        s = g.output_shape
        assert out.shape == (8, s.n, s.h, s.w) == (8, 10, 1, 1)

    def test_shape_mismatch(self):
        g = infer_shapes(NetworkGraph(S, (ReLU(),)))
        with pytest.raises(ShapeMismatchError):
            run_network(SampledNet.from_arrays(g, {}), np.zeros((1, 3, 4, 4)))

    def test_dropout_inactive_without_rng(self):
        g = infer_shapes(NetworkGraph(S, (Dropout(0.5),)))
        x = np.ones((2, 2, 4, 4))
        np.testing.assert_array_equal(run_network(SampledNet.from_arrays(g, {}), x).output, x)
        out = run_network(SampledNet.from_arrays(g, {}), x, np.random.default_rng(0)).output
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_relu_derivative_at_zero(self):
        g = infer_shapes(NetworkGraph(EdgeShape(1), (ReLU(),)))
        net = SampledNet.from_arrays(g, {})
        grads = backward(net, run_network(net, np.zeros((1, 1, 1, 1))), np.ones((1, 1, 1, 1)))
        assert grads.edges[()].item() == 0.0
