"""Example networks used by the tests, the acceptance suite and the CLI docs."""

from __future__ import annotations

import numpy as np

from .graph import (
    AvgPool,
    BiasAdd,
    Conv,
    Dropout,
    EdgeShape,
    FixedScalar,
    LearnableScalar,
    Linear,
    NetworkGraph,
    ReLU,
    Residual,
    infer_shapes,
)


def strided_lenet() -> NetworkGraph:
    """LeNet-5 variant with stride == kernel everywhere, 3x32x32 input."""
    ops = (
        Conv(6, k=4, stride=4), BiasAdd(), ReLU(),
        Conv(16, k=2, stride=2), BiasAdd(), ReLU(),
        Linear(120), BiasAdd(), ReLU(),
        Linear(84), BiasAdd(), ReLU(),
        Linear(10), BiasAdd(),
    )
    return infer_shapes(NetworkGraph(EdgeShape(3, 32, 32), ops))


def _bottleneck(w: int, out: int, alpha: float, beta: float, downsample: bool = False, project: bool = False):
    main = (
        ReLU(), BiasAdd(), Conv(w, 1),
        ReLU(), BiasAdd(), Conv(w, 3),
        ReLU(), BiasAdd(), Conv(out, 1),
        LearnableScalar(1.0),
    )
    if downsample:
        main = (AvgPool(2, 2),) + main
        shortcut = (AvgPool(2, 2), BiasAdd(), Conv(out, 1))
    elif project:
        shortcut = (BiasAdd(), Conv(out, 1))
    else:
        shortcut = ()
    return Residual(alpha, beta, main, shortcut)


def residual_net() -> NetworkGraph:
    """Three pre-activation bottleneck blocks (one downsampling), 3x8x8 input."""
    ops = (
        Conv(16, k=2, stride=2), BiasAdd(),
        _bottleneck(8, 16, 0.8, 0.6),
        _bottleneck(16, 32, 0.6, 0.8, downsample=True),
        _bottleneck(8, 32, 0.8, 0.6),
        ReLU(), Linear(10), BiasAdd(),
    )
    return infer_shapes(NetworkGraph(EdgeShape(3, 8, 8), ops))


def telescoping_net() -> NetworkGraph:
    """Bias-free stack whose geometric-init output moment telescopes to sqrt(3/512)."""
    ops = (
        ReLU(), Conv(32, k=2, stride=2),
        ReLU(), Conv(128, k=4, stride=4),
        ReLU(), Linear(256),
        ReLU(), Linear(512),
    )
    return infer_shapes(NetworkGraph(EdgeShape(3, 8, 8), ops))


EXAMPLES = {
    "strided_lenet": strided_lenet,
    "residual_net": residual_net,
    "telescoping_net": telescoping_net,
}


def _random_seq(rng: np.random.Generator, n: int, res: int, depth: int, allow_residual: bool):
    ops = []
    for _ in range(int(rng.integers(1, 5))):
        choice = rng.choice(["conv", "linear", "relu", "bias", "scalar", "dropout", "pool", "learn", "res"])
        if choice == "conv":
            out = int(rng.integers(1, 9))
            ks = [k for k in (1, 2, 3) if k <= res]
            k = int(rng.choice(ks))
            stride = k if (k > 1 and res % k == 0 and rng.random() < 0.5) else 1
            ops.append(Conv(out, k, stride))
            n, res = out, res // stride
        elif choice == "linear" and depth == 0 and not allow_residual:
            pass
        elif choice == "relu":
            ops.append(ReLU())
        elif choice == "bias":
            ops.append(BiasAdd())
        elif choice == "scalar":
            ops.append(FixedScalar(float(rng.uniform(0.3, 3.0))))
        elif choice == "dropout":
            ops.append(Dropout(float(rng.uniform(0.0, 0.5))))
        elif choice == "pool" and res % 2 == 0:
            ops.append(AvgPool(2, 2))
            res //= 2
        elif choice == "learn":
            ops.append(LearnableScalar(float(rng.uniform(0.5, 2.0))))
        elif choice == "res" and allow_residual and depth < 2:
            theta = rng.uniform(0.2, 1.3)
            main, n_out, res_out = _random_seq(rng, n, res, depth + 1, allow_residual)
            # shortcut must land on the same shape as the main branch
            shortcut = []
            if res_out != res:
                shortcut.append(AvgPool(res // res_out, res // res_out))
            if n_out != n or rng.random() < 0.3:
                shortcut.append(Conv(n_out, 1))
            ops.append(Residual(float(np.cos(theta)), float(np.sin(theta)), tuple(main), tuple(shortcut)))
            n, res = n_out, res_out
    return ops, n, res


def random_graph(rng: np.random.Generator, allow_residual: bool = True, max_res: int = 8) -> NetworkGraph:
    """Random analysable network; always contains at least one weighted layer."""
    n0 = int(rng.integers(1, 5))
    res0 = int(rng.choice([r for r in (1, 2, 4, 8) if r <= max_res]))
    ops, n, res = _random_seq(rng, n0, res0, 0, allow_residual)
    ops.append(Conv(int(rng.integers(1, 9)), 1))
    if rng.random() < 0.5:
        ops += [ReLU(), Linear(int(rng.integers(1, 7))), BiasAdd()]
    return infer_shapes(NetworkGraph(EdgeShape(n0, res0, res0), tuple(ops)))
