"""Random network generators shared by the property and acceptance tests."""

from __future__ import annotations

import numpy as np

from scalecalc.graph import (
    AvgPool,
    BiasAdd,
    Conv,
    Dropout,
    EdgeShape,
    FixedScalar,
    Linear,
    NetworkGraph,
    ReLU,
    Residual,
    infer_shapes,
)


def with_random_weights(graph: NetworkGraph, rng: np.random.Generator) -> dict:
    """Arbitrary positive weight second moments for every weighted layer."""
    return {p: float(rng.uniform(0.05, 2.0)) for p in graph.weighted_layers()}


def zero_mean_graph(rng: np.random.Generator, widths: tuple = (8, 24), resolutions: tuple = (4, 8)) -> NetworkGraph:
    """Random net whose ReLU and pooling inputs are zero-mean over weight draws.

    Pooling only touches the raw input; every ReLU input is a bias-free
    weighted-layer output or a residual sum of such outputs.
    """
    res0 = res = int(rng.choice(resolutions))
    n = int(rng.integers(2, 5))
    ops: list = []
    if rng.random() < 0.5:
        ops.append(AvgPool(2, 2))
        res //= 2
    # patchifying first conv: fan-in n k^2 is not far below the width
    width = int(rng.integers(widths[0], widths[1] + 1))
    k = 4 if (res >= 8 and rng.random() < 0.5) else 2
    ops += [Conv(width, k, k), BiasAdd()]
    res //= k
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.3:
            # pre-activation block: the shortcut carries the zero-mean signal
            main = (ReLU(), Conv(width, 1), BiasAdd(), ReLU(), Conv(width, 3), FixedScalar(float(rng.uniform(0.5, 2.0))))
            theta = float(rng.uniform(0.3, 1.2))
            ops.append(Residual(float(np.cos(theta)), float(np.sin(theta)), main, ()))
            continue
        ops.append(ReLU())
        if rng.random() < 0.3:
            ops.append(Dropout(float(rng.uniform(0.05, 0.3))))
        if rng.random() < 0.3:
            ops.append(FixedScalar(float(rng.uniform(0.5, 2.0))))
        width = int(rng.integers(widths[0], widths[1] + 1))
        k = int(rng.choice([1, 2, 3])) if res >= 3 else 1
        stride = k if (k > 1 and res % k == 0 and rng.random() < 0.6) else 1
        ops += [Conv(width, k, stride), BiasAdd()]
        res //= stride
    ops += [ReLU(), Linear(int(rng.integers(4, 17))), BiasAdd()]
    return infer_shapes(NetworkGraph(EdgeShape(n, res0, res0), tuple(ops)))

