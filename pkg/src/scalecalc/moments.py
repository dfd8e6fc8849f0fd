"""Analytic propagation of uncentered second moments through a network.

Forward moments are ``E[x^2]`` of activations; backward moments are
``E[dx^2]`` of back-propagated gradients.  Rules assume i.i.d. entries,
zero-mean symmetric weights, zero biases and gradients uncorrelated with
activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .graph import (
    BRANCHES,
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
    Op,
    Path,
    ReLU,
    Residual,
    branch_output_key,
    infer_shapes,
    input_key,
    output_shape,
    path_str,
)


class UnsupportedOpError(ValueError):
    pass


class MissingWeightError(KeyError):
    pass


@dataclass(frozen=True)
class MomentPair:
    fwd: float
    bwd: float

    def __post_init__(self):
        for v in (self.fwd, self.bwd):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"moments must be finite and non-negative, got {self}")


@dataclass(frozen=True)
class MomentTape:
    graph: NetworkGraph
    pairs: Mapping[Path, MomentPair]
    weights: Mapping[Path, float]

    def __getitem__(self, key: Path) -> MomentPair:
        return self.pairs[key]

    @property
    def output(self) -> MomentPair:
        return self.pairs[self.graph.output_key]

    def sigma(self, key: Path) -> float:
        return activation_scale(self.graph.shape(key), self.pairs[key])


def activation_scale(shape: EdgeShape, m: MomentPair) -> float:
    return shape.n * shape.rho2 * m.bwd * m.fwd


# ------------------------------------------------------------ single ops


def _weighted_factors(op, s_in: EdgeShape, s_out: EdgeShape) -> tuple[float, float]:
    # (fan_in * k^2, (rho_out^2 / rho_in^2) * fan_out * k^2) for the linear maps
    if isinstance(op, Linear):
        return s_in.size, op.out
    k2 = op.k * op.k
    return s_in.n * k2, s_out.rho2 / s_in.rho2 * op.out * k2


def forward_rule(op: Op, fwd: float, s_in: EdgeShape, ew2: float | None = None) -> float:
    if isinstance(op, (Conv, Linear)):
        if ew2 is None:
            raise MissingWeightError(f"no weight second moment for {op}")
        fan, _ = _weighted_factors(op, s_in, output_shape(op, s_in))
        return fan * ew2 * fwd
    if isinstance(op, ReLU):
        return fwd / 2
    if isinstance(op, Dropout):
        return fwd / (1 - op.p)
    if isinstance(op, FixedScalar):
        return fwd * op.value**2
    if isinstance(op, LearnableScalar):
        return fwd * op.init**2
    if isinstance(op, AvgPool):
        return fwd / op.k**2
    if isinstance(op, BiasAdd):
        return fwd
    if isinstance(op, MaxPool):
        raise UnsupportedOpError("max pooling has no analytic moment rule")
    raise UnsupportedOpError(f"no single-op rule for {type(op).__name__}")


def backward_rule(op: Op, bwd_out: float, s_in: EdgeShape, ew2: float | None = None) -> float:
    """Gradient moment at the op input given the moment at its output."""
    s_out = output_shape(op, s_in) if not isinstance(op, Residual) else s_in
    if isinstance(op, (Conv, Linear)):
        if ew2 is None:
            raise MissingWeightError(f"no weight second moment for {op}")
        _, fan = _weighted_factors(op, s_in, s_out)
        return fan * ew2 * bwd_out
    if isinstance(op, ReLU):
        return bwd_out / 2
    if isinstance(op, Dropout):
        return bwd_out / (1 - op.p)
    if isinstance(op, FixedScalar):
        return bwd_out * op.value**2
    if isinstance(op, LearnableScalar):
        return bwd_out * op.init**2
    if isinstance(op, AvgPool):
        # each input element feeds (k/stride)^2 windows, each with weight 1/k^2
        return s_out.rho2 / s_in.rho2 * bwd_out / op.k**2
    if isinstance(op, BiasAdd):
        return bwd_out
    if isinstance(op, MaxPool):
        raise UnsupportedOpError("max pooling has no analytic moment rule")
    raise UnsupportedOpError(f"no single-op rule for {type(op).__name__}")


def op_transfer(op: Op, m: MomentPair, shape: EdgeShape, ew2: float | None = None) -> MomentPair:
    """Apply one op to a moment pair.

    ``m.fwd`` is the forward moment entering the op and ``m.bwd`` the gradient
    moment arriving at its output; the result holds the forward moment leaving
    the op and the gradient moment at its input.  ``shape`` is the input shape.
    Residual blocks need their branch weights and go through
    :func:`propagate` instead.
    """
    if isinstance(op, Residual):
        raise UnsupportedOpError("residual blocks are propagated with forward_moments/backward_moments")
    return MomentPair(forward_rule(op, m.fwd, shape, ew2), backward_rule(op, m.bwd, shape, ew2))


# ------------------------------------------------------------ whole graphs


def _shaped(graph: NetworkGraph) -> NetworkGraph:
    return graph if graph.shaped else infer_shapes(graph)


def _ew2(weights, path, op):
    if isinstance(op, (Conv, Linear)):
        if path not in weights:
            raise MissingWeightError(f"missing weight second moment for layer {path_str(path)}")
        ew2 = weights[path]
        if not ew2 > 0:
            raise ValueError(f"weight second moment must be positive at {path_str(path)}")
        return ew2
    return None


def _fwd_seq(g, ops, prefix, m, weights, out):
    for i, op in enumerate(ops):
        path = prefix + (i,)
        if isinstance(op, Residual):
            ends = {}
            for name in BRANCHES:
                entry = path + (name,)
                out[entry] = m
                ends[name] = _fwd_seq(g, op.branch(name), entry, m, weights, out)
            m = op.alpha**2 * ends["shortcut"] + op.beta**2 * ends["main"]
        else:
            m = forward_rule(op, m, g.shape(input_key(path)), _ew2(weights, path, op))
        out[path] = m
    return m


def _bwd_seq(g, ops, prefix, b, weights, out):
    # b is the gradient moment at the sequence output
    for i in reversed(range(len(ops))):
        op = ops[i]
        path = prefix + (i,)
        out[path] = b
        if isinstance(op, Residual):
            total = 0.0
            for name in BRANCHES:
                entry = path + (name,)
                gain = op.branch_gain(name)
                total += _bwd_seq(g, op.branch(name), entry, gain**2 * b, weights, out)
            b = total
        else:
            b = backward_rule(op, b, g.shape(input_key(path)), _ew2(weights, path, op))
    out[prefix] = b
    return b


def forward_moments(graph: NetworkGraph, weights: Mapping[Path, float], input_m2: float = 1.0) -> dict:
    """Forward second moment on every edge."""
    if not input_m2 > 0:
        raise ValueError("input second moment must be positive")
    g = _shaped(graph)
    out = {(): input_m2}
    _fwd_seq(g, g.ops, (), input_m2, weights, out)
    return out


def backward_moments(graph: NetworkGraph, weights: Mapping[Path, float], output_g2: float = 1.0) -> dict:
    """Back-propagated gradient second moment on every edge."""
    if not output_g2 > 0:
        raise ValueError("output gradient second moment must be positive")
    g = _shaped(graph)
    out: dict = {}
    _bwd_seq(g, g.ops, (), output_g2, weights, out)
    return out


def propagate(
    graph: NetworkGraph,
    weights: Mapping[Path, float] | None = None,
    input_m2: float = 1.0,
    output_g2: float = 1.0,
) -> MomentTape:
    """Both halves of the tape.  ``weights`` defaults to the ops' ``init_m2``."""
    g = _shaped(graph)
    if weights is None:
        weights = g.weights()
    fwd = forward_moments(g, weights, input_m2)
    bwd = backward_moments(g, weights, output_g2)
    pairs = {key: MomentPair(fwd[key], bwd[key]) for key in g.edges}
    return MomentTape(g, pairs, dict(weights))


def branch_end(g: NetworkGraph, block_path: Path, name: str) -> Path:
    block = g.op(block_path)
    return branch_output_key(block_path + (name,), block.branch(name))
