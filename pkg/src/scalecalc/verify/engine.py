"""Dense numpy engine: forward pass, reverse-mode gradients and forward-mode tangents.

Activations are ``(batch, channels, h, w)`` arrays; a linear layer flattens its
input in channel-major order and produces ``(batch, out, 1, 1)``.  Strided
windows are padded with ``max(k - stride, 0)`` zeros split low/high so the
output resolution is exactly ``input / stride``.

Per-sample weight-gradient squared norms are computed alongside the summed
gradients; the loss is a sum over samples, so every activation gradient is
already per-sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import (
    AvgPool,
    BiasAdd,
    Conv,
    Dropout,
    FixedScalar,
    LearnableScalar,
    Linear,
    MaxPool,
    NetworkGraph,
    Path,
    ReLU,
    Residual,
    infer_shapes,
    input_key,
    path_str,
)


class ShapeMismatchError(ValueError):
    pass


def window_padding(k: int, stride: int) -> tuple[int, int]:
    total = max(k - stride, 0)
    return total // 2, total - total // 2


def _padded(x: np.ndarray, k: int, stride: int, fill: float = 0.0) -> np.ndarray:
    lo, hi = window_padding(k, stride)
    if lo == hi == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)), constant_values=fill)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int):
    for i in range(k):
        for j in range(k):
            yield i, j, xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]


def _unpad(dxp: np.ndarray, k: int, stride: int) -> np.ndarray:
    lo, hi = window_padding(k, stride)
    h, w = dxp.shape[2], dxp.shape[3]
    return dxp[:, :, lo : h - hi, lo : w - hi]


# ---------------------------------------------------------------- kernels


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    b, _, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = h // stride, wd // stride
    y = np.zeros((b, o, ho, wo))
    for i, j, patch in _windows(_padded(x, k, stride), k, stride, ho, wo):
        y += np.einsum("bchw,oc->bohw", patch, w[:, :, i, j], optimize=True)
    return y


def conv_backward(x, w, stride, dy, need_dx=True, need_dw=True):
    """Returns ``(dx, dw_sum, per_sample_sq)``; skipped parts are ``None``."""
    k = w.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]
    xp = _padded(x, k, stride)
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w) if need_dw else None
    sq = np.zeros(x.shape[0]) if need_dw else None
    for i, j, patch in _windows(xp, k, stride, ho, wo):
        if need_dx:
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                "bohw,oc->bchw", dy, w[:, :, i, j], optimize=True
            )
        if need_dw:
            g = np.einsum("bohw,bchw->boc", dy, patch, optimize=True)
            dw[:, :, i, j] = g.sum(axis=0)
            sq += np.einsum("boc,boc->b", g, g)
    dx = _unpad(dxp, k, stride) if need_dx else None
    return dx, dw, sq


def linear_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    return (flat @ w.T)[:, :, None, None]


def linear_backward(x, w, dy, need_dx=True, need_dw=True):
    flat = x.reshape(x.shape[0], -1)
    g = dy.reshape(dy.shape[0], -1)
    dx = (g @ w).reshape(x.shape) if need_dx else None
    dw = g.T @ flat if need_dw else None
    # rank-one per-sample gradient: |g_b x_b^T|^2 = |g_b|^2 |x_b|^2
    sq = np.einsum("bi,bi->b", g, g) * np.einsum("bi,bi->b", flat, flat) if need_dw else None
    return dx, dw, sq


def avgpool_forward(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    ho, wo = x.shape[2] // stride, x.shape[3] // stride
    y = np.zeros(x.shape[:2] + (ho, wo))
    for _, _, patch in _windows(_padded(x, k, stride), k, stride, ho, wo):
        y += patch
    return y / (k * k)


def avgpool_backward(x_shape, k: int, stride: int, dy: np.ndarray) -> np.ndarray:
    lo, hi = window_padding(k, stride)
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + lo + hi, w + lo + hi))
    ho, wo = dy.shape[2], dy.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dy
    return _unpad(dxp, k, stride) / (k * k)


def maxpool_forward(x: np.ndarray, k: int, stride: int):
    """Returns the pooled output and the flat window offset of each maximum."""
    ho, wo = x.shape[2] // stride, x.shape[3] // stride
    patches = np.stack([p for _, _, p in _windows(_padded(x, k, stride, -np.inf), k, stride, ho, wo)])
    arg = patches.argmax(axis=0)
    return np.take_along_axis(patches, arg[None], axis=0)[0], arg


def maxpool_select(t: np.ndarray, k: int, stride: int, arg: np.ndarray) -> np.ndarray:
    ho, wo = arg.shape[2], arg.shape[3]
    patches = np.stack([p for _, _, p in _windows(_padded(t, k, stride), k, stride, ho, wo)])
    return np.take_along_axis(patches, arg[None], axis=0)[0]


def maxpool_backward(x_shape, k: int, stride: int, arg: np.ndarray, dy: np.ndarray) -> np.ndarray:
    lo, hi = window_padding(k, stride)
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + lo + hi, w + lo + hi))
    ho, wo = dy.shape[2], dy.shape[3]
    for off in range(k * k):
        i, j = divmod(off, k)
        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == off, dy, 0.0)
    return _unpad(dxp, k, stride)


# ---------------------------------------------------------------- networks


@dataclass
class SampledNet:
    """Concrete parameters for a shaped graph."""

    graph: NetworkGraph
    weights: dict  # path -> (out, in, k, k) or (out, in_size)
    biases: dict  # path -> (channels,)
    scalars: dict  # learnable path -> value
    seed: object = None
    distribution: str = "gaussian"
    notes: list = field(default_factory=list)

    @classmethod
    def from_arrays(cls, graph: NetworkGraph, weights: dict, biases: dict | None = None) -> "SampledNet":
        g = graph if graph.shaped else infer_shapes(graph)
        shapes = expected_weight_shapes(g)
        ws = {}
        for path, shape in shapes.items():
            arr = np.asarray(weights[path], dtype=float).reshape(shape)
            ws[path] = arr
        bs = {p: np.zeros(g.shape(p).n) for p, op in g.walk() if isinstance(op, BiasAdd)}
        for p, v in (biases or {}).items():
            bs[p] = np.asarray(v, dtype=float).reshape(bs[p].shape)
        ss = {p: float(op.init) for p, op in g.walk() if isinstance(op, LearnableScalar)}
        return cls(g, ws, bs, ss)


def expected_weight_shapes(g: NetworkGraph) -> dict:
    out = {}
    for path, op in g.walk():
        s_in = g.shape(input_key(path))
        if isinstance(op, Conv):
            out[path] = (op.out, s_in.n, op.k, op.k)
        elif isinstance(op, Linear):
            out[path] = (op.out, s_in.size)
    return out


@dataclass
class Trace:
    """Everything the reverse and tangent passes need from one forward pass."""

    output: np.ndarray
    acts: dict  # edge -> activation
    masks: dict  # path -> relu/dropout mask or maxpool argmax


def _check_input(net: SampledNet, x: np.ndarray):
    s = net.graph.input_shape
    if x.ndim != 4 or x.shape[1:] != (s.n, s.h, s.w):
        raise ShapeMismatchError(f"input shape {x.shape[1:]} does not match network input {(s.n, s.h, s.w)}")


def _forward_seq(net, ops, prefix, h, acts, masks, dropout_rng):
    for i, op in enumerate(ops):
        path = prefix + (i,)
        if isinstance(op, Residual):
            ends = {}
            for name in ("main", "shortcut"):
                entry = path + (name,)
                acts[entry] = h
                ends[name] = _forward_seq(net, op.branch(name), entry, h, acts, masks, dropout_rng)
            h = op.alpha * ends["shortcut"] + op.beta * ends["main"]
        elif isinstance(op, Conv):
            h = conv_forward(h, net.weights[path], op.stride)
        elif isinstance(op, Linear):
            h = linear_forward(h, net.weights[path])
        elif isinstance(op, ReLU):
            masks[path] = h > 0
            h = np.where(masks[path], h, 0.0)
        elif isinstance(op, Dropout):
            if dropout_rng is not None and op.p > 0:
                masks[path] = (dropout_rng.random(h.shape) >= op.p) / (1 - op.p)
                h = h * masks[path]
        elif isinstance(op, FixedScalar):
            h = op.value * h
        elif isinstance(op, LearnableScalar):
            h = net.scalars[path] * h
        elif isinstance(op, BiasAdd):
            h = h + net.biases[path][None, :, None, None]
        elif isinstance(op, AvgPool):
            h = avgpool_forward(h, op.k, op.stride)
        elif isinstance(op, MaxPool):
            h, masks[path] = maxpool_forward(h, op.k, op.stride)
        else:  # pragma: no cover - parse_spec admits nothing else
            raise TypeError(f"unsupported op {op!r}")
        acts[path] = h
    return h


def run_network(net: SampledNet, x: np.ndarray, dropout_rng: np.random.Generator | None = None) -> Trace:
    """Forward pass.  Dropout is active only when ``dropout_rng`` is given."""
    x = np.asarray(x, dtype=float)
    _check_input(net, x)
    acts = {(): x}
    masks: dict = {}
    out = _forward_seq(net, net.graph.ops, (), x, acts, masks, dropout_rng)
    return Trace(out, acts, masks)


def _input_act(trace: Trace, path: Path) -> np.ndarray:
    return trace.acts[input_key(path)]


def _inject(op, x, direction, per_sample):
    if not per_sample:
        return conv_forward(x, direction, op.stride) if isinstance(op, Conv) else linear_forward(x, direction)
    if isinstance(op, Linear):
        return np.einsum("bi,boi->bo", x.reshape(len(x), -1), direction)[:, :, None, None]
    k, stride = op.k, op.stride
    ho, wo = x.shape[2] // stride, x.shape[3] // stride
    y = np.zeros((len(x), direction.shape[1], ho, wo))
    for i, j, patch in _windows(_padded(x, k, stride), k, stride, ho, wo):
        y += np.einsum("bchw,boc->bohw", patch, direction[:, :, :, i, j], optimize=True)
    return y


@dataclass
class Grads:
    edges: dict  # edge -> gradient of the summed loss
    weight: dict  # path -> summed weight gradient
    weight_sq: dict  # path -> per-sample squared gradient norms, shape (batch,)
    bias: dict  # path -> summed bias gradient
    bias_sq: dict  # path -> per-sample squared norms
    scalar: dict  # learnable path -> summed gradient
    scalar_sq: dict


def _backward_seq(net, trace, ops, prefix, g, want, gr):
    for i in reversed(range(len(ops))):
        op = ops[i]
        path = prefix + (i,)
        gr.edges[path] = g
        x = _input_act(trace, path) if not isinstance(op, Residual) else None
        if isinstance(op, Residual):
            g = sum(
                _backward_seq(net, trace, op.branch(n), path + (n,), op.branch_gain(n) * g, want, gr)
                for n in ("main", "shortcut")
            )
        elif isinstance(op, (Conv, Linear)):
            need_dw = want is None or path in want
            if isinstance(op, Conv):
                g, dw, sq = conv_backward(x, net.weights[path], op.stride, g, need_dw=need_dw)
            else:
                g, dw, sq = linear_backward(x, net.weights[path], g, need_dw=need_dw)
            if need_dw:
                gr.weight[path], gr.weight_sq[path] = dw, sq
        elif isinstance(op, ReLU):
            g = np.where(trace.masks[path], g, 0.0)
        elif isinstance(op, Dropout):
            if path in trace.masks:
                g = g * trace.masks[path]
        elif isinstance(op, FixedScalar):
            g = op.value * g
        elif isinstance(op, LearnableScalar):
            per = np.einsum("bchw,bchw->b", g, x)
            gr.scalar[path], gr.scalar_sq[path] = per.sum(), per**2
            g = net.scalars[path] * g
        elif isinstance(op, BiasAdd):
            per = g.sum(axis=(2, 3))
            gr.bias[path], gr.bias_sq[path] = per.sum(axis=0), np.einsum("bc,bc->b", per, per)
        elif isinstance(op, AvgPool):
            g = avgpool_backward(x.shape, op.k, op.stride, g)
        elif isinstance(op, MaxPool):
            g = maxpool_backward(x.shape, op.k, op.stride, trace.masks[path], g)
    gr.edges[prefix] = g
    return g


def backward(net: SampledNet, trace: Trace, dy: np.ndarray, layers=None) -> Grads:
    """Reverse pass from output gradient ``dy``.

    ``layers`` restricts weight-gradient work to the given paths (``None`` = all).
    """
    dy = np.asarray(dy, dtype=float).reshape(trace.output.shape)
    want = None if layers is None else set(layers)
    gr = Grads({}, {}, {}, {}, {}, {}, {})
    _backward_seq(net, trace, net.graph.ops, (), dy, want, gr)
    return gr


def weight_tangent(net: SampledNet, trace: Trace, layer: Path, direction: np.ndarray) -> np.ndarray:
    """Directional derivative of the output w.r.t. the weights of ``layer``.

    ``direction`` has the weight shape, or carries a leading batch axis to
    give every sample its own direction.  Nonlinearities are frozen at the
    recorded masks, so this is exact on the piecewise-linear region of the
    forward pass.
    """
    target = net.graph.op(layer)
    if not isinstance(target, (Conv, Linear)):
        raise ValueError(f"{path_str(layer)} is not a weighted layer")
    direction = np.asarray(direction, dtype=float)
    wshape = net.weights[layer].shape
    batch = trace.output.shape[0]
    if direction.shape not in (wshape, (batch,) + wshape):
        raise ShapeMismatchError(
            f"probe shape {direction.shape} does not match weights {net.weights[layer].shape} at {path_str(layer)}"
        )

    out = _tangent_seq(net, trace, net.graph.ops, (), None, layer, direction, direction.ndim > len(wshape))
    return np.zeros_like(trace.output) if out is None else out


def _tangent_op(net, trace, op, path, t):
    if isinstance(op, Conv):
        return conv_forward(t, net.weights[path], op.stride)
    if isinstance(op, Linear):
        return linear_forward(t, net.weights[path])
    if isinstance(op, ReLU):
        return np.where(trace.masks[path], t, 0.0)
    if isinstance(op, Dropout):
        return t * trace.masks[path] if path in trace.masks else t
    if isinstance(op, FixedScalar):
        return op.value * t
    if isinstance(op, LearnableScalar):
        return net.scalars[path] * t
    if isinstance(op, BiasAdd):
        return t
    if isinstance(op, AvgPool):
        return avgpool_forward(t, op.k, op.stride)
    if isinstance(op, MaxPool):
        return maxpool_select(t, op.k, op.stride, trace.masks[path])
    raise TypeError(f"unsupported op {op!r}")


def _tangent_seq(net, trace, ops, prefix, t, layer, direction, per_sample):
    for i, op in enumerate(ops):
        path = prefix + (i,)
        if isinstance(op, Residual):
            ends = {
                n: _tangent_seq(net, trace, op.branch(n), path + (n,), t, layer, direction, per_sample)
                for n in ("main", "shortcut")
            }
            parts = [gain * ends[n] for n, gain in (("shortcut", op.alpha), ("main", op.beta)) if ends[n] is not None]
            t = sum(parts) if parts else None
            continue
        if t is not None:
            t = _tangent_op(net, trace, op, path, t)
        if path == layer:
            inj = _inject(op, _input_act(trace, path), direction, per_sample)
            t = inj if t is None else t + inj
    return t
