"""Network intermediate representation, spec parsing, shape inference and lint.

A network is a single-input, single-output sequence of typed ops.  Residual
ops nest two further sequences (``main`` and ``shortcut``) whose outputs are
summed as ``alpha * shortcut(x) + beta * main(x)``.

Every tensor between two ops is an *edge*.  Edges are addressed by tuples:

* ``()`` is the network input;
* ``(i,)`` is the output of top-level op ``i``;
* ``(i, "main")`` / ``(i, "shortcut")`` is the entry of a residual branch
  (same shape and forward signal as the block input, its own gradient);
* ``(i, "main", j)`` is the output of op ``j`` inside that branch, and so on.

The same tuples address ops (an op is identified with its output edge).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Union

Path = tuple

BRANCHES = ("main", "shortcut")


class SpecError(ValueError):
    """Raised for malformed or inconsistent network documents."""

    def __init__(self, message: str, position: str | None = None):
        self.message = message
        self.position = position
        super().__init__(f"{position}: {message}" if position else message)


class ShapeError(SpecError):
    pass


# --------------------------------------------------------------------- ops


@dataclass(frozen=True)
class Linear:
    out: int
    init_m2: float | None = None
    kind = "linear"


@dataclass(frozen=True)
class Conv:
    out: int
    k: int
    stride: int = 1
    init_m2: float | None = None
    kind = "conv"


@dataclass(frozen=True)
class AvgPool:
    k: int
    stride: int
    kind = "avgpool"


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int
    kind = "maxpool"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class Dropout:
    p: float
    kind = "dropout"


@dataclass(frozen=True)
class FixedScalar:
    value: float
    reason: str | None = None
    kind = "scalar"


@dataclass(frozen=True)
class LearnableScalar:
    init: float
    reason: str | None = None
    kind = "learnable"


@dataclass(frozen=True)
class BiasAdd:
    kind = "bias"


@dataclass(frozen=True)
class Residual:
    alpha: float
    beta: float
    main: tuple = ()
    shortcut: tuple = ()
    kind = "residual"

    def __post_init__(self):
        if abs(self.alpha**2 + self.beta**2 - 1.0) > 1e-9:
            raise SpecError(
                f"alpha²+beta² must equal 1 (got {self.alpha**2 + self.beta**2:.12g})"
            )

    def branch(self, name: str) -> tuple:
        return self.main if name == "main" else self.shortcut

    def branch_gain(self, name: str) -> float:
        return self.beta if name == "main" else self.alpha


Op = Union[
    Linear, Conv, AvgPool, MaxPool, ReLU, Dropout, FixedScalar, LearnableScalar, BiasAdd, Residual
]

WEIGHTED = (Conv, Linear)
# Ops that keep the activation scaling factor.
SCALING_SAFE = (Linear, Conv, AvgPool, ReLU, Dropout, FixedScalar, LearnableScalar, BiasAdd, Residual)


@dataclass(frozen=True)
class EdgeShape:
    """Channels ``n`` and spatial extent ``h x w`` of an activation tensor."""

    n: int
    h: int = 1
    w: int = 1

    @property
    def rho2(self) -> int:
        return self.h * self.w

    @property
    def rho(self) -> float:
        return math.sqrt(self.rho2)

    @property
    def size(self) -> int:
        return self.n * self.h * self.w

    def as_dict(self) -> dict:
        return {"n": self.n, "h": self.h, "w": self.w}


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning" | "info"
    position: str
    message: str
    code: str


@dataclass(frozen=True)
class NetworkGraph:
    input_shape: EdgeShape
    ops: tuple
    edges: dict | None = field(default=None, compare=False)

    @property
    def shaped(self) -> bool:
        return self.edges is not None

    @property
    def output_key(self) -> Path:
        return (len(self.ops) - 1,) if self.ops else ()

    @property
    def output_shape(self) -> EdgeShape:
        return self.shape(self.output_key)

    def shape(self, key: Path) -> EdgeShape:
        if self.edges is None:
            raise ValueError("shapes not inferred; call infer_shapes first")
        return self.edges[key]

    def op(self, path: Path) -> Op:
        return op_at(self.ops, path)

    def walk(self) -> Iterator[tuple[Path, Op]]:
        return walk(self.ops)

    def weighted_layers(self) -> list[Path]:
        return [p for p, op in self.walk() if isinstance(op, WEIGHTED)]

    def layer_dims(self, path: Path) -> "LayerDims":
        op = self.op(path)
        sin = self.shape(input_key(path))
        sout = self.shape(path)
        if isinstance(op, Linear):
            # flattened input: every input element is a fan-in unit
            return LayerDims(fan_in=sin.size, fan_out=op.out, k=1, rho2_in=1, rho2_out=1)
        return LayerDims(fan_in=sin.n, fan_out=op.out, k=op.k, rho2_in=sin.rho2, rho2_out=sout.rho2)

    def weights(self) -> dict:
        """Per-layer ``init_m2`` values carried on the ops (missing ones omitted)."""
        return {p: op.init_m2 for p, op in self.walk() if isinstance(op, WEIGHTED) and op.init_m2 is not None}


@dataclass(frozen=True)
class LayerDims:
    fan_in: int
    fan_out: int
    k: int
    rho2_in: int
    rho2_out: int


# ---------------------------------------------------------------- paths


def walk(ops, prefix: Path = ()) -> Iterator[tuple[Path, Op]]:
    """Pre-order traversal; residual branches visited main first."""
    for i, op in enumerate(ops):
        path = prefix + (i,)
        yield path, op
        if isinstance(op, Residual):
            for name in BRANCHES:
                yield from walk(op.branch(name), path + (name,))


def op_at(ops, path: Path) -> Op:
    op = ops[path[0]]
    rest = path[1:]
    while rest:
        op = op.branch(rest[0])[rest[1]]
        rest = rest[2:]
    return op


def input_key(path: Path) -> Path:
    """Edge feeding the op at ``path``."""
    if path[-1] > 0:
        return path[:-1] + (path[-1] - 1,)
    return path[:-1]


def branch_output_key(prefix: Path, ops) -> Path:
    return prefix + (len(ops) - 1,) if ops else prefix


def path_str(path: Path) -> str:
    return ".".join(str(p) for p in path) if path else "input"


def parse_path(text: str) -> Path:
    if text in ("", "input"):
        return ()
    return tuple(int(p) if p.lstrip("-").isdigit() else p for p in text.split("."))


def replace_at(ops: tuple, path: Path, new_ops: tuple) -> tuple:
    """Return ``ops`` with the op at ``path`` replaced by the sequence ``new_ops``."""
    i = path[0]
    if len(path) == 1:
        return ops[:i] + tuple(new_ops) + ops[i + 1 :]
    block = ops[i]
    name, rest = path[1], path[2:]
    branch = replace_at(block.branch(name), rest, new_ops)
    block = replace(block, **{name: branch})
    return ops[:i] + (block,) + ops[i + 1 :]


# ---------------------------------------------------------------- parsing

_REJECTED = {
    "sigmoid": "sigmoid has no analytic scaling rule (not scaling-preserving); rejected",
    "tanh": "tanh has no analytic scaling rule (only scaling-preserving in its linear regime); rejected",
}


def _pos_int(d: dict, key: str, where: str, default=None) -> int:
    if key not in d:
        if default is None:
            raise SpecError(f"missing field {key!r}", where)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise SpecError(f"field {key!r} must be an integer, got {v!r}", where)
    if v <= 0:
        raise SpecError(f"field {key!r} must be positive, got {v}", where)
    return v


def _real(d: dict, key: str, where: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise SpecError(f"missing field {key!r}", where)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SpecError(f"field {key!r} must be a finite number, got {v!r}", where)
    return float(v)


def _parse_op(d: Any, where: str) -> Op:
    if not isinstance(d, dict) or "op" not in d:
        raise SpecError("expected an object with an 'op' field", where)
    kind = d["op"]
    if kind in _REJECTED:
        raise SpecError(_REJECTED[kind], where)
    init_m2 = _real(d, "init_m2", where, default=-1.0) if "init_m2" in d else None
    if init_m2 is not None and init_m2 <= 0:
        raise SpecError("init_m2 must be positive", where)
    if kind == "linear":
        return Linear(out=_pos_int(d, "out", where), init_m2=init_m2)
    if kind == "conv":
        return Conv(
            out=_pos_int(d, "out", where),
            k=_pos_int(d, "k", where),
            stride=_pos_int(d, "stride", where, default=1),
            init_m2=init_m2,
        )
    if kind in ("avgpool", "maxpool"):
        k = _pos_int(d, "k", where)
        cls = AvgPool if kind == "avgpool" else MaxPool
        return cls(k=k, stride=_pos_int(d, "stride", where, default=k))
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        p = _real(d, "p", where)
        if not 0.0 <= p < 1.0:
            raise SpecError(f"dropout p must lie in [0, 1), got {p}", where)
        return Dropout(p=p)
    if kind == "scalar":
        value = _real(d, "value", where)
        if value <= 0:
            raise SpecError(f"scalar value must be positive, got {value}", where)
        reason = d.get("reason")
        if d.get("learnable", False):
            return LearnableScalar(init=value, reason=reason)
        return FixedScalar(value=value, reason=reason)
    if kind == "bias":
        return BiasAdd()
    if kind == "residual":
        alpha = _real(d, "alpha", where)
        beta = _real(d, "beta", where)
        main = _parse_ops(d.get("main", []), f"{where}.main")
        shortcut = _parse_ops(d.get("shortcut", []), f"{where}.shortcut")
        try:
            return Residual(alpha=alpha, beta=beta, main=main, shortcut=shortcut)
        except SpecError as e:
            raise SpecError(e.message, where) from None
    raise SpecError(f"unknown op kind {kind!r}", where)


def _parse_ops(items: Any, where: str) -> tuple:
    if not isinstance(items, list):
        raise SpecError("expected a list of ops", where)
    return tuple(_parse_op(d, f"{where}.{i}") for i, d in enumerate(items))


def parse_spec(text: str | dict) -> NetworkGraph:
    """Parse a JSON network document into an (unshaped) :class:`NetworkGraph`."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecError(f"syntax error: {e.msg}", f"line {e.lineno} column {e.colno}") from None
    if not isinstance(doc, dict):
        raise SpecError("top level must be an object with 'input' and 'ops'", "document")
    inp = doc.get("input")
    if not isinstance(inp, dict):
        raise SpecError("missing 'input' object", "input")
    n = _pos_int(inp, "n", "input")
    if "rho" in inp:
        h = w = _pos_int(inp, "rho", "input")
    else:
        h = _pos_int(inp, "h", "input", default=1)
        w = _pos_int(inp, "w", "input", default=h)
    ops = _parse_ops(doc.get("ops"), "ops") if "ops" in doc else None
    if ops is None:
        raise SpecError("missing 'ops' list", "ops")
    return NetworkGraph(EdgeShape(n, h, w), ops)


def op_to_dict(op: Op) -> dict:
    if isinstance(op, Linear):
        d = {"op": "linear", "out": op.out}
    elif isinstance(op, Conv):
        d = {"op": "conv", "out": op.out, "k": op.k, "stride": op.stride}
    elif isinstance(op, (AvgPool, MaxPool)):
        d = {"op": op.kind, "k": op.k, "stride": op.stride}
    elif isinstance(op, Dropout):
        d = {"op": "dropout", "p": op.p}
    elif isinstance(op, FixedScalar):
        d = {"op": "scalar", "value": op.value}
    elif isinstance(op, LearnableScalar):
        d = {"op": "scalar", "value": op.init, "learnable": True}
    elif isinstance(op, Residual):
        d = {
            "op": "residual",
            "alpha": op.alpha,
            "beta": op.beta,
            "main": [op_to_dict(o) for o in op.main],
            "shortcut": [op_to_dict(o) for o in op.shortcut],
        }
    else:
        d = {"op": op.kind}
    if isinstance(op, WEIGHTED) and op.init_m2 is not None:
        d["init_m2"] = op.init_m2
    if isinstance(op, (FixedScalar, LearnableScalar)) and op.reason:
        d["reason"] = op.reason
    return d


def graph_to_dict(graph: NetworkGraph) -> dict:
    return {"input": graph.input_shape.as_dict(), "ops": [op_to_dict(o) for o in graph.ops]}


def load_spec(path) -> NetworkGraph:
    with open(path, encoding="utf-8") as f:
        return parse_spec(f.read())


# ---------------------------------------------------------------- shapes


def _op_output_shape(op: Op, s: EdgeShape, where: str) -> EdgeShape:
    if isinstance(op, Linear):
        return EdgeShape(op.out, 1, 1)
    if isinstance(op, (Conv, AvgPool, MaxPool)):
        for dim in (s.h, s.w):
            if dim % op.stride:
                raise ShapeError(f"stride {op.stride} does not divide resolution {dim}", where)
        n = op.out if isinstance(op, Conv) else s.n
        return EdgeShape(n, s.h // op.stride, s.w // op.stride)
    return s


def output_shape(op: Op, s: EdgeShape) -> EdgeShape:
    """Shape produced by a non-residual op applied to an edge of shape ``s``."""
    return _op_output_shape(op, s, "op")


def _infer(ops, prefix: Path, s: EdgeShape, edges: dict) -> EdgeShape:
    for i, op in enumerate(ops):
        path = prefix + (i,)
        where = path_str(path)
        if isinstance(op, Residual):
            outs = []
            for name in BRANCHES:
                entry = path + (name,)
                edges[entry] = s
                outs.append(_infer(op.branch(name), entry, s, edges))
            if outs[0] != outs[1]:
                raise ShapeError(
                    f"residual branch shapes differ: main {outs[0].as_dict()} vs shortcut {outs[1].as_dict()}",
                    where,
                )
            s = outs[0]
        else:
            s = _op_output_shape(op, s, where)
        edges[path] = s
    return s


def infer_shapes(graph: NetworkGraph) -> NetworkGraph:
    """Annotate every edge with its shape; idempotent."""
    edges = {(): graph.input_shape}
    _infer(graph.ops, (), graph.input_shape, edges)
    return NetworkGraph(graph.input_shape, graph.ops, edges)


def build(doc: str | dict) -> NetworkGraph:
    """Parse and shape in one step."""
    return infer_shapes(parse_spec(doc))


# ---------------------------------------------------------------- lint


def lint_scaling(graph: NetworkGraph) -> list[Diagnostic]:
    """Flag ops outside the scaling-preserving set.  Never raises."""
    out = []
    prev: dict[Path, Op | None] = {}
    for path, op in graph.walk():
        where = path_str(path)
        k_in = input_key(path)
        before = prev.get(k_in)
        prev[path] = op
        if isinstance(op, MaxPool):
            out.append(Diagnostic("warning", where, "max pooling does not maintain scaling", "MAXPOOL_UNSCALED"))
        if isinstance(op, (Conv, AvgPool)):
            if op.stride > 1 and op.stride != op.k:
                out.append(
                    Diagnostic(
                        "warning",
                        where,
                        f"stride {op.stride} differs from kernel size {op.k}; scaling requires stride equal to kernel size",
                        "STRIDE_NEQ_KERNEL",
                    )
                )
            elif op.stride == 1 and op.k > 1:
                out.append(
                    Diagnostic(
                        "info",
                        where,
                        f"stride-1 {op.kind} with k={op.k}: padding boundary effects ignored",
                        "STRIDE_ONE_PADDED",
                    )
                )
        if isinstance(op, AvgPool) and isinstance(before, ReLU):
            out.append(
                Diagnostic(
                    "warning",
                    where,
                    "average pooling of post-ReLU activations: zero-mean forward rule is approximate",
                    "AVGPOOL_AFTER_RELU",
                )
            )
        if isinstance(op, Residual):
            for name in BRANCHES:
                prev[path + (name,)] = before
    out.sort(key=lambda d: _sort_key(d.position))
    return out


def _sort_key(position: str):
    return tuple((0, p, "") if isinstance(p, int) else (1, 0, p) for p in parse_path(position))


def has_problems(diags: list[Diagnostic]) -> bool:
    return any(d.severity in ("error", "warning") for d in diags)
