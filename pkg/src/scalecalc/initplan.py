"""Initialization plans: per-layer weight second moments plus corrective scalars.

The geometric scheme sets ``E[W^2] = c / (k sqrt(n_in n_out))`` and then inserts
fixed scalar multipliers so that every weight, learnable scalar and bias ends
up with the same scaling factor.  Every inserted scalar carries a reason code:

``kernel-correction``  before a layer whose kernel differs from the typical one
``input-scale``        at the network input, balancing first-layer weights and bias
``output-norm``        at the network output, fixing the output standard deviation
``residual-recipe``    inside residual blocks (branch balancing, bottleneck recipe)
``bias-balance``       a ``t, bias, 1/t`` sandwich equalising a bias that sits at an
                       edge with an off-profile forward moment
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace

from .graph import (
    AvgPool,
    BiasAdd,
    Conv,
    FixedScalar,
    LearnableScalar,
    NetworkGraph,
    Path,
    ReLU,
    Residual,
    SpecError,
    WEIGHTED,
    graph_to_dict,
    infer_shapes,
    input_key,
    parse_path,
    parse_spec,
    path_str,
    replace_at,
)
from .moments import UnsupportedOpError, forward_moments, forward_rule, propagate
from .scaling import report_from_tape

REASONS = ("kernel-correction", "input-scale", "output-norm", "residual-recipe", "bias-balance")
SCHEME_NAMES = ("fan-in", "fan-out", "xavier", "geometric")
_ALIASES = {"fanin": "fan-in", "fanout": "fan-out", "arithmetic": "xavier", "glorot": "xavier", "geom": "geometric"}

_EXACT = 1e-12


@dataclass(frozen=True)
class Scheme:
    name: str
    c: float | None = None  # geometric numerator; None means choose from the graph

    def __post_init__(self):
        name = _ALIASES.get(self.name, self.name)
        if name not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {self.name!r}; expected one of {', '.join(SCHEME_NAMES)}")
        object.__setattr__(self, "name", name)
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")


FAN_IN = Scheme("fan-in")
FAN_OUT = Scheme("fan-out")
XAVIER = Scheme("xavier")


def geometric(c: float | None = None) -> Scheme:
    return Scheme("geometric", c)


def init_second_moment(scheme: Scheme, n_in: int, n_out: int, k: int) -> float:
    if min(n_in, n_out, k) < 1:
        raise ValueError("layer dimensions must be >= 1")
    k2 = k * k
    if scheme.name == "fan-in":
        return 2.0 / (n_in * k2)
    if scheme.name == "fan-out":
        return 2.0 / (n_out * k2)
    if scheme.name == "xavier":
        return 4.0 / ((n_in + n_out) * k2)
    if scheme.c is None:
        raise ValueError("geometric scheme needs a resolved c (see choose_c)")
    return scheme.c / (k * math.sqrt(n_in * n_out))


def typical_kernel(graph: NetworkGraph) -> int:
    """Modal kernel size over weighted layers (linear counts as 1); ties go to the smaller kernel."""
    counts = Counter(op.k if isinstance(op, Conv) else 1 for _, op in graph.walk() if isinstance(op, WEIGHTED))
    if not counts:
        raise ValueError("network has no weighted layers")
    best = max(counts.values())
    return min(k for k, n in counts.items() if n == best)


def choose_c(graph: NetworkGraph) -> float:
    return 2.0 / typical_kernel(graph)


def kernel_correction(k: int, k_typ: int) -> float:
    return math.sqrt(k_typ / k)


@dataclass(frozen=True)
class InputScale:
    target_m2: float
    forward_scalar: float


def input_scale_plan(n0: int, k0: int) -> InputScale:
    """Input second moment balancing first-layer weight and bias scaling, assuming unit-moment data."""
    fan = n0 * k0 * k0
    return InputScale(target_m2=1.0 / math.sqrt(fan), forward_scalar=fan**-0.25)


def telescoped_output_m2(n0: int, n_last: int, input_m2: float = 1.0) -> float:
    return math.sqrt(n0 / n_last) * input_m2


def output_norm_plan(tape_or_m2, target_std: float = 0.05) -> float:
    """Fixed output multiplier giving output standard deviation ``target_std``."""
    m2 = tape_or_m2 if isinstance(tape_or_m2, (int, float)) else tape_or_m2.output.fwd
    if not m2 > 0:
        raise ValueError("predicted output second moment must be positive")
    if not target_std > 0:
        raise ValueError("target_std must be positive")
    return target_std / math.sqrt(m2)


# ---------------------------------------------------------------- residual blocks


@dataclass(frozen=True)
class Bottleneck:
    n: int
    m: int
    w: int
    downsample: bool
    projection: bool


def bottleneck_params(block: Residual, n_in: int, n_out: int, spatial_in: int, spatial_out: int) -> Bottleneck | None:
    """Recognise a pre-activation bottleneck (1x1, 3x3, 1x1 convs on the main branch)."""
    main_w = [op for op in block.main if isinstance(op, WEIGHTED)]
    short_w = [op for op in block.shortcut if isinstance(op, WEIGHTED)]
    pattern = [(1, 1), (3, 1), (1, 1)]
    if len(main_w) != 3 or any(not isinstance(op, Conv) for op in main_w):
        return None
    if [(op.k, op.stride) for op in main_w] != pattern:
        return None
    if any(isinstance(op, Residual) for op in block.main + block.shortcut):
        return None
    if len(short_w) > 1 or (short_w and not (isinstance(short_w[0], Conv) and short_w[0].k == 1 and short_w[0].stride == 1)):
        return None
    downsample = spatial_out != spatial_in
    if downsample and spatial_in != 4 * spatial_out:
        return None
    if downsample and not short_w:
        return None
    return Bottleneck(n=n_in, m=n_out, w=main_w[0].out, downsample=downsample, projection=bool(short_w))


def _conv(out: int, k: int, numerator: float, n_in: int) -> Conv:
    return Conv(out=out, k=k, stride=1, init_m2=numerator / (k * math.sqrt(n_in * out)))


def residual_block_rewrite(
    block: Residual, n: int, m: int, w: int, downsample: bool, c: float = 1.0, projection: bool | None = None
) -> Residual:
    """Well-scaled pre-activation bottleneck.

    ``c`` is the network-wide geometric numerator; inside the block it is
    multiplied by beta (main branch) or alpha (shortcut), and the fixed
    scalars undo the resulting change of forward second moment.  Both
    branches end at ``sqrt(n/m) E[x^2]``.
    """
    a, b = block.alpha, block.beta
    if projection is None:
        projection = downsample or n != m
    if not projection and (n != m or downsample):
        raise SpecError("identity shortcut requires equal widths and no downsampling")
    why = "residual-recipe"
    main: list = []
    if downsample:
        main += [AvgPool(2, 2), FixedScalar(2.0, why)]
    main += [
        FixedScalar(math.sqrt(b), why),
        ReLU(),
        FixedScalar(math.sqrt(2 / (c * b)), why),
        BiasAdd(),
        _conv(w, 1, c * b, n),
        ReLU(),
        FixedScalar(math.sqrt(2 / (3 * c * b)), why),
        BiasAdd(),
        _conv(w, 3, c * b, w),
        ReLU(),
        FixedScalar(math.sqrt(2 / (c * b)), why),
        BiasAdd(),
        _conv(m, 1, c * b, w),
        LearnableScalar(math.sqrt(c * b), why),
        FixedScalar(1 / math.sqrt(c * b), why),
        FixedScalar(1 / math.sqrt(b), why),
    ]
    shortcut: list = []
    if projection:
        if downsample:
            shortcut += [AvgPool(2, 2), BiasAdd(), _conv(m, 1, c * a, n), FixedScalar(1 / math.sqrt(c * a / 4), why)]
        else:
            shortcut += [BiasAdd(), _conv(m, 1, c * a, n), FixedScalar(1 / math.sqrt(c * a), why)]
    return Residual(a, b, tuple(main), tuple(shortcut))


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class LayerInit:
    index: int
    path: Path
    kind: str
    fan_in: int
    fan_out: int
    k: int
    second_moment: float
    numerator: float

    def as_dict(self, scheme: str, distribution: str) -> dict:
        return {
            "index": self.index,
            "path": path_str(self.path),
            "kind": self.kind,
            "scheme": scheme,
            "fan_in": self.fan_in,
            "fan_out": self.fan_out,
            "k": self.k,
            "second_moment": self.second_moment,
            "numerator": self.numerator,
            "distribution": distribution,
        }


@dataclass(frozen=True)
class ScalarInsert:
    path: Path
    value: float
    reason: str
    learnable: bool = False

    def as_dict(self) -> dict:
        d = {"position": path_str(self.path), "value": self.value, "reason": self.reason}
        if self.learnable:
            d["learnable"] = True
        return d


@dataclass(frozen=True)
class InitPlan:
    scheme: Scheme
    c: float | None
    k_typical: int
    distribution: str
    network: NetworkGraph
    layers: tuple
    scalars: tuple
    predicted_output_m2: float | None
    source_sha256: str
    target_std: float | None = None
    notes: tuple = field(default=())

    def weights(self) -> dict:
        return {layer.path: layer.second_moment for layer in self.layers}

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme.name,
            "c": self.c,
            "k_typical": self.k_typical,
            "distribution": self.distribution,
            "target_std": self.target_std,
            "predicted_output_m2": self.predicted_output_m2,
            "source_sha256": self.source_sha256,
            "layers": [layer.as_dict(self.scheme.name, self.distribution) for layer in self.layers],
            "scalars": [s.as_dict() for s in self.scalars],
            "notes": list(self.notes),
            "network": graph_to_dict(self.network),
        }


def spec_fingerprint(graph: NetworkGraph) -> str:
    """Hash of the architecture (weight moments and scalar reasons excluded)."""
    doc = graph_to_dict(graph)

    def strip(ops):
        for d in ops:
            d.pop("init_m2", None)
            if d["op"] == "residual":
                strip(d["main"])
                strip(d["shortcut"])

    strip(doc["ops"])
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class _Ctx:
    c: float
    k_typ: int
    skip_correction: Path | None
    rewrites: int = 0


def _seq_forward(ops: tuple, shape, fwd: float) -> float:
    g = infer_shapes(NetworkGraph(shape, ops))
    return forward_moments(g, g.weights(), fwd)[g.output_key]


def _plan_geometric(g: NetworkGraph, ops: tuple, prefix: Path, fwd: float, mult: float, ctx: _Ctx):
    new: list = []
    for i, op in enumerate(ops):
        path = prefix + (i,)
        s_in = g.shape(input_key(path))
        if isinstance(op, WEIGHTED):
            dims = g.layer_dims(path)
            if dims.k != ctx.k_typ and path != ctx.skip_correction:
                a = kernel_correction(dims.k, ctx.k_typ)
                new.append(FixedScalar(a, "kernel-correction"))
                fwd *= a * a
            ew2 = init_second_moment(geometric(ctx.c * mult), dims.fan_in, dims.fan_out, dims.k)
            op = replace(op, init_m2=ew2)
            fwd = forward_rule(op, fwd, s_in, ew2)
        elif isinstance(op, LearnableScalar):
            op = LearnableScalar(math.sqrt(ctx.c * mult), op.reason or "residual-recipe")
            fwd = forward_rule(op, fwd, s_in)
        elif isinstance(op, Residual):
            s_out = g.shape(path)
            target = math.sqrt(s_in.n / s_out.n) * fwd
            bn = bottleneck_params(op, s_in.n, s_out.n, s_in.rho2, s_out.rho2)
            if bn is not None:
                ctx.rewrites += 1
                op = residual_block_rewrite(op, bn.n, bn.m, bn.w, bn.downsample, ctx.c * mult, bn.projection)
            else:
                branches = {}
                for name in ("main", "shortcut"):
                    sub, f_end = _plan_geometric(
                        g, op.branch(name), path + (name,), fwd, mult * op.branch_gain(name), ctx
                    )
                    if abs(target / f_end - 1) > _EXACT:
                        sub = sub + (FixedScalar(math.sqrt(target / f_end), "residual-recipe"),)
                    branches[name] = sub
                op = Residual(op.alpha, op.beta, branches["main"], branches["shortcut"])
            fwd = _seq_forward((op,), s_in, fwd)
        else:
            fwd = forward_rule(op, fwd, s_in)
        new.append(op)
    return tuple(new), fwd


def assign_second_moments(graph: NetworkGraph, scheme: Scheme) -> NetworkGraph:
    """Set every weighted layer's ``init_m2`` from ``scheme``; no scalars are inserted."""
    g = graph if graph.shaped else infer_shapes(graph)
    if scheme.name == "geometric" and scheme.c is None:
        scheme = geometric(choose_c(g))

    def go(ops, prefix):
        out = []
        for i, op in enumerate(ops):
            path = prefix + (i,)
            if isinstance(op, WEIGHTED):
                d = g.layer_dims(path)
                op = replace(op, init_m2=init_second_moment(scheme, d.fan_in, d.fan_out, d.k))
            elif isinstance(op, Residual):
                op = Residual(op.alpha, op.beta, go(op.main, path + ("main",)), go(op.shortcut, path + ("shortcut",)))
            out.append(op)
        return tuple(out)

    return infer_shapes(NetworkGraph(g.input_shape, go(g.ops, ())))


def _balance_biases(g: NetworkGraph, use_gamma: bool) -> NetworkGraph:
    report = report_from_tape(propagate(g))
    biases = report.biases
    if not biases:
        return g
    gammas = [r.gamma for r in report.layers]
    target = gammas[0] if (use_gamma and gammas) else biases[0].gamma_bias
    ops = g.ops
    for rec in reversed(biases):
        ratio = rec.gamma_bias / target
        if abs(ratio - 1) <= _EXACT:
            continue
        t = ratio**0.25
        ops = replace_at(
            ops, rec.path, (FixedScalar(t, "bias-balance"), BiasAdd(), FixedScalar(1 / t, "bias-balance"))
        )
    return infer_shapes(NetworkGraph(g.input_shape, ops))


def _records(g: NetworkGraph):
    layers, scalars = [], []
    for path, op in g.walk():
        if isinstance(op, WEIGHTED):
            d = g.layer_dims(path)
            layers.append(
                LayerInit(
                    index=len(layers),
                    path=path,
                    kind=op.kind,
                    fan_in=d.fan_in,
                    fan_out=d.fan_out,
                    k=d.k,
                    second_moment=op.init_m2,
                    numerator=op.init_m2 * d.k * math.sqrt(d.fan_in * d.fan_out),
                )
            )
        elif isinstance(op, FixedScalar) and op.reason:
            scalars.append(ScalarInsert(path, op.value, op.reason))
        elif isinstance(op, LearnableScalar) and op.reason:
            scalars.append(ScalarInsert(path, op.init, op.reason, learnable=True))
    return tuple(layers), tuple(scalars)


def make_plan(
    graph: NetworkGraph,
    scheme: Scheme = Scheme("geometric"),
    target_std: float | None = 0.05,
    input_scale: bool = True,
    distribution: str = "gaussian",
    output_m2: float | None = None,
) -> InitPlan:
    """Plan weight second moments and corrective scalars for ``graph``.

    ``output_m2`` overrides the analytic output-moment prediction used for
    output normalisation (e.g. a value measured on one batch).
    Structural corrections (kernel, input, residual, bias) are applied for the
    geometric scheme only; every scheme gets the output normaliser.
    """
    if distribution not in ("gaussian", "uniform"):
        raise ValueError(f"unknown distribution {distribution!r}")
    g = graph if graph.shaped else infer_shapes(graph)
    layers = g.weighted_layers()
    if not layers:
        raise ValueError("network has no weighted layers")
    k_typ = typical_kernel(g)
    notes: list[str] = []
    c = None
    if scheme.name == "geometric":
        c = scheme.c if scheme.c is not None else 2.0 / k_typ
        first = layers[0]
        ctx = _Ctx(c=c, k_typ=k_typ, skip_correction=first if (input_scale and len(first) == 1) else None)
        try:
            ops, _ = _plan_geometric(g, g.ops, (), 1.0, 1.0, ctx)
        except UnsupportedOpError as e:
            raise UnsupportedOpError(f"geometric planning needs analytic moments: {e}") from None
        net = infer_shapes(NetworkGraph(g.input_shape, ops))
        if input_scale:
            first_new = net.weighted_layers()[0]
            d = net.layer_dims(first_new)
            target = input_scale_plan(d.fan_in, d.k).target_m2
            reach = forward_moments(net, net.weights(), 1.0)[input_key(first_new)]
            ops = (FixedScalar(math.sqrt(target / reach), "input-scale"),) + net.ops
            net = infer_shapes(NetworkGraph(g.input_shape, ops))
        net = _balance_biases(net, use_gamma=input_scale)
    else:
        net = assign_second_moments(g, scheme)

    predicted = None
    try:
        predicted = forward_moments(net, net.weights(), 1.0)[net.output_key]
    except UnsupportedOpError as e:
        notes.append(f"no analytic output prediction: {e}")
    if target_std is not None:
        m2 = output_m2 if output_m2 is not None else predicted
        if m2 is None:
            notes.append("output normalisation skipped; supply a measured output moment")
        else:
            s = output_norm_plan(m2, target_std)
            net = infer_shapes(NetworkGraph(g.input_shape, net.ops + (FixedScalar(s, "output-norm"),)))
            predicted = m2 * s * s
    if scheme.name == "geometric" and ctx.rewrites:
        notes.append(
            "bottleneck tail interpreted as ReLU, scalar, bias, 1x1 conv; final scalar brings the main branch to the shortcut's forward moment"
        )
    layer_recs, scalar_recs = _records(net)
    return InitPlan(
        scheme=scheme,
        c=c,
        k_typical=k_typ,
        distribution=distribution,
        network=net,
        layers=layer_recs,
        scalars=scalar_recs,
        predicted_output_m2=predicted,
        source_sha256=spec_fingerprint(g),
        target_std=target_std,
        notes=tuple(notes),
    )


def plan_from_dict(doc: dict) -> InitPlan:
    try:
        scheme = Scheme(doc["scheme"], doc.get("c"))
        net = infer_shapes(parse_spec(doc["network"]))
        layer_recs, scalar_recs = _records(net)
        stored = [(parse_path(d["path"]), d["second_moment"]) for d in doc.get("layers", [])]
    except (KeyError, TypeError) as e:
        raise SpecError(f"malformed plan document: {e}", "plan") from None
    if stored and [(l.path, l.second_moment) for l in layer_recs] != stored:
        raise SpecError("plan layer table disagrees with its network", "plan")
    return InitPlan(
        scheme=scheme,
        c=doc.get("c"),
        k_typical=doc.get("k_typical", typical_kernel(net)),
        distribution=doc.get("distribution", "gaussian"),
        network=net,
        layers=layer_recs,
        scalars=scalar_recs,
        predicted_output_m2=doc.get("predicted_output_m2"),
        source_sha256=doc.get("source_sha256", ""),
        target_std=doc.get("target_std"),
        notes=tuple(doc.get("notes", ())),
    )


def load_plan(path) -> InitPlan:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SpecError(f"syntax error: {e.msg}", f"line {e.lineno} column {e.colno}") from None
    return plan_from_dict(doc)
