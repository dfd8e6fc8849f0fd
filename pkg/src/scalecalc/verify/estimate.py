"""Monte-Carlo estimates of edge moments, weight-to-gradient ratios and GN block spectra.

Every trial draws standard-normal inputs and a fresh symmetric loss matrix
``R`` (plus fresh weights when verifying a plan).  Random streams come from
``SeedSequence([seed, trial, stream])`` so trials are independent of each
other and of the execution order.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..graph import NetworkGraph, Path, WEIGHTED, infer_shapes, path_str
from ..initplan import InitPlan, spec_fingerprint
from ..moments import MomentPair, MomentTape, forward_moments
from ..scaling import ScalingReport, analyze, report_from_tape
from .engine import SampledNet, Trace, backward, expected_weight_shapes, run_network, weight_tangent

_WEIGHTS, _DATA, _LOSS, _DROPOUT, _PROBE = range(5)

SANITY_MIN_PARAMS = 1000
SANITY_REL_TOL = 0.05


class PlanMismatchError(ValueError):
    pass


def stream(seed: int, trial: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, trial, which]))


# ---------------------------------------------------------------- sampling


def sample_weights(plan: InitPlan, graph: NetworkGraph | None = None, seed=0) -> SampledNet:
    """Draw weights from the plan's distribution; biases are zero.

    When ``graph`` is given it must be the architecture the plan was made for.
    """
    if graph is not None:
        g = graph if graph.shaped else infer_shapes(graph)
        if plan.source_sha256 and spec_fingerprint(g) != plan.source_sha256:
            raise PlanMismatchError("plan was produced for a different network")
    net_graph = plan.network
    planned = {layer.path: layer.second_moment for layer in plan.layers}
    shapes = expected_weight_shapes(net_graph)
    missing = set(shapes) - set(planned)
    if missing:
        raise PlanMismatchError(f"plan has no second moment for {', '.join(sorted(map(path_str, missing)))}")
    rng = np.random.default_rng(seed)
    weights, notes = {}, []
    for path in sorted(shapes, key=path_str):
        m2, shape = planned[path], shapes[path]
        if plan.distribution == "uniform":
            a = math.sqrt(3 * m2)
            w = rng.uniform(-a, a, size=shape)
        else:
            w = rng.standard_normal(shape) * math.sqrt(m2)
        if w.size >= SANITY_MIN_PARAMS:
            emp = float(np.mean(w * w))
            if abs(emp / m2 - 1) > SANITY_REL_TOL:
                msg = f"layer {path_str(path)}: sampled second moment {emp:.4g} vs planned {m2:.4g}"
                notes.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
        weights[path] = w
    net = SampledNet.from_arrays(net_graph, weights)
    net.seed, net.distribution, net.notes = seed, plan.distribution, notes
    return net


# ---------------------------------------------------------------- loss


def sample_loss_matrix(n: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric matrix with unit off-diagonal entry variance."""
    g = rng.standard_normal((n, n))
    return (g + g.T) / math.sqrt(2)


def random_quadratic_loss(outputs: np.ndarray, r: np.ndarray):
    """Per-sample ``y^T R y`` and its gradient ``(R + R^T) y``."""
    y = np.asarray(outputs, dtype=float).reshape(len(outputs), -1)
    r = np.asarray(r, dtype=float)
    if r.shape != (y.shape[1], y.shape[1]):
        raise ValueError(f"loss matrix {r.shape} does not match output dimension {y.shape[1]}")
    loss = np.einsum("bi,ij,bj->b", y, r, y)
    grad = y @ (r + r.T).T
    return loss, grad.reshape(np.shape(outputs))


def loss_gradient_m2(output_m2: float, output_dim: int) -> float:
    """Expected squared loss-gradient entry for ``R`` from :func:`sample_loss_matrix`."""
    # (R + R^T) has off-diagonal variance 4 and diagonal variance 8
    return 4.0 * (output_dim + 1) * output_m2


def theory_report(graph: NetworkGraph, input_m2: float = 1.0, rel_tol: float = 1e-6) -> ScalingReport:
    """Analytic report normalised to the random quadratic loss on unit-moment inputs."""
    g = graph if graph.shaped else infer_shapes(graph)
    fwd_out = forward_moments(g, g.weights(), input_m2)[g.output_key]
    g2 = loss_gradient_m2(fwd_out, g.output_shape.size)
    return analyze(g, input_m2=input_m2, output_g2=g2, rel_tol=rel_tol)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class EstimationConfig:
    seed: int
    batch: int = 1024
    trials: int = 10
    probes: int = 4
    probe_mode: str = "gaussian"  # or "exact": enumerate every basis direction
    workers: int = 1

    def __post_init__(self):
        for name in ("batch", "trials", "probes", "workers"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an integer in [0, 2**64)")
        if self.probe_mode not in ("gaussian", "exact"):
            raise ValueError("probe_mode must be 'gaussian' or 'exact'")


# ---------------------------------------------------------------- probes


def _has_dropout(graph: NetworkGraph) -> bool:
    return any(op.kind == "dropout" for _, op in graph.walk())


def gn_probe_batch(
    net: SampledNet,
    layer: Path,
    trace: Trace,
    hessian: np.ndarray,
    probes: int = 4,
    rng: np.random.Generator | None = None,
    exact: bool = False,
) -> float:
    """Mean over samples of ``|G_b r|^2 / dim(W)``, averaged over probe directions.

    ``G_b r`` = reverse-mode weight gradient of ``H (J_b r)``; the trace must come
    from a dropout-free forward pass.  ``exact`` sums over all basis
    directions, giving ``|G_b|_F^2 / dim`` without sampling noise.
    """
    w = net.weights[layer]
    dim = w.size
    if exact:
        directions = (np.eye(1, dim, i).reshape(w.shape) for i in range(dim))
        count = dim
    else:
        if rng is None:
            raise ValueError("gaussian probes need an rng")
        # independent direction per sample: same expectation, far lower variance
        batch = trace.output.shape[0]
        directions = (rng.standard_normal((batch,) + w.shape) for _ in range(probes))
        count = probes
    total = 0.0
    for r in directions:
        t = weight_tangent(net, trace, layer, r)
        flat = t.reshape(len(t), -1)
        v = (flat @ hessian.T).reshape(t.shape)
        sq = backward(net, trace, v, layers=[layer]).weight_sq[layer]
        total += float(sq.mean())
    if exact:
        return total / dim
    return total / (count * dim)


def gn_dense_oracle(net: SampledNet, layer: Path, x: np.ndarray, hessian: np.ndarray, step: float = 1e-6) -> float:
    """Assemble each sample's Jacobian by central differences and return mean ``|J^T H J|_F^2 / dim``."""
    w0 = net.weights[layer]
    dim = w0.size
    cols = []
    for i in range(dim):
        e = np.eye(1, dim, i).reshape(w0.shape) * step
        net.weights[layer] = w0 + e
        up = run_network(net, x).output.reshape(len(x), -1)
        net.weights[layer] = w0 - e
        down = run_network(net, x).output.reshape(len(x), -1)
        cols.append((up - down) / (2 * step))
    net.weights[layer] = w0
    jac = np.stack(cols, axis=2)  # (batch, outputs, dim)
    total = 0.0
    for jb in jac:
        gb = jb.T @ hessian @ jb
        total += float(np.sum(gb * gb))
    return total / (len(jac) * dim)


# ---------------------------------------------------------------- trials


@dataclass
class TrialStats:
    fwd: dict
    bwd: dict
    nu_hat: dict
    g_hat: dict
    gamma_measured: dict  # scaling factor at this trial's measured moments
    gamma_setup: dict  # same, with the loss gradient at its expectation over R
    overflow: bool = False


def _setup_gammas(g: NetworkGraph, net: SampledNet, fwd: dict, bwd: dict):
    ew2 = {p: float(np.mean(w * w)) for p, w in net.weights.items()}

    def gammas(scale):
        pairs = {k: MomentPair(fwd[k], bwd[k] * scale) for k in g.edges}
        return {r.path: r.gamma for r in report_from_tape(MomentTape(g, pairs, ew2)).layers}

    out = g.output_key
    # gradient moments are linear in the output gradient, so rescaling the
    # measured tape replaces the realised R by its expectation
    expected = loss_gradient_m2(fwd[out], g.output_shape.size)
    return gammas(1.0), gammas(expected / bwd[out])


def _one_trial(net: SampledNet, cfg: EstimationConfig, trial: int, probe_layers) -> TrialStats:
    g = net.graph
    s = g.input_shape
    x = stream(cfg.seed, trial, _DATA).standard_normal((cfg.batch, s.n, s.h, s.w))
    r = sample_loss_matrix(g.output_shape.size, stream(cfg.seed, trial, _LOSS))
    drop_rng = stream(cfg.seed, trial, _DROPOUT) if _has_dropout(g) else None
    with np.errstate(over="ignore", invalid="ignore"):
        trace = run_network(net, x, drop_rng)
        _, dy = random_quadratic_loss(trace.output, r)
        grads = backward(net, trace, dy)
        fwd = {k: float(np.mean(a * a)) for k, a in trace.acts.items()}
        bwd = {k: float(np.mean(a * a)) for k, a in grads.edges.items()}
        nu = {}
        for path in g.weighted_layers():
            w = net.weights[path]
            nu[path] = float(grads.weight_sq[path].mean() / w.size / np.mean(w * w))
        gh = {}
        if probe_layers:
            clean = run_network(net, x) if drop_rng is not None else trace
            hess = r + r.T
            prng = stream(cfg.seed, trial, _PROBE)
            for path in probe_layers:
                gh[path] = gn_probe_batch(net, path, clean, hess, cfg.probes, prng, cfg.probe_mode == "exact")
    values = list(fwd.values()) + list(bwd.values()) + list(nu.values()) + list(gh.values())
    overflow = not all(math.isfinite(v) for v in values)
    measured, setup = {}, {}
    if not overflow and min(fwd.values()) > 0 and min(bwd.values()) > 0:
        measured, setup = _setup_gammas(g, net, fwd, bwd)
    return TrialStats(fwd, bwd, nu, gh, measured, setup, overflow)


def _trial_job(args):
    source, cfg, trial, probe_layers, resample = args
    net = sample_weights(source, seed=np.random.SeedSequence([cfg.seed, trial, _WEIGHTS])) if resample else source
    return _one_trial(net, cfg, trial, probe_layers)


def _run_trials(source, cfg: EstimationConfig, probe_layers, resample: bool) -> list[TrialStats]:
    jobs = [(source, cfg, t, probe_layers, resample) for t in range(cfg.trials)]
    if cfg.workers > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_trial_job, jobs))  # map preserves trial order
    return [_trial_job(j) for j in jobs]


def _mean(stats, attr, key):
    return float(np.mean([getattr(s, attr)[key] for s in stats]))


def _empirical_tape(graph: NetworkGraph, stats, weights) -> MomentTape:
    pairs = {k: MomentPair(_mean(stats, "fwd", k), _mean(stats, "bwd", k)) for k in graph.edges}
    return MomentTape(graph, pairs, weights)


def estimate_edge_moments(net: SampledNet, cfg: EstimationConfig) -> MomentTape:
    """Per-edge mean squares of activations and loss gradients over batch x trials."""
    stats = _run_trials(net, cfg, (), resample=False)
    if any(s.overflow for s in stats):
        raise FloatingPointError("numerical overflow during moment estimation")
    return _empirical_tape(net.graph, stats, {p: float(np.mean(w * w)) for p, w in net.weights.items()})


def estimate_weight_gradient_ratio(net: SampledNet, cfg: EstimationConfig) -> dict:
    """Per-layer mean per-sample squared weight gradient over mean squared weight."""
    for p, w in net.weights.items():
        if not np.any(w):
            raise ValueError(f"weights of {path_str(p)} are all zero")
    stats = _run_trials(net, cfg, (), resample=False)
    return {p: _mean(stats, "nu_hat", p) for p in net.graph.weighted_layers()}


def gn_block_probe(net: SampledNet, layer: Path, cfg: EstimationConfig) -> float:
    if not isinstance(net.graph.op(layer), WEIGHTED):
        raise ValueError(f"{path_str(layer)} is not a weighted layer")
    stats = _run_trials(net, cfg, (layer,), resample=False)
    return _mean(stats, "g_hat", layer)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class LayerEstimate:
    """Estimates for one weighted layer.

    ``ratio_nu``/``ratio_g`` divide the plan-level analytic factor by the
    trial-averaged estimates.  The ``*_trials`` tuples hold one ratio per
    sampled setup, with the factor evaluated at that setup's own moments:
    ``ratio_g_trials`` uses the loss-gradient moment at its expectation over
    the loss matrix, ``ratio_g_measured_trials`` the realised one, and
    ``ratio_nu_trials`` compares the realised factor with that setup's ``nu_hat``.
    """

    index: int
    path: Path
    nu_hat: float
    g_hat: float | None
    gamma_theory: float
    ratio_nu: float
    ratio_g: float | None
    ratio_nu_trials: tuple = ()
    ratio_g_trials: tuple = ()
    ratio_g_measured_trials: tuple = ()
    plan_ratio_g_trials: tuple = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["path"] = path_str(self.path)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d


@dataclass(frozen=True)
class VerifyReport:
    tape: MomentTape
    layers: tuple
    config: EstimationConfig | None = None
    overflow: bool = False
    notes: tuple = field(default=())

    @property
    def pooled_ratio_g(self) -> list[float]:
        return [r for layer in self.layers for r in layer.ratio_g_trials]

    @property
    def pooled_ratio_nu(self) -> list[float]:
        return [r for layer in self.layers for r in layer.ratio_nu_trials]

    def as_dict(self) -> dict:
        return {
            "config": asdict(self.config) if self.config else None,
            "overflow": self.overflow,
            "notes": list(self.notes),
            "edges": {
                path_str(k): {"fwd": p.fwd, "bwd": p.bwd, "sigma": self.tape.sigma(k)} for k, p in self.tape.pairs.items()
            },
            "layers": [layer.as_dict() for layer in self.layers],
            "pooled_ratio_g": self.pooled_ratio_g,
            "pooled_ratio_nu": self.pooled_ratio_nu,
        }


def _ratios(num: dict | float, den_attr: str, stats, path, invert=False) -> tuple:
    out = []
    for s in stats:
        a = num if isinstance(num, float) else getattr(s, num)[path]
        b = getattr(s, den_attr)[path]
        out.append(b / a if invert else a / b)
    return tuple(out)


def verify_plan(plan: InitPlan, cfg: EstimationConfig, graph: NetworkGraph | None = None, probe: bool = True) -> VerifyReport:
    """Full Monte-Carlo check of a plan; weights are re-drawn every trial."""
    if graph is not None:
        g = graph if graph.shaped else infer_shapes(graph)
        if plan.source_sha256 and spec_fingerprint(g) != plan.source_sha256:
            raise PlanMismatchError("plan was produced for a different network")
    net_graph = plan.network
    layers = net_graph.weighted_layers()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        stats = _run_trials(plan, cfg, tuple(layers) if probe else (), resample=True)
    theory = theory_report(net_graph)
    gammas = {rec.path: rec.gamma for rec in theory.layers}
    overflow = any(s.overflow for s in stats)
    if overflow:
        tape = MomentTape(net_graph, {k: MomentPair(0.0, 0.0) for k in net_graph.edges}, plan.weights())
        return VerifyReport(tape, (), cfg, True, tuple(plan.notes) + ("numerical overflow",))
    tape = _empirical_tape(net_graph, stats, plan.weights())
    estimates = []
    for i, path in enumerate(layers):
        gamma = gammas[path]
        nu_hat = _mean(stats, "nu_hat", path)
        g_hat = _mean(stats, "g_hat", path) if probe else None
        estimates.append(
            LayerEstimate(
                index=i,
                path=path,
                nu_hat=nu_hat,
                g_hat=g_hat,
                gamma_theory=gamma,
                ratio_nu=gamma / nu_hat,
                ratio_g=gamma / g_hat if probe else None,
                ratio_nu_trials=_ratios("gamma_measured", "nu_hat", stats, path),
                ratio_g_trials=_ratios("gamma_setup", "g_hat", stats, path) if probe else (),
                ratio_g_measured_trials=_ratios("gamma_measured", "g_hat", stats, path) if probe else (),
                plan_ratio_g_trials=_ratios(gamma, "g_hat", stats, path) if probe else (),
            )
        )
    return VerifyReport(tape, tuple(estimates), cfg, False, tuple(plan.notes))


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class CompareRow:
    path: Path
    gamma: float
    ratio_nu: float
    ratio_g: float | None
    within: bool

    def as_dict(self) -> dict:
        return {
            "path": path_str(self.path),
            "gamma": self.gamma,
            "ratio_nu": self.ratio_nu,
            "ratio_g": self.ratio_g,
            "within": self.within,
        }


@dataclass(frozen=True)
class Comparison:
    rows: tuple
    tol: float
    fraction: float
    basis: str
    passed: bool

    @property
    def fraction_within(self) -> float:
        return sum(r.within for r in self.rows) / len(self.rows) if self.rows else 1.0

    def as_dict(self) -> dict:
        return {
            "basis": self.basis,
            "tol": self.tol,
            "fraction": self.fraction,
            "fraction_within": self.fraction_within,
            "passed": self.passed,
            "rows": [r.as_dict() for r in self.rows],
        }


def compare(
    analytic: ScalingReport, empirical: VerifyReport, tol: float = 2.0, fraction: float = 0.9, basis: str = "plan"
) -> Comparison:
    """Per-layer ratios and an overall verdict.

    ``basis="plan"`` divides the analytic report's factors by the averaged
    estimates.  ``basis="setup"`` uses the median of the per-setup ratios,
    which factors out finite-width fluctuation of the moments between draws.
    A layer is within tolerance if every ratio lies in ``[1/tol, tol]``; the
    report passes if at least ``fraction`` of the layers are.
    """
    if not tol >= 1:
        raise ValueError("tol must be >= 1")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if basis not in ("plan", "setup"):
        raise ValueError("basis must be 'plan' or 'setup'")
    if empirical.overflow:
        return Comparison((), tol, fraction, basis, False)
    a_paths = [r.path for r in analytic.layers]
    e_paths = [e.path for e in empirical.layers]
    if a_paths != e_paths:
        raise PlanMismatchError("reports cover different layers")
    rows = []
    for rec, est in zip(analytic.layers, empirical.layers):
        if basis == "plan":
            r_nu = rec.gamma / est.nu_hat
            r_g = rec.gamma / est.g_hat if est.g_hat is not None else None
        else:
            r_nu = float(np.median(est.ratio_nu_trials))
            r_g = float(np.median(est.ratio_g_trials)) if est.ratio_g_trials else None
        ratios = [r_nu] + ([r_g] if r_g is not None else [])
        rows.append(CompareRow(rec.path, rec.gamma, r_nu, r_g, all(1 / tol <= r <= tol for r in ratios)))
    frac = sum(r.within for r in rows) / len(rows) if rows else 1.0
    return Comparison(tuple(rows), tol, fraction, basis, frac >= fraction - 1e-12)
