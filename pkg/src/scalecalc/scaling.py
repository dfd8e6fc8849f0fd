"""Activation, weight, bias and scalar scaling factors, and the preconditioning verdict."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .graph import BiasAdd, LearnableScalar, NetworkGraph, Path, WEIGHTED, input_key, path_str
from .moments import MomentPair, MomentTape, activation_scale, propagate

__all__ = [
    "activation_scale",
    "weight_scale_intrinsic",
    "weight_scale_extrinsic",
    "weight_scale_extrinsic_input_rho",
    "weight_gradient_ratio",
    "bias_scale",
    "scalar_scale",
    "ScaleRecord",
    "ScalingReport",
    "Verdict",
    "analyze",
    "preconditioned_check",
]


def _positive(name, *values):
    for v in values:
        if not v > 0:
            raise ValueError(f"{name} requires positive inputs, got {v!r}")


def weight_scale_intrinsic(sigma: float, fan_in: int, fan_out: int, k: int, ew2: float) -> float:
    _positive("weight_scale_intrinsic", sigma, ew2)
    return sigma / (fan_out * fan_in * k * k * ew2 * ew2)


def weight_scale_extrinsic(fan_in: int, k: int, rho2_out: float, m_in: MomentPair, m_out: MomentPair) -> float:
    """Weight scaling from moments alone, using the output resolution."""
    _positive("weight_scale_extrinsic", m_in.fwd, m_out.fwd, m_out.bwd)
    return fan_in * k * k * rho2_out * m_in.fwd**2 * (m_out.bwd / m_out.fwd)


def weight_scale_extrinsic_input_rho(fan_in: int, k: int, rho2_in: float, m_in: MomentPair, m_out: MomentPair) -> float:
    """Variant written with the input resolution; differs for strided layers."""
    return weight_scale_extrinsic(fan_in, k, rho2_in, m_in, m_out)


def weight_gradient_ratio(rho2_out: float, fwd_in: float, bwd_out: float, ew2: float) -> float:
    """Analytic ``E[dW^2] / E[W^2]`` with ``E[dW^2] = rho_out^2 E[x^2] E[dy^2]``."""
    _positive("weight_gradient_ratio", ew2)
    return rho2_out * fwd_in * bwd_out / ew2


def bias_scale(rho2_out: float, m_out: MomentPair) -> float:
    _positive("bias_scale", m_out.fwd)
    return rho2_out * m_out.bwd / m_out.fwd


def scalar_scale(u2: float, sigma: float) -> float:
    _positive("scalar_scale", u2)
    return sigma / (u2 * u2)


@dataclass(frozen=True)
class ScaleRecord:
    index: int
    kind: str  # conv | linear | bias | scalar
    path: Path
    sigma: float
    gamma_intrinsic: float | None = None
    gamma_extrinsic: float | None = None
    gamma_extrinsic_input_rho: float | None = None
    nu: float | None = None
    gamma_bias: float | None = None
    nu_scalar: float | None = None

    @property
    def gamma(self) -> float:
        if self.kind in ("conv", "linear"):
            return self.gamma_extrinsic
        if self.kind == "bias":
            return self.gamma_bias
        return self.nu_scalar

    def as_dict(self) -> dict:
        d = {"index": self.index, "kind": self.kind, "path": path_str(self.path), "sigma": self.sigma}
        for key in ("gamma_intrinsic", "gamma_extrinsic", "nu", "gamma_bias", "nu_scalar"):
            v = getattr(self, key)
            if v is not None:
                d[key] = v
        if self.gamma_extrinsic_input_rho is not None and not _close(
            self.gamma_extrinsic_input_rho, self.gamma_extrinsic, 1e-12
        ):
            d["gamma_extrinsic_input_rho"] = self.gamma_extrinsic_input_rho
        return d


@dataclass(frozen=True)
class Verdict:
    preconditioned: bool
    gamma_ratio: float
    bias_ratio: float
    rel_tol: float

    def as_dict(self) -> dict:
        return {
            "verdict": "preconditioned" if self.preconditioned else "not-preconditioned",
            "gamma_ratio": self.gamma_ratio,
            "bias_ratio": self.bias_ratio,
            "rel_tol": self.rel_tol,
        }


@dataclass(frozen=True)
class ScalingReport:
    tape: MomentTape
    sigmas: Mapping[Path, float]
    records: tuple
    verdict: Verdict | None = field(default=None)

    @property
    def layers(self) -> list[ScaleRecord]:
        return [r for r in self.records if r.kind in ("conv", "linear")]

    @property
    def biases(self) -> list[ScaleRecord]:
        return [r for r in self.records if r.kind == "bias"]

    @property
    def scalars(self) -> list[ScaleRecord]:
        return [r for r in self.records if r.kind == "scalar"]

    def as_dict(self) -> dict:
        d = {
            "edges": {path_str(k): v for k, v in self.sigmas.items()},
            "records": [r.as_dict() for r in self.records],
        }
        if self.verdict is not None:
            d.update(self.verdict.as_dict())
        return d


def _close(a, b, tol):
    return abs(a - b) <= tol * max(abs(a), abs(b))


def _ratio(values) -> float:
    values = list(values)
    if not values:
        return 1.0
    return max(values) / min(values)


def report_from_tape(tape: MomentTape) -> ScalingReport:
    g = tape.graph
    sigmas = {key: tape.sigma(key) for key in g.edges}
    records = []
    for path, op in g.walk():
        k_in = input_key(path)
        if isinstance(op, WEIGHTED):
            dims = g.layer_dims(path)
            ew2 = tape.weights[path]
            m_in, m_out = tape[k_in], tape[path]
            records.append(
                ScaleRecord(
                    index=len(records),
                    kind=op.kind,
                    path=path,
                    sigma=sigmas[k_in],
                    gamma_intrinsic=weight_scale_intrinsic(sigmas[k_in], dims.fan_in, dims.fan_out, dims.k, ew2),
                    gamma_extrinsic=weight_scale_extrinsic(dims.fan_in, dims.k, dims.rho2_out, m_in, m_out),
                    gamma_extrinsic_input_rho=weight_scale_extrinsic_input_rho(
                        dims.fan_in, dims.k, dims.rho2_in, m_in, m_out
                    ),
                    nu=weight_gradient_ratio(dims.rho2_out, m_in.fwd, m_out.bwd, ew2),
                )
            )
        elif isinstance(op, BiasAdd):
            s_out = g.shape(path)
            records.append(
                ScaleRecord(
                    index=len(records),
                    kind="bias",
                    path=path,
                    sigma=sigmas[path],
                    gamma_bias=bias_scale(s_out.rho2, tape[path]),
                )
            )
        elif isinstance(op, LearnableScalar):
            records.append(
                ScaleRecord(
                    index=len(records),
                    kind="scalar",
                    path=path,
                    sigma=sigmas[k_in],
                    nu_scalar=scalar_scale(op.init**2, sigmas[k_in]),
                )
            )
    return ScalingReport(tape, sigmas, tuple(records))


def preconditioned_check(report: ScalingReport, rel_tol: float = 1e-6) -> Verdict:
    """Preconditioned iff weight/scalar gammas agree and bias gammas agree, each within ``rel_tol``."""
    if not report.records:
        raise ValueError("empty report: no weighted layers, biases or learnable scalars")
    gamma_ratio = _ratio(r.gamma for r in report.records if r.kind != "bias")
    bias_ratio = _ratio(r.gamma_bias for r in report.biases)
    ok = gamma_ratio <= 1 + rel_tol and bias_ratio <= 1 + rel_tol
    return Verdict(ok, gamma_ratio, bias_ratio, rel_tol)


def analyze(
    graph: NetworkGraph,
    weights: Mapping[Path, float] | None = None,
    input_m2: float = 1.0,
    output_g2: float = 1.0,
    rel_tol: float = 1e-6,
) -> ScalingReport:
    """Propagate moments and build a full report with verdict."""
    report = report_from_tape(propagate(graph, weights, input_m2, output_g2))
    verdict = preconditioned_check(report, rel_tol) if report.records else None
    return ScalingReport(report.tape, report.sigmas, report.records, verdict)
