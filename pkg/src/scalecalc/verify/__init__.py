"""Numerical checks of the moment calculus on sampled networks."""

from .engine import (
    Grads,
    SampledNet,
    ShapeMismatchError,
    Trace,
    backward,
    conv_backward,
    conv_forward,
    run_network,
    weight_tangent,
)
from .estimate import (
    Comparison,
    EstimationConfig,
    LayerEstimate,
    PlanMismatchError,
    VerifyReport,
    compare,
    estimate_edge_moments,
    estimate_weight_gradient_ratio,
    gn_block_probe,
    gn_dense_oracle,
    gn_probe_batch,
    loss_gradient_m2,
    random_quadratic_loss,
    sample_loss_matrix,
    sample_weights,
    theory_report,
    verify_plan,
)

__all__ = [
    "Comparison",
    "EstimationConfig",
    "Grads",
    "LayerEstimate",
    "PlanMismatchError",
    "SampledNet",
    "ShapeMismatchError",
    "Trace",
    "VerifyReport",
    "backward",
    "compare",
    "conv_backward",
    "conv_forward",
    "estimate_edge_moments",
    "estimate_weight_gradient_ratio",
    "gn_block_probe",
    "gn_dense_oracle",
    "gn_probe_batch",
    "loss_gradient_m2",
    "random_quadratic_loss",
    "run_network",
    "sample_loss_matrix",
    "sample_weights",
    "theory_report",
    "verify_plan",
    "weight_tangent",
]
