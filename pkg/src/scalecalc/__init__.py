"""Second-moment scaling analysis and initialization planning for feed-forward networks."""

from .graph import NetworkGraph, SpecError, ShapeError, build, load_spec, parse_spec
from .initplan import InitPlan, Scheme, make_plan
from .moments import propagate
from .scaling import analyze, preconditioned_check

__version__ = "0.1.0"

__all__ = [
    "InitPlan",
    "NetworkGraph",
    "Scheme",
    "ShapeError",
    "SpecError",
    "analyze",
    "build",
    "load_spec",
    "make_plan",
    "parse_spec",
    "preconditioned_check",
    "propagate",
]
