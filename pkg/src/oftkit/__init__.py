"""Orthogonal finetuning adapters with hyperspherical-energy diagnostics."""

from .adapter import (
    Adapter,
    OrthoTransform,
    SkewParams,
    cayley,
    coft_project,
    conv_view,
    forward,
    materialize,
    merge,
    param_count,
)
from .energy import EnergyReport, hyperspherical_energy, preservation_report
from .grad import adapter_grad, fd_oracle, grad_check

__version__ = "0.1.0"
