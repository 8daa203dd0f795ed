"""Privacy-preserving distributed probabilistic load flow.

Simulated ISOs each hold their own rows of a decoupled linearized power flow
model.  They solve the augmented system jointly by projection-based consensus,
exchange only noise-masked values, and each obtain the Gaussian mixture of
their own region's states.
"""

from .errors import (
    ConvergenceError,
    InputError,
    NumericalError,
    PlfError,
    ProtocolError,
)
from .gmm import AffineMap, Gmm, fit_em, jsd, transform
from .network import assemble_dlpf, load_case, parse_case, partition_system
from .oracle import ComparisonReport, centralized_plf, compare, mc_dlpf
from .protocol import PlfConfig, build_plan, run_distributed_plf

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "ComparisonReport",
    "ConvergenceError",
    "Gmm",
    "InputError",
    "NumericalError",
    "PlfConfig",
    "PlfError",
    "ProtocolError",
    "assemble_dlpf",
    "build_plan",
    "centralized_plf",
    "compare",
    "fit_em",
    "jsd",
    "load_case",
    "mc_dlpf",
    "parse_case",
    "partition_system",
    "run_distributed_plf",
    "transform",
]
