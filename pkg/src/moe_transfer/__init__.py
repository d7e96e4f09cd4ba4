"""Hyperparameter transfer for dense-FFN and MoE transformer blocks.

Tune a dense reference once, then map its initialization and AdamW
hyperparameters onto any FFN/MoE layout via active-width matching, a
normalized route scale, and batch/duration optimizer factors. Comes with a
Monte-Carlo micro-network verifier and an optimizer-proxy SDE simulator
that check the scale-matching and cancellation claims numerically.
"""

from .config import (
    BlockSpec,
    ConfigError,
    DenseFFN,
    GlobalBase,
    GroupBase,
    Hybrid,
    ModelConfig,
    NotRepresentableError,
    ParamGroup,
    ReferenceConfig,
    RoutedGroup,
    RouterKind,
    ScheduleConfig,
    SparseMoE,
    active_width,
    format_moe_notation,
    parse_moe_notation,
)
from .rng import DEFAULT_SEED, Rng
from .rules import (
    BetaRangeError,
    F_perturbative,
    GlobalRule,
    LayerRule,
    TransferResult,
    WorkloadDiag,
    capacity_composition,
    compose_transfer,
    compute_F,
    expert_workload,
    global_rule,
    granularity_check,
    layer_rule,
    router_rule,
    sigma0_shift,
    up_gate_rule,
)

__all__ = [
    "BlockSpec",
    "ConfigError",
    "DenseFFN",
    "GlobalBase",
    "GroupBase",
    "Hybrid",
    "ModelConfig",
    "NotRepresentableError",
    "ParamGroup",
    "ReferenceConfig",
    "RoutedGroup",
    "RouterKind",
    "ScheduleConfig",
    "SparseMoE",
    "active_width",
    "format_moe_notation",
    "parse_moe_notation",
    "DEFAULT_SEED",
    "Rng",
    "BetaRangeError",
    "F_perturbative",
    "GlobalRule",
    "LayerRule",
    "TransferResult",
    "WorkloadDiag",
    "capacity_composition",
    "compose_transfer",
    "compute_F",
    "expert_workload",
    "global_rule",
    "granularity_check",
    "layer_rule",
    "router_rule",
    "sigma0_shift",
    "up_gate_rule",
]

__version__ = "0.1.0"
