"""Layer-level and global hyperparameter transfer rules.

Pure functions mapping a tuned dense reference onto any FFN/MoE target:
the active-width output multiplier, route scale, down-projection
init/learning-rate factors, the batch/duration factors on the global AdamW
scalars, and expert-workload diagnostics.

Ratio arithmetic runs on exact rationals before the final float
conversion, so identity transfers are bit-exact and the two-step
capacity composition cancels to the direct rule without rounding drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .config import (
    BlockSpec,
    ConfigError,
    DenseFFN,
    Hybrid,
    ModelConfig,
    ParamGroup,
    ReferenceConfig,
    RouterKind,
    ScheduleConfig,
    SparseMoE,
    active_width,
    block_to_dict,
)

__all__ = [
    "BetaRangeError",
    "LayerRule",
    "GlobalRule",
    "ExpertWorkload",
    "WorkloadDiag",
    "GroupSettings",
    "TransferResult",
    "CapacityComposition",
    "GranularityRatios",
    "route_scale",
    "layer_rule",
    "up_gate_rule",
    "router_rule",
    "global_rule",
    "expert_workload",
    "sigma0_shift",
    "compose_transfer",
    "capacity_composition",
    "granularity_check",
    "compute_F",
    "F_perturbative",
    "exact_forward_route_scale",
    "transfer_result_to_dict",
]

_ALGEBRA_TOL = 1e-12


class BetaRangeError(ConfigError):
    """The batch/duration factor pushed a momentum coefficient out of (0, 1)."""


@dataclass(frozen=True)
class LayerRule:
    """Output-branch rule for one block: multiplier, route scale, down-projection factors.

    ``A`` and ``R`` are the absolute forward scales of the target block
    (``A = d / H_act``; route scale 1 on dense sums, ``a`` on routed sums).
    The init/lr entries are multipliers on the width-``d_star``
    unit-expansion companion's down-projection values. ``F`` is the
    routing forward factor, kept at 1 in emitted rules.
    """

    A: float
    R: float
    init_std_factor: float
    lr_factor: float
    F: float = 1.0

    def __post_init__(self) -> None:
        for name in ("A", "R", "init_std_factor", "lr_factor", "F"):
            if not getattr(self, name) > 0:
                raise ValueError(f"layer rule field {name} must be positive")


@dataclass(frozen=True)
class GlobalRule:
    """Batch/duration factors on the global AdamW scalars, plus the depth multiplier."""

    eta_factor: float
    wd_factor: float
    eps_factor: float
    one_minus_beta_factor: float
    residual_branch_factor: float

    def __post_init__(self) -> None:
        if self.eta_factor != self.wd_factor:
            raise ValueError("learning-rate and weight-decay factors must coincide")
        if abs(self.eta_factor * self.eps_factor - 1.0) > _ALGEBRA_TOL:
            raise ValueError("eta and eps factors must be reciprocal")
        if abs(self.one_minus_beta_factor - self.eta_factor**2) > _ALGEBRA_TOL * max(1.0, self.one_minus_beta_factor):
            raise ValueError("1-beta factor must equal the squared eta factor")


@dataclass(frozen=True)
class ExpertWorkload:
    """Mean tokens per step / over training seen by one routed unit, and the density."""

    B_exp: float
    D_exp: float
    s: float


@dataclass(frozen=True)
class WorkloadDiag:
    """Transfer diagnostics: scaling ratios, expert workload, and the residual noise shift.

    ``rho_H_act`` is the target's active-width ratio H_act/d relative to the
    reference block's, so it is 1 for an identity transfer regardless of the
    reference's own expansion. ``sigma0_ratio`` is the expert-side
    signal-to-noise shift left over after the first-order learning-rate and
    weight-decay corrections cancel.
    """

    rho_d: float
    rho_L: float
    rho_B: float
    rho_D: float
    rho_H_act: float
    B_exp: float
    D_exp: float
    sparsity_s: float
    sigma0_ratio: float


@dataclass(frozen=True)
class GroupSettings:
    """Fully transferred per-group values."""

    init_std: float
    lr: float
    wd: float
    eps: float
    beta1: float
    beta2: float


@dataclass(frozen=True)
class TransferResult:
    """Everything a target run needs: per-group values, layer rule, global factors, diagnostics."""

    per_group: Mapping[ParamGroup, GroupSettings]
    layer: LayerRule
    global_rule: GlobalRule
    diagnostics: WorkloadDiag


@dataclass(frozen=True)
class CapacityComposition:
    """Two-step (companion widening, then re-sparsification) vs direct sparse rule."""

    two_step: LayerRule
    direct: LayerRule


@dataclass(frozen=True)
class GranularityRatios:
    """Dense-companion and sparse active-width ratios of a fixed-density repartition."""

    width_ratio_dense: float
    width_ratio_sparse: float


def route_scale(block: BlockSpec) -> float:
    """1 on dense sums; the activated-expert count on normalized routed sums."""
    if isinstance(block, DenseFFN):
        return 1.0
    if isinstance(block, SparseMoE):
        return float(block.a)
    if isinstance(block, Hybrid):
        return float(block.a) if block.routed_groups else 1.0
    raise TypeError(f"not a block spec: {block!r}")


def _layer_rule_exact(width_sq: Fraction, H_act: int, R: float, d: int, d_star: int) -> LayerRule:
    # width_sq is the squared init factor rho_H / rho_d as an exact rational.
    return LayerRule(
        A=float(Fraction(d, H_act)),
        R=R,
        init_std_factor=math.sqrt(float(width_sq)),
        lr_factor=float(Fraction(d_star, d)),
    )


def layer_rule(block: BlockSpec, d: int, d_star: int) -> LayerRule:
    """Output-branch transfer factors for a block at width ``d`` vs a ``d_star`` reference.

    With ``rho_d = d / d_star`` and ``rho_H = H_act / d``: the output
    multiplier is ``1 / rho_H``, the down-projection init factor is
    ``rho_d**-0.5 * rho_H**0.5``, and the learning-rate factor is
    ``rho_d**-1``. The route scale depends only on the block kind.
    """
    if d < 1 or d_star < 1:
        raise ValueError("widths must be positive")
    H_act = active_width(block)
    width_sq = Fraction(H_act * d_star, d * d)
    return _layer_rule_exact(width_sq, H_act, route_scale(block), d, d_star)


def up_gate_rule(d: int, d_star: int) -> tuple[float, float]:
    """Backbone-width factors (init_std, lr) for up/gate projections, per-expert copies included."""
    if d < 1 or d_star < 1:
        raise ValueError("widths must be positive")
    rho_d = Fraction(d, d_star)
    return math.sqrt(float(1 / rho_d)), float(1 / rho_d)


def router_rule(d: int, d_star: int) -> tuple[float, float]:
    """Backbone-width factors for the router readout (identical to up/gate)."""
    return up_gate_rule(d, d_star)


def global_rule(ref: ScheduleConfig, target: ScheduleConfig, L: int, L_star: int) -> GlobalRule:
    """Batch/duration factors on eta, wd, eps, 1-beta, plus the residual depth multiplier.

    eta and wd scale by sqrt(rho_B / rho_D), eps by its reciprocal, and
    1 - beta by rho_B / rho_D; at fixed token budget (rho_D = 1) the batch
    rule sqrt(rho_B) is exact.
    """
    if L < 1 or L_star < 1:
        raise ValueError("layer counts must be positive")
    rho_B = Fraction(target.B, ref.B)
    rho_D = Fraction(target.B * target.T, ref.B * ref.T)
    rho_L = Fraction(L, L_star)
    eta = math.sqrt(float(rho_B / rho_D))
    return GlobalRule(
        eta_factor=eta,
        wd_factor=eta,
        eps_factor=math.sqrt(float(rho_D / rho_B)),
        one_minus_beta_factor=float(rho_B / rho_D),
        residual_branch_factor=float(1 / rho_L),
    )


def expert_workload(block: BlockSpec, schedule: ScheduleConfig) -> ExpertWorkload:
    """Balanced-routing workload of one routed expert (the whole batch for dense blocks)."""
    B, T = schedule.B, schedule.T
    if isinstance(block, SparseMoE):
        b_exp = float(Fraction(B * block.a, block.N))
        return ExpertWorkload(B_exp=b_exp, D_exp=b_exp * T, s=float(Fraction(block.a, block.N)))
    if isinstance(block, Hybrid) and block.routed_groups:
        total = sum(g.N_g for g in block.routed_groups)
        b_exp = float(Fraction(B * block.a, total))
        return ExpertWorkload(B_exp=b_exp, D_exp=b_exp * T, s=float(Fraction(block.a, total)))
    return ExpertWorkload(B_exp=float(B), D_exp=float(B * T), s=1.0)


def sigma0_shift(source: Any, target: Any) -> float:
    """Residual expert-side noise-scale shift between two workloads.

    The first-order learning-rate and weight-decay corrections cancel when
    expert batch and duration move together, so this ratio
    ``1 / sqrt(B_exp_target / B_exp_source)`` is the only expert-side
    change a transfer leaves behind.
    """
    if not source.B_exp > 0 or not target.B_exp > 0:
        raise ValueError("workloads need a positive per-expert batch")
    return 1.0 / math.sqrt(target.B_exp / source.B_exp)


def _shift_beta(beta: float, factor: float, name: str) -> float:
    shifted = 1.0 - (1.0 - beta) * factor
    if not 0.0 < shifted < 1.0:
        raise BetaRangeError(f"base_global.{name}", f"transferred {name} = {shifted!r} falls outside (0, 1)")
    return shifted


def compose_transfer(
    reference: ReferenceConfig,
    target_model: ModelConfig,
    target_schedule: ScheduleConfig,
) -> TransferResult:
    """Full transfer from the dense reference to a target model and schedule.

    Down projections pick up the active-width init factor; up/gate, router,
    and residual groups follow the plain backbone-width rule. All learning
    rates carry ``rho_d**-1 * sqrt(rho_B / rho_D)``; wd, eps, and the betas
    carry the global schedule factors only. Architectural MoE changes at a
    fixed schedule introduce no extra learning-rate or weight-decay
    multiplier; the diagnostics record the residual noise-scale shift
    instead.
    """
    ref_model, ref_sched = reference.model, reference.schedule
    d, d_star = target_model.d, ref_model.d
    rho_d = Fraction(d, d_star)
    h_target = active_width(target_model.block)
    h_ref = active_width(ref_model.block)
    # Active-width ratio relative to the reference block, so identity == 1.
    rho_h_rel = Fraction(h_target * d_star, d * h_ref)

    glob = global_rule(ref_sched, target_schedule, target_model.L, ref_model.L)
    down_init_mult = math.sqrt(float(rho_h_rel / rho_d))
    backbone_init_mult = math.sqrt(float(1 / rho_d))
    lr_mult = float(1 / rho_d) * glob.eta_factor

    base_global = reference.base_global
    wd = base_global.wd * glob.wd_factor
    eps = base_global.eps * glob.eps_factor
    beta1 = _shift_beta(base_global.beta1, glob.one_minus_beta_factor, "beta1")
    beta2 = _shift_beta(base_global.beta2, glob.one_minus_beta_factor, "beta2")

    per_group: dict[ParamGroup, GroupSettings] = {}
    for group in ParamGroup:
        base = reference.base[group]
        init_mult = down_init_mult if group is ParamGroup.DOWN_PROJECTION else backbone_init_mult
        per_group[group] = GroupSettings(
            init_std=base.init_std * init_mult,
            lr=base.lr * lr_mult,
            wd=wd,
            eps=eps,
            beta1=beta1,
            beta2=beta2,
        )

    target_load = expert_workload(target_model.block, target_schedule)
    ref_load = expert_workload(ref_model.block, ref_sched)
    diag = WorkloadDiag(
        rho_d=float(rho_d),
        rho_L=float(Fraction(target_model.L, ref_model.L)),
        rho_B=float(Fraction(target_schedule.B, ref_sched.B)),
        rho_D=float(Fraction(target_schedule.B * target_schedule.T, ref_sched.B * ref_sched.T)),
        rho_H_act=float(rho_h_rel),
        B_exp=target_load.B_exp,
        D_exp=target_load.D_exp,
        sparsity_s=target_load.s,
        sigma0_ratio=sigma0_shift(ref_load, target_load),
    )
    return TransferResult(
        per_group=per_group,
        layer=layer_rule(target_model.block, d, d_star),
        global_rule=glob,
        diagnostics=diag,
    )


def capacity_composition(
    N: int,
    N_prime: int,
    a: int,
    h: int,
    d: int,
    d_star: int,
    router: RouterKind = RouterKind.SOFTMAX,
) -> CapacityComposition:
    """Total-expert transfer both ways: companion widening + re-sparsification vs direct.

    The companion step scales the all-active width N*h to N'*h; the
    reverse-sparsity step restores ``a`` activated experts. The widening
    factor cancels exactly against the sparsification, so the two-step
    rule equals ``layer_rule`` of the target sparse block.
    """
    if a > min(N, N_prime):
        raise ValueError(f"activated experts must not exceed either expert count, got a={a}, N={N}, N'={N_prime}")
    # Companion step, exact rationals: squared init factor for active width N'*h.
    companion_sq = Fraction(N_prime * h * d_star, d * d)
    # Re-sparsification multiplies the squared width factor by a/N' and the
    # output multiplier by its inverse.
    sparsify = Fraction(a, N_prime)
    two_step = _layer_rule_exact(companion_sq * sparsify, a * h, float(a), d, d_star)
    direct = layer_rule(SparseMoE(N=N_prime, a=a, h=h, router=router), d, d_star)
    return CapacityComposition(two_step=two_step, direct=direct)


def granularity_check(N: int, h: int, N_prime: int, h_prime: int, s: float) -> GranularityRatios:
    """Fixed-density repartition ratios; raises unless both sides stay consistent.

    At fixed routing density the sparse active-width ratio equals the
    all-active companion width ratio, and the per-expert workload fraction
    stays at ``s`` on both sides.
    """
    a = s * N
    a_prime = s * N_prime
    if abs(a - round(a)) > 1e-9 or abs(a_prime - round(a_prime)) > 1e-9:
        raise ValueError(f"density {s} gives non-integral activated counts: {a}, {a_prime}")
    a, a_prime = round(a), round(a_prime)
    if a < 1 or a_prime < 1:
        raise ValueError(f"density {s} activates no experts on one side")
    dense_ratio = Fraction(N_prime * h_prime, N * h)
    sparse_ratio = Fraction(a_prime * h_prime, a * h)
    if dense_ratio != sparse_ratio:
        raise ValueError("active-width ratio diverged from the companion width ratio")
    if Fraction(a, N) != Fraction(a_prime, N_prime):
        raise ValueError("routing density differs between the two sides")
    return GranularityRatios(width_ratio_dense=float(dense_ratio), width_ratio_sparse=float(sparse_ratio))


def compute_F(a: int, pi_samples: Sequence[Sequence[float]]) -> float:
    """Routing forward factor ``a * E[sum(pi**2)]`` from sampled routing weights.

    Each sample must be a normalized weight vector with at most ``a``
    nonzero entries; the result lies in [1, a], hitting 1 for uniform
    weights and ``a`` for one-hot weights.
    """
    if a < 1:
        raise ValueError("activated count must be positive")
    samples = [np.asarray(p, dtype=float) for p in pi_samples]
    if not samples:
        raise ValueError("empty sample list")
    total = 0.0
    for i, p in enumerate(samples):
        if (p < 0).any():
            raise ValueError(f"sample {i} has negative weights")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError(f"sample {i} is not normalized: sum = {float(p.sum())!r}")
        if int(np.count_nonzero(p)) > a:
            raise ValueError(f"sample {i} has more than {a} nonzero weights")
        total += float(p @ p)
    return a * total / len(samples)


def F_perturbative(a: int, logit_variance: float, router: RouterKind, ell_bar: float = 0.0) -> float:
    """Small-perturbation routing forward factor around equal selected logits.

    Softmax: ``1 + (a-1) * var / a``. Normalized sigmoid attenuates the
    deviation term by ``kappa(ell_bar)**2`` with
    ``kappa = sigmoid'(ell_bar) / sigmoid(ell_bar) = 1 - sigmoid(ell_bar)``.
    """
    if a < 1:
        raise ValueError("activated count must be positive")
    if logit_variance < 0:
        raise ValueError("logit variance must be nonnegative")
    excess = (a - 1) * logit_variance / a
    if router is RouterKind.SOFTMAX:
        return 1.0 + excess
    kappa = 1.0 - 1.0 / (1.0 + math.exp(-ell_bar))
    return 1.0 + kappa * kappa * excess


def exact_forward_route_scale(a: int, F: float) -> float:
    """Diagnostic-only exact-forward route scale ``a / sqrt(F)``; emitted rules keep R = a."""
    if not F > 0:
        raise ValueError("forward factor must be positive")
    return a / math.sqrt(F)


def transfer_result_to_dict(result: TransferResult) -> dict[str, Any]:
    """Stable document layout for a transfer result."""
    return {
        "per_group": {
            group.value: {
                "init_std": settings.init_std,
                "lr": settings.lr,
                "wd": settings.wd,
                "eps": settings.eps,
                "beta1": settings.beta1,
                "beta2": settings.beta2,
            }
            for group, settings in result.per_group.items()
        },
        "layer": {
            "A": result.layer.A,
            "R": result.layer.R,
            "F": result.layer.F,
            "init_std_factor": result.layer.init_std_factor,
            "lr_factor": result.layer.lr_factor,
        },
        "global": {
            "eta_factor": result.global_rule.eta_factor,
            "wd_factor": result.global_rule.wd_factor,
            "eps_factor": result.global_rule.eps_factor,
            "one_minus_beta_factor": result.global_rule.one_minus_beta_factor,
            "residual_branch_factor": result.global_rule.residual_branch_factor,
        },
        "diagnostics": {
            "rho_d": result.diagnostics.rho_d,
            "rho_L": result.diagnostics.rho_L,
            "rho_B": result.diagnostics.rho_B,
            "rho_D": result.diagnostics.rho_D,
            "rho_H_act": result.diagnostics.rho_H_act,
            "B_exp": result.diagnostics.B_exp,
            "D_exp": result.diagnostics.D_exp,
            "sparsity_s": result.diagnostics.sparsity_s,
            "sigma0_ratio": result.diagnostics.sigma0_ratio,
        },
    }
