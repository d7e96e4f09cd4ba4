"""Monte-Carlo scale-matching harness for micro layers.

Turns the transfer rules' matching claims into numerical assertions:
forward variance and one-step update magnitude agree between layouts at
equal active width, the routing forward factor agrees with its
small-perturbation expansion, and routing loads balance. Checks are
described by a plan (a list of layout pairs with tolerances) so negative
controls — layers built with a deliberately broken rule — are expressible
in the same format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .config import (
    BlockSpec,
    ConfigError,
    DenseFFN,
    ParamGroup,
    RouterKind,
    active_width,
    block_from_dict,
    block_to_dict,
    parse_moe_notation,
)
from .micro import MicroLayer, down_grad, forward, forward_batch, init_layer, route_batch, sign_update
from .rng import Rng

__all__ = [
    "MCEstimate",
    "FEstimate",
    "MatchReport",
    "ActivationStats",
    "LoadStats",
    "LayoutSpec",
    "PlanCheck",
    "VerifyPlan",
    "build_layer",
    "mc_forward_variance",
    "mc_update_magnitude",
    "measure_activation_stats",
    "mc_estimate_F",
    "routing_load_stats",
    "bridge_suite",
    "default_plan",
    "negative_control_plan",
    "plan_to_dict",
    "plan_from_dict",
    "report_to_dict",
    "report_table",
]

_CHUNK = 16384


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error."""

    mean: float
    std_error: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("an estimate needs at least two samples")
        if not (math.isfinite(self.mean) and math.isfinite(self.std_error)):
            raise ValueError("estimate must be finite")


@dataclass(frozen=True)
class FEstimate(MCEstimate):
    """Routing forward factor estimate plus the measured logit perturbation."""

    logit_variance: float = 0.0
    mean_logit: float = 0.0


@dataclass(frozen=True)
class MatchReport:
    """Outcome of one scale-matching check; passes iff the ratio sits within tolerance of 1."""

    quantity: str
    lhs: MCEstimate
    rhs: MCEstimate
    ratio: float
    tolerance: float
    passed: bool

    def __post_init__(self) -> None:
        if self.passed != (abs(self.ratio - 1.0) <= self.tolerance):
            raise ValueError("pass flag contradicts the ratio and tolerance")


@dataclass(frozen=True)
class ActivationStats:
    """Hidden-coordinate second moment and mean absolute value."""

    q_u: float
    mu_u: float


@dataclass(frozen=True)
class LoadStats:
    """Per-expert token loads, scaled so they sum to the activated count."""

    per_expert_load: np.ndarray
    sum_check: float


def _estimate(values: np.ndarray) -> MCEstimate:
    values = np.asarray(values, dtype=float)
    return MCEstimate(
        mean=float(values.mean()),
        std_error=float(values.std(ddof=1) / math.sqrt(values.size)),
        n=values.size,
    )


# ---------------------------------------------------------------------------
# Layout descriptions and layer construction.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutSpec:
    """One concrete micro layer to measure.

    ``down_std`` is the width-d unit companion's down-projection std; the
    built layer scales it by sqrt(H_act / d) per the active-width init
    rule. The override hooks build deliberately broken layers for negative
    controls: ``route_scale_override`` forces R, ``skip_width_init`` keeps
    the companion std unscaled.
    """

    label: str
    block: BlockSpec
    d: int
    down_std: float = 0.02
    up_std: float = 0.02
    router_std: float = 0.001
    input_std: float = 1.0
    route_scale_override: float | None = None
    skip_width_init: bool = False


def build_layer(spec: LayoutSpec, rng: Rng) -> MicroLayer:
    """Instantiate a layout with the active-width init rule (unless overridden)."""
    width_factor = 1.0 if spec.skip_width_init else math.sqrt(active_width(spec.block) / spec.d)
    stds = {
        ParamGroup.UP_GATE_PROJECTION: spec.up_std,
        ParamGroup.DOWN_PROJECTION: spec.down_std * width_factor,
        ParamGroup.ROUTER_GATE: spec.router_std,
    }
    layer = init_layer(spec.block, spec.d, stds, rng)
    if spec.route_scale_override is not None:
        layer = replace(layer, R=float(spec.route_scale_override))
    return layer


# ---------------------------------------------------------------------------
# Monte-Carlo estimators.
# ---------------------------------------------------------------------------


def mc_forward_variance(layer: MicroLayer, input_std: float, n: int, rng: Rng) -> MCEstimate:
    """Pooled output-coordinate variance over Gaussian inputs.

    The per-sample statistic is the mean squared output coordinate; its
    spread across samples gives the standard error.
    """
    if n < 1000:
        raise ValueError("forward-variance estimation needs n >= 1000")
    per_sample = np.empty(n)
    mean_acc = 0.0
    done = 0
    while done < n:
        take = min(_CHUNK, n - done)
        X = rng.gen.normal(0.0, input_std, (take, layer.d))
        Y = forward_batch(layer, X)
        if not np.isfinite(Y).all():
            raise RuntimeError(f"non-finite outputs in forward-variance estimation at samples {done}..{done + take}")
        per_sample[done : done + take] = (Y * Y).mean(axis=1)
        mean_acc += float(Y.sum())
        done += take
    overall_mean = mean_acc / (n * layer.d)
    est = _estimate(per_sample)
    return MCEstimate(mean=est.mean - overall_mean**2, std_error=est.std_error, n=n)


def mc_update_magnitude(layer: MicroLayer, eta_down: float, input_std: float, n: int, rng: Rng) -> MCEstimate:
    """Mean absolute one-step output change under the sign-proxy update.

    Each trial forwards a fresh Gaussian input, forms down-projection
    gradients against a fixed random sign vector, applies one sign update,
    and re-runs the forward on the same input.
    """
    if n < 1000:
        raise ValueError("update-magnitude estimation needs n >= 1000")
    eta = {ParamGroup.DOWN_PROJECTION: eta_down}
    gen = rng.gen
    per_sample = np.empty(n)
    for i in range(n):
        x = gen.normal(0.0, input_std, layer.d)
        g = np.where(gen.random(layer.d) < 0.5, -1.0, 1.0)
        trace = forward(layer, x)
        grads = down_grad(trace, layer, g)
        updated = sign_update(layer, grads, eta)
        delta = forward(updated, x).y - trace.y
        if not np.isfinite(delta).all():
            raise RuntimeError(f"non-finite update at sample {i}")
        per_sample[i] = np.abs(delta).mean()
    return _estimate(per_sample)


def measure_activation_stats(layer: MicroLayer, input_std: float, n: int, rng: Rng) -> ActivationStats:
    """Empirical hidden moments pooled across active branches and experts."""
    if n < 1000:
        raise ValueError("activation statistics need n >= 1000")
    sq_sum = abs_sum = 0.0
    count = 0
    done = 0
    while done < n:
        take = min(_CHUNK, n - done)
        X = rng.gen.normal(0.0, input_std, (take, layer.d))
        _, moments = forward_batch(layer, X, collect_hidden=True)
        sq_sum += moments.sq_sum
        abs_sum += moments.abs_sum
        count += moments.count
        done += take
    if count == 0:
        raise ValueError("layer has no hidden coordinates")
    return ActivationStats(q_u=sq_sum / count, mu_u=abs_sum / count)


def mc_estimate_F(layer: MicroLayer, input_std: float, n: int, rng: Rng) -> FEstimate:
    """Routing forward factor a * E[sum(pi**2)] plus measured logit perturbation.

    The logit variance is the mean squared deviation among each token's
    selected logits (normalized by a - 1), which is exactly what the
    perturbative expansion consumes.
    """
    if not layer.routed:
        raise ValueError("dense-only layer has no routing weights")
    if n < 1000:
        raise ValueError("forward-factor estimation needs n >= 1000")
    a = layer.a
    sums = np.empty(n)
    dev_sq = 0.0
    logit_mean = 0.0
    done = 0
    while done < n:
        take = min(_CHUNK, n - done)
        X = rng.gen.normal(0.0, input_std, (take, layer.d))
        sel, pi, logits = route_batch(layer, X)
        sums[done : done + take] = (pi * pi).sum(axis=1)
        selected = np.take_along_axis(logits, sel, axis=1)
        centered = selected - selected.mean(axis=1, keepdims=True)
        dev_sq += float((centered * centered).sum())
        logit_mean += float(selected.sum())
        done += take
    base = _estimate(sums)
    variance = dev_sq / (n * (a - 1)) if a > 1 else 0.0
    return FEstimate(
        mean=a * base.mean,
        std_error=a * base.std_error,
        n=n,
        logit_variance=variance,
        mean_logit=logit_mean / (n * a),
    )


def routing_load_stats(layer: MicroLayer, n_tokens: int, rng: Rng) -> LoadStats:
    """Fraction of tokens landing on each expert; loads always sum to the activated count."""
    if not layer.routed:
        raise ValueError("dense-only layer has no routing")
    if n_tokens < 1:
        raise ValueError("need at least one token")
    counts = np.zeros(layer.n_experts)
    done = 0
    while done < n_tokens:
        take = min(_CHUNK, n_tokens - done)
        X = rng.gen.normal(0.0, 1.0, (take, layer.d))
        sel, _, _ = route_batch(layer, X)
        counts += np.bincount(sel.ravel(), minlength=layer.n_experts)
        done += take
    loads = counts / n_tokens
    return LoadStats(per_expert_load=loads, sum_check=float(loads.sum()))


# ---------------------------------------------------------------------------
# Plans and the suite driver.
# ---------------------------------------------------------------------------

_CHECK_KINDS = ("forward_variance", "update_magnitude", "forward_factor", "load_balance")


@dataclass(frozen=True)
class PlanCheck:
    """One claim to verify: a matched pair, an F consistency check, or a load check.

    Matched-pair checks rerun over ``replicates`` independent layer draws
    (``n`` samples each) because the realized weights of one finite layer
    shift its variance by a percent or two; the ratio's standard error
    comes from the spread of per-replicate ratios.
    """

    kind: str
    label: str
    lhs: LayoutSpec
    rhs: LayoutSpec | None = None
    n: int = 20000
    tolerance: float = 0.05
    eta_down: float = 1e-3
    replicates: int = 5
    note: str = ""

    def __post_init__(self) -> None:
        if self.kind not in _CHECK_KINDS:
            raise ValueError(f"unknown check kind {self.kind!r}")
        if self.kind in ("forward_variance", "update_magnitude") and self.rhs is None:
            raise ValueError(f"{self.kind} check needs two layouts")
        if self.replicates < 2:
            raise ValueError("matched checks need at least two replicates")


@dataclass(frozen=True)
class VerifyPlan:
    checks: tuple[PlanCheck, ...]


def _measure(spec: LayoutSpec, check: PlanCheck, build_rng: Rng, mc_rng: Rng) -> MCEstimate:
    layer = build_layer(spec, build_rng)
    if check.kind == "forward_variance":
        return mc_forward_variance(layer, spec.input_std, check.n, mc_rng)
    return mc_update_magnitude(layer, check.eta_down, spec.input_std, check.n, mc_rng)


def matched_pair_report(check: PlanCheck, rng: Rng) -> MatchReport:
    """Ratio of two layouts' estimates over paired replicate layer draws."""
    assert check.rhs is not None
    k = check.replicates
    streams = rng.split(4 * k)
    lhs_means = np.empty(k)
    rhs_means = np.empty(k)
    for i in range(k):
        lhs_means[i] = _measure(check.lhs, check, streams[4 * i], streams[4 * i + 1]).mean
        rhs_means[i] = _measure(check.rhs, check, streams[4 * i + 2], streams[4 * i + 3]).mean
    ratios = lhs_means / rhs_means
    ratio = float(ratios.mean())
    ratio_se = float(ratios.std(ddof=1) / math.sqrt(k))
    tolerance = max(check.tolerance, 3.0 * ratio_se)
    lhs = MCEstimate(float(lhs_means.mean()), float(lhs_means.std(ddof=1) / math.sqrt(k)), k * check.n)
    rhs = MCEstimate(float(rhs_means.mean()), float(rhs_means.std(ddof=1) / math.sqrt(k)), k * check.n)
    return MatchReport(
        quantity=f"{check.kind}:{check.label}",
        lhs=lhs,
        rhs=rhs,
        ratio=ratio,
        tolerance=tolerance,
        passed=abs(ratio - 1.0) <= tolerance,
    )


def _run_check(check: PlanCheck, rng: Rng) -> MatchReport:
    quantity = f"{check.kind}:{check.label}"
    if check.kind in ("forward_variance", "update_magnitude"):
        return matched_pair_report(check, rng)

    if check.kind == "forward_factor":
        build_rng, mc_rng = rng.split(2)
        layer = build_layer(check.lhs, build_rng)
        est = mc_estimate_F(layer, check.lhs.input_std, check.n, mc_rng)
        from .rules import F_perturbative  # local import keeps module deps one-way

        predicted = F_perturbative(layer.a, est.logit_variance, layer.router_kind, est.mean_logit)
        rhs = MCEstimate(mean=predicted, std_error=0.0, n=est.n)
        ratio = est.mean / predicted
        tolerance = max(check.tolerance, 3.0 * est.std_error / predicted)
        return MatchReport(
            quantity=quantity,
            lhs=MCEstimate(est.mean, est.std_error, est.n),
            rhs=rhs,
            ratio=ratio,
            tolerance=tolerance,
            passed=abs(ratio - 1.0) <= tolerance,
        )

    # load_balance: loads averaged over independent router draws must sit
    # within 3 pooled standard errors of the balanced value a / N for every
    # expert. One realized finite-width router biases individual loads by
    # O(1/sqrt(d)), so uniformity is a claim about the router ensemble.
    streams = rng.split(2 * check.replicates)
    loads = []
    balanced = None
    for i in range(check.replicates):
        layer = build_layer(check.lhs, streams[2 * i])
        stats = routing_load_stats(layer, check.n, streams[2 * i + 1])
        if abs(stats.sum_check - layer.a) > 1e-9:
            raise RuntimeError(f"load conservation broken: sum {stats.sum_check} != {layer.a}")
        balanced = layer.a / layer.n_experts
        loads.append(stats.per_expert_load)
    stacked = np.array(loads)
    mean_loads = stacked.mean(axis=0)
    pooled_se = float(stacked.std(axis=0, ddof=1).mean()) / math.sqrt(check.replicates)
    worst = float(np.max(np.abs(mean_loads - balanced)))
    ratio = 1.0 + worst / balanced
    tolerance = max(check.tolerance, (3.0 * pooled_se / balanced) if pooled_se > 0 else 0.0)
    lhs = MCEstimate(mean=float(mean_loads.max()), std_error=pooled_se, n=check.replicates * check.n)
    rhs = MCEstimate(mean=balanced, std_error=0.0, n=check.replicates * check.n)
    return MatchReport(
        quantity=quantity,
        lhs=lhs,
        rhs=rhs,
        ratio=ratio,
        tolerance=tolerance,
        passed=abs(ratio - 1.0) <= tolerance,
    )


def bridge_suite(plan: VerifyPlan, rng: Rng) -> list[MatchReport]:
    """Run every plan check on its own split stream; reports come back in plan order."""
    if not plan.checks:
        return []
    streams = rng.split(len(plan.checks))
    reports = []
    for check, stream in zip(plan.checks, streams):
        try:
            reports.append(_run_check(check, stream))
        except Exception as exc:
            raise RuntimeError(f"check {check.kind}:{check.label} failed to run: {exc}") from exc
    return reports


# ---------------------------------------------------------------------------
# Built-in plans.
# ---------------------------------------------------------------------------


def _dense(label: str, H: int, d: int, **kw: Any) -> LayoutSpec:
    return LayoutSpec(label=label, block=DenseFFN(H=H), d=d, **kw)


def _sparse(label: str, notation: str, h: int, d: int, router: RouterKind = RouterKind.SOFTMAX, **kw: Any) -> LayoutSpec:
    return LayoutSpec(label=label, block=parse_moe_notation(notation, h=h, router=router), d=d, **kw)


def default_plan(forward_n: int = 12000, update_n: int = 1000) -> VerifyPlan:
    """The stock verification grid: all-active companions, sparse layers at a
    in {2, 4, 8, 16} and matched active width, capacity and fixed-density
    granularity pairs, and one shared-branch hybrid, plus routing-factor
    and load checks. Every check is expected to pass."""
    d = 128
    checks: list[PlanCheck] = []
    dense128 = _dense("dense_H128", 128, d)

    for n_exp, h in ((4, 32), (8, 16)):
        checks.append(
            PlanCheck(
                kind="forward_variance",
                label=f"dense128_vs_all_active_{n_exp}x{h}",
                lhs=_sparse(f"all_active_{n_exp}x{h}", f"{n_exp}e{n_exp}a", h=h, d=d),
                rhs=dense128,
                n=forward_n,
                tolerance=0.05,
            )
        )

    for a in (2, 4, 8, 16):
        h = 128 // a
        checks.append(
            PlanCheck(
                kind="update_magnitude",
                label=f"dense128_vs_64e{a}a_h{h}",
                lhs=_sparse(f"64e{a}a_h{h}", f"64e{a}a", h=h, d=d),
                rhs=dense128,
                n=update_n,
                tolerance=0.10,
                replicates=3,
            )
        )

    base_capacity = _sparse("16e4a_h32", "16e4a", h=32, d=d)
    for n_exp in (32, 64):
        checks.append(
            PlanCheck(
                kind="update_magnitude",
                label=f"capacity_16_vs_{n_exp}",
                lhs=_sparse(f"{n_exp}e4a_h32", f"{n_exp}e4a", h=32, d=d),
                rhs=base_capacity,
                n=update_n,
                tolerance=0.10,
                replicates=3,
            )
        )

    checks.append(
        PlanCheck(
            kind="forward_variance",
            label="granularity_s8_16e2a_h64_vs_64e8a_h16",
            lhs=_sparse("16e2a_h64", "16e2a", h=64, d=d),
            rhs=_sparse("64e8a_h16", "64e8a", h=16, d=d),
            n=forward_n,
            tolerance=0.05,
        )
    )
    checks.append(
        PlanCheck(
            kind="update_magnitude",
            label="granularity_s8_update",
            lhs=_sparse("16e2a_h64", "16e2a", h=64, d=d),
            rhs=_sparse("64e8a_h16", "64e8a", h=16, d=d),
            n=update_n,
            tolerance=0.10,
            replicates=3,
        )
    )

    hybrid = LayoutSpec(
        label="shared64_8e2a_h32",
        block=parse_moe_notation("8e2a1s", h=32, shared_width=64, router=RouterKind.SOFTMAX),
        d=d,
    )
    checks.append(
        PlanCheck(kind="forward_variance", label="hybrid_vs_dense128", lhs=hybrid, rhs=dense128, n=forward_n, tolerance=0.05)
    )
    checks.append(
        PlanCheck(kind="update_magnitude", label="hybrid_vs_dense128", lhs=hybrid, rhs=dense128, n=update_n, tolerance=0.10, replicates=3)
    )

    for router in (RouterKind.SOFTMAX, RouterKind.SIGMOID):
        checks.append(
            PlanCheck(
                kind="forward_factor",
                label=f"F_64e8a_{router.value}",
                lhs=_sparse(f"64e8a_{router.value}", "64e8a", h=16, d=d, router=router, router_std=0.002),
                n=4000,
                tolerance=0.0,
            )
        )

    checks.append(
        PlanCheck(
            kind="load_balance",
            label="loads_8e2a",
            lhs=_sparse("8e2a_h32", "8e2a", h=32, d=d),
            n=6250,
            tolerance=0.0,
            replicates=16,
        )
    )
    return VerifyPlan(checks=tuple(checks))


def negative_control_plan(forward_n: int = 12000, update_n: int = 1000) -> VerifyPlan:
    """Checks built with a deliberately broken rule; every entry is expected to fail.

    Dropping the route scale shrinks the one-step update by the activated
    count and the forward variance by its square; skipping the
    active-width init factor breaks the forward match as well.
    """
    d = 128
    dense128 = _dense("dense_H128", 128, d)
    checks = (
        PlanCheck(
            kind="update_magnitude",
            label="control_no_route_scale_64e8a",
            lhs=_sparse("64e8a_R1", "64e8a", h=16, d=d, route_scale_override=1.0),
            rhs=dense128,
            n=update_n,
            tolerance=0.10,
            replicates=3,
            note="expected ratio ~ 1/8",
        ),
        PlanCheck(
            kind="forward_variance",
            label="control_no_route_scale_all_active_8x16",
            lhs=_sparse("all_active_8x16_R1", "8e8a", h=16, d=d, route_scale_override=1.0),
            rhs=dense128,
            n=forward_n,
            tolerance=0.05,
            note="expected ratio ~ 1/64",
        ),
        PlanCheck(
            kind="forward_variance",
            label="control_no_width_init_4x64",
            lhs=_sparse("all_active_4x64_flat_init", "4e4a", h=64, d=d, skip_width_init=True),
            rhs=_dense("dense_H256", 256, d),
            n=forward_n,
            tolerance=0.05,
            note="expected ratio ~ 1/2: variance misses the H/d init factor",
        ),
    )
    return VerifyPlan(checks=checks)


# ---------------------------------------------------------------------------
# Plan / report serialization.
# ---------------------------------------------------------------------------


def _layout_to_dict(spec: LayoutSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "label": spec.label,
        "block": block_to_dict(spec.block),
        "d": spec.d,
        "down_std": spec.down_std,
        "up_std": spec.up_std,
        "router_std": spec.router_std,
        "input_std": spec.input_std,
    }
    if spec.route_scale_override is not None:
        out["route_scale_override"] = spec.route_scale_override
    if spec.skip_width_init:
        out["skip_width_init"] = True
    return out


def _layout_from_dict(node: Mapping[str, Any], path: str) -> LayoutSpec:
    if "block" in node:
        block = block_from_dict(node["block"], f"{path}.block")
    elif "notation" in node:
        block = parse_moe_notation(
            node["notation"],
            h=int(node.get("h", 0)),
            shared_width=node.get("shared_width"),
            router=RouterKind(node.get("router", "softmax")),
        )
    else:
        raise ConfigError(f"{path}.block", "layout needs a block or a notation")
    try:
        return LayoutSpec(
            label=str(node.get("label", "layout")),
            block=block,
            d=int(node["d"]),
            down_std=float(node.get("down_std", 0.02)),
            up_std=float(node.get("up_std", 0.02)),
            router_std=float(node.get("router_std", 0.001)),
            input_std=float(node.get("input_std", 1.0)),
            route_scale_override=(
                float(node["route_scale_override"]) if node.get("route_scale_override") is not None else None
            ),
            skip_width_init=bool(node.get("skip_width_init", False)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}", "missing field") from None


def plan_to_dict(plan: VerifyPlan) -> dict[str, Any]:
    checks = []
    for check in plan.checks:
        node: dict[str, Any] = {
            "kind": check.kind,
            "label": check.label,
            "lhs": _layout_to_dict(check.lhs),
            "n": check.n,
            "tolerance": check.tolerance,
            "eta_down": check.eta_down,
            "replicates": check.replicates,
        }
        if check.rhs is not None:
            node["rhs"] = _layout_to_dict(check.rhs)
        if check.note:
            node["note"] = check.note
        checks.append(node)
    return {"checks": checks}


def plan_from_dict(node: Mapping[str, Any], path: str = "plan") -> VerifyPlan:
    if not isinstance(node, Mapping) or "checks" not in node:
        raise ConfigError(f"{path}.checks", "plan needs a checks array")
    raw = node["checks"]
    if not isinstance(raw, Sequence) or isinstance(raw, str):
        raise ConfigError(f"{path}.checks", "expected an array")
    checks = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"{path}.checks[{i}]", "expected an object")
        here = f"{path}.checks[{i}]"
        if "kind" not in entry:
            raise ConfigError(f"{here}.kind", "missing field")
        rhs = _layout_from_dict(entry["rhs"], f"{here}.rhs") if "rhs" in entry else None
        try:
            checks.append(
                PlanCheck(
                    kind=str(entry["kind"]),
                    label=str(entry.get("label", f"check_{i}")),
                    lhs=_layout_from_dict(entry["lhs"], f"{here}.lhs"),
                    rhs=rhs,
                    n=int(entry.get("n", 20000)),
                    tolerance=float(entry.get("tolerance", 0.05)),
                    eta_down=float(entry.get("eta_down", 1e-3)),
                    replicates=int(entry.get("replicates", 5)),
                    note=str(entry.get("note", "")),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"{here}.{exc.args[0]}", "missing field") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(here, str(exc)) from None
    return VerifyPlan(checks=tuple(checks))


def report_to_dict(reports: Iterable[MatchReport]) -> dict[str, Any]:
    entries = [
        {
            "quantity": r.quantity,
            "lhs": {"mean": r.lhs.mean, "std_error": r.lhs.std_error, "n": r.lhs.n},
            "rhs": {"mean": r.rhs.mean, "std_error": r.rhs.std_error, "n": r.rhs.n},
            "ratio": r.ratio,
            "tolerance": r.tolerance,
            "pass": r.passed,
        }
        for r in reports
    ]
    return {"checks": entries, "all_pass": all(e["pass"] for e in entries)}


def report_table(reports: Iterable[MatchReport]) -> str:
    """Tab-separated summary, one row per check."""
    lines = ["quantity\tlhs\trhs\tratio\ttolerance\tpass"]
    for r in reports:
        lines.append(
            f"{r.quantity}\t{r.lhs.mean:.6g}\t{r.rhs.mean:.6g}\t{r.ratio:.6g}\t{r.tolerance:.6g}\t{str(r.passed).lower()}"
        )
    return "\n".join(lines) + "\n"
