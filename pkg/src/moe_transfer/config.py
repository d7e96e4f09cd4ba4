"""Layout, schedule, and reference-configuration value types.

Describes FFN/MoE block layouts (dense, sparse top-k, hybrid blocks mixing
always-active dense branches with routed expert groups), the training
schedule, the tuned dense reference every transfer starts from, and the
compact ``XeYaGgZs`` layout notation.

All types are immutable value objects; invariants are enforced at
construction, so downstream code never revalidates.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence, Union

__all__ = [
    "ConfigError",
    "NotRepresentableError",
    "RouterKind",
    "DenseFFN",
    "SparseMoE",
    "RoutedGroup",
    "Hybrid",
    "BlockSpec",
    "ModelConfig",
    "ScheduleConfig",
    "ParamGroup",
    "GroupBase",
    "GlobalBase",
    "ReferenceConfig",
    "active_width",
    "parse_moe_notation",
    "format_moe_notation",
    "block_to_dict",
    "block_from_dict",
    "model_to_dict",
    "model_from_dict",
    "schedule_to_dict",
    "schedule_from_dict",
    "reference_to_dict",
    "reference_from_dict",
    "dumps",
]


class ConfigError(ValueError):
    """Validation or parse failure, carrying the offending field path."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class NotRepresentableError(ValueError):
    """Block cannot be expressed in the ``XeYaGgZs`` grammar."""


class RouterKind(Enum):
    """Normalization applied to the selected router scores."""

    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


def _require_positive_int(value: Any, path: str, label: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(path, f"{label} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class DenseFFN:
    """Always-active FFN of hidden width ``H``."""

    H: int

    def __post_init__(self) -> None:
        _require_positive_int(self.H, "block.H", "hidden width H")


@dataclass(frozen=True)
class SparseMoE:
    """Top-``a`` token-choice MoE with ``N`` experts of width ``h`` each.

    The all-active case ``a == N`` is the Dense-MoE companion.
    """

    N: int
    a: int
    h: int
    router: RouterKind

    def __post_init__(self) -> None:
        _require_positive_int(self.N, "block.N", "total experts N")
        _require_positive_int(self.h, "block.h", "per-expert width h")
        if not isinstance(self.a, int) or isinstance(self.a, bool) or not 1 <= self.a <= self.N:
            raise ConfigError("block.a", f"activated experts must satisfy 1 <= a <= N, got a={self.a!r} with N={self.N}")
        if not isinstance(self.router, RouterKind):
            raise ConfigError("block.router", f"expected RouterKind, got {self.router!r}")


@dataclass(frozen=True)
class RoutedGroup:
    """One routed group of a hybrid block: ``N_g`` experts of width ``h_g``."""

    N_g: int
    h_g: int

    def __post_init__(self) -> None:
        _require_positive_int(self.N_g, "block.routed_groups.N_g", "group expert count N_g")
        _require_positive_int(self.h_g, "block.routed_groups.h_g", "group expert width h_g")


@dataclass(frozen=True)
class Hybrid:
    """Block mixing always-active dense branches with routed expert groups.

    ``a`` activated experts are selected group-balanced (``a / G`` per
    group), with routing weights normalized jointly across all selected
    experts. Shared experts are plain dense branches; there is no separate
    shared-expert type.
    """

    dense_branches: tuple[int, ...]
    routed_groups: tuple[RoutedGroup, ...]
    a: int
    router: RouterKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "dense_branches", tuple(self.dense_branches))
        object.__setattr__(self, "routed_groups", tuple(self.routed_groups))
        for i, width in enumerate(self.dense_branches):
            _require_positive_int(width, f"block.dense_branches[{i}]", "dense branch width")
        _require_positive_int(self.a, "block.a", "activated experts a")
        if not isinstance(self.router, RouterKind):
            raise ConfigError("block.router", f"expected RouterKind, got {self.router!r}")
        if self.routed_groups:
            total = sum(g.N_g for g in self.routed_groups)
            if self.a > total:
                raise ConfigError("block.a", f"activated experts exceed total experts: {self.a} > {total}")
            if self.a % len(self.routed_groups) != 0:
                raise ConfigError(
                    "block.a",
                    f"group-balanced selection needs a divisible by the group count, got a={self.a} with {len(self.routed_groups)} groups",
                )
        elif not self.dense_branches:
            raise ConfigError("block.routed_groups", "hybrid needs at least one dense branch or routed group")


BlockSpec = Union[DenseFFN, SparseMoE, Hybrid]


def active_width(block: BlockSpec) -> int:
    """Hidden width applied to one token: H, a*h, or the hybrid total.

    For hybrids, group-balanced selection activates ``a / G`` experts in
    each group, so the routed part contributes ``(a / G) * sum(h_g)`` on
    top of the always-active dense widths.
    """
    if isinstance(block, DenseFFN):
        return block.H
    if isinstance(block, SparseMoE):
        return block.a * block.h
    if isinstance(block, Hybrid):
        width = sum(block.dense_branches)
        if block.routed_groups:
            per_group = block.a // len(block.routed_groups)
            width += per_group * sum(g.h_g for g in block.routed_groups)
        return width
    raise TypeError(f"not a block spec: {block!r}")


_NOTATION_RE = re.compile(r"^(\d+)e(\d+)a(?:(\d+)g)?(?:(\d+)s)?$")


def parse_moe_notation(
    text: str,
    h: int,
    shared_width: int | None = None,
    router: RouterKind = RouterKind.SOFTMAX,
) -> BlockSpec:
    """Parse ``XeYa[Gg][Zs]`` into a block spec.

    The notation does not encode widths, so the per-expert width ``h`` (and
    ``shared_width`` when a ``Zs`` part is present) must be supplied.
    ``XeYa`` alone yields a SparseMoE; a group or shared part yields a
    Hybrid (with the X experts split into G equal groups).
    """
    match = _NOTATION_RE.match(text.strip())
    if match is None:
        raise ConfigError("notation", f"malformed layout notation: {text!r}")
    total, act = int(match.group(1)), int(match.group(2))
    groups = int(match.group(3)) if match.group(3) is not None else None
    shared = int(match.group(4)) if match.group(4) is not None else None
    _require_positive_int(h, "notation.h", "per-expert width h")
    if total < 1 or act < 1:
        raise ConfigError("notation", f"expert counts must be positive in {text!r}")
    if act > total:
        raise ConfigError("notation", f"activated experts exceed total experts: {act} > {total}")
    if groups is not None and groups < 1:
        raise ConfigError("notation", f"group count must be positive in {text!r}")
    if shared is not None and shared < 1:
        raise ConfigError("notation", f"shared-expert count must be positive in {text!r}")
    if groups is not None and total % groups != 0:
        raise ConfigError("notation", f"total experts {total} not divisible into {groups} equal groups")

    if groups is None and shared is None:
        return SparseMoE(N=total, a=act, h=h, router=router)

    n_groups = groups if groups is not None else 1
    routed = tuple(RoutedGroup(N_g=total // n_groups, h_g=h) for _ in range(n_groups))
    dense: tuple[int, ...] = ()
    if shared is not None:
        if shared_width is None:
            raise ConfigError("notation.shared_width", "shared-expert width required for a Zs part")
        _require_positive_int(shared_width, "notation.shared_width", "shared-expert width")
        dense = (shared_width,) * shared
    return Hybrid(dense_branches=dense, routed_groups=routed, a=act, router=router)


def format_moe_notation(block: BlockSpec) -> str:
    """Inverse of :func:`parse_moe_notation` for representable blocks.

    Requires equal-size routed groups with one common expert width and
    equal-width dense branches; anything else (including plain dense FFNs)
    raises :class:`NotRepresentableError`.
    """
    if isinstance(block, SparseMoE):
        return f"{block.N}e{block.a}a"
    if not isinstance(block, Hybrid):
        raise NotRepresentableError(f"only sparse MoE and hybrid blocks have a notation, got {type(block).__name__}")
    if not block.routed_groups:
        raise NotRepresentableError("hybrid without routed groups is not representable")
    sizes = {g.N_g for g in block.routed_groups}
    widths = {g.h_g for g in block.routed_groups}
    if len(sizes) != 1 or len(widths) != 1:
        raise NotRepresentableError("routed groups must share one size and one expert width")
    if len(set(block.dense_branches)) > 1:
        raise NotRepresentableError("dense branches must share one width")
    total = sum(g.N_g for g in block.routed_groups)
    n_groups = len(block.routed_groups)
    text = f"{total}e{block.a}a"
    if n_groups > 1 or not block.dense_branches:
        text += f"{n_groups}g"
    if block.dense_branches:
        text += f"{len(block.dense_branches)}s"
    return text


@dataclass(frozen=True)
class ModelConfig:
    """Residual width, layer count, and the FFN/MoE block layout."""

    d: int
    L: int
    block: BlockSpec

    def __post_init__(self) -> None:
        _require_positive_int(self.d, "model.d", "residual width d")
        _require_positive_int(self.L, "model.L", "layer count L")
        if not isinstance(self.block, (DenseFFN, SparseMoE, Hybrid)):
            raise ConfigError("model.block", f"expected a block spec, got {self.block!r}")


@dataclass(frozen=True)
class ScheduleConfig:
    """Tokens per optimizer step and step count; the token budget D = B*T is derived."""

    B: int
    T: int

    def __post_init__(self) -> None:
        _require_positive_int(self.B, "schedule.B", "batch B")
        _require_positive_int(self.T, "schedule.T", "steps T")

    @property
    def D(self) -> int:
        return self.B * self.T


class ParamGroup(Enum):
    """Parameter groups every transferable tensor maps into."""

    ROUTER_GATE = "router_gate"
    UP_GATE_PROJECTION = "up_gate_projection"
    DOWN_PROJECTION = "down_projection"
    RESIDUAL_DEPTH_SENSITIVE = "residual_depth_sensitive"


@dataclass(frozen=True)
class GroupBase:
    """Tuned per-group base values from the dense reference scan."""

    init_std: float
    lr: float

    def __post_init__(self) -> None:
        if not self.init_std > 0:
            raise ConfigError("base.init_std", f"init_std must be positive, got {self.init_std!r}")
        if not self.lr > 0:
            raise ConfigError("base.lr", f"lr must be positive, got {self.lr!r}")


@dataclass(frozen=True)
class GlobalBase:
    """Shared AdamW scalars of the reference run."""

    wd: float
    eps: float
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        if self.wd < 0:
            raise ConfigError("base_global.wd", f"weight decay must be nonnegative, got {self.wd!r}")
        if not self.eps > 0:
            raise ConfigError("base_global.eps", f"eps must be positive, got {self.eps!r}")
        for name in ("beta1", "beta2"):
            beta = getattr(self, name)
            if not 0 < beta < 1:
                raise ConfigError(f"base_global.{name}", f"{name} must lie in (0, 1), got {beta!r}")


@dataclass(frozen=True)
class ReferenceConfig:
    """The tuned dense reference a transfer starts from.

    The block must be a dense FFN: the whole point is to scan dense once
    and map every MoE target back to it.
    """

    model: ModelConfig
    schedule: ScheduleConfig
    base: Mapping[ParamGroup, GroupBase]
    base_global: GlobalBase

    def __post_init__(self) -> None:
        if not isinstance(self.model.block, DenseFFN):
            raise ConfigError("model.block", "reference block must be a dense FFN")
        object.__setattr__(self, "base", dict(self.base))
        missing = [g for g in ParamGroup if g not in self.base]
        if missing:
            raise ConfigError("base", f"missing parameter groups: {[g.value for g in missing]}")


# ---------------------------------------------------------------------------
# Serialization to / from the JSON-compatible tree format.
# ---------------------------------------------------------------------------


def dumps(doc: Mapping[str, Any]) -> str:
    """Canonical document encoding: sorted keys, stable float repr."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _expect_mapping(node: Any, path: str) -> Mapping[str, Any]:
    if not isinstance(node, Mapping):
        raise ConfigError(path, f"expected an object, got {type(node).__name__}")
    return node


def _get(node: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in node:
        raise ConfigError(f"{path}.{key}", "missing field")
    return node[key]


def _get_int(node: Mapping[str, Any], key: str, path: str) -> int:
    value = _get(node, key, path)
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    return value


def _get_float(node: Mapping[str, Any], key: str, path: str) -> float:
    value = _get(node, key, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    return float(value)


def _router_from(value: Any, path: str) -> RouterKind:
    try:
        return RouterKind(value)
    except ValueError:
        raise ConfigError(path, f"router must be 'softmax' or 'sigmoid', got {value!r}") from None


def block_to_dict(block: BlockSpec) -> dict[str, Any]:
    if isinstance(block, DenseFFN):
        return {"kind": "dense_ffn", "H": block.H}
    if isinstance(block, SparseMoE):
        return {"kind": "sparse_moe", "N": block.N, "a": block.a, "h": block.h, "router": block.router.value}
    if isinstance(block, Hybrid):
        return {
            "kind": "hybrid",
            "dense_branches": list(block.dense_branches),
            "routed_groups": [{"N_g": g.N_g, "h_g": g.h_g} for g in block.routed_groups],
            "a": block.a,
            "router": block.router.value,
        }
    raise TypeError(f"not a block spec: {block!r}")


def block_from_dict(node: Any, path: str = "block") -> BlockSpec:
    node = _expect_mapping(node, path)
    kind = _get(node, "kind", path)
    if kind == "dense_ffn":
        return DenseFFN(H=_get_int(node, "H", path))
    if kind == "sparse_moe":
        return SparseMoE(
            N=_get_int(node, "N", path),
            a=_get_int(node, "a", path),
            h=_get_int(node, "h", path),
            router=_router_from(_get(node, "router", path), f"{path}.router"),
        )
    if kind == "hybrid":
        raw_groups = _get(node, "routed_groups", path)
        if not isinstance(raw_groups, Sequence) or isinstance(raw_groups, str):
            raise ConfigError(f"{path}.routed_groups", "expected an array")
        groups = []
        for i, g in enumerate(raw_groups):
            g = _expect_mapping(g, f"{path}.routed_groups[{i}]")
            groups.append(RoutedGroup(N_g=_get_int(g, "N_g", f"{path}.routed_groups[{i}]"), h_g=_get_int(g, "h_g", f"{path}.routed_groups[{i}]")))
        raw_dense = _get(node, "dense_branches", path)
        if not isinstance(raw_dense, Sequence) or isinstance(raw_dense, str):
            raise ConfigError(f"{path}.dense_branches", "expected an array")
        return Hybrid(
            dense_branches=tuple(int(w) for w in raw_dense),
            routed_groups=tuple(groups),
            a=_get_int(node, "a", path),
            router=_router_from(_get(node, "router", path), f"{path}.router"),
        )
    raise ConfigError(f"{path}.kind", f"unknown block kind {kind!r}")


def model_to_dict(model: ModelConfig) -> dict[str, Any]:
    return {"d": model.d, "L": model.L, "block": block_to_dict(model.block)}


def model_from_dict(node: Any, path: str = "model") -> ModelConfig:
    node = _expect_mapping(node, path)
    return ModelConfig(
        d=_get_int(node, "d", path),
        L=_get_int(node, "L", path),
        block=block_from_dict(_get(node, "block", path), f"{path}.block"),
    )


def schedule_to_dict(schedule: ScheduleConfig) -> dict[str, Any]:
    return {"B": schedule.B, "T": schedule.T, "D": schedule.D}


def schedule_from_dict(node: Any, path: str = "schedule") -> ScheduleConfig:
    node = _expect_mapping(node, path)
    schedule = ScheduleConfig(B=_get_int(node, "B", path), T=_get_int(node, "T", path))
    if "D" in node:
        stated = _get_int(node, "D", path)
        if stated != schedule.D:
            raise ConfigError(f"{path}.D", f"stated token budget {stated} != B*T = {schedule.D}")
    return schedule


def reference_to_dict(ref: ReferenceConfig) -> dict[str, Any]:
    return {
        "model": model_to_dict(ref.model),
        "schedule": schedule_to_dict(ref.schedule),
        "base": {
            group.value: {"init_std": base.init_std, "lr": base.lr}
            for group, base in ref.base.items()
        },
        "base_global": {
            "wd": ref.base_global.wd,
            "eps": ref.base_global.eps,
            "beta1": ref.base_global.beta1,
            "beta2": ref.base_global.beta2,
        },
    }


def reference_from_dict(node: Any, path: str = "reference") -> ReferenceConfig:
    node = _expect_mapping(node, path)
    base_node = _expect_mapping(_get(node, "base", path), f"{path}.base")
    base: dict[ParamGroup, GroupBase] = {}
    for key, entry in base_node.items():
        try:
            group = ParamGroup(key)
        except ValueError:
            raise ConfigError(f"{path}.base.{key}", f"unknown parameter group {key!r}") from None
        entry = _expect_mapping(entry, f"{path}.base.{key}")
        base[group] = GroupBase(
            init_std=_get_float(entry, "init_std", f"{path}.base.{key}"),
            lr=_get_float(entry, "lr", f"{path}.base.{key}"),
        )
    global_node = _expect_mapping(_get(node, "base_global", path), f"{path}.base_global")
    base_global = GlobalBase(
        wd=_get_float(global_node, "wd", f"{path}.base_global"),
        eps=_get_float(global_node, "eps", f"{path}.base_global"),
        beta1=_get_float(global_node, "beta1", f"{path}.base_global"),
        beta2=_get_float(global_node, "beta2", f"{path}.base_global"),
    )
    return ReferenceConfig(
        model=model_from_dict(_get(node, "model", path), f"{path}.model"),
        schedule=schedule_from_dict(_get(node, "schedule", path), f"{path}.schedule"),
        base=base,
        base_global=base_global,
    )
