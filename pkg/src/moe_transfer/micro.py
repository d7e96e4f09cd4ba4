"""Minimal numeric FFN/MoE layers for Monte-Carlo verification.

Instantiates dense, sparse top-k, and hybrid blocks with SwiGLU hidden
units, exact down-projection gradients, and a sign-proxy normalized update
(the exact realization of an update rule that ignores positive rescalings
of the raw gradient). Everything runs in float64 on numpy; layers are
immutable, and updates return new layers.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .config import (
    BlockSpec,
    DenseFFN,
    Hybrid,
    ParamGroup,
    RouterKind,
    SparseMoE,
    active_width,
    block_from_dict,
    block_to_dict,
)
from .rng import Rng
from .rules import layer_rule

__all__ = [
    "MicroLayer",
    "ForwardTrace",
    "DownGrads",
    "HiddenMoments",
    "assemble_layer",
    "init_layer",
    "route",
    "route_batch",
    "forward",
    "forward_batch",
    "down_grad",
    "sign_update",
    "save_layer",
    "load_layer",
]

_MAGIC = b"MOEMICRO"


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _sealed(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MicroLayer:
    """One instantiated FFN/MoE layer.

    Routed experts are stored flattened in group order; ``group_sizes``
    records the per-group expert counts for group-balanced selection.
    Weight arrays are read-only; ``sign_update`` returns a new layer.
    """

    d: int
    block: BlockSpec
    A: float
    R: float
    expert_up: tuple[np.ndarray, ...]
    expert_act: tuple[np.ndarray, ...]
    expert_down: tuple[np.ndarray, ...]
    router_w: np.ndarray | None
    router_b: np.ndarray | None
    dense_up: tuple[np.ndarray, ...]
    dense_act: tuple[np.ndarray, ...]
    dense_down: tuple[np.ndarray, ...]
    init_stds: Mapping[ParamGroup, float]
    group_sizes: tuple[int, ...]
    a: int
    router_kind: RouterKind | None

    @property
    def n_experts(self) -> int:
        return len(self.expert_up)

    @property
    def routed(self) -> bool:
        return self.a > 0


@dataclass(frozen=True)
class ForwardTrace:
    """Everything one forward pass produced, enough to form down-projection gradients."""

    y: np.ndarray
    active_set: np.ndarray
    pi: np.ndarray
    u_per_expert: tuple[np.ndarray, ...]
    logits: np.ndarray | None
    dense_u: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.pi.size and abs(float(self.pi.sum()) - 1.0) > 1e-6:
            raise ValueError(f"routing weights not normalized: sum = {float(self.pi.sum())!r}")


@dataclass(frozen=True)
class DownGrads:
    """Down-projection gradients: active experts by index, dense branches by position."""

    expert: Mapping[int, np.ndarray]
    dense: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class HiddenMoments:
    """Pooled hidden-coordinate moments collected during a batched forward."""

    sq_sum: float
    abs_sum: float
    count: int


def _expert_widths(block: BlockSpec) -> list[int]:
    if isinstance(block, SparseMoE):
        return [block.h] * block.N
    if isinstance(block, Hybrid):
        widths: list[int] = []
        for group in block.routed_groups:
            widths.extend([group.h_g] * group.N_g)
        return widths
    return []


def _layer_shape(block: BlockSpec) -> tuple[list[int], list[int], tuple[int, ...], int]:
    """(dense branch widths, expert widths, group sizes, activated count)."""
    if isinstance(block, DenseFFN):
        return [block.H], [], (), 0
    if isinstance(block, SparseMoE):
        return [], _expert_widths(block), (block.N,), block.a
    if isinstance(block, Hybrid):
        sizes = tuple(g.N_g for g in block.routed_groups)
        act = block.a if block.routed_groups else 0
        return list(block.dense_branches), _expert_widths(block), sizes, act
    raise TypeError(f"not a block spec: {block!r}")


def assemble_layer(
    block: BlockSpec,
    d: int,
    expert_up: Sequence[np.ndarray],
    expert_act: Sequence[np.ndarray],
    expert_down: Sequence[np.ndarray],
    router_w: np.ndarray | None,
    router_b: np.ndarray | None,
    dense_up: Sequence[np.ndarray],
    dense_act: Sequence[np.ndarray],
    dense_down: Sequence[np.ndarray],
    init_stds: Mapping[ParamGroup, float],
) -> MicroLayer:
    """Build a layer from explicit weights, validating every shape against the block."""
    dense_widths, expert_widths, group_sizes, act = _layer_shape(block)
    if [w.shape for w in expert_up] != [(h, d) for h in expert_widths]:
        raise ValueError("expert up-projection shapes do not match the block")
    if [w.shape for w in expert_act] != [(h, d) for h in expert_widths]:
        raise ValueError("expert gate-projection shapes do not match the block")
    if [w.shape for w in expert_down] != [(d, h) for h in expert_widths]:
        raise ValueError("expert down-projection shapes do not match the block")
    if [w.shape for w in dense_up] != [(h, d) for h in dense_widths]:
        raise ValueError("dense up-projection shapes do not match the block")
    if [w.shape for w in dense_act] != [(h, d) for h in dense_widths]:
        raise ValueError("dense gate-projection shapes do not match the block")
    if [w.shape for w in dense_down] != [(d, h) for h in dense_widths]:
        raise ValueError("dense down-projection shapes do not match the block")
    n_experts = len(expert_widths)
    router_kind: RouterKind | None = None
    if n_experts:
        if router_w is None or router_w.shape != (n_experts, d):
            raise ValueError(f"router must have shape ({n_experts}, {d})")
        if router_b is None or router_b.shape != (n_experts,):
            raise ValueError(f"router bias must have shape ({n_experts},)")
        router_kind = block.router  # type: ignore[union-attr]
    elif router_w is not None or router_b is not None:
        raise ValueError("dense-only block takes no router")
    rule = layer_rule(block, d, d)
    return MicroLayer(
        d=d,
        block=block,
        A=rule.A,
        R=rule.R,
        expert_up=tuple(_sealed(w) for w in expert_up),
        expert_act=tuple(_sealed(w) for w in expert_act),
        expert_down=tuple(_sealed(w) for w in expert_down),
        router_w=_sealed(router_w) if router_w is not None else None,
        router_b=_sealed(router_b) if router_b is not None else None,
        dense_up=tuple(_sealed(w) for w in dense_up),
        dense_act=tuple(_sealed(w) for w in dense_act),
        dense_down=tuple(_sealed(w) for w in dense_down),
        init_stds=dict(init_stds),
        group_sizes=group_sizes,
        a=act,
        router_kind=router_kind,
    )


def _check_empirical_std(arr: np.ndarray, std: float) -> None:
    # Sampling sanity gate, only meaningful for large tensors.
    if arr.size < 10_000:
        return
    empirical = float(arr.std())
    if std == 0.0:
        if empirical != 0.0:
            raise RuntimeError("zero-std tensor came out nonzero")
    elif abs(empirical / std - 1.0) > 0.05:
        raise RuntimeError(f"empirical std {empirical} strays more than 5% from prescribed {std}")


def init_layer(block: BlockSpec, d: int, stds: Mapping[ParamGroup, float], rng: Rng) -> MicroLayer:
    """Draw i.i.d. zero-mean Gaussian weights with the prescribed per-group stds.

    The caller supplies final stds (any active-width scaling included);
    router bias starts at zero so initial logits are zero-mean. Draw order
    is fixed (experts, router, dense branches) so a seed pins the layer.
    """
    dense_widths, expert_widths, _, _ = _layer_shape(block)
    for group in (ParamGroup.UP_GATE_PROJECTION, ParamGroup.DOWN_PROJECTION):
        if group not in stds:
            raise ValueError(f"missing init std for {group.value}")
        if stds[group] < 0:
            raise ValueError(f"init std for {group.value} must be nonnegative")
    up_std = stds[ParamGroup.UP_GATE_PROJECTION]
    down_std = stds[ParamGroup.DOWN_PROJECTION]
    gen = rng.gen

    expert_up = [gen.normal(0.0, up_std, (h, d)) for h in expert_widths]
    expert_act = [gen.normal(0.0, up_std, (h, d)) for h in expert_widths]
    expert_down = [gen.normal(0.0, down_std, (d, h)) for h in expert_widths]
    router_w = router_b = None
    if expert_widths:
        if ParamGroup.ROUTER_GATE not in stds:
            raise ValueError("routed block needs a router init std")
        router_w = gen.normal(0.0, stds[ParamGroup.ROUTER_GATE], (len(expert_widths), d))
        router_b = np.zeros(len(expert_widths))
    dense_up = [gen.normal(0.0, up_std, (h, d)) for h in dense_widths]
    dense_act = [gen.normal(0.0, up_std, (h, d)) for h in dense_widths]
    dense_down = [gen.normal(0.0, down_std, (d, h)) for h in dense_widths]

    for arr in expert_up + expert_act + dense_up + dense_act:
        _check_empirical_std(arr, up_std)
    for arr in expert_down + dense_down:
        _check_empirical_std(arr, down_std)
    if router_w is not None:
        _check_empirical_std(router_w, stds[ParamGroup.ROUTER_GATE])

    return assemble_layer(
        block, d, expert_up, expert_act, expert_down, router_w, router_b,
        dense_up, dense_act, dense_down, init_stds=stds,
    )


def _select_batch(layer: MicroLayer, logits: np.ndarray) -> np.ndarray:
    """Row-wise activated-expert indices, ascending; ties go to the lowest index."""
    n_groups = len(layer.group_sizes)
    if n_groups <= 1:
        picks = np.argsort(-logits, axis=1, kind="stable")[:, : layer.a]
    else:
        if layer.a % n_groups != 0:
            raise ValueError("group-balanced selection needs a divisible by the group count")
        per_group = layer.a // n_groups
        parts = []
        offset = 0
        for size in layer.group_sizes:
            if per_group > size:
                raise ValueError("group-balanced selection asks for more experts than a group holds")
            segment = logits[:, offset : offset + size]
            parts.append(np.argsort(-segment, axis=1, kind="stable")[:, :per_group] + offset)
            offset += size
        picks = np.concatenate(parts, axis=1)
    return np.sort(picks, axis=1)


def _normalize_batch(kind: RouterKind, selected_logits: np.ndarray) -> np.ndarray:
    if kind is RouterKind.SOFTMAX:
        z = selected_logits - selected_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    scores = 1.0 / (1.0 + np.exp(-selected_logits))
    return scores / scores.sum(axis=1, keepdims=True)


def route_batch(layer: MicroLayer, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Route a batch of rows: (active indices, normalized weights, raw logits)."""
    if not layer.routed:
        raise ValueError("dense-only layer has no router")
    assert layer.router_w is not None and layer.router_b is not None
    logits = X @ layer.router_w.T + layer.router_b
    sel = _select_batch(layer, logits)
    pi = _normalize_batch(layer.router_kind, np.take_along_axis(logits, sel, axis=1))
    return sel, pi, logits


def route(layer: MicroLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Select the activated experts for one token and normalize their weights.

    Selection takes the ``a`` largest logits (group-balanced for grouped
    hybrids), breaking ties toward the lowest expert index; the returned
    weights are softmax- or sigmoid-normalized over the selection and sum
    to one.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (layer.d,):
        raise ValueError(f"expected input of shape ({layer.d},), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    sel, pi, _ = route_batch(layer, x[None, :])
    return sel[0], pi[0]


def _hidden(up: np.ndarray, act: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _silu(act @ x) * (up @ x)


def forward(layer: MicroLayer, x: np.ndarray) -> ForwardTrace:
    """One-token forward pass.

    Dense branches always contribute; routed experts contribute through the
    normalized routed sum scaled by the route scale R; the whole block is
    scaled by the active-width multiplier A.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (layer.d,):
        raise ValueError(f"expected input of shape ({layer.d},), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")

    dense_u = tuple(_hidden(up, act, x) for up, act in zip(layer.dense_up, layer.dense_act))
    acc = np.zeros(layer.d)
    for down, u in zip(layer.dense_down, dense_u):
        acc += down @ u

    if layer.routed:
        sel, pi, logits = route_batch(layer, x[None, :])
        sel, pi, logits = sel[0], pi[0], logits[0]
        u_per_expert = tuple(_hidden(layer.expert_up[e], layer.expert_act[e], x) for e in sel)
        routed = np.zeros(layer.d)
        for weight, e, u in zip(pi, sel, u_per_expert):
            routed += weight * (layer.expert_down[e] @ u)
        acc += layer.R * routed
    else:
        sel = np.zeros(0, dtype=int)
        pi = np.zeros(0)
        logits = None
        u_per_expert = ()

    return ForwardTrace(
        y=layer.A * acc,
        active_set=sel,
        pi=pi,
        u_per_expert=u_per_expert,
        logits=logits,
        dense_u=dense_u,
    )


def forward_batch(
    layer: MicroLayer,
    X: np.ndarray,
    collect_hidden: bool = False,
) -> np.ndarray | tuple[np.ndarray, HiddenMoments]:
    """Vectorized forward over rows of ``X``; row-identical to :func:`forward`."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != layer.d:
        raise ValueError(f"expected inputs of shape (n, {layer.d}), got {X.shape}")
    n = X.shape[0]
    acc = np.zeros((n, layer.d))
    sq_sum = abs_sum = 0.0
    count = 0

    for up, act, down in zip(layer.dense_up, layer.dense_act, layer.dense_down):
        U = _silu(X @ act.T) * (X @ up.T)
        acc += U @ down.T
        if collect_hidden:
            sq_sum += float((U * U).sum())
            abs_sum += float(np.abs(U).sum())
            count += U.size

    if layer.routed:
        sel, pi, _ = route_batch(layer, X)
        routed = np.zeros((n, layer.d))
        for e in range(layer.n_experts):
            mask = sel == e
            rows = np.nonzero(mask.any(axis=1))[0]
            if rows.size == 0:
                continue
            weights = pi[mask]
            U = _silu(X[rows] @ layer.expert_act[e].T) * (X[rows] @ layer.expert_up[e].T)
            routed[rows] += weights[:, None] * (U @ layer.expert_down[e].T)
            if collect_hidden:
                sq_sum += float((U * U).sum())
                abs_sum += float(np.abs(U).sum())
                count += U.size
        acc += layer.R * routed

    Y = layer.A * acc
    if collect_hidden:
        return Y, HiddenMoments(sq_sum=sq_sum, abs_sum=abs_sum, count=count)
    return Y


def down_grad(trace: ForwardTrace, layer: MicroLayer, g: np.ndarray) -> DownGrads:
    """Down-projection gradients of <y, g> from a recorded forward pass.

    Active expert e receives ``A * R * pi_e * outer(g, u_e)``; dense
    branches receive ``A * outer(g, u_m)``; inactive experts receive
    nothing (their gradient is zero). The output is exactly linear in the
    down projections, so these are the exact derivatives.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (layer.d,):
        raise ValueError(f"expected upstream vector of shape ({layer.d},), got {g.shape}")
    if len(trace.dense_u) != len(layer.dense_down) or any(
        u.shape != (down.shape[1],) for u, down in zip(trace.dense_u, layer.dense_down)
    ):
        raise ValueError("trace dense hiddens do not match this layer")
    if len(trace.u_per_expert) != len(trace.active_set):
        raise ValueError("trace active set and hiddens disagree")
    expert: dict[int, np.ndarray] = {}
    for weight, e, u in zip(trace.pi, trace.active_set, trace.u_per_expert):
        e = int(e)
        if e >= layer.n_experts or u.shape != (layer.expert_down[e].shape[1],):
            raise ValueError("trace expert hiddens do not match this layer")
        expert[e] = layer.A * layer.R * float(weight) * np.outer(g, u)
    dense = tuple(layer.A * np.outer(g, u) for u in trace.dense_u)
    return DownGrads(expert=expert, dense=dense)


def sign_update(layer: MicroLayer, grads: DownGrads, eta: Mapping[ParamGroup, float]) -> MicroLayer:
    """Apply the sign-proxy normalized update to the down projections.

    Each entry moves by exactly ``eta_down`` against the gradient sign (and
    not at all where the gradient is zero), so any positive rescaling of
    the raw gradient produces the identical update. Returns a new layer.
    """
    eta_down = eta[ParamGroup.DOWN_PROJECTION]
    if not eta_down >= 0:
        raise ValueError("learning rate must be nonnegative")
    expert_down = list(layer.expert_down)
    for e, grad in grads.expert.items():
        if grad.shape != expert_down[e].shape:
            raise ValueError("gradient shape does not match the layer")
        expert_down[e] = _sealed(expert_down[e] - eta_down * np.sign(grad))
    dense_down = list(layer.dense_down)
    for m, grad in enumerate(grads.dense):
        if grad.shape != dense_down[m].shape:
            raise ValueError("gradient shape does not match the layer")
        dense_down[m] = _sealed(dense_down[m] - eta_down * np.sign(grad))
    return replace(layer, expert_down=tuple(expert_down), dense_down=tuple(dense_down))


def _weight_arrays(layer: MicroLayer) -> list[np.ndarray]:
    arrays = list(layer.expert_up) + list(layer.expert_act) + list(layer.expert_down)
    if layer.router_w is not None:
        arrays += [layer.router_w, layer.router_b]
    arrays += list(layer.dense_up) + list(layer.dense_act) + list(layer.dense_down)
    return arrays


def save_layer(layer: MicroLayer, sink: str | BinaryIO) -> None:
    """Write the flat binary layer format: header, then little-endian f64 arrays in declaration order."""
    header = json.dumps(
        {
            "version": 1,
            "d": layer.d,
            "block": block_to_dict(layer.block),
            "init_stds": {group.value: std for group, std in layer.init_stds.items()},
        },
        sort_keys=True,
    ).encode("utf-8")
    own = isinstance(sink, str)
    fh: BinaryIO = open(sink, "wb") if own else sink  # type: ignore[arg-type]
    try:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in _weight_arrays(layer):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    finally:
        if own:
            fh.close()


def load_layer(source: str | bytes | BinaryIO) -> MicroLayer:
    """Read a layer written by :func:`save_layer`."""
    if isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    buf = io.BytesIO(data)
    if buf.read(len(_MAGIC)) != _MAGIC:
        raise ValueError("not a micro-layer file")
    (header_len,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(header_len).decode("utf-8"))
    d = int(header["d"])
    block = block_from_dict(header["block"])
    init_stds = {ParamGroup(key): float(val) for key, val in header["init_stds"].items()}

    dense_widths, expert_widths, _, _ = _layer_shape(block)

    def take(shape: tuple[int, int]) -> np.ndarray:
        size = shape[0] * shape[1] * 8
        raw = buf.read(size)
        if len(raw) != size:
            raise ValueError("truncated micro-layer file")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    expert_up = [take((h, d)) for h in expert_widths]
    expert_act = [take((h, d)) for h in expert_widths]
    expert_down = [take((d, h)) for h in expert_widths]
    router_w = router_b = None
    if expert_widths:
        router_w = take((len(expert_widths), d))
        router_b = take((1, len(expert_widths)))[0]
    dense_up = [take((h, d)) for h in dense_widths]
    dense_act = [take((h, d)) for h in dense_widths]
    dense_down = [take((d, h)) for h in dense_widths]
    if buf.read(1):
        raise ValueError("trailing bytes in micro-layer file")
    return assemble_layer(
        block, d, expert_up, expert_act, expert_down, router_w, router_b,
        dense_up, dense_act, dense_down, init_stds=init_stds,
    )
