"""Micro-layer numerics: routing, forward, gradients, sign updates, serialization."""

import io
import math
from dataclasses import replace

import numpy as np
import pytest

from moe_transfer.config import (
    DenseFFN,
    Hybrid,
    ParamGroup,
    RoutedGroup,
    RouterKind,
    SparseMoE,
    parse_moe_notation,
)
from moe_transfer.micro import (
    assemble_layer,
    down_grad,
    forward,
    forward_batch,
    init_layer,
    load_layer,
    route,
    route_batch,
    save_layer,
    sign_update,
)
from moe_transfer.rng import Rng

STDS = {
    ParamGroup.UP_GATE_PROJECTION: 0.05,
    ParamGroup.DOWN_PROJECTION: 0.05,
    ParamGroup.ROUTER_GATE: 0.05,
}


def small_layer(block, d=8, rng=None, stds=STDS):
    return init_layer(block, d, stds, rng or Rng(0))


class TestRngStreams:
    def test_same_seed_same_stream(self):
        a = Rng(123).gen.standard_normal(16)
        b = Rng(123).gen.standard_normal(16)
        assert np.array_equal(a, b)

    def test_split_children_differ(self):
        children = Rng(123).split(3)
        draws = [c.gen.standard_normal(8) for c in children]
        assert not np.array_equal(draws[0], draws[1])
        assert not np.array_equal(draws[1], draws[2])

    def test_split_is_reproducible(self):
        a = [c.gen.standard_normal(4) for c in Rng(9).split(2)]
        b = [c.gen.standard_normal(4) for c in Rng(9).split(2)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_consecutive_splits_advance(self):
        rng = Rng(9)
        first = rng.split(1)[0].gen.standard_normal(4)
        second = rng.split(1)[0].gen.standard_normal(4)
        assert not np.array_equal(first, second)


class TestInit:
    def test_zero_std_forward_is_zero(self):
        stds = {**STDS, ParamGroup.DOWN_PROJECTION: 0.0}
        layer = init_layer(DenseFFN(H=8), 8, stds, Rng(1))
        trace = forward(layer, np.ones(8))
        assert np.array_equal(trace.y, np.zeros(8))

    def test_empirical_std_within_five_percent(self):
        layer = init_layer(DenseFFN(H=256), 128, STDS, Rng(2))
        assert abs(float(layer.dense_down[0].std()) / 0.05 - 1) < 0.05

    def test_multiplier_and_route_scale(self):
        layer = init_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), 16, STDS, Rng(3))
        assert layer.A == 16 / 8 and layer.R == 2.0

    def test_router_bias_starts_at_zero(self):
        layer = init_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), 16, STDS, Rng(3))
        assert np.array_equal(layer.router_b, np.zeros(4))

    def test_weights_are_read_only(self):
        layer = small_layer(DenseFFN(H=8))
        with pytest.raises(ValueError):
            layer.dense_down[0][0, 0] = 1.0

    def test_same_seed_same_layer(self):
        a = init_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), 8, STDS, Rng(5))
        b = init_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), 8, STDS, Rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a.expert_down, b.expert_down))
        assert np.array_equal(a.router_w, b.router_w)


def layer_with_router_rows(rows, block, d, h, rng=None):
    """A routed layer whose router rows are set explicitly (for logit control)."""
    layer = small_layer(block, d=d, rng=rng or Rng(7))
    router = np.zeros_like(layer.router_w)
    router[:, 0] = rows
    return replace(layer, router_w=router)


class TestRoute:
    def test_all_active_when_a_equals_n(self):
        layer = small_layer(SparseMoE(N=4, a=4, h=4, router=RouterKind.SOFTMAX))
        sel, pi = route(layer, np.ones(8))
        assert list(sel) == [0, 1, 2, 3]
        assert pi.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("router", list(RouterKind))
    def test_equal_logits_are_uniform(self, router):
        layer = small_layer(SparseMoE(N=8, a=4, h=4, router=router))
        layer = replace(layer, router_w=np.zeros_like(layer.router_w))
        sel, pi = route(layer, np.ones(8))
        assert list(sel) == [0, 1, 2, 3]  # tie-break toward low indices
        assert np.array_equal(pi, np.full(4, 0.25))

    def test_softmax_weights_on_fixed_logits(self):
        # logits [2, 1, 0, -1], top-2 -> softmax over {2, 1} = (e, 1)/(e+1)
        layer = layer_with_router_rows([2.0, 1.0, 0.0, -1.0], SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), 8, 4)
        x = np.zeros(8)
        x[0] = 1.0
        sel, pi = route(layer, x)
        assert list(sel) == [0, 1]
        e = math.e
        assert pi[0] == pytest.approx(e / (e + 1), rel=1e-12)
        assert pi[1] == pytest.approx(1 / (e + 1), rel=1e-12)

    def test_sigmoid_normalization(self):
        layer = layer_with_router_rows([2.0, 1.0, 0.0, -1.0], SparseMoE(N=4, a=2, h=4, router=RouterKind.SIGMOID), 8, 4)
        x = np.zeros(8)
        x[0] = 1.0
        _, pi = route(layer, x)
        s = 1 / (1 + np.exp(-np.array([2.0, 1.0])))
        assert np.allclose(pi, s / s.sum(), rtol=1e-12)

    def test_group_balanced_selection(self):
        block = Hybrid(
            dense_branches=(),
            routed_groups=(RoutedGroup(4, 4), RoutedGroup(4, 4)),
            a=2,
            router=RouterKind.SOFTMAX,
        )
        layer = layer_with_router_rows([0, 9, 0, 0, 0, 0, 0, 8], block, 8, 4)
        x = np.zeros(8)
        x[0] = 1.0
        sel, _ = route(layer, x)
        # one winner per group, despite both top logits living in... each group
        assert list(sel) == [1, 7]

    def test_fuzzed_routing_validity(self):
        layer = small_layer(SparseMoE(N=16, a=5, h=4, router=RouterKind.SIGMOID), d=16)
        X = Rng(11).gen.normal(0, 1, (10_000, 16))
        sel, pi, _ = route_batch(layer, X)
        assert sel.shape == (10_000, 5)
        # rows are strictly increasing expert indices => 5 distinct experts
        assert (np.diff(sel, axis=1) > 0).all()
        assert np.abs(pi.sum(axis=1) - 1.0).max() <= 1e-6

    def test_dense_layer_has_no_router(self):
        layer = small_layer(DenseFFN(H=8))
        with pytest.raises(ValueError, match="router"):
            route(layer, np.ones(8))


class TestForward:
    def test_zero_input_gives_zero(self):
        layer = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX))
        trace = forward(layer, np.zeros(8))
        assert np.array_equal(trace.y, np.zeros(8))

    def test_identical_experts_match_concatenated_dense(self):
        # All-active MoE with N identical experts equals the dense layer of
        # the concatenated width: the route scale cancels the averaging.
        d, N, h = 8, 4, 4
        rng = Rng(21).gen
        up = rng.normal(0, 0.3, (h, d))
        act = rng.normal(0, 0.3, (h, d))
        down = rng.normal(0, 0.3, (d, h))
        moe = assemble_layer(
            SparseMoE(N=N, a=N, h=h, router=RouterKind.SOFTMAX),
            d,
            [up] * N,
            [act] * N,
            [down] * N,
            rng.normal(0, 0.1, (N, d)),
            np.zeros(N),
            [], [], [],
            init_stds=STDS,
        )
        dense = assemble_layer(
            DenseFFN(H=N * h),
            d,
            [], [], [], None, None,
            [np.tile(up, (N, 1))],
            [np.tile(act, (N, 1))],
            [np.tile(down, (1, N))],
            init_stds=STDS,
        )
        x = rng.normal(0, 1, d)
        assert np.allclose(forward(moe, x).y, forward(dense, x).y, atol=1e-12, rtol=0)

    def test_sliced_dense_equivalence(self):
        # Slice one dense layer into N expert blocks; with uniform routing and
        # route scale N the forward reproduces the dense output.
        d, N, h = 8, 4, 4
        dense = small_layer(DenseFFN(H=N * h), d=d, rng=Rng(22))
        up, act, down = dense.dense_up[0], dense.dense_act[0], dense.dense_down[0]
        moe = assemble_layer(
            SparseMoE(N=N, a=N, h=h, router=RouterKind.SOFTMAX),
            d,
            [up[i * h : (i + 1) * h] for i in range(N)],
            [act[i * h : (i + 1) * h] for i in range(N)],
            [down[:, i * h : (i + 1) * h] for i in range(N)],
            np.zeros((N, d)),
            np.zeros(N),
            [], [], [],
            init_stds=STDS,
        )
        X = Rng(23).gen.normal(0, 1, (64, d))
        assert np.abs(forward_batch(moe, X) - forward_batch(dense, X)).max() <= 1e-10

    def test_hybrid_one_hot_routing(self):
        # y = A * (o_shared + a * o_winner) when one expert takes all weight.
        d, h = 8, 4
        block = Hybrid(
            dense_branches=(h,),
            routed_groups=(RoutedGroup(4, h),),
            a=2,
            router=RouterKind.SOFTMAX,
        )
        layer = layer_with_router_rows([40.0, 0.0, 0.0, -40.0], block, d, h, rng=Rng(24))
        x = np.zeros(d)
        x[0] = 1.0
        trace = forward(layer, x)
        assert trace.pi[0] == pytest.approx(1.0, abs=1e-15)
        o_shared = layer.dense_down[0] @ trace.dense_u[0]
        o_winner = layer.expert_down[0] @ trace.u_per_expert[0]
        expected = layer.A * (o_shared + 2 * 1.0 * o_winner)
        assert np.allclose(trace.y, expected, rtol=1e-9, atol=1e-15)

    def test_batch_matches_single(self):
        for block in (
            DenseFFN(H=12),
            SparseMoE(N=6, a=2, h=4, router=RouterKind.SIGMOID),
            parse_moe_notation("4e2a2g1s", h=4, shared_width=4),
        ):
            layer = small_layer(block, d=8, rng=Rng(25))
            X = Rng(26).gen.normal(0, 1, (32, 8))
            batched = forward_batch(layer, X)
            rows = np.stack([forward(layer, x).y for x in X])
            assert np.allclose(batched, rows, atol=1e-12, rtol=0)

    def test_forward_is_deterministic(self):
        layer = small_layer(SparseMoE(N=6, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(27))
        x = Rng(28).gen.normal(0, 1, 8)
        assert np.array_equal(forward(layer, x).y, forward(layer, x).y)


def finite_difference_grads(layer, x, g, eps=1e-5):
    """Central differences of <y(W_down), g> entry by entry: the gradient oracle."""

    def objective(candidate):
        return float(forward(candidate, x).y @ g)

    expert = []
    for e in range(layer.n_experts):
        grad = np.zeros_like(layer.expert_down[e])
        for i in range(grad.shape[0]):
            for j in range(grad.shape[1]):
                bump = np.zeros_like(grad)
                bump[i, j] = eps
                hi = replace(layer, expert_down=tuple(w + bump if k == e else w for k, w in enumerate(layer.expert_down)))
                lo = replace(layer, expert_down=tuple(w - bump if k == e else w for k, w in enumerate(layer.expert_down)))
                grad[i, j] = (objective(hi) - objective(lo)) / (2 * eps)
        expert.append(grad)
    dense = []
    for m in range(len(layer.dense_down)):
        grad = np.zeros_like(layer.dense_down[m])
        for i in range(grad.shape[0]):
            for j in range(grad.shape[1]):
                bump = np.zeros_like(grad)
                bump[i, j] = eps
                hi = replace(layer, dense_down=tuple(w + bump if k == m else w for k, w in enumerate(layer.dense_down)))
                lo = replace(layer, dense_down=tuple(w - bump if k == m else w for k, w in enumerate(layer.dense_down)))
                grad[i, j] = (objective(hi) - objective(lo)) / (2 * eps)
        dense.append(grad)
    return expert, dense


def max_relative_error(analytic, numeric):
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


class TestDownGrad:
    def test_zero_upstream_gives_zero(self):
        layer = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX))
        trace = forward(layer, np.ones(8))
        grads = down_grad(trace, layer, np.zeros(8))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.expert.values())

    def test_single_expert_outer_product(self):
        d, h = 6, 3
        layer = small_layer(SparseMoE(N=1, a=1, h=h, router=RouterKind.SOFTMAX), d=d, rng=Rng(31))
        x = Rng(32).gen.normal(0, 1, d)
        g = Rng(33).gen.normal(0, 1, d)
        trace = forward(layer, x)
        grads = down_grad(trace, layer, g)
        # pi = 1, R = 1, A = d/h
        assert np.allclose(grads.expert[0], layer.A * np.outer(g, trace.u_per_expert[0]), rtol=1e-12)
        fd_expert, _ = finite_difference_grads(layer, x, g)
        assert max_relative_error(grads.expert[0], fd_expert[0]) <= 1e-6

    def test_matches_finite_differences_on_hybrid(self):
        block = parse_moe_notation("4e2a1s", h=3, shared_width=4)
        layer = small_layer(block, d=6, rng=Rng(34))
        x = Rng(35).gen.normal(0, 1, 6)
        g = Rng(36).gen.normal(0, 1, 6)
        trace = forward(layer, x)
        grads = down_grad(trace, layer, g)
        fd_expert, fd_dense = finite_difference_grads(layer, x, g)
        for e in range(layer.n_experts):
            analytic = grads.expert.get(e, np.zeros_like(fd_expert[e]))
            assert max_relative_error(analytic, fd_expert[e]) <= 1e-6
        assert max_relative_error(grads.dense[0], fd_dense[0]) <= 1e-6

    def test_inactive_experts_get_nothing(self):
        layer = small_layer(SparseMoE(N=8, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(37))
        trace = forward(layer, Rng(38).gen.normal(0, 1, 8))
        grads = down_grad(trace, layer, np.ones(8))
        assert set(grads.expert) == set(int(e) for e in trace.active_set)

    def test_linearity_in_upstream(self):
        layer = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(39))
        x = Rng(40).gen.normal(0, 1, 8)
        g = Rng(41).gen.normal(0, 1, 8)
        trace = forward(layer, x)
        one = down_grad(trace, layer, g)
        three = down_grad(trace, layer, 3.0 * g)
        for e, grad in one.expert.items():
            assert np.allclose(three.expert[e], 3.0 * grad, rtol=1e-12)

    def test_mismatched_trace_is_rejected(self):
        layer_a = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(42))
        layer_b = small_layer(SparseMoE(N=4, a=2, h=6, router=RouterKind.SOFTMAX), rng=Rng(43))
        trace = forward(layer_a, np.ones(8))
        with pytest.raises(ValueError, match="match"):
            down_grad(trace, layer_b, np.ones(8))


class TestSignUpdate:
    def setup_method(self):
        self.layer = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(51))
        self.x = Rng(52).gen.normal(0, 1, 8)
        self.g = Rng(53).gen.normal(0, 1, 8)
        self.trace = forward(self.layer, self.x)
        self.eta = {ParamGroup.DOWN_PROJECTION: 1e-3}

    def test_zero_gradient_leaves_layer_alone(self):
        grads = down_grad(self.trace, self.layer, np.zeros(8))
        updated = sign_update(self.layer, grads, self.eta)
        assert all(np.array_equal(a, b) for a, b in zip(updated.expert_down, self.layer.expert_down))

    def test_positive_rescaling_gives_identical_update(self):
        up1 = sign_update(self.layer, down_grad(self.trace, self.layer, self.g), self.eta)
        up2 = sign_update(self.layer, down_grad(self.trace, self.layer, 7.3 * self.g), self.eta)
        assert all(np.array_equal(a, b) for a, b in zip(up1.expert_down, up2.expert_down))

    def test_step_size_is_exact(self):
        grads = down_grad(self.trace, self.layer, self.g)
        updated = sign_update(self.layer, grads, self.eta)
        for e, grad in grads.expert.items():
            delta = updated.expert_down[e] - self.layer.expert_down[e]
            moved = np.abs(delta[grad != 0])
            assert np.allclose(moved, 1e-3, rtol=1e-9)
            assert np.array_equal(delta[grad == 0], np.zeros_like(delta[grad == 0]))

    def test_original_layer_is_untouched(self):
        before = [w.copy() for w in self.layer.expert_down]
        sign_update(self.layer, down_grad(self.trace, self.layer, self.g), self.eta)
        assert all(np.array_equal(a, b) for a, b in zip(before, self.layer.expert_down))


class TestSerialization:
    @pytest.mark.parametrize(
        "block",
        [
            DenseFFN(H=8),
            SparseMoE(N=4, a=2, h=4, router=RouterKind.SIGMOID),
            parse_moe_notation("4e2a2g1s", h=3, shared_width=5),
        ],
    )
    def test_round_trip(self, block):
        layer = small_layer(block, d=8, rng=Rng(61))
        buf = io.BytesIO()
        save_layer(layer, buf)
        again = load_layer(buf.getvalue())
        assert again.block == layer.block and again.d == layer.d
        assert again.A == layer.A and again.R == layer.R
        for field in ("expert_up", "expert_act", "expert_down", "dense_up", "dense_act", "dense_down"):
            for a, b in zip(getattr(layer, field), getattr(again, field)):
                assert np.array_equal(a, b)
        if layer.router_w is not None:
            assert np.array_equal(again.router_w, layer.router_w)
            assert np.array_equal(again.router_b, layer.router_b)

    def test_byte_stability(self):
        layer = small_layer(SparseMoE(N=4, a=2, h=4, router=RouterKind.SOFTMAX), rng=Rng(62))
        a, b = io.BytesIO(), io.BytesIO()
        save_layer(layer, a)
        save_layer(load_layer(a.getvalue()), b)
        assert a.getvalue() == b.getvalue()

    def test_rejects_garbage(self):
        with pytest.raises(ValueError, match="micro-layer"):
            load_layer(b"definitely not a layer")
