import numpy as np
import pytest

from moefold.collectives import SimWorld
from moefold.dispatcher import (
    build_dispatch_plan,
    fabricate_token_blocks,
    fabricate_upstream,
    moe_backward,
    moe_forward,
    permute,
    token_partition,
    unpermute_combine,
)
from moefold.errors import ValidationError
from moefold.experts import init_expert_weights, init_gating_matrix
from moefold.oracle import build_oracle_model, oracle_moe_forward
from moefold.router import GatingParams, RoutingDecision
from moefold.topology import ParallelTopology


def make_setup(world, tp=1, cp=1, ep=1, etp=1, *, hidden=8, ffn=16, num_experts=4,
               k=2, seq_len=16, seed=0, capacity_factor=None, drop_mode="subsequence"):
    topo = ParallelTopology(world_size=world, tp=tp, cp=cp, ep=ep, etp=etp)
    batch = topo.dp
    params = GatingParams(
        w_g=init_gating_matrix(hidden, num_experts, seed),
        k=k,
        capacity_factor=capacity_factor,
        drop_mode=drop_mode,
    )
    weights = init_expert_weights(
        num_experts, hidden, ffn, etp_size=etp, seed=seed, ep_size=ep
    )
    x_global, blocks = fabricate_token_blocks(topo, seq_len, batch, hidden, seed)
    return topo, params, weights, x_global, blocks, batch


def run_forward(topo, params, weights, blocks, seq_len, workers=None):
    world = SimWorld(topo.world_size)
    outputs, ctx = moe_forward(
        blocks, weights, topo, params, world, seq_len=seq_len, workers=workers
    )
    return world, outputs, ctx


def assemble_global(outputs, blocks, n_tokens, hidden):
    y = np.zeros((n_tokens, hidden))
    for out, block in zip(outputs, blocks):
        y[block.positions] = out
    return y


def rel_err(got, want):
    scale = max(np.abs(want).max(), 1e-300)
    return np.abs(got - want).max() / scale


class TestPlanAndPermutation:
    def test_identity_plan_single_expert(self):
        dec = RoutingDecision(
            experts=np.zeros((3, 1), dtype=np.int64),
            gates=np.ones((3, 1)),
            kept=np.ones((3, 1), dtype=bool),
            positions=np.arange(3),
        )
        plan = build_dispatch_plan(dec, 1, 1)
        np.testing.assert_array_equal(plan.permutation, [0, 1, 2])
        assert plan.send_counts.tolist() == [[3]]
        x = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(permute(x, plan), x)

    def test_two_peer_counts(self):
        # two tokens routed [e0, e1] with one local expert per peer
        dec = RoutingDecision(
            experts=np.array([[0], [1]]),
            gates=np.ones((2, 1)),
            kept=np.ones((2, 1), dtype=bool),
            positions=np.arange(2),
        )
        plan = build_dispatch_plan(dec, 2, 1)
        assert plan.send_counts.tolist() == [[1], [1]]
        np.testing.assert_array_equal(plan.permutation, [0, 1])

    def test_fully_dropped_token_has_no_slot(self):
        dec = RoutingDecision(
            experts=np.array([[0], [0]]),
            gates=np.ones((2, 1)),
            kept=np.array([[True], [False]]),
            positions=np.arange(2),
        )
        plan = build_dispatch_plan(dec, 1, 1)
        assert plan.permutation.tolist() == [0]

    def test_expert_out_of_range(self):
        dec = RoutingDecision(
            experts=np.array([[5]]),
            gates=np.ones((1, 1)),
            kept=np.ones((1, 1), dtype=bool),
            positions=np.arange(1),
        )
        with pytest.raises(ValidationError):
            build_dispatch_plan(dec, 2, 2)

    def test_roundtrip_with_unit_gates(self):
        rng = np.random.default_rng(0)
        dec = RoutingDecision(
            experts=rng.integers(0, 4, size=(6, 1)),
            gates=np.ones((6, 1)),
            kept=np.ones((6, 1), dtype=bool),
            positions=np.arange(6),
        )
        plan = build_dispatch_plan(dec, 2, 2)
        x = rng.standard_normal((6, 3))
        sent = permute(x, plan)
        # identity experts: sending rows straight back restores the block
        np.testing.assert_array_equal(unpermute_combine(sent, plan, 3), x)

    def test_combine_weights_two_experts(self):
        dec = RoutingDecision(
            experts=np.array([[0, 1]]),
            gates=np.array([[0.6, 0.4]]),
            kept=np.ones((1, 2), dtype=bool),
            positions=np.arange(1),
        )
        plan = build_dispatch_plan(dec, 1, 2)
        u = np.array([[1.0, 0.0]])
        v = np.array([[0.0, 1.0]])
        rows = np.concatenate([u, v])
        np.testing.assert_allclose(
            unpermute_combine(rows, plan, 2), 0.6 * u + 0.4 * v, atol=1e-15
        )


class TestTokenPartition:
    def test_partition_covers_all_tokens(self):
        topo = ParallelTopology(world_size=4, tp=2, cp=1, ep=2, etp=2)
        parts = token_partition(topo, seq_len=8, batch=2)
        assert sorted(np.concatenate(parts).tolist()) == list(range(16))

    def test_sharding_is_contiguous_per_sequence(self):
        topo = ParallelTopology(world_size=2, tp=2, cp=1, ep=2)
        parts = token_partition(topo, seq_len=8, batch=1)
        assert parts[0].tolist() == [0, 1, 2, 3]
        assert parts[1].tolist() == [4, 5, 6, 7]

    def test_indivisible_rejected(self):
        topo = ParallelTopology(world_size=4, tp=4)
        with pytest.raises(ValidationError):
            token_partition(topo, seq_len=6, batch=1)


class TestForward:
    def test_world1_single_expert_matches_ffn(self):
        topo, params, weights, x_global, blocks, _ = make_setup(
            1, num_experts=1, k=1, seed=3
        )
        _, outputs, _ = run_forward(topo, params, weights, blocks, 16)
        w = weights[(0, 0)]
        want = np.maximum(x_global @ w.w1[0], 0.0) @ w.w2[0]
        np.testing.assert_array_equal(outputs[0], want)

    def test_world4_ep2_etp2_matches_oracle(self):
        topo, params, weights, x_global, blocks, batch = make_setup(
            4, tp=2, ep=2, etp=2, seed=0
        )
        _, outputs, _ = run_forward(topo, params, weights, blocks, 16)
        model = build_oracle_model(4, 8, 16, k=2, seed=0)
        want = oracle_moe_forward(x_global, model)
        got = assemble_global(outputs, blocks, x_global.shape[0], 8)
        assert rel_err(got, want) <= 1e-9

    def test_capacity_zeroes_fully_dropped_tokens(self):
        # collapse routing onto one expert so late tokens drop entirely
        topo = ParallelTopology(world_size=1)
        hidden, num_experts = 4, 4
        w_g = np.zeros((hidden, num_experts))
        w_g[0, 0] = 10.0
        params = GatingParams(w_g=w_g, k=1, capacity_factor=1.0)
        weights = init_expert_weights(num_experts, hidden, 8, 1, seed=1)
        x = np.abs(np.random.default_rng(2).standard_normal((8, hidden))) + 0.1
        from moefold.dispatcher import TokenBlock

        blocks = [TokenBlock(x, np.arange(8))]
        world = SimWorld(1)
        outputs, ctx = moe_forward(blocks, weights, topo, params, world)
        dec = ctx.per_rank[0]["decision"]
        assert (dec.experts[:, 0] == 0).all()
        # capacity = floor(8/4) = 2: tokens 2.. are fully dropped
        assert not dec.kept[2:].any()
        assert (outputs[0][2:] == 0.0).all()
        assert (outputs[0][:2] != 0.0).any()

    def test_topology_independence_full_sequence(self):
        # one global token set, one seed; every mesh factorization of
        # world=4 must produce the same global output under full-sequence
        # dropping with CF=1
        results = []
        for tp, cp, ep, etp in [(1, 1, 4, 1), (2, 1, 2, 2), (1, 2, 1, 4), (2, 2, 2, 1)]:
            topo = ParallelTopology(world_size=4, tp=tp, cp=cp, ep=ep, etp=etp)
            params = GatingParams(
                w_g=init_gating_matrix(8, 4, 7),
                k=2,
                capacity_factor=1.0,
                drop_mode="fullsequence",
            )
            weights = init_expert_weights(4, 8, 16, etp_size=etp, seed=7, ep_size=ep)
            x_global = np.random.default_rng([7, 2]).standard_normal((4 * 16, 8))
            parts = token_partition(topo, 16, 4)
            from moefold.dispatcher import TokenBlock

            blocks = [TokenBlock(x_global[ids], ids) for ids in parts]
            world = SimWorld(4)
            outputs, _ = moe_forward(blocks, weights, topo, params, world, seq_len=16)
            results.append(assemble_global(outputs, blocks, 64, 8))
        for other in results[1:]:
            assert rel_err(other, results[0]) <= 1e-9

    def test_token_conservation(self):
        topo, params, weights, _, blocks, _ = make_setup(4, tp=2, ep=2, etp=2, seed=5)
        world, outputs, ctx = run_forward(topo, params, weights, blocks, 16)
        for rank in range(4):
            plan = ctx.per_rank[rank]["plan"]
            assert plan.send_counts.sum() == plan.permutation.size
            assert outputs[rank].shape == blocks[rank].values.shape
        # pairs sent over the dispatch a2a equal pairs received
        sent = sum(ctx.per_rank[r]["plan"].send_counts.sum() for r in range(4))
        recv = sum(ctx.per_rank[r]["plan"].recv_counts.sum() for r in range(4))
        assert sent == recv

    def test_worker_count_invariance(self):
        topo, params, weights, _, blocks, _ = make_setup(4, tp=2, ep=2, etp=2, seed=9)
        _, out1, _ = run_forward(topo, params, weights, blocks, 16, workers=1)
        _, out4, _ = run_forward(topo, params, weights, blocks, 16, workers=4)
        for a, b in zip(out1, out4):
            np.testing.assert_array_equal(a, b)

    def test_pp_not_supported_numerically(self):
        topo = ParallelTopology(world_size=2, pp=2)
        params = GatingParams(w_g=np.ones((4, 2)), k=1)
        with pytest.raises(ValidationError, match="pp"):
            moe_forward([], {}, topo, params, SimWorld(2))


class TestBackward:
    @staticmethod
    def _full_setup(seed=0, capacity_factor=None):
        topo, params, weights, x_global, blocks, batch = make_setup(
            4, tp=2, ep=2, etp=2, seed=seed, capacity_factor=capacity_factor
        )
        world, outputs, ctx = run_forward(topo, params, weights, blocks, 16)
        _, upstream = fabricate_upstream(topo, 16, batch, 8, seed)
        return topo, params, weights, x_global, blocks, world, outputs, ctx, upstream

    def test_zero_upstream_zero_grads(self):
        topo, params, weights, *_rest = self._full_setup()
        _, blocks, world, outputs, ctx, _ = _rest
        zeros = [np.zeros_like(o) for o in outputs]
        res = moe_backward(zeros, ctx)
        assert all(not g.any() for g in res.input_grads)
        assert not res.w_g_grad.any()
        for dw1, dw2 in res.expert_grads.values():
            assert all(not g.any() for g in dw1 + dw2)

    def test_linearity_in_upstream(self):
        topo, params, weights, x_global, blocks, world, outputs, ctx, upstream = (
            self._full_setup(seed=4)
        )
        res1 = moe_backward(upstream, ctx)
        res2 = moe_backward([2.0 * u for u in upstream], ctx)
        for a, b in zip(res1.input_grads, res2.input_grads):
            np.testing.assert_allclose(2.0 * a, b, atol=1e-12)
        np.testing.assert_allclose(2.0 * res1.w_g_grad, res2.w_g_grad, atol=1e-12)

    def test_matches_finite_differences_small(self):
        topo, params, weights, x_global, blocks, world, outputs, ctx, upstream = (
            self._full_setup(seed=11)
        )
        from moefold.oracle import oracle_grad_fd

        res = moe_backward(upstream, ctx)
        model = build_oracle_model(4, 8, 16, k=2, seed=11)
        u_global = np.zeros_like(x_global)
        for u, block in zip(upstream, blocks):
            u_global[block.positions] = u
        fd = oracle_grad_fd(x_global, model, u_global, eps=1e-5, wrt=("x", "w_g"))

        dx_global = np.zeros_like(x_global)
        for g, block in zip(res.input_grads, blocks):
            dx_global[block.positions] = g
        mask = ~np.isnan(fd.x)
        scale = np.abs(fd.x[mask]).max()
        assert np.abs(dx_global[mask] - fd.x[mask]).max() <= 1e-5 * scale
        maskg = ~np.isnan(fd.w_g)
        scaleg = np.abs(fd.w_g[maskg]).max()
        assert np.abs(res.w_g_grad[maskg] - fd.w_g[maskg]).max() <= 1e-5 * scaleg

    def test_expert_grads_reassemble_and_match_fd(self):
        topo, params, weights, x_global, blocks, world, outputs, ctx, upstream = (
            self._full_setup(seed=13)
        )
        from moefold.oracle import oracle_grad_fd

        res = moe_backward(upstream, ctx)
        model = build_oracle_model(4, 8, 16, k=2, seed=13)
        u_global = np.zeros_like(x_global)
        for u, block in zip(upstream, blocks):
            u_global[block.positions] = u
        fd = oracle_grad_fd(x_global, model, u_global, eps=1e-5, wrt=("w1",))
        local = 4 // topo.ep
        for e in range(4):
            ep_idx, le = e // local, e % local
            shards = [res.expert_grads[(ep_idx, r)][0][le] for r in range(topo.etp)]
            got = np.concatenate(shards, axis=1)
            mask = ~np.isnan(fd.w1[e])
            scale = max(np.abs(fd.w1[e][mask]).max(), 1e-12)
            assert np.abs(got[mask] - fd.w1[e][mask]).max() <= 1e-5 * scale

    def test_upstream_shape_mismatch(self):
        topo, params, weights, x_global, blocks, world, outputs, ctx, upstream = (
            self._full_setup()
        )
        bad = [u[:-1] for u in upstream]
        with pytest.raises(ValidationError):
            moe_backward(bad, ctx)

    @pytest.mark.parametrize(
        "variant,kwargs",
        [
            ("renormalized", dict(renormalize_topk=True)),
            ("sigmoid", dict(gate_fn="sigmoid")),
            ("dropping", dict(capacity_factor=1.0)),
        ],
    )
    def test_matches_fd_for_gating_variants(self, variant, kwargs):
        seed = 17
        topo = ParallelTopology(world_size=4, tp=2, ep=2, etp=2)
        params = GatingParams(
            w_g=init_gating_matrix(8, 4, seed), k=2, **kwargs
        )
        weights = init_expert_weights(4, 8, 16, etp_size=2, seed=seed, ep_size=2)
        x_global, blocks = fabricate_token_blocks(topo, 16, topo.dp, 8, seed)
        world = SimWorld(4)
        _, ctx = moe_forward(blocks, weights, topo, params, world, seq_len=16)
        u_global, upstream = fabricate_upstream(topo, 16, topo.dp, 8, seed)
        res = moe_backward(upstream, ctx)

        model = build_oracle_model(
            4, 8, 16, k=2, seed=seed,
            gate_fn=kwargs.get("gate_fn", "softmax"),
            renormalize_topk=kwargs.get("renormalize_topk", False),
            capacity_factor=kwargs.get("capacity_factor"),
        )
        if "capacity_factor" in kwargs:
            model = model.with_scopes(token_partition(topo, 16, topo.dp))
        from moefold.oracle import oracle_grad_fd

        fd = oracle_grad_fd(x_global, model, u_global, eps=1e-5, wrt=("x", "w_g"))
        dx_global = np.zeros_like(x_global)
        for g, block in zip(res.input_grads, blocks):
            dx_global[block.positions] = g
        for got, want in ((dx_global, fd.x), (res.w_g_grad, fd.w_g)):
            mask = ~np.isnan(want)
            assert mask.any()
            scale = max(np.abs(want[mask]).max(), 1e-12)
            assert np.abs(got[mask] - want[mask]).max() <= 1e-5 * scale, variant
