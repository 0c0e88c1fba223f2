"""Token-level dispatch across simulated ranks.

Forward protocol per rank: route the local tokens, permute kept pairs into
per-destination order, exchange them over the expert-parallel group with an
All-to-All-V, gather the landed rows inside the expert-tensor group with an
AllGather-V, run the local expert shards, ReduceScatter-V the partial
outputs back, return the rows with a second All-to-All-V, and finally
un-permute and gate-combine them into the original token order.  The
backward pass mirrors the forward one with the gather and reduce-scatter
swapped and the all-to-all counts transposed.

Tokens enter this layer already flattened: each rank's block holds the
rows its attention-layer shard produced, so switching between the two mesh
views is only a reshape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .collectives import RankContext, SimWorld, VarBuffer
from .errors import ValidationError
from .experts import ExpertWeights, expert_backward_shard, expert_forward_shard
from .router import (
    DROP_FULLSEQUENCE,
    GATE_SOFTMAX,
    GatingParams,
    RoutingDecision,
    apply_capacity,
    compute_gates,
    gather_full_sequence_decision,
)
from .topology import (
    GroupSets,
    ParallelTopology,
    check_pp_consistency,
    generate_parallel_groups,
    sequence_group,
)


@dataclass
class TokenBlock:
    """One rank's flattened token rows plus their global coordinates."""

    values: np.ndarray  # [rows, hidden]
    positions: np.ndarray  # [rows] global token ids

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValidationError("token block must be 2-D", constraint="block-2d")
        if self.positions.shape != (self.values.shape[0],):
            raise ValidationError(
                "positions must have one entry per row", constraint="positions-per-row"
            )


@dataclass
class DispatchPlan:
    """Permutation and counts driving one rank's variable-count exchanges.

    ``permutation[i]`` is the flat (token * k + slot) pair index of the
    i-th row in send order, which sorts kept pairs by destination rank,
    then local expert, then original order.  Dropped pairs occupy no slot.
    Scattering returned rows through the same index array inverts the
    permutation, so the restore map is the permutation itself.
    """

    permutation: np.ndarray  # [n_send] flat pair indices
    send_counts: np.ndarray  # [ep_size, local_experts]
    gates: np.ndarray  # [n_send] gate per sent row
    kept: np.ndarray  # [n_tokens, k]
    n_tokens: int
    k: int
    ep_size: int
    local_experts: int
    recv_counts: Optional[np.ndarray] = None  # transpose column, observed post-exchange

    @property
    def pair_tokens(self) -> np.ndarray:
        return self.permutation // self.k

    @property
    def pair_slots(self) -> np.ndarray:
        return self.permutation % self.k

    @property
    def restore(self) -> np.ndarray:
        return self.permutation


def build_dispatch_plan(
    decision: RoutingDecision, ep_group_size: int, local_expert_count: int
) -> DispatchPlan:
    """Order a rank's kept pairs for dispatch.

    Expert ``e`` lives on expert-parallel rank ``e // local_expert_count``.
    """
    num_experts = ep_group_size * local_expert_count
    if decision.experts.size and int(decision.experts.max()) >= num_experts:
        raise ValidationError(
            f"expert id {int(decision.experts.max())} out of range for "
            f"{num_experts} experts",
            constraint="expert<E",
        )
    n, k = decision.experts.shape
    kept_flat = decision.kept.ravel()
    flat_idx = np.flatnonzero(kept_flat)
    experts = decision.experts.ravel()[flat_idx]
    dest = experts // local_expert_count
    local_e = experts % local_expert_count
    tokens = flat_idx // k
    slots = flat_idx % k
    order = np.lexsort((slots, tokens, local_e, dest))
    flat_sorted = flat_idx[order]
    counts = np.zeros((ep_group_size, local_expert_count), dtype=np.int64)
    np.add.at(counts, (dest[order], local_e[order]), 1)
    return DispatchPlan(
        permutation=flat_sorted,
        send_counts=counts,
        gates=decision.gates.ravel()[flat_sorted],
        kept=decision.kept.copy(),
        n_tokens=n,
        k=k,
        ep_size=ep_group_size,
        local_experts=local_expert_count,
    )


def permute(values: np.ndarray, plan: DispatchPlan) -> np.ndarray:
    """Gather token rows into dispatch order (one row per kept pair)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != plan.n_tokens:
        raise ValidationError(
            f"block has {values.shape[0]} rows, plan expects {plan.n_tokens}",
            constraint="rows==plan.n_tokens",
        )
    return values[plan.pair_tokens]


def unpermute_combine(rows: np.ndarray, plan: DispatchPlan, hidden: int) -> np.ndarray:
    """Scatter returned expert rows back per token, weighting each pair by
    its gate and summing a token's contributions.  Tokens whose pairs were
    all dropped come out as zero rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] != plan.permutation.size:
        raise ValidationError(
            f"{rows.shape[0]} returned rows for {plan.permutation.size} plan slots",
            constraint="rows==plan-slots",
        )
    out = np.zeros((plan.n_tokens, hidden))
    np.add.at(out, plan.pair_tokens, plan.gates[:, None] * rows)
    return out


def token_partition(
    topology: ParallelTopology, seq_len: int, batch: int
) -> List[np.ndarray]:
    """Global token ids owned by each rank.

    Sequences are dealt to data-parallel replicas in contiguous batches and
    each sequence is split into contiguous shards over the rank's TP x CP
    sequence group (context-major, tensor-minor).
    """
    if topology.pp != 1:
        raise ValidationError(
            "token partitioning requires pp == 1", constraint="pp==1"
        )
    shards = topology.tp * topology.cp
    if seq_len % shards != 0:
        raise ValidationError(
            f"seq_len={seq_len} is not divisible by tp*cp={shards}",
            constraint="tp*cp|seq_len",
        )
    if batch % topology.dp != 0:
        raise ValidationError(
            f"batch={batch} is not divisible by dp={topology.dp}", constraint="dp|batch"
        )
    chunk = seq_len // shards
    b_local = batch // topology.dp
    out = []
    for rank in range(topology.world_size):
        t, c, d, _ = topology.attn_coords(rank)
        shard = c * topology.tp + t
        ids = []
        for s_local in range(b_local):
            start = (d * b_local + s_local) * seq_len + shard * chunk
            ids.extend(range(start, start + chunk))
        out.append(np.asarray(ids, dtype=np.int64))
    return out


def fabricate_token_blocks(
    topology: ParallelTopology, seq_len: int, batch: int, hidden: int, seed: int
) -> Tuple[np.ndarray, List[TokenBlock]]:
    """Seeded stand-in for attention outputs: a global token tensor plus
    its per-rank shards."""
    x_global = np.random.default_rng([seed, 2]).standard_normal(
        (batch * seq_len, hidden)
    )
    parts = token_partition(topology, seq_len, batch)
    blocks = [TokenBlock(x_global[ids], ids) for ids in parts]
    return x_global, blocks


def fabricate_upstream(
    topology: ParallelTopology, seq_len: int, batch: int, hidden: int, seed: int
) -> Tuple[np.ndarray, List[np.ndarray]]:
    u_global = np.random.default_rng([seed, 3]).standard_normal(
        (batch * seq_len, hidden)
    )
    parts = token_partition(topology, seq_len, batch)
    return u_global, [u_global[ids] for ids in parts]


@dataclass
class ForwardContext:
    """Everything the backward pass needs, bundled per rank."""

    world: SimWorld
    topology: ParallelTopology
    params: GatingParams
    weights_map: Dict[Tuple[int, int], ExpertWeights]
    groups: GroupSets
    per_rank: List[dict] = field(default_factory=list)


@dataclass
class BackwardResult:
    input_grads: List[np.ndarray]
    w_g_grad: np.ndarray  # summed over all ranks (identical copy on each)
    expert_grads: Dict[Tuple[int, int], Tuple[List[np.ndarray], List[np.ndarray]]]


def _rank_groups(topology: ParallelTopology, groups: GroupSets, rank: int):
    ep_group = groups.group_of("moe", "EP", rank)
    etp_group = groups.group_of("moe", "ETP", rank)
    edp_group = groups.group_of("moe", "EDP", rank)
    return ep_group, etp_group, edp_group


def moe_forward(
    blocks: List[TokenBlock],
    weights_map: Dict[Tuple[int, int], ExpertWeights],
    topology: ParallelTopology,
    params: GatingParams,
    world: SimWorld,
    seq_len: Optional[int] = None,
    workers: Optional[int] = None,
) -> Tuple[List[np.ndarray], ForwardContext]:
    """Run the MoE layer forward on every simulated rank.

    Output row ``i`` of a rank aligns with input row ``i`` and equals the
    gate-weighted sum of its kept experts' outputs.  Requires ``pp == 1``
    and pipeline-consistent groups; ``seq_len`` is needed only for
    full-sequence dropping.
    """
    if topology.pp != 1:
        raise ValidationError("numeric execution requires pp == 1", constraint="pp==1")
    if len(blocks) != topology.world_size:
        raise ValidationError(
            f"{len(blocks)} blocks for world_size {topology.world_size}",
            constraint="blocks==world",
        )
    groups = generate_parallel_groups(topology)
    verdict = check_pp_consistency(groups)
    if not verdict.consistent:
        raise ValidationError(
            f"pipeline groups differ between meshes: {verdict.mismatch}",
            constraint="pp-consistency",
        )
    num_experts = params.num_experts
    if num_experts % topology.ep != 0 or topology.ep > num_experts:
        raise ValidationError(
            f"ep={topology.ep} must divide num_experts={num_experts}",
            constraint="ep|E",
        )
    local_experts = num_experts // topology.ep
    need_full = (not params.dropless) and params.drop_mode == DROP_FULLSEQUENCE
    if need_full and seq_len is None:
        raise ValidationError(
            "full-sequence dropping needs seq_len", constraint="seq_len-required"
        )
    seq_groups = [sequence_group(topology, r) for r in range(topology.world_size)]

    def program(ctx: RankContext):
        rank = ctx.rank
        block = blocks[rank]
        x = block.values
        n, hidden = x.shape
        ep_group, etp_group, _ = _rank_groups(topology, groups, rank)
        etp_idx, ep_idx, _, _ = topology.moe_coords(rank)
        weights = weights_map[(ep_idx, etp_idx)]

        decision = compute_gates(x, params, positions=block.positions)
        if not params.dropless:
            if need_full:
                _, decision = gather_full_sequence_decision(
                    ctx, seq_groups[rank], decision, seq_len, num_experts, params
                )
            else:
                decision = apply_capacity(decision, n, num_experts, params)
        plan = build_dispatch_plan(decision, len(ep_group), local_experts)

        sent = permute(x, plan)
        recv_buf = ctx.all_to_all_v(
            ep_group, VarBuffer(sent.ravel(), hidden, plan.send_counts.sum(axis=1))
        )
        all_counts = ctx.exchange_meta(ep_group, plan.send_counts)
        my_pos = ep_group.index(rank)
        recv_counts = np.stack([all_counts[r][my_pos] for r in ep_group])
        plan.recv_counts = recv_counts
        recv_rows = recv_buf.rows()
        recv_le = np.concatenate(
            [np.repeat(np.arange(local_experts), recv_counts[i]) for i in range(len(ep_group))]
        )
        grp_order = np.argsort(recv_le, kind="stable")
        x_grp = recv_rows[grp_order]
        le_grp = recv_le[grp_order]

        if len(etp_group) > 1:
            gathered_buf, member_counts = ctx.all_gather_v(
                etp_group, VarBuffer.from_rows(x_grp.reshape(-1, hidden))
            )
            gathered_x = gathered_buf.rows()
            all_les = ctx.exchange_meta(etp_group, le_grp)
            gathered_le = np.concatenate([all_les[r] for r in etp_group])
        else:
            gathered_x, gathered_le = x_grp, le_grp
            member_counts = np.array([x_grp.shape[0]], dtype=np.int64)

        partial = np.zeros((gathered_x.shape[0], hidden))
        caches = {}
        expert_idx = {}
        for le in range(local_experts):
            idx = np.flatnonzero(gathered_le == le)
            expert_idx[le] = idx
            if idx.size:
                out, cache = expert_forward_shard(
                    gathered_x[idx], weights, weights.expert_ids[le]
                )
                partial[idx] = out
                caches[le] = cache

        if len(etp_group) > 1:
            y_grp = ctx.reduce_scatter_v(
                etp_group, partial.ravel(), member_counts, hidden
            ).reshape(-1, hidden)
        else:
            y_grp = partial
        y_recv = np.empty_like(y_grp)
        y_recv[grp_order] = y_grp
        ret_counts = recv_counts.sum(axis=1)
        ret_buf = ctx.all_to_all_v(
            ep_group, VarBuffer(y_recv.ravel(), hidden, ret_counts)
        )
        y_perm = ret_buf.rows()
        out = unpermute_combine(y_perm, plan, hidden)

        saved = {
            "x": x,
            "decision": decision,
            "plan": plan,
            "grp_order": grp_order,
            "ret_counts": ret_counts,
            "member_counts": member_counts,
            "gathered_shape": gathered_x.shape,
            "expert_idx": expert_idx,
            "caches": caches,
            "y_perm": y_perm,
        }
        return out, saved

    results = world.run(program, workers=workers)
    context = ForwardContext(world, topology, params, weights_map, groups)
    outputs = []
    for out, saved in results:
        outputs.append(out)
        context.per_rank.append(saved)
    return outputs, context


def moe_backward(
    upstream: List[np.ndarray],
    context: ForwardContext,
    workers: Optional[int] = None,
) -> BackwardResult:
    """Gradients of ``sum over ranks of <upstream, output>``.

    Communication mirrors the forward pass with AllGather and ReduceScatter
    swapped and transposed all-to-all counts; gating weights reduce over
    the whole world and expert shards over their replica group.
    """
    topology = context.topology
    params = context.params
    groups = context.groups
    num_experts = params.num_experts
    if len(upstream) != topology.world_size:
        raise ValidationError(
            f"{len(upstream)} upstream blocks for world_size {topology.world_size}",
            constraint="upstream==world",
        )
    world_group = tuple(range(topology.world_size))

    def program(ctx: RankContext):
        rank = ctx.rank
        sv = context.per_rank[rank]
        plan: DispatchPlan = sv["plan"]
        x = sv["x"]
        n, hidden = x.shape
        u = np.asarray(upstream[rank], dtype=np.float64)
        if u.shape != x.shape:
            raise ValidationError(
                f"upstream shape {u.shape} does not match input {x.shape}",
                constraint="upstream-shape",
            )
        ep_group, etp_group, edp_group = _rank_groups(topology, groups, rank)
        etp_idx, ep_idx, _, _ = topology.moe_coords(rank)
        weights = context.weights_map[(ep_idx, etp_idx)]
        local_experts = num_experts // topology.ep

        pair_tokens = plan.pair_tokens
        dy_perm = plan.gates[:, None] * u[pair_tokens]
        dgate_pairs = (u[pair_tokens] * sv["y_perm"]).sum(axis=1)

        buf = ctx.all_to_all_v(
            ep_group, VarBuffer(dy_perm.ravel(), hidden, plan.send_counts.sum(axis=1))
        )
        dy_grp = buf.rows()[sv["grp_order"]]

        if len(etp_group) > 1:
            gbuf, _ = ctx.all_gather_v(
                etp_group, VarBuffer.from_rows(dy_grp.reshape(-1, hidden))
            )
            dy_full = gbuf.rows()
        else:
            dy_full = dy_grp

        dgathered = np.zeros(sv["gathered_shape"])
        dw1 = [np.zeros_like(w) for w in weights.w1]
        dw2 = [np.zeros_like(w) for w in weights.w2]
        for le in range(local_experts):
            idx = sv["expert_idx"][le]
            if idx.size:
                dtok, g1, g2 = expert_backward_shard(
                    dy_full[idx], sv["caches"][le], weights, weights.expert_ids[le]
                )
                dgathered[idx] = dtok
                dw1[le] += g1
                dw2[le] += g2

        if len(etp_group) > 1:
            dx_grp = ctx.reduce_scatter_v(
                etp_group, dgathered.ravel(), sv["member_counts"], hidden
            ).reshape(-1, hidden)
        else:
            dx_grp = dgathered
        dx_recv = np.empty_like(dx_grp)
        dx_recv[sv["grp_order"]] = dx_grp
        buf2 = ctx.all_to_all_v(
            ep_group, VarBuffer(dx_recv.ravel(), hidden, sv["ret_counts"])
        )
        dx = np.zeros((n, hidden))
        np.add.at(dx, pair_tokens, buf2.rows())

        # gradient through the gate values into the router weights and x
        decision: RoutingDecision = sv["decision"]
        dgates = np.zeros((n, plan.k))
        dgates[pair_tokens, plan.pair_slots] = dgate_pairs
        ds = np.zeros((n, num_experts))
        if params.renormalize_topk:
            raw = np.take_along_axis(decision.scores, decision.experts, axis=1)
            total = raw.sum(axis=1, keepdims=True)
            inner = (dgates * decision.gates).sum(axis=1, keepdims=True)
            d_sel = (dgates - inner) / total
        else:
            d_sel = dgates
        for s in range(plan.k):
            ds[np.arange(n), decision.experts[:, s]] += d_sel[:, s]
        scores = decision.scores
        if params.gate_fn == GATE_SOFTMAX:
            dz = scores * (ds - (ds * scores).sum(axis=1, keepdims=True))
        else:
            dz = ds * scores * (1.0 - scores)
        dwg_local = x.T @ dz
        dx += dz @ params.w_g.T

        dwg = ctx.all_reduce(world_group, dwg_local, "sum")
        if len(edp_group) > 1:
            flat = np.concatenate([g.ravel() for g in dw1 + dw2])
            reduced = ctx.all_reduce(edp_group, flat, "sum")
            offset = 0
            for g in dw1 + dw2:
                g[...] = reduced[offset : offset + g.size].reshape(g.shape)
                offset += g.size
        return dx, dwg, dw1, dw2

    results = context.world.run(program, workers=workers)
    input_grads = [r[0] for r in results]
    w_g_grad = results[0][1]
    expert_grads: Dict[Tuple[int, int], Tuple[List[np.ndarray], List[np.ndarray]]] = {}
    for rank in range(topology.world_size):
        etp_idx, ep_idx, edp_idx, _ = topology.moe_coords(rank)
        if edp_idx == 0:
            expert_grads[(ep_idx, etp_idx)] = (results[rank][2], results[rank][3])
    return BackwardResult(input_grads, w_g_grad, expert_grads)
