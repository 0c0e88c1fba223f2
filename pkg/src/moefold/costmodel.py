"""Analytical communication/compute cost model and configuration search.

Costs are per MoE layer, no-overlap: communication and compute times add.
A group's effective bandwidth is the intra-node rate when the group fits in
one node and the inter-node rate otherwise, so moving a group across the
node boundary can only slow it down.  MFU estimates inherit the no-overlap
pessimism and are meant for ranking configurations, not for predicting
absolute utilization.

Byte volumes per rank and layer, forward direction:

* all-to-all (dispatch and combine): ``k * L_local * hidden * elem *
  (ep - 1) / ep`` under balanced routing; with an actual dispatch plan the
  off-diagonal send counts are used instead.
* allgather / reduce-scatter inside the expert-tensor group:
  ``gathered_rows * hidden * elem * (etp - 1) / etp`` where the gathered
  rows are everything landing on the group (``etp * k * L_local`` when
  balanced), i.e. each landed row is replicated to the other shard
  holders.
* gradient allreduce over the expert replica group and pipeline
  point-to-point transfers are charged per training step.

Expert compute is charged ``6 * rows * hidden * ffn_shard`` flops per rank
and layer (2 flops per multiply-add forward, twice that backward), which
is invariant in the expert-tensor degree because gathering multiplies rows
by exactly the factor sharding divides the width.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dispatcher import DispatchPlan
from .errors import ValidationError
from .topology import (
    SPAN_INTER,
    SPAN_INTRA,
    ClusterModel,
    ParallelTopology,
    check_pp_consistency,
    classify_group_span,
    generate_parallel_groups,
)

LAYOUT_FOLDED = "folded"
LAYOUT_LEGACY = "legacy"  # expert parallelism confined to a data-parallel sub-group


@dataclass(frozen=True)
class ModelDims:
    hidden: int
    ffn: int
    num_experts: int
    top_k: int
    layers: int = 1
    seq_len: int = 4096
    batch: int = 1
    elem_bytes: float = 2.0  # modeled wire element size

    def __post_init__(self):
        for name in ("hidden", "ffn", "num_experts", "top_k", "layers", "seq_len", "batch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1", constraint=f"{name}>=1")
        if self.top_k > self.num_experts:
            raise ValidationError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}",
                constraint="k<=E",
            )
        if self.elem_bytes <= 0:
            raise ValidationError("elem_bytes must be > 0", constraint="elem_bytes>0")


@dataclass(frozen=True)
class BalancedLoad:
    """Assume perfectly uniform routing."""


@dataclass(frozen=True)
class PlanLoad:
    """Use the actual per-rank dispatch plans of a simulated run."""

    plans: Tuple[DispatchPlan, ...]


@dataclass(frozen=True)
class PrimitiveCost:
    bytes_total: float  # forward wire bytes summed over all ranks
    per_rank_bytes: float  # largest per-rank forward wire bytes
    span: str
    time_s: float  # one forward traversal


@dataclass(frozen=True)
class CostReport:
    topology: ParallelTopology
    dims: ModelDims
    mode: str  # "balanced" or "plan"
    ep_layout: str
    a2a_dispatch: PrimitiveCost
    a2a_combine: PrimitiveCost
    allgather: PrimitiveCost
    reduce_scatter: PrimitiveCost
    dp_allreduce: PrimitiveCost  # per step
    p2p: PrimitiveCost  # per step, forward bytes
    compute_flops_per_rank: float  # per layer, forward plus backward
    layer_time_s: float  # one layer, forward plus backward, comm + compute
    comm_time_s: float  # per step
    compute_time_s: float  # per step
    total_time_s: float  # per step
    mfu_est: float

    @property
    def a2a_bytes(self) -> float:
        return self.a2a_dispatch.bytes_total + self.a2a_combine.bytes_total

    @property
    def a2a_time_s(self) -> float:
        return self.a2a_dispatch.time_s + self.a2a_combine.time_s

    @property
    def span(self) -> str:
        carrying = [
            p.span
            for p in (
                self.a2a_dispatch,
                self.a2a_combine,
                self.allgather,
                self.reduce_scatter,
                self.dp_allreduce,
                self.p2p,
            )
            if p.bytes_total > 0
        ]
        return SPAN_INTER if SPAN_INTER in carrying else SPAN_INTRA

    def config_id(self) -> str:
        t = self.topology
        return f"tp{t.tp}cp{t.cp}pp{t.pp}ep{t.ep}etp{t.etp}"


def _worst_span(groups: Sequence[Tuple[int, ...]], cluster: ClusterModel) -> str:
    for g in groups:
        if classify_group_span(g, cluster).span == SPAN_INTER:
            return SPAN_INTER
    return SPAN_INTRA


def _bw(span: str, cluster: ClusterModel) -> float:
    return cluster.intra_bw if span == SPAN_INTRA else cluster.inter_bw


def _primitive(
    per_rank: np.ndarray, degree: int, span: str, cluster: ClusterModel, hops: int = 1
) -> PrimitiveCost:
    per_rank = np.asarray(per_rank, dtype=np.float64)
    worst = float(per_rank.max()) if per_rank.size else 0.0
    total = float(per_rank.sum())
    if degree <= 1:
        return PrimitiveCost(total, worst, span, 0.0)
    time = worst / _bw(span, cluster) + hops * cluster.per_link_latency_s
    return PrimitiveCost(total, worst, span, time)


def legacy_ep_groups(topology: ParallelTopology) -> Tuple[List[Tuple[int, ...]], int]:
    """Expert-parallel groups when EP must live inside a data-parallel
    sub-group: members vary only along the attention DP axis, so the degree
    is capped at dp and the groups ignore how the MoE mesh would fold."""
    ep_eff = min(topology.ep, topology.dp)
    while topology.dp % ep_eff != 0:
        ep_eff -= 1
    buckets: Dict[tuple, List[int]] = {}
    for rank in range(topology.world_size):
        t, c, d, p = topology.attn_coords(rank)
        buckets.setdefault((t, c, p, d // ep_eff), []).append(rank)
    groups = sorted(tuple(sorted(v)) for v in buckets.values())
    return groups, ep_eff


def estimate_layer_cost(
    topology: ParallelTopology,
    dims: ModelDims,
    cluster: ClusterModel,
    load: Optional[object] = None,
    ep_layout: str = LAYOUT_FOLDED,
) -> CostReport:
    """Cost one MoE layer (plus step-level gradient and pipeline traffic).

    ``load=BalancedLoad()`` (the default) assumes uniform routing;
    ``load=PlanLoad(plans)`` reproduces the byte volumes of an actual
    simulated dispatch exactly, so its totals match the traffic ledger of
    the run the plans came from.
    """
    if load is None:
        load = BalancedLoad()
    if ep_layout not in (LAYOUT_FOLDED, LAYOUT_LEGACY):
        raise ValidationError(f"unknown ep_layout {ep_layout!r}", constraint="ep_layout")
    w = topology.world_size
    groups = generate_parallel_groups(topology)
    elem = dims.elem_bytes
    hidden = dims.hidden

    if ep_layout == LAYOUT_LEGACY:
        ep_groups, ep_eff = legacy_ep_groups(topology)
    else:
        ep_groups, ep_eff = groups.moe["EP"], topology.ep
    if dims.num_experts % ep_eff != 0 or ep_eff > dims.num_experts:
        raise ValidationError(
            f"effective ep={ep_eff} must divide num_experts={dims.num_experts}",
            constraint="ep|E",
        )
    ep_span = _worst_span(ep_groups, cluster)
    etp_span = _worst_span(groups.moe["ETP"], cluster)
    edp_span = _worst_span(groups.moe["EDP"], cluster)
    pp_span = _worst_span(groups.attention["PP"], cluster)

    # average tokens a rank feeds into the layer per step
    l_local = dims.batch * dims.seq_len * topology.pp / w
    etp = topology.etp

    if isinstance(load, BalancedLoad):
        mode = "balanced"
        routed = dims.top_k * l_local
        a2a_each = np.full(w, routed * hidden * elem * (ep_eff - 1) / ep_eff)
        landed = np.full(w, routed)
    elif isinstance(load, PlanLoad):
        mode = "plan"
        if len(load.plans) != w:
            raise ValidationError(
                f"PlanLoad carries {len(load.plans)} plans for world {w}",
                constraint="plans==world",
            )
        if ep_layout != LAYOUT_FOLDED:
            raise ValidationError(
                "plan-mode costing applies to the folded layout",
                constraint="plan-folded",
            )
        pos_in_ep = {}
        for g in ep_groups:
            for i, r in enumerate(g):
                pos_in_ep[r] = (g, i)
        dispatch = np.zeros(w)
        combine = np.zeros(w)
        landed = np.zeros(w)
        for r in range(w):
            g, i = pos_in_ep[r]
            sc = load.plans[r].send_counts
            dispatch[r] = (sc.sum() - sc[i].sum()) * hidden * elem
            landed[r] = sum(load.plans[peer].send_counts[i].sum() for peer in g)
            combine[r] = (
                landed[r] - load.plans[r].send_counts[i].sum()
            ) * hidden * elem
    else:
        raise ValidationError(f"unknown load {load!r}", constraint="load")

    if mode == "balanced":
        dispatch = a2a_each
        combine = a2a_each

    # rows replicated across the expert-tensor group
    gathered = np.zeros(w)
    for g in groups.moe["ETP"]:
        block = float(sum(landed[r] for r in g))
        for r in g:
            gathered[r] = block
    ag_bytes = landed * (etp - 1) * hidden * elem
    rs_bytes = (gathered - landed) * hidden * elem

    a2a_dispatch = _primitive(dispatch, ep_eff, ep_span, cluster)
    a2a_combine = _primitive(combine, ep_eff, ep_span, cluster)
    allgather = _primitive(ag_bytes, etp, etp_span, cluster)
    reduce_scatter = _primitive(rs_bytes, etp, etp_span, cluster)

    layers_per_stage = math.ceil(dims.layers / topology.pp)
    local_experts = dims.num_experts // ep_eff
    shard_params = local_experts * 2 * hidden * dims.ffn / etp
    ar_per_rank = (
        2.0 * (topology.edp - 1) / topology.edp * layers_per_stage * shard_params * elem
        if topology.edp > 1
        else 0.0
    )
    dp_allreduce = _primitive(np.full(w, ar_per_rank), topology.edp, edp_span, cluster)

    p2p_per_rank = (topology.pp - 1) * l_local * hidden * elem
    p2p = _primitive(
        np.full(w, p2p_per_rank), topology.pp, pp_span, cluster, hops=topology.pp - 1
    )

    flops_per_rank = 6.0 * float(gathered.max()) * hidden * (dims.ffn / etp)
    layer_comm = 2.0 * (
        a2a_dispatch.time_s + a2a_combine.time_s + allgather.time_s + reduce_scatter.time_s
    )
    layer_compute = flops_per_rank / cluster.peak_flops
    layer_time = layer_comm + layer_compute

    comm_step = layers_per_stage * layer_comm + dp_allreduce.time_s + 2.0 * p2p.time_s
    compute_step = layers_per_stage * layer_compute
    total_step = comm_step + compute_step
    mfu = compute_step / total_step if total_step > 0 else 1.0

    return CostReport(
        topology=topology,
        dims=dims,
        mode=mode,
        ep_layout=ep_layout,
        a2a_dispatch=a2a_dispatch,
        a2a_combine=a2a_combine,
        allgather=allgather,
        reduce_scatter=reduce_scatter,
        dp_allreduce=dp_allreduce,
        p2p=p2p,
        compute_flops_per_rank=flops_per_rank,
        layer_time_s=layer_time,
        comm_time_s=comm_step,
        compute_time_s=compute_step,
        total_time_s=total_step,
        mfu_est=mfu,
    )


@dataclass(frozen=True)
class SearchConstraints:
    max_memory_bytes: Optional[float] = None
    max_tp: Optional[int] = None
    max_etp: Optional[int] = None


def _memory_estimate(topology: ParallelTopology, dims: ModelDims) -> float:
    """Rough per-rank bytes: expert weights with gradients and optimizer
    state (4x) plus the layer's activations."""
    local_experts = dims.num_experts // topology.ep
    weight_elems = local_experts * 2 * dims.hidden * dims.ffn / topology.etp
    l_local = dims.batch * dims.seq_len * topology.pp / topology.world_size
    act_elems = l_local * (dims.hidden + dims.top_k * dims.ffn / topology.etp)
    layers_per_stage = math.ceil(dims.layers / topology.pp)
    return layers_per_stage * (4.0 * weight_elems + act_elems) * dims.elem_bytes


def enumerate_valid_configs(
    world_size: int,
    dims: ModelDims,
    constraints: Optional[SearchConstraints] = None,
) -> List[ParallelTopology]:
    """Every degree tuple both meshes accept for this world.

    Requires divisibility of both mesh products, pipeline-consistent groups
    under the default layout, ``ep`` dividing the expert count, and ``etp``
    dividing the FFN width; optionally drops configs whose estimated
    per-rank memory exceeds the ceiling.
    """
    if world_size < 1:
        raise ValidationError("world_size must be >= 1", constraint="world_size>=1")
    constraints = constraints or SearchConstraints()
    divisors = [d for d in range(1, world_size + 1) if world_size % d == 0]
    out = []
    for tp, cp, pp in itertools.product(divisors, repeat=3):
        if world_size % (tp * cp * pp) != 0:
            continue
        if constraints.max_tp is not None and tp > constraints.max_tp:
            continue
        for ep, etp in itertools.product(divisors, repeat=2):
            if world_size % (etp * ep * pp) != 0:
                continue
            if ep > dims.num_experts or dims.num_experts % ep != 0:
                continue
            if dims.ffn % etp != 0:
                continue
            if constraints.max_etp is not None and etp > constraints.max_etp:
                continue
            topo = ParallelTopology(
                world_size=world_size, tp=tp, cp=cp, pp=pp, ep=ep, etp=etp
            )
            if not check_pp_consistency(generate_parallel_groups(topo)).consistent:
                continue
            if (
                constraints.max_memory_bytes is not None
                and _memory_estimate(topo, dims) > constraints.max_memory_bytes
            ):
                continue
            out.append(topo)
    return out


def search_best_config(
    world_size: int,
    dims: ModelDims,
    cluster: ClusterModel,
    constraints: Optional[SearchConstraints] = None,
) -> List[CostReport]:
    """Rank every valid configuration by estimated step time, ascending;
    ties break lexicographically on (tp, cp, pp, ep, etp)."""
    candidates = enumerate_valid_configs(world_size, dims, constraints)
    if not candidates:
        raise ValidationError(
            "no valid configuration satisfies the constraints "
            "(check divisibility and the memory ceiling)",
            constraint="nonempty-candidates",
        )
    reports = [estimate_layer_cost(t, dims, cluster) for t in candidates]
    reports.sort(
        key=lambda rep: (
            rep.total_time_s,
            (rep.topology.tp, rep.topology.cp, rep.topology.pp, rep.topology.ep, rep.topology.etp),
        )
    )
    return reports
