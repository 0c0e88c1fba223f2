"""Decoupled parallel meshes for attention and MoE layers.

The attention layer is parallelized over a TP x CP x DP x PP mesh, the MoE
layer over an ETP x EP x EDP x PP mesh covering the same ranks.  The two
meshes may factor the world differently; the only hard restriction is that
both produce identical pipeline groups, which is what makes folding the MoE
dimensions into arbitrary attention sub-groups legal.

Two rank layouts are supported:

* ``pp-outermost`` (default): the pipeline axis is the slowest-varying axis
  in both meshes, so pipeline groups are guaranteed identical for every
  valid degree tuple.
* ``listing1``: the data-parallel axis is outermost with pipeline
  immediately inside it.  This layout produces mismatching pipeline groups
  whenever the two meshes imply different data-parallel degrees; it is kept
  behind a flag for reproducing that behavior exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ValidationError

LAYOUT_PP_OUTERMOST = "pp-outermost"
LAYOUT_LISTING1 = "listing1"
LAYOUTS = (LAYOUT_PP_OUTERMOST, LAYOUT_LISTING1)

ATTENTION_DIMS = ("TP", "CP", "DP", "PP")
MOE_DIMS = ("ETP", "EP", "EDP", "PP")

SPAN_INTRA = "intra"
SPAN_INTER = "inter"

Group = Tuple[int, ...]


@dataclass(frozen=True)
class ParallelTopology:
    """Degrees of both meshes plus the world size.

    ``dp`` and ``edp`` are derived; construction fails unless both meshes
    factor ``world_size`` exactly.
    """

    world_size: int
    tp: int = 1
    cp: int = 1
    pp: int = 1
    ep: int = 1
    etp: int = 1
    layout: str = LAYOUT_PP_OUTERMOST

    def __post_init__(self):
        if self.world_size < 1:
            raise ValidationError(
                f"world_size must be >= 1, got {self.world_size}",
                constraint="world_size>=1",
            )
        for name in ("tp", "cp", "pp", "ep", "etp"):
            deg = getattr(self, name)
            if deg < 1:
                raise ValidationError(
                    f"{name} must be >= 1, got {deg}", constraint=f"{name}>=1"
                )
            if self.world_size % deg != 0:
                raise ValidationError(
                    f"{name}={deg} does not divide world_size={self.world_size}",
                    constraint=f"{name}|world_size",
                )
        attn = self.tp * self.cp * self.pp
        if self.world_size % attn != 0:
            raise ValidationError(
                f"tp*cp*pp={attn} does not divide world_size={self.world_size}",
                constraint="tp*cp*pp|world_size",
            )
        moe = self.etp * self.ep * self.pp
        if self.world_size % moe != 0:
            raise ValidationError(
                f"etp*ep*pp={moe} does not divide world_size={self.world_size}",
                constraint="etp*ep*pp|world_size",
            )
        if self.layout not in LAYOUTS:
            raise ValidationError(
                f"layout must be one of {LAYOUTS}, got {self.layout!r}",
                constraint="layout",
            )

    @property
    def dp(self) -> int:
        return self.world_size // (self.tp * self.cp * self.pp)

    @property
    def edp(self) -> int:
        return self.world_size // (self.etp * self.ep * self.pp)

    def attn_coords(self, rank: int) -> Tuple[int, int, int, int]:
        """(tp, cp, dp, pp) coordinates of ``rank`` in the attention mesh."""
        t = rank % self.tp
        c = (rank // self.tp) % self.cp
        if self.layout == LAYOUT_LISTING1:
            p = (rank // (self.tp * self.cp)) % self.pp
            d = rank // (self.tp * self.cp * self.pp)
        else:
            d = (rank // (self.tp * self.cp)) % self.dp
            p = rank // (self.tp * self.cp * self.dp)
        return t, c, d, p

    def moe_coords(self, rank: int) -> Tuple[int, int, int, int]:
        """(etp, ep, edp, pp) coordinates of ``rank`` in the MoE mesh."""
        te = rank % self.etp
        e = (rank // self.etp) % self.ep
        if self.layout == LAYOUT_LISTING1:
            p = (rank // (self.etp * self.ep)) % self.pp
            d = rank // (self.etp * self.ep * self.pp)
        else:
            d = (rank // (self.etp * self.ep)) % self.edp
            p = rank // (self.etp * self.ep * self.edp)
        return te, e, d, p


@dataclass(frozen=True)
class GroupSets:
    """Per-dimension rank groups for both meshes.

    Each value is a list of ordered rank tuples; for every dimension the
    groups partition ``{0 .. world_size-1}``.
    """

    attention: Dict[str, List[Group]]
    moe: Dict[str, List[Group]]

    def group_of(self, mesh: str, dim: str, rank: int) -> Group:
        table = self.attention if mesh == "attention" else self.moe
        for group in table[dim]:
            if rank in group:
                return group
        raise ValidationError(
            f"rank {rank} not found in any {mesh}/{dim} group",
            constraint="rank-in-group",
        )


@dataclass(frozen=True)
class ClusterModel:
    """Physical cluster constants used for span classification and timing."""

    node_size: int = 8
    intra_bw: float = 450e9  # bytes/s within a node
    inter_bw: float = 50e9  # bytes/s across nodes (400 Gb/s)
    per_link_latency_s: float = 5e-6
    peak_flops: float = 989.5e12

    def __post_init__(self):
        if self.node_size < 1:
            raise ValidationError("node_size must be >= 1", constraint="node_size>=1")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValidationError("bandwidths must be > 0", constraint="bw>0")
        if self.inter_bw > self.intra_bw:
            raise ValidationError(
                "inter_bw must not exceed intra_bw", constraint="inter_bw<=intra_bw"
            )


@dataclass(frozen=True)
class GroupSpan:
    span: str  # SPAN_INTRA or SPAN_INTER
    node_count: int


@dataclass(frozen=True)
class PpConsistency:
    consistent: bool
    mismatch: Optional[Tuple[Group, Group]] = None  # (attention group, moe group)


def _axis_groups(grid: np.ndarray, axis: int) -> List[Group]:
    """Groups obtained by varying one axis of a rank grid, all others fixed.

    Enumeration order matches a row-major flattening of the remaining axes,
    i.e. the order produced by reshaping with the varying axis moved last.
    """
    perm = tuple(i for i in range(grid.ndim) if i != axis) + (axis,)
    size = grid.shape[axis]
    return list(map(tuple, grid.transpose(perm).reshape(-1, size).tolist()))


def generate_parallel_groups(topology: ParallelTopology) -> GroupSets:
    """Construct the rank groups of both meshes for one topology.

    Pure function of its input: identical topologies produce identical
    group sets, including enumeration order.
    """
    w = topology.world_size
    ranks = np.arange(w)
    tp, cp, pp, dp = topology.tp, topology.cp, topology.pp, topology.dp
    etp, ep, edp = topology.etp, topology.ep, topology.edp

    if topology.layout == LAYOUT_LISTING1:
        attn = ranks.reshape(dp, pp, cp, tp)
        attn_axes = {"DP": 0, "PP": 1, "CP": 2, "TP": 3}
        moe = ranks.reshape(edp, pp, ep, etp)
        moe_axes = {"EDP": 0, "PP": 1, "EP": 2, "ETP": 3}
    else:
        attn = ranks.reshape(pp, dp, cp, tp)
        attn_axes = {"PP": 0, "DP": 1, "CP": 2, "TP": 3}
        moe = ranks.reshape(pp, edp, ep, etp)
        moe_axes = {"PP": 0, "EDP": 1, "EP": 2, "ETP": 3}

    attention = {dim: _axis_groups(attn, axis) for dim, axis in attn_axes.items()}
    moe_groups = {dim: _axis_groups(moe, axis) for dim, axis in moe_axes.items()}
    return GroupSets(attention=attention, moe=moe_groups)


def check_pp_consistency(groups: GroupSets) -> PpConsistency:
    """Whether both meshes induce the same pipeline groups.

    Compares the pipeline groups as unordered rank sets.  On mismatch the
    verdict carries the first attention pipeline group (in enumeration
    order) whose member set differs from the MoE pipeline group sharing its
    lowest rank.
    """
    moe_sets = {frozenset(g) for g in groups.moe["PP"]}
    moe_by_rank = {}
    for g in groups.moe["PP"]:
        for r in g:
            moe_by_rank[r] = g
    for g in groups.attention["PP"]:
        if frozenset(g) not in moe_sets:
            return PpConsistency(False, (g, moe_by_rank[min(g)]))
    return PpConsistency(True, None)


def classify_group_span(group: Group, cluster: ClusterModel) -> GroupSpan:
    """Whether a rank group fits inside one physical node.

    Ranks map to nodes in contiguous blocks of ``cluster.node_size``.
    """
    if len(group) == 0:
        raise ValidationError("cannot classify an empty group", constraint="group-nonempty")
    nodes = {r // cluster.node_size for r in group}
    return GroupSpan(SPAN_INTRA if len(nodes) == 1 else SPAN_INTER, len(nodes))


def sequence_group(topology: ParallelTopology, rank: int) -> Group:
    """Ranks holding the shards of ``rank``'s sequences (its TP x CP block)."""
    _, _, d, p = topology.attn_coords(rank)
    members = [
        r
        for r in range(topology.world_size)
        if topology.attn_coords(r)[2] == d and topology.attn_coords(r)[3] == p
    ]
    return tuple(members)
