"""Desk-scale simulator and planner for decoupled attention/MoE hybrid
parallelism: rank-group generation for independently factored meshes, a
deterministic collectives simulator, the token dispatch protocol with exact
numerics and analytic gradients, a dense single-device oracle, and an
analytical communication/compute cost model with configuration search."""

from .collectives import SimWorld, TrafficRecord, TrafficStats, VarBuffer, traffic_stats
from .costmodel import (
    BalancedLoad,
    CostReport,
    ModelDims,
    PlanLoad,
    SearchConstraints,
    enumerate_valid_configs,
    estimate_layer_cost,
    search_best_config,
)
from .dispatcher import (
    BackwardResult,
    DispatchPlan,
    ForwardContext,
    TokenBlock,
    build_dispatch_plan,
    fabricate_token_blocks,
    fabricate_upstream,
    moe_backward,
    moe_forward,
    permute,
    token_partition,
    unpermute_combine,
)
from .errors import NumericError, ProtocolError, ValidationError
from .experts import (
    ExpertWeights,
    expert_backward_shard,
    expert_forward_shard,
    full_expert_matrices,
    init_expert_weights,
    init_gating_matrix,
)
from .oracle import (
    FdGradients,
    OracleModel,
    build_oracle_model,
    oracle_grad_fd,
    oracle_moe_forward,
    oracle_route,
    scopes_per_sequence,
)
from .router import (
    GatingParams,
    LoadStats,
    RoutingDecision,
    apply_capacity,
    capacity_limit,
    compute_gates,
    gather_full_sequence_decision,
    load_stats,
    merge_decisions,
)
from .topology import (
    ClusterModel,
    GroupSets,
    ParallelTopology,
    check_pp_consistency,
    classify_group_span,
    generate_parallel_groups,
    sequence_group,
)

__version__ = "0.1.0"
