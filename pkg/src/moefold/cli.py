"""Command-line entry point.

Subcommands:

* ``validate-groups``: print both meshes' rank groups in a stable textual
  form plus the pipeline-consistency verdict.
* ``simulate``: run the distributed MoE layer forward (and backward unless
  ``--forward-only``), compare against the dense oracle, and report error
  norms, load statistics, and wire traffic.
* ``cost``: analytical cost report for the configured topology
  (``--mode plan`` derives byte volumes from a simulated dispatch).
* ``search``: rank every valid topology for the configured world size.
* ``emit-csv``: write balanced and plan cost rows for the configured
  topology.

Config files are flat INI-style key/value sections; see the repository
README for the grammar.  Exit codes: 0 success, 2 validation failure,
3 internal invariant breach.  Errors print one machine-parsable line to
stderr.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .collectives import SimWorld, TrafficStats, traffic_stats
from .costmodel import (
    BalancedLoad,
    CostReport,
    ModelDims,
    PlanLoad,
    estimate_layer_cost,
    search_best_config,
)
from .dispatcher import (
    fabricate_token_blocks,
    fabricate_upstream,
    moe_backward,
    moe_forward,
    token_partition,
)
from .errors import NumericError, ProtocolError, ValidationError
from .experts import init_expert_weights, init_gating_matrix
from .oracle import build_oracle_model, oracle_moe_forward, scopes_per_sequence
from .router import (
    DROP_FULLSEQUENCE,
    DROP_SUBSEQUENCE,
    GatingParams,
    load_stats,
    merge_decisions,
)
from .topology import (
    ATTENTION_DIMS,
    LAYOUTS,
    MOE_DIMS,
    ClusterModel,
    ParallelTopology,
    check_pp_consistency,
    generate_parallel_groups,
)

CSV_COLUMNS = (
    "config_id,tp,cp,pp,ep,etp,span,a2a_bytes,ag_bytes,rs_bytes,p2p_bytes,"
    "comm_time_s,compute_time_s,total_time_s,mfu_est"
)

_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

_SCHEMA: Dict[str, Dict[str, type]] = {
    "topology": {
        "world_size": int, "tp": int, "cp": int, "pp": int, "ep": int,
        "etp": int, "layout": str,
    },
    "model": {
        "hidden": int, "ffn": int, "experts": int, "top_k": int,
        "seq_len": int, "batch": int, "layers": int, "elem_bytes": float,
    },
    "router": {
        "gate_fn": str, "k": int, "capacity_factor": float, "dropless": bool,
        "drop_mode": str, "drop_priority": str, "renormalize": bool,
    },
    "cluster": {
        "node_size": int, "intra_bw": float, "inter_bw": float,
        "latency": float, "peak_flops": float,
    },
    "run": {"seed": int, "workers": int},
}

_REQUIRED = {
    "topology": ("world_size",),
    "model": ("hidden", "ffn", "experts", "top_k", "seq_len"),
}


@dataclass
class RunConfig:
    topology: ParallelTopology
    dims: ModelDims
    gate_fn: str
    capacity_factor: Optional[float]
    drop_mode: str
    drop_priority: str
    renormalize: bool
    cluster: ClusterModel
    seed: int
    workers: Optional[int]

    def gating_params(self) -> GatingParams:
        return GatingParams(
            w_g=init_gating_matrix(self.dims.hidden, self.dims.num_experts, self.seed),
            k=self.dims.top_k,
            gate_fn=self.gate_fn,
            renormalize_topk=self.renormalize,
            capacity_factor=self.capacity_factor,
            drop_mode=self.drop_mode,
            drop_priority=self.drop_priority,
        )


def _coerce(section: str, key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        return kind(raw)
    except ValueError:
        raise ValidationError(
            f"[{section}] {key}={raw!r} is not a valid {kind.__name__}",
            constraint=f"{section}.{key}",
        ) from None


def parse_config(path: str) -> RunConfig:
    """Load and validate a run config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ValidationError(f"config file not found: {path}", constraint="config-exists")
    values: Dict[str, Dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValidationError(
                f"unknown config section [{section}]", constraint="known-section"
            )
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValidationError(
                    f"unknown key {key!r} in section [{section}]",
                    constraint=f"{section}-keys",
                )
            values[section][key] = _coerce(section, key, raw, _SCHEMA[section][key])
    for section, keys in _REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ValidationError(
                    f"missing required key [{section}] {key}",
                    constraint=f"{section}.{key}-required",
                )

    topo_vals = values["topology"]
    topology = ParallelTopology(
        world_size=topo_vals["world_size"],
        tp=topo_vals.get("tp", 1),
        cp=topo_vals.get("cp", 1),
        pp=topo_vals.get("pp", 1),
        ep=topo_vals.get("ep", 1),
        etp=topo_vals.get("etp", 1),
        layout=topo_vals.get("layout", "pp-outermost"),
    )
    model_vals = values["model"]
    dims = ModelDims(
        hidden=model_vals["hidden"],
        ffn=model_vals["ffn"],
        num_experts=model_vals["experts"],
        top_k=model_vals["top_k"],
        layers=model_vals.get("layers", 1),
        seq_len=model_vals["seq_len"],
        # default: one sequence per data-parallel replica
        batch=model_vals.get("batch", topology.dp),
        elem_bytes=model_vals.get("elem_bytes", 2.0),
    )
    router_vals = values.get("router", {})
    if "k" in router_vals and router_vals["k"] != dims.top_k:
        raise ValidationError(
            f"[router] k={router_vals['k']} conflicts with [model] top_k={dims.top_k}",
            constraint="router.k==model.top_k",
        )
    dropless = router_vals.get("dropless", None)
    capacity = router_vals.get("capacity_factor", None)
    if dropless and capacity is not None:
        raise ValidationError(
            "[router] dropless=true conflicts with capacity_factor",
            constraint="dropless-xor-capacity",
        )
    cluster_vals = values.get("cluster", {})
    defaults = ClusterModel()
    cluster = ClusterModel(
        node_size=cluster_vals.get("node_size", defaults.node_size),
        intra_bw=cluster_vals.get("intra_bw", defaults.intra_bw),
        inter_bw=cluster_vals.get("inter_bw", defaults.inter_bw),
        per_link_latency_s=cluster_vals.get("latency", defaults.per_link_latency_s),
        peak_flops=cluster_vals.get("peak_flops", defaults.peak_flops),
    )
    run_vals = values.get("run", {})
    return RunConfig(
        topology=topology,
        dims=dims,
        gate_fn=router_vals.get("gate_fn", "softmax"),
        capacity_factor=capacity,
        drop_mode=router_vals.get("drop_mode", DROP_SUBSEQUENCE),
        drop_priority=router_vals.get("drop_priority", "position"),
        renormalize=router_vals.get("renormalize", False),
        cluster=cluster,
        seed=run_vals.get("seed", 0),
        workers=run_vals.get("workers", None),
    )


def _num(x: float) -> str:
    """Stable scalar formatting: integral values print as integers."""
    f = float(x)
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def _csv_row(report: CostReport, config_id: Optional[str] = None) -> str:
    t = report.topology
    cells = [
        config_id or report.config_id(),
        str(t.tp), str(t.cp), str(t.pp), str(t.ep), str(t.etp),
        report.span,
        _num(report.a2a_bytes),
        _num(report.allgather.bytes_total),
        _num(report.reduce_scatter.bytes_total),
        _num(report.p2p.bytes_total),
        _num(report.comm_time_s),
        _num(report.compute_time_s),
        _num(report.total_time_s),
        _num(report.mfu_est),
    ]
    return ",".join(cells)


def _write_csv(path: str, rows: List[str]):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_COLUMNS + "\n")
        for row in rows:
            fh.write(row + "\n")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "layout", None) is not None:
        t = cfg.topology
        cfg.topology = ParallelTopology(
            world_size=t.world_size, tp=t.tp, cp=t.cp, pp=t.pp,
            ep=t.ep, etp=t.etp, layout=args.layout,
        )
    return cfg


def cmd_validate_groups(cfg: RunConfig, args) -> int:
    topo = cfg.topology
    groups = generate_parallel_groups(topo)
    print(
        f"layout={topo.layout} world_size={topo.world_size} tp={topo.tp} "
        f"cp={topo.cp} pp={topo.pp} dp={topo.dp} ep={topo.ep} etp={topo.etp} "
        f"edp={topo.edp}"
    )
    for mesh, table, dim_order in (
        ("attention", groups.attention, ATTENTION_DIMS),
        ("moe", groups.moe, MOE_DIMS),
    ):
        for dim in dim_order:
            for i, group in enumerate(table[dim]):
                ranks = ",".join(str(r) for r in group)
                print(f"mesh={mesh} dim={dim} group={i:04d} ranks={ranks}")
    verdict = check_pp_consistency(groups)
    if verdict.consistent:
        print("pp_consistency=consistent")
    else:
        a, m = verdict.mismatch
        print(
            "pp_consistency=inconsistent attention_group="
            + ",".join(map(str, a))
            + " moe_group="
            + ",".join(map(str, m))
        )
    return 0


def _build_simulation(cfg: RunConfig):
    topo, dims = cfg.topology, cfg.dims
    params = cfg.gating_params()
    weights = init_expert_weights(
        dims.num_experts, dims.hidden, dims.ffn,
        etp_size=topo.etp, seed=cfg.seed, ep_size=topo.ep,
        activation="relu",
    )
    x_global, blocks = fabricate_token_blocks(
        topo, dims.seq_len, dims.batch, dims.hidden, cfg.seed
    )
    return params, weights, x_global, blocks


def _oracle_reference(cfg: RunConfig, x_global: np.ndarray) -> np.ndarray:
    dims, topo = cfg.dims, cfg.topology
    model = build_oracle_model(
        dims.num_experts, dims.hidden, dims.ffn, dims.top_k, cfg.seed,
        gate_fn=cfg.gate_fn, renormalize_topk=cfg.renormalize,
        capacity_factor=cfg.capacity_factor, drop_priority=cfg.drop_priority,
    )
    if cfg.capacity_factor is not None:
        if cfg.drop_mode == DROP_FULLSEQUENCE:
            scopes = scopes_per_sequence(x_global.shape[0], dims.seq_len)
        else:
            scopes = token_partition(topo, dims.seq_len, dims.batch)
        model = model.with_scopes(scopes)
    return oracle_moe_forward(x_global, model)


def _traffic_lines(stats: TrafficStats) -> List[str]:
    lines = []
    for (primitive, span), nbytes in sorted(stats.by_primitive_span.items()):
        lines.append(f"traffic primitive={primitive} span={span} bytes={_num(nbytes)}")
    lines.append(f"traffic total_bytes={_num(stats.total_bytes)}")
    return lines


def cmd_simulate(cfg: RunConfig, args) -> int:
    topo, dims = cfg.topology, cfg.dims
    params, weights, x_global, blocks = _build_simulation(cfg)
    world = SimWorld(topo.world_size)
    outputs, ctx = moe_forward(
        blocks, weights, topo, params, world,
        seq_len=dims.seq_len, workers=cfg.workers,
    )
    got = np.zeros_like(x_global)
    for out, block in zip(outputs, blocks):
        got[block.positions] = out
    want = _oracle_reference(cfg, x_global)
    scale = max(np.abs(want).max(), 1e-300)
    rel = float(np.abs(got - want).max() / scale)
    config_id = f"tp{topo.tp}cp{topo.cp}pp{topo.pp}ep{topo.ep}etp{topo.etp}"
    print(f"simulate config={config_id} world={topo.world_size} seed={cfg.seed}")
    print(f"oracle_max_rel_error={rel!r}")

    merged = merge_decisions([ctx.per_rank[r]["decision"] for r in range(topo.world_size)])
    stats = load_stats(merged, dims.num_experts)
    kept = int(merged.kept.sum())
    total = merged.kept.size
    print(f"tokens={merged.n_tokens} kept_pairs={kept} dropped_pairs={total - kept}")
    print(f"imbalance={stats.imbalance!r} aux_loss={stats.aux_loss!r}")

    if not args.forward_only:
        _, upstream = fabricate_upstream(topo, dims.seq_len, dims.batch, dims.hidden, cfg.seed)
        grads = moe_backward(upstream, ctx, workers=cfg.workers)
        gnorm = float(np.sqrt(sum(float((g**2).sum()) for g in grads.input_grads)))
        wnorm = float(np.sqrt((grads.w_g_grad**2).sum()))
        print(f"backward input_grad_norm={gnorm!r} w_g_grad_norm={wnorm!r}")

    wire = traffic_stats(world, cfg.cluster, elem_bytes=dims.elem_bytes)
    for line in _traffic_lines(wire):
        print(line)

    plans = tuple(ctx.per_rank[r]["plan"] for r in range(topo.world_size))
    report = estimate_layer_cost(topo, dims, cfg.cluster, load=PlanLoad(plans))
    if args.out:
        _write_csv(args.out, [_csv_row(report)])
        _write_load_csv(args.out, stats, dims.num_experts)
        print(f"csv={args.out}")
    return 0


def _load_csv_path(out: str) -> str:
    stem, dot, ext = out.rpartition(".")
    return f"{stem}_load.{ext}" if dot else f"{out}_load"


def _write_load_csv(out: str, stats, num_experts: int):
    path = _load_csv_path(out)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("key,value\n")
        for e in range(num_experts):
            fh.write(f"expert_{e},{int(stats.counts[e])}\n")
        fh.write(f"imbalance,{stats.imbalance!r}\n")
        fh.write(f"aux_loss,{stats.aux_loss!r}\n")


def _plan_report(cfg: RunConfig) -> CostReport:
    topo, dims = cfg.topology, cfg.dims
    params, weights, _, blocks = _build_simulation(cfg)
    world = SimWorld(topo.world_size)
    _, ctx = moe_forward(
        blocks, weights, topo, params, world,
        seq_len=dims.seq_len, workers=cfg.workers,
    )
    plans = tuple(ctx.per_rank[r]["plan"] for r in range(topo.world_size))
    return estimate_layer_cost(topo, dims, cfg.cluster, load=PlanLoad(plans))


def cmd_cost(cfg: RunConfig, args) -> int:
    if args.mode == "plan":
        report = _plan_report(cfg)
    else:
        report = estimate_layer_cost(cfg.topology, cfg.dims, cfg.cluster, load=BalancedLoad())
    print(CSV_COLUMNS)
    print(_csv_row(report))
    if args.out:
        _write_csv(args.out, [_csv_row(report)])
    return 0


def cmd_search(cfg: RunConfig, args) -> int:
    ranked = search_best_config(cfg.topology.world_size, cfg.dims, cfg.cluster)
    rows = [_csv_row(rep) for rep in ranked]
    print(CSV_COLUMNS)
    for row in rows:
        print(row)
    if args.out:
        _write_csv(args.out, rows)
    return 0


def cmd_emit_csv(cfg: RunConfig, args) -> int:
    balanced = estimate_layer_cost(cfg.topology, cfg.dims, cfg.cluster, load=BalancedLoad())
    plan = _plan_report(cfg)
    rows = [
        _csv_row(balanced, balanced.config_id() + "-balanced"),
        _csv_row(plan, plan.config_id() + "-plan"),
    ]
    print(CSV_COLUMNS)
    for row in rows:
        print(row)
    if args.out:
        _write_csv(args.out, rows)
    return 0


_COMMANDS = {
    "validate-groups": cmd_validate_groups,
    "simulate": cmd_simulate,
    "cost": cmd_cost,
    "search": cmd_search,
    "emit-csv": cmd_emit_csv,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moefold",
        description="Simulator and planner for decoupled attention/MoE hybrid parallelism",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="write the CSV report here")
        p.add_argument(
            "--mode", choices=("balanced", "plan"), default="balanced",
            help="cost accounting: analytic uniform routing or simulated plans",
        )
        p.add_argument("--layout", choices=LAYOUTS, default=None, help="override rank layout")
        p.add_argument(
            "--workers", type=int, default=None,
            help="worker threads for the rank scheduler (results are identical)",
        )
        if name == "simulate":
            p.add_argument(
                "--forward-only", action="store_true",
                help="skip the backward pass",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
        return _COMMANDS[args.command](cfg, args)
    except (ValidationError, NumericError) as exc:
        constraint = getattr(exc, "constraint", "validation")
        print(f"error: code=2 constraint={constraint} message={exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"error: code=3 constraint=protocol message={exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: code=3 constraint=internal message={exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
