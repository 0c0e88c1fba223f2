"""Top-k gating and capacity-factor token dropping.

The router scores each token against every expert, keeps the k best
(scores tie-break toward the lower expert id), and optionally drops
token/expert pairs that exceed per-expert capacity.  Dropping can be scoped
to a rank's local tokens (sub-sequence mode, the default) or to the full
sequence gathered across the ranks that shard it (full-sequence mode).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .collectives import RankContext, VarBuffer
from .errors import NumericError, ProtocolError, ValidationError

GATE_SOFTMAX = "softmax"
GATE_SIGMOID = "sigmoid"

DROP_SUBSEQUENCE = "subsequence"
DROP_FULLSEQUENCE = "fullsequence"

PRIORITY_POSITION = "position"
PRIORITY_PROBABILITY = "probability"


@dataclass
class GatingParams:
    """Router weights plus the routing policy knobs.

    ``capacity_factor=None`` means dropless: every routed pair is kept.
    """

    w_g: np.ndarray  # [hidden, num_experts]
    k: int
    gate_fn: str = GATE_SOFTMAX
    renormalize_topk: bool = False
    capacity_factor: Optional[float] = None
    drop_mode: str = DROP_SUBSEQUENCE
    drop_priority: str = PRIORITY_POSITION

    def __post_init__(self):
        self.w_g = np.asarray(self.w_g, dtype=np.float64)
        if self.w_g.ndim != 2:
            raise ValidationError("w_g must be 2-D [hidden, experts]", constraint="w_g-2d")
        if not (1 <= self.k <= self.num_experts):
            raise ValidationError(
                f"k must satisfy 1 <= k <= num_experts ({self.num_experts}), got {self.k}",
                constraint="1<=k<=E",
            )
        if self.gate_fn not in (GATE_SOFTMAX, GATE_SIGMOID):
            raise ValidationError(f"unknown gate_fn {self.gate_fn!r}", constraint="gate_fn")
        if self.drop_mode not in (DROP_SUBSEQUENCE, DROP_FULLSEQUENCE):
            raise ValidationError(f"unknown drop_mode {self.drop_mode!r}", constraint="drop_mode")
        if self.drop_priority not in (PRIORITY_POSITION, PRIORITY_PROBABILITY):
            raise ValidationError(
                f"unknown drop_priority {self.drop_priority!r}", constraint="drop_priority"
            )
        if self.capacity_factor is not None and self.capacity_factor < 1.0:
            raise ValidationError(
                f"capacity_factor must be >= 1, got {self.capacity_factor}",
                constraint="capacity_factor>=1",
            )

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[1]

    @property
    def dropless(self) -> bool:
        return self.capacity_factor is None


@dataclass
class RoutingDecision:
    """Per-token expert assignments.

    ``experts[i, s]`` and ``gates[i, s]`` describe slot ``s`` of token ``i``
    in selection order (best score first); ``kept`` marks pairs that
    survived capacity; ``positions`` are global token coordinates.
    ``scores`` keeps the full activation row per token when available (it
    is not carried across ranks by the full-sequence gather).
    """

    experts: np.ndarray  # [n, k] int64
    gates: np.ndarray  # [n, k] float64
    kept: np.ndarray  # [n, k] bool
    positions: np.ndarray  # [n] int64
    scores: Optional[np.ndarray] = None  # [n, num_experts]

    @property
    def n_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def copy(self) -> "RoutingDecision":
        return RoutingDecision(
            self.experts.copy(),
            self.gates.copy(),
            self.kept.copy(),
            self.positions.copy(),
            None if self.scores is None else self.scores.copy(),
        )


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max so adding a constant to a
    row's logits leaves the result bit-identical."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, best first; ties resolve
    toward the lower expert id."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def compute_gates(
    x: np.ndarray, params: GatingParams, positions: Optional[np.ndarray] = None
) -> RoutingDecision:
    """Score a token block and select each token's top-k experts.

    Gate values are the raw activation scores of the winners unless
    ``renormalize_topk`` rescales them to sum to one over the k winners.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w_g.shape[0]:
        raise ValidationError(
            f"token block shape {x.shape} incompatible with w_g {params.w_g.shape}",
            constraint="x-shape",
        )
    if not np.all(np.isfinite(x)):
        raise NumericError("token block contains non-finite values")
    if not np.all(np.isfinite(params.w_g)):
        raise NumericError("gating weights contain non-finite values")
    logits = x @ params.w_g
    if params.gate_fn == GATE_SOFTMAX:
        scores = softmax_rows(logits)
    else:
        scores = 1.0 / (1.0 + np.exp(-logits))
    experts = select_topk(scores, params.k)
    gates = np.take_along_axis(scores, experts, axis=1)
    if params.renormalize_topk:
        gates = gates / gates.sum(axis=1, keepdims=True)
    n = x.shape[0]
    if positions is None:
        positions = np.arange(n, dtype=np.int64)
    else:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (n,):
            raise ValidationError("positions must have one entry per token", constraint="positions")
    kept = np.ones((n, params.k), dtype=bool)
    return RoutingDecision(experts.astype(np.int64), gates, kept, positions, scores)


def capacity_limit(capacity_factor: float, l_scope: int, num_experts: int) -> int:
    """Per-expert pair budget for one dropping scope: floor(CF * L / E),
    never below one."""
    return max(1, math.floor(capacity_factor * l_scope / num_experts))


def apply_capacity(
    decision: RoutingDecision, l_scope: int, num_experts: int, params: GatingParams
) -> RoutingDecision:
    """Drop pairs exceeding per-expert capacity within one scope.

    The decision must cover exactly the tokens of the scope.  Pairs are
    admitted in priority order (earlier position by default, larger gate
    first under probability priority); the rest are marked dropped.
    Dropless parameters return the decision unchanged.
    """
    if params.dropless:
        return decision
    if params.capacity_factor < 1.0:
        raise ValidationError("capacity_factor must be >= 1", constraint="capacity_factor>=1")
    cap = capacity_limit(params.capacity_factor, l_scope, num_experts)
    out = decision.copy()
    n, k = out.experts.shape
    experts = out.experts.ravel()
    kept = out.kept.ravel()
    pos = np.repeat(out.positions, k)
    slot = np.tile(np.arange(k), n)
    if params.drop_priority == PRIORITY_POSITION:
        order = np.lexsort((slot, pos))
    else:
        order = np.lexsort((slot, pos, -out.gates.ravel()))
    used = np.zeros(num_experts, dtype=np.int64)
    for idx in order:
        if not kept[idx]:
            continue
        e = experts[idx]
        if used[e] < cap:
            used[e] += 1
        else:
            kept[idx] = False
    out.kept = kept.reshape(n, k)
    return out


def gather_full_sequence_decision(
    ctx: RankContext,
    group: Tuple[int, ...],
    local: RoutingDecision,
    seq_len: int,
    num_experts: int,
    params: GatingParams,
) -> Tuple[RoutingDecision, RoutingDecision]:
    """Share routing pairs across the ranks shard-holding the sequence(s),
    apply capacity per full sequence, and map the drop flags back.

    Returns ``(global_decision, local_decision)``: the position-ordered
    union of pairs for the gathered sequences with capacity applied, and a
    copy of ``local`` whose kept flags reflect the global decision.
    """
    n, k = local.experts.shape
    rows = np.column_stack(
        [
            np.repeat(local.positions.astype(np.float64), k),
            np.tile(np.arange(k, dtype=np.float64), n),
            local.experts.ravel().astype(np.float64),
            local.gates.ravel(),
        ]
    )
    buf, _ = ctx.all_gather_v(group, VarBuffer.from_rows(rows.reshape(-1, 4)))
    gathered = buf.rows()
    total_pairs = gathered.shape[0]
    if total_pairs % k != 0:
        raise ProtocolError(
            f"full-sequence gather: {total_pairs} pairs is not a multiple of k={k}; "
            "shard lengths are inconsistent"
        )
    order = np.lexsort((gathered[:, 1], gathered[:, 0]))
    gathered = gathered[order]
    positions = gathered[::k, 0].astype(np.int64)
    if np.unique(positions).size != positions.size:
        raise ProtocolError("full-sequence gather: duplicate token positions across shards")
    global_dec = RoutingDecision(
        experts=gathered[:, 2].astype(np.int64).reshape(-1, k),
        gates=gathered[:, 3].reshape(-1, k),
        kept=np.ones((positions.size, k), dtype=bool),
        positions=positions,
        scores=None,
    )
    seq_ids = positions // seq_len
    for sid in np.unique(seq_ids):
        mask = seq_ids == sid
        scoped = RoutingDecision(
            global_dec.experts[mask],
            global_dec.gates[mask],
            global_dec.kept[mask],
            global_dec.positions[mask],
            None,
        )
        scoped = apply_capacity(scoped, seq_len, num_experts, params)
        global_dec.kept[mask] = scoped.kept
    flags = {int(p): i for i, p in enumerate(global_dec.positions)}
    out = local.copy()
    for i, p in enumerate(local.positions):
        out.kept[i] = global_dec.kept[flags[int(p)]]
    return global_dec, out


@dataclass(frozen=True)
class LoadStats:
    counts: np.ndarray  # kept pairs per expert
    imbalance: float  # max count / mean count
    aux_loss: float


def load_stats(decision: RoutingDecision, num_experts: int) -> LoadStats:
    """Per-expert load plus the load-balancing auxiliary loss.

    The auxiliary loss is ``E * sum_e f_e * P_e`` with ``f_e`` the fraction
    of tokens whose best expert is ``e`` and ``P_e`` the mean normalized
    score of ``e``; its minimum value 1.0 is attained by a perfectly
    uniform router.  When the decision carries no score matrix the loss is
    reported as NaN.
    """
    counts = np.bincount(
        decision.experts.ravel()[decision.kept.ravel()], minlength=num_experts
    ).astype(np.int64)
    mean = counts.sum() / num_experts
    imbalance = float(counts.max() / mean) if mean > 0 else float("nan")
    if decision.scores is None or decision.n_tokens == 0:
        aux = float("nan")
    else:
        top1 = decision.experts[:, 0]
        f = np.bincount(top1, minlength=num_experts) / decision.n_tokens
        probs = decision.scores / decision.scores.sum(axis=1, keepdims=True)
        p = probs.mean(axis=0)
        aux = float(num_experts * np.dot(f, p))
    return LoadStats(counts=counts, imbalance=imbalance, aux_loss=aux)


def merge_decisions(decisions) -> RoutingDecision:
    """Concatenate per-rank decisions into one, ordered by global position."""
    experts = np.concatenate([d.experts for d in decisions])
    gates = np.concatenate([d.gates for d in decisions])
    kept = np.concatenate([d.kept for d in decisions])
    positions = np.concatenate([d.positions for d in decisions])
    scores = None
    if all(d.scores is not None for d in decisions):
        scores = np.concatenate([d.scores for d in decisions])
    order = np.argsort(positions, kind="stable")
    return RoutingDecision(
        experts[order],
        gates[order],
        kept[order],
        positions[order],
        None if scores is None else scores[order],
    )
