"""Dense single-device reference for the distributed MoE layer.

Everything here is recomputed from scratch on unsharded weights: gating,
top-k selection, capacity dropping, and the expert MLPs.  This module is
deliberately independent of the dispatcher, the collectives engine, and the
router so a shared bug cannot cancel out in the equivalence tests; only the
weight initialization helpers are shared, since both sides must start from
identical matrices.

The finite-difference oracle perturbs one coordinate at a time and rejects
probes whose discrete structure (top-k membership, capacity keep set, or
ReLU activity pattern) differs between the two perturbed points, since the
loss is not differentiable across those boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError, ValidationError
from .experts import ACT_RELU, full_expert_matrices, init_gating_matrix

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class OracleModel:
    """Full (unsharded) weights plus the routing policy."""

    w_g: np.ndarray
    w1: List[np.ndarray]
    w2: List[np.ndarray]
    k: int
    activation: str = ACT_RELU
    gate_fn: str = "softmax"
    renormalize_topk: bool = False
    capacity_factor: Optional[float] = None
    drop_priority: str = "position"
    scopes: Optional[List[np.ndarray]] = None  # token-index sets sharing one capacity pool

    @property
    def num_experts(self) -> int:
        return len(self.w1)

    def with_scopes(self, scopes: Optional[List[np.ndarray]]) -> "OracleModel":
        return OracleModel(
            self.w_g, self.w1, self.w2, self.k, self.activation, self.gate_fn,
            self.renormalize_topk, self.capacity_factor, self.drop_priority, scopes,
        )


def build_oracle_model(
    num_experts: int,
    hidden: int,
    ffn: int,
    k: int,
    seed: int,
    activation: str = ACT_RELU,
    gate_fn: str = "softmax",
    renormalize_topk: bool = False,
    capacity_factor: Optional[float] = None,
    drop_priority: str = "position",
    scopes: Optional[List[np.ndarray]] = None,
) -> OracleModel:
    """Reconstruct the full model from the same seed the distributed side
    shards from."""
    w1, w2 = full_expert_matrices(num_experts, hidden, ffn, seed)
    w_g = init_gating_matrix(hidden, num_experts, seed)
    return OracleModel(
        w_g, w1, w2, k, activation, gate_fn, renormalize_topk,
        capacity_factor, drop_priority, scopes,
    )


def scopes_per_sequence(n_tokens: int, seq_len: int) -> List[np.ndarray]:
    if n_tokens % seq_len != 0:
        raise ValidationError(
            f"{n_tokens} tokens do not split into sequences of {seq_len}",
            constraint="seq_len|n_tokens",
        )
    return [np.arange(s * seq_len, (s + 1) * seq_len) for s in range(n_tokens // seq_len)]


@dataclass
class OracleRouting:
    experts: np.ndarray  # [n, k]
    gates: np.ndarray  # [n, k]
    kept: np.ndarray  # [n, k]


def _gate_scores(x: np.ndarray, model: OracleModel) -> np.ndarray:
    logits = x @ model.w_g
    if model.gate_fn == "softmax":
        shifted = logits - logits.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        return ex / ex.sum(axis=1, keepdims=True)
    return 1.0 / (1.0 + np.exp(-logits))


def oracle_route(x: np.ndarray, model: OracleModel) -> OracleRouting:
    """Routing decisions computed directly from first principles.

    Selection sorts (score descending, expert id ascending) per token;
    capacity admits pairs scope by scope in the documented priority order.
    """
    n = x.shape[0]
    scores = _gate_scores(x, model)
    experts = np.empty((n, model.k), dtype=np.int64)
    gates = np.empty((n, model.k), dtype=np.float64)
    for i in range(n):
        ranked = sorted(range(model.num_experts), key=lambda e: (-scores[i, e], e))
        chosen = ranked[: model.k]
        experts[i] = chosen
        gates[i] = scores[i, chosen]
    if model.renormalize_topk:
        gates = gates / gates.sum(axis=1, keepdims=True)
    kept = np.ones((n, model.k), dtype=bool)
    if model.capacity_factor is not None:
        scopes = model.scopes
        if scopes is None:
            scopes = [np.arange(n)]
        for scope in scopes:
            cap = max(1, math.floor(model.capacity_factor * len(scope) / model.num_experts))
            pairs = [(int(t), s) for t in scope for s in range(model.k)]
            if model.drop_priority == "probability":
                pairs.sort(key=lambda p: (-gates[p[0], p[1]], p[0], p[1]))
            used = [0] * model.num_experts
            for t, s in pairs:
                e = int(experts[t, s])
                if used[e] < cap:
                    used[e] += 1
                else:
                    kept[t, s] = False
    return OracleRouting(experts, gates, kept)


def _expert_eval(x: np.ndarray, w1: np.ndarray, w2: np.ndarray, activation: str):
    pre = x @ w1
    if activation == ACT_RELU:
        act = np.maximum(pre, 0.0)
    else:
        act = 0.5 * pre * (1.0 + np.tanh(_GELU_C * (pre + 0.044715 * pre**3)))
    return act @ w2, pre


def _forward_internals(x: np.ndarray, model: OracleModel):
    routing = oracle_route(x, model)
    n, hidden = x.shape
    y = np.zeros((n, hidden))
    relu_signs: List[np.ndarray] = []
    for s in range(model.k):
        for e in range(model.num_experts):
            mask = (routing.experts[:, s] == e) & routing.kept[:, s]
            if not mask.any():
                continue
            out, pre = _expert_eval(x[mask], model.w1[e], model.w2[e], model.activation)
            y[mask] += routing.gates[mask, s][:, None] * out
            if model.activation == ACT_RELU:
                relu_signs.append(pre > 0.0)
    return y, routing, relu_signs


def oracle_moe_forward(x: np.ndarray, model: OracleModel) -> np.ndarray:
    """Dense reference output: per token the gate-weighted sum of the kept
    experts' outputs; a token whose pairs were all dropped yields zeros."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("oracle input contains non-finite values")
    y, _, _ = _forward_internals(x, model)
    return y


def _signature(x: np.ndarray, model: OracleModel):
    y, routing, relu_signs = _forward_internals(x, model)
    return y, (routing.experts, routing.kept, relu_signs)


def _signatures_equal(a, b) -> bool:
    if not np.array_equal(a[0], b[0]) or not np.array_equal(a[1], b[1]):
        return False
    if len(a[2]) != len(b[2]):
        return False
    return all(np.array_equal(u, v) for u, v in zip(a[2], b[2]))


@dataclass
class FdGradients:
    """Central-difference gradients; unstable probes carry NaN and are
    listed in ``skipped`` as (tensor tag, flat index)."""

    x: Optional[np.ndarray] = None
    w_g: Optional[np.ndarray] = None
    w1: Optional[List[np.ndarray]] = None
    w2: Optional[List[np.ndarray]] = None
    skipped: List[Tuple[str, int]] = field(default_factory=list)


def oracle_grad_fd(
    x: np.ndarray,
    model: OracleModel,
    upstream: np.ndarray,
    eps: float = 1e-5,
    wrt: Sequence[str] = ("x", "w_g", "w1", "w2"),
) -> FdGradients:
    """Finite-difference gradients of ``sum(upstream * forward(x))``.

    Probes whose +eps/-eps evaluations disagree on routing, keep flags, or
    ReLU activity are skipped rather than reported, since central
    differences straddle a non-differentiable boundary there.
    """
    if eps <= 0:
        raise ValidationError("eps must be > 0", constraint="eps>0")
    x = np.asarray(x, dtype=np.float64).copy()
    upstream = np.asarray(upstream, dtype=np.float64)
    model = OracleModel(
        model.w_g.copy(), [w.copy() for w in model.w1], [w.copy() for w in model.w2],
        model.k, model.activation, model.gate_fn, model.renormalize_topk,
        model.capacity_factor, model.drop_priority, model.scopes,
    )
    result = FdGradients(skipped=[])

    def probe(flat: np.ndarray, idx: int) -> Optional[float]:
        orig = flat[idx]
        flat[idx] = orig + eps
        y_up, sig_up = _signature(x, model)
        flat[idx] = orig - eps
        y_dn, sig_dn = _signature(x, model)
        flat[idx] = orig
        if not _signatures_equal(sig_up, sig_dn):
            return None
        return float((upstream * (y_up - y_dn)).sum()) / (2 * eps)

    def fd_tensor(arr: np.ndarray, tag: str) -> np.ndarray:
        grad = np.empty(arr.size)
        flat = arr.ravel()
        for idx in range(arr.size):
            g = probe(flat, idx)
            if g is None:
                result.skipped.append((tag, idx))
                grad[idx] = np.nan
            else:
                grad[idx] = g
        return grad.reshape(arr.shape)

    if "x" in wrt:
        result.x = fd_tensor(x, "x")
    if "w_g" in wrt:
        result.w_g = fd_tensor(model.w_g, "w_g")
    if "w1" in wrt:
        result.w1 = [fd_tensor(model.w1[e], f"w1[{e}]") for e in range(model.num_experts)]
    if "w2" in wrt:
        result.w2 = [fd_tensor(model.w2[e], f"w2[{e}]") for e in range(model.num_experts)]
    return result
