"""Expert feed-forward networks with tensor sharding.

Each expert is a bias-free two-layer MLP.  Under expert tensor parallelism
the first matrix is column-sliced and the second row-sliced into equal
parts, so every shard's partial output sums (over the shard group) to the
unsharded result exactly, up to floating-point summation order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ValidationError

ACT_RELU = "relu"
ACT_GELU = "gelu"

_GELU_C = np.sqrt(2.0 / np.pi)


def _act(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_RELU:
        return np.maximum(pre, 0.0)
    # tanh-approximation GELU
    inner = _GELU_C * (pre + 0.044715 * pre**3)
    return 0.5 * pre * (1.0 + np.tanh(inner))


def _act_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_RELU:
        return (pre > 0.0).astype(np.float64)
    inner = _GELU_C * (pre + 0.044715 * pre**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * pre**2)
    return 0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t**2) * dinner


@dataclass
class ExpertWeights:
    """One rank's shard of its local experts.

    ``w1[i]`` is the column slice [hidden, ffn/etp_size] and ``w2[i]`` the
    matching row slice [ffn/etp_size, hidden] of local expert
    ``expert_ids[i]``.
    """

    expert_ids: Tuple[int, ...]
    w1: List[np.ndarray]
    w2: List[np.ndarray]
    activation: str
    etp_rank: int
    etp_size: int

    def local_index(self, expert_id: int) -> int:
        try:
            return self.expert_ids.index(expert_id)
        except ValueError:
            raise ValidationError(
                f"expert {expert_id} is not hosted here (local: {self.expert_ids})",
                constraint="expert-local",
            ) from None


def full_expert_matrices(
    num_experts: int, hidden: int, ffn: int, seed: int
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Unsharded expert matrices, drawn uniformly in [-1/sqrt(hidden),
    1/sqrt(hidden)] from a stream independent of gating weights."""
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / np.sqrt(hidden)
    w1 = [rng.uniform(-bound, bound, size=(hidden, ffn)) for _ in range(num_experts)]
    w2 = [rng.uniform(-bound, bound, size=(ffn, hidden)) for _ in range(num_experts)]
    return w1, w2


def init_gating_matrix(hidden: int, num_experts: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    bound = 1.0 / np.sqrt(hidden)
    return rng.uniform(-bound, bound, size=(hidden, num_experts))


def init_expert_weights(
    num_experts: int,
    hidden: int,
    ffn: int,
    etp_size: int,
    seed: int,
    ep_size: int = 1,
    activation: str = ACT_RELU,
) -> Dict[Tuple[int, int], ExpertWeights]:
    """Shard seeded expert matrices over an (ep, etp) grid.

    Every shard of the same expert derives from one full matrix, so the
    per-(ep_rank, etp_rank) shards concatenate back to the ``etp_size=1``
    weights for the same seed.  Expert ``e`` lives on ep rank
    ``e // (num_experts // ep_size)``.
    """
    if ffn % etp_size != 0:
        raise ValidationError(
            f"ffn={ffn} is not divisible by etp_size={etp_size}", constraint="etp|ffn"
        )
    if num_experts % ep_size != 0:
        raise ValidationError(
            f"num_experts={num_experts} is not divisible by ep_size={ep_size}",
            constraint="ep|num_experts",
        )
    if activation not in (ACT_RELU, ACT_GELU):
        raise ValidationError(f"unknown activation {activation!r}", constraint="activation")
    w1_full, w2_full = full_expert_matrices(num_experts, hidden, ffn, seed)
    local = num_experts // ep_size
    shard = ffn // etp_size
    out: Dict[Tuple[int, int], ExpertWeights] = {}
    for ep_rank in range(ep_size):
        ids = tuple(range(ep_rank * local, (ep_rank + 1) * local))
        for etp_rank in range(etp_size):
            cols = slice(etp_rank * shard, (etp_rank + 1) * shard)
            out[(ep_rank, etp_rank)] = ExpertWeights(
                expert_ids=ids,
                w1=[w1_full[e][:, cols].copy() for e in ids],
                w2=[w2_full[e][cols, :].copy() for e in ids],
                activation=activation,
                etp_rank=etp_rank,
                etp_size=etp_size,
            )
    return out


def expert_forward_shard(
    tokens: np.ndarray, weights: ExpertWeights, expert_id: int
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Partial FFN output of one expert shard.

    Returns the partial rows plus the cache (inputs, pre-activations)
    needed by the backward pass.  Summing partials over the shard group
    reproduces the unsharded forward.
    """
    i = weights.local_index(expert_id)
    x = np.asarray(tokens, dtype=np.float64)
    pre = x @ weights.w1[i]
    hidden_act = _act(pre, weights.activation)
    return hidden_act @ weights.w2[i], (x, pre)


def expert_backward_shard(
    upstream: np.ndarray,
    cache: Tuple[np.ndarray, np.ndarray],
    weights: ExpertWeights,
    expert_id: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through one expert shard.

    Returns (partial token gradient, w1 shard gradient, w2 shard gradient);
    token-gradient partials sum over the shard group to the full gradient.
    """
    i = weights.local_index(expert_id)
    x, pre = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x.shape[0], weights.w2[i].shape[1]):
        raise ValidationError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"({x.shape[0]}, {weights.w2[i].shape[1]})",
            constraint="upstream-shape",
        )
    hidden_act = _act(pre, weights.activation)
    dw2 = hidden_act.T @ upstream
    dhidden = upstream @ weights.w2[i].T
    dpre = dhidden * _act_grad(pre, weights.activation)
    dw1 = x.T @ dpre
    dx_partial = dpre @ weights.w1[i].T
    return dx_partial, dw1, dw2
