"""Shared test oracles, written independently of the package internals.

The group oracle enumerates mesh coordinates with explicit integer
arithmetic (no numpy reshapes) so it cannot share a bug with the
implementation under test.
"""
from __future__ import annotations

import itertools


def oracle_groups_listing1(world, tp, cp, ep, etp, pp):
    """Brute-force group enumeration for the listing1 layout.

    Attention rank index: ((d*pp + p)*cp + c)*tp + t
    MoE rank index:       ((d*pp + p)*ep + e)*etp + te
    """
    attn_dp = world // (tp * cp * pp)
    moe_dp = world // (etp * ep * pp)

    def attn_rank(d, p, c, t):
        return ((d * pp + p) * cp + c) * tp + t

    def moe_rank(d, p, e, te):
        return ((d * pp + p) * ep + e) * etp + te

    attention = {
        "TP": [
            tuple(attn_rank(d, p, c, t) for t in range(tp))
            for d, p, c in itertools.product(range(attn_dp), range(pp), range(cp))
        ],
        "CP": [
            tuple(attn_rank(d, p, c, t) for c in range(cp))
            for d, p, t in itertools.product(range(attn_dp), range(pp), range(tp))
        ],
        "PP": [
            tuple(attn_rank(d, p, c, t) for p in range(pp))
            for d, c, t in itertools.product(range(attn_dp), range(cp), range(tp))
        ],
        "DP": [
            tuple(attn_rank(d, p, c, t) for d in range(attn_dp))
            for p, c, t in itertools.product(range(pp), range(cp), range(tp))
        ],
    }
    moe = {
        "ETP": [
            tuple(moe_rank(d, p, e, te) for te in range(etp))
            for d, p, e in itertools.product(range(moe_dp), range(pp), range(ep))
        ],
        "EP": [
            tuple(moe_rank(d, p, e, te) for e in range(ep))
            for d, p, te in itertools.product(range(moe_dp), range(pp), range(etp))
        ],
        "PP": [
            tuple(moe_rank(d, p, e, te) for p in range(pp))
            for d, e, te in itertools.product(range(moe_dp), range(ep), range(etp))
        ],
        "EDP": [
            tuple(moe_rank(d, p, e, te) for d in range(moe_dp))
            for p, e, te in itertools.product(range(pp), range(ep), range(etp))
        ],
    }
    return attention, moe


def oracle_groups_pp_outermost(world, tp, cp, ep, etp, pp):
    """Brute-force group enumeration for the pp-outermost layout.

    Attention rank index: ((p*dp + d)*cp + c)*tp + t
    MoE rank index:       ((p*edp + d)*ep + e)*etp + te
    """
    attn_dp = world // (tp * cp * pp)
    moe_dp = world // (etp * ep * pp)

    def attn_rank(p, d, c, t):
        return ((p * attn_dp + d) * cp + c) * tp + t

    def moe_rank(p, d, e, te):
        return ((p * moe_dp + d) * ep + e) * etp + te

    attention = {
        "TP": [
            tuple(attn_rank(p, d, c, t) for t in range(tp))
            for p, d, c in itertools.product(range(pp), range(attn_dp), range(cp))
        ],
        "CP": [
            tuple(attn_rank(p, d, c, t) for c in range(cp))
            for p, d, t in itertools.product(range(pp), range(attn_dp), range(tp))
        ],
        "DP": [
            tuple(attn_rank(p, d, c, t) for d in range(attn_dp))
            for p, c, t in itertools.product(range(pp), range(cp), range(tp))
        ],
        "PP": [
            tuple(attn_rank(p, d, c, t) for p in range(pp))
            for d, c, t in itertools.product(range(attn_dp), range(cp), range(tp))
        ],
    }
    moe = {
        "ETP": [
            tuple(moe_rank(p, d, e, te) for te in range(etp))
            for p, d, e in itertools.product(range(pp), range(moe_dp), range(ep))
        ],
        "EP": [
            tuple(moe_rank(p, d, e, te) for e in range(ep))
            for p, d, te in itertools.product(range(pp), range(moe_dp), range(etp))
        ],
        "EDP": [
            tuple(moe_rank(p, d, e, te) for d in range(moe_dp))
            for p, e, te in itertools.product(range(pp), range(ep), range(etp))
        ],
        "PP": [
            tuple(moe_rank(p, d, e, te) for p in range(pp))
            for d, e, te in itertools.product(range(moe_dp), range(ep), range(etp))
        ],
    }
    return attention, moe


def valid_degree_tuples(world):
    """All (tp, cp, pp, ep, etp) with tp*cp*pp | world and etp*ep*pp | world."""
    divisors = [d for d in range(1, world + 1) if world % d == 0]
    out = []
    for tp, cp, pp in itertools.product(divisors, repeat=3):
        if world % (tp * cp * pp) != 0:
            continue
        for ep, etp in itertools.product(divisors, repeat=2):
            if world % (etp * ep * pp) == 0:
                out.append((tp, cp, pp, ep, etp))
    return out


def assert_partition(groups, world):
    """Every dimension's groups partition {0..world-1}."""
    for dim, glist in groups.items():
        seen = sorted(r for g in glist for r in g)
        assert seen == list(range(world)), f"{dim} groups do not partition the world"
        sizes = {len(g) for g in glist}
        assert len(sizes) == 1, f"{dim} groups have uneven sizes"
