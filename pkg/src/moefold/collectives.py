"""Deterministic in-process simulation of collective communication.

Every simulated rank runs as one thread of an SPMD program; ranks interact
only at collectives, which act as rendezvous points: a call completes once
all group members have contributed, and the member that arrives last
computes everyone's result in a fixed order (ascending rank).  Because all
cross-rank data flows through these fixed-order reductions, results and the
traffic ledger are identical no matter how many worker threads execute the
ranks.

Wire accounting: each collective appends one ledger record with the
elements every member sent on the wire.  A rank sending to itself counts as
zero wire traffic (local copy).  AllGather charges each member
``own_rows * (group-1)`` rows, ReduceScatter symmetrically charges
``total_rows - own_partition`` rows, and AllReduce uses the ring cost of
``2*(n-1)/n`` times the buffer.  Payloads are double precision in
simulation; byte totals are derived from element counts when the ledger is
aggregated, so a modeled wire precision can be applied independently.

Count matrices and similar host-side metadata move through
``exchange_meta``, which rendezvouses like a collective but is not wire
accounted (real dispatchers exchange these few integers through host
memory or tiny staging copies that the communication cost of the token
payload dwarfs).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ProtocolError, ValidationError
from .topology import ClusterModel, classify_group_span

Group = Tuple[int, ...]

_STALL_TIMEOUT_S = 60.0


@dataclass
class VarBuffer:
    """Variable-count row payload for the ``-V`` collectives.

    ``values`` is a flat float64 array holding ``sum(counts)`` rows of
    ``row_width`` elements each.
    """

    values: np.ndarray
    row_width: int
    counts: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.counts = np.asarray(self.counts, dtype=np.int64).ravel()
        if self.row_width < 1:
            raise ValidationError("row_width must be >= 1", constraint="row_width>=1")
        if np.any(self.counts < 0):
            raise ValidationError("counts must be >= 0", constraint="counts>=0")
        if self.values.size != self.row_width * int(self.counts.sum()):
            raise ValidationError(
                f"values length {self.values.size} != row_width {self.row_width} "
                f"* total rows {int(self.counts.sum())}",
                constraint="values==row_width*sum(counts)",
            )

    @classmethod
    def from_rows(cls, rows: np.ndarray, counts=None) -> "VarBuffer":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValidationError("from_rows expects a 2-D array", constraint="rows-2d")
        if counts is None:
            counts = [rows.shape[0]]
        return cls(rows.ravel(), rows.shape[1], np.asarray(counts))

    def rows(self) -> np.ndarray:
        return self.values.reshape(-1, self.row_width)


@dataclass(frozen=True)
class TrafficRecord:
    epoch: int
    seq: int
    group: Group
    primitive: str
    row_width: int
    elements_sent: Tuple[int, ...]  # wire elements per member, group order

    @property
    def total_elements(self) -> int:
        return int(sum(self.elements_sent))


class _Slot:
    __slots__ = ("payloads", "results", "remaining")

    def __init__(self):
        self.payloads: Dict[int, Any] = {}
        self.results: Optional[Dict[int, Any]] = None
        self.remaining = 0


class SimWorld:
    """Holds the rendezvous state and the traffic ledger for one simulation.

    ``run`` may be called repeatedly (e.g. forward then backward); the
    ledger accumulates across calls.
    """

    def __init__(self, n_ranks: int):
        if n_ranks < 1:
            raise ValidationError("n_ranks must be >= 1", constraint="n_ranks>=1")
        self.n_ranks = n_ranks
        self._cond = threading.Condition()
        self._slots: Dict[tuple, _Slot] = {}
        self._seq: Dict[tuple, int] = {}
        self._records: Dict[tuple, TrafficRecord] = {}
        self._epoch = 0
        self._failure: Optional[BaseException] = None
        self._progress = 0

    @property
    def ledger(self) -> List[TrafficRecord]:
        """Traffic records in a deterministic order (round, then group)."""
        return [self._records[k] for k in sorted(self._records)]

    def run(self, program: Callable[["RankContext"], Any], *, workers: Optional[int] = None) -> List[Any]:
        """Execute ``program(ctx)`` once per rank and return per-rank results.

        ``workers`` bounds how many ranks execute concurrently; a rank
        blocked inside a collective yields its slot.  Results are identical
        for every worker count.
        """
        if workers is None:
            workers = self.n_ranks
        if workers < 1:
            raise ValidationError("workers must be >= 1", constraint="workers>=1")
        with self._cond:
            self._epoch += 1
            self._failure = None
            self._seq = {}
            self._slots = {}

        sem = threading.Semaphore(workers)
        results: List[Any] = [None] * self.n_ranks
        errors: Dict[int, BaseException] = {}

        def runner(rank: int):
            sem.acquire()
            try:
                results[rank] = program(RankContext(self, rank, sem))
            except _Aborted:
                pass
            except BaseException as exc:  # noqa: BLE001 - repropagated below
                errors[rank] = exc
                self._fail(exc)
            finally:
                sem.release()

        threads = [
            threading.Thread(target=runner, args=(r,), daemon=True, name=f"rank{r}")
            for r in range(self.n_ranks)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._failure is not None:
            raise self._failure
        if errors:
            raise errors[min(errors)]
        return results

    # -- internal rendezvous machinery ------------------------------------

    def _fail(self, exc: BaseException):
        with self._cond:
            if self._failure is None:
                self._failure = exc
            self._cond.notify_all()

    def _rendezvous(
        self,
        ctx: "RankContext",
        group: Group,
        payload: Any,
        compute: Callable[[Group, Dict[int, Any]], Tuple[Dict[int, Any], Optional[TrafficRecord]]],
    ) -> Any:
        rank = ctx.rank
        if rank not in group:
            raise ProtocolError(f"rank {rank} called a collective on group {group} it is not part of")
        if any(group[i] >= group[i + 1] for i in range(len(group) - 1)):
            raise ProtocolError(f"group must list distinct ranks in ascending order, got {group}")
        released = False
        with self._cond:
            if self._failure is not None:
                raise _Aborted()
            seq_key = (group, rank)
            seq = self._seq.get(seq_key, 0)
            self._seq[seq_key] = seq + 1
            slot_key = (self._epoch, seq, group)
            slot = self._slots.get(slot_key)
            if slot is None:
                slot = self._slots[slot_key] = _Slot()
            slot.payloads[rank] = payload
            self._progress += 1
            if len(slot.payloads) == len(group):
                outputs, record = compute(group, slot.payloads)
                if record is not None:
                    key = (self._epoch, seq, group)
                    self._records[key] = _finalize_record(key, record)
                slot.results = outputs
                slot.remaining = len(group)
                slot.payloads = {}
                self._cond.notify_all()
            else:
                ctx._sem.release()
                released = True
                last_progress = self._progress
                while slot.results is None and self._failure is None:
                    self._cond.wait(timeout=_STALL_TIMEOUT_S)
                    if slot.results is not None or self._failure is not None:
                        break
                    if self._progress == last_progress:
                        exc = ProtocolError(
                            f"collective rendezvous stalled: group {group} waited for "
                            f"{sorted(set(group) - set(slot.payloads))} (round {seq})"
                        )
                        self._failure = exc
                        self._cond.notify_all()
                        raise exc
                    last_progress = self._progress
            if self._failure is not None:
                raise _Aborted()
            out = slot.results[rank]
            slot.remaining -= 1
            if slot.remaining == 0:
                del self._slots[slot_key]
        if released:
            ctx._sem.acquire()
        return out


class _Aborted(BaseException):
    """Internal: wakes a waiting rank after another rank failed."""


class RankContext:
    """Per-rank handle passed to SPMD programs run inside a SimWorld."""

    def __init__(self, world: SimWorld, rank: int, sem: threading.Semaphore):
        self.world = world
        self.rank = rank
        self.n_ranks = world.n_ranks
        self._sem = sem

    # -- collectives -------------------------------------------------------

    def all_to_all_v(self, group: Group, send: VarBuffer) -> VarBuffer:
        """Exchange variable row counts inside ``group``.

        ``send.counts[i]`` rows go to the group member at position ``i``;
        the receive buffer concatenates, in ascending sender order, the
        rows each sender addressed to this rank.  Receive counts are the
        transpose of the send-count matrix.
        """
        if len(send.counts) != len(group):
            raise ProtocolError(
                f"all_to_all_v: rank {self.rank} supplied {len(send.counts)} counts "
                f"for a group of {len(group)}"
            )
        return self.world._rendezvous(self, group, send, _compute_all_to_all_v)

    def all_gather_v(self, group: Group, send: VarBuffer) -> Tuple[VarBuffer, np.ndarray]:
        """Concatenate every member's rows in ascending rank order.

        Returns the gathered buffer plus per-member row counts (the offsets
        follow from their cumulative sum).
        """
        if len(send.counts) != 1:
            raise ProtocolError(
                f"all_gather_v: rank {self.rank} must supply a single row count"
            )
        return self.world._rendezvous(self, group, send, _compute_all_gather_v)

    def reduce_scatter_v(
        self, group: Group, values: np.ndarray, partition_counts: Sequence[int], row_width: int
    ) -> np.ndarray:
        """Sum members' equal-length buffers, then scatter partition ``i`` to
        the member at position ``i``.

        The reduction folds in ascending rank order, so results are
        bit-reproducible.  Composed with ``all_gather_v`` offsets it exactly
        inverts a gather of summed partials.
        """
        values = np.asarray(values, dtype=np.float64).ravel()
        counts = np.asarray(partition_counts, dtype=np.int64)
        if len(counts) != len(group):
            raise ProtocolError(
                f"reduce_scatter_v: rank {self.rank} supplied {len(counts)} partitions "
                f"for a group of {len(group)}"
            )
        if values.size != row_width * int(counts.sum()):
            raise ProtocolError(
                f"reduce_scatter_v: rank {self.rank} buffer length {values.size} != "
                f"row_width {row_width} * partition total {int(counts.sum())}"
            )
        payload = (values, counts, row_width)
        return self.world._rendezvous(self, group, payload, _compute_reduce_scatter_v)

    def all_reduce(self, group: Group, values: np.ndarray, op: str = "sum") -> np.ndarray:
        """Reduce equal-length buffers; every member receives the result.

        ``op`` is ``"sum"`` or ``"avg"``; the fold runs in ascending rank
        order and ``avg`` divides once at the end.
        """
        if op not in ("sum", "avg"):
            raise ValidationError(f"all_reduce op must be sum or avg, got {op!r}", constraint="op")
        arr = np.asarray(values, dtype=np.float64)
        return self.world._rendezvous(
            self, group, (arr.ravel(), arr.shape, op), _compute_all_reduce
        )

    def exchange_meta(self, group: Group, payload: Any) -> Dict[int, Any]:
        """All-gather of host-side metadata objects; not wire accounted."""
        return self.world._rendezvous(self, group, payload, _compute_exchange_meta)


# -- per-primitive completion functions (run by the last arriving rank) ----


def _check_widths(group: Group, payloads: Dict[int, VarBuffer], primitive: str) -> int:
    widths = {payloads[r].row_width for r in group}
    if len(widths) != 1:
        detail = ", ".join(f"rank {r}: {payloads[r].row_width}" for r in sorted(payloads))
        raise ProtocolError(f"{primitive}: row_width differs across the group ({detail})")
    return widths.pop()


def _compute_all_to_all_v(group: Group, payloads: Dict[int, VarBuffer]):
    width = _check_widths(group, payloads, "all_to_all_v")
    n = len(group)
    counts = np.zeros((n, n), dtype=np.int64)  # [sender position, receiver position]
    for i, r in enumerate(group):
        counts[i] = payloads[r].counts
    outputs: Dict[int, VarBuffer] = {}
    offsets = {r: np.concatenate(([0], np.cumsum(payloads[r].counts))) for r in group}
    for j, rj in enumerate(group):
        segments = []
        for i, ri in enumerate(group):
            rows = payloads[ri].rows()
            segments.append(rows[offsets[ri][j] : offsets[ri][j + 1]])
        recv = np.concatenate(segments, axis=0) if segments else np.zeros((0, width))
        outputs[rj] = VarBuffer(recv.ravel(), width, counts[:, j].copy())
    sent = tuple(
        int((counts[i].sum() - counts[i, i]) * width) for i in range(n)
    )
    record = TrafficRecord(0, 0, group, "all_to_all_v", width, sent)
    return outputs, record


def _compute_all_gather_v(group: Group, payloads: Dict[int, VarBuffer]):
    width = _check_widths(group, payloads, "all_gather_v")
    per_member = np.array([int(payloads[r].counts[0]) for r in group], dtype=np.int64)
    gathered = np.concatenate([payloads[r].rows() for r in group], axis=0)
    buf = VarBuffer(gathered.ravel(), width, per_member)
    outputs = {r: (VarBuffer(buf.values.copy(), width, per_member.copy()), per_member.copy()) for r in group}
    sent = tuple(int(per_member[i]) * (len(group) - 1) * width for i in range(len(group)))
    record = TrafficRecord(0, 0, group, "all_gather_v", width, sent)
    return outputs, record


def _compute_reduce_scatter_v(group: Group, payloads: Dict[int, Any]):
    lengths = {payloads[r][0].size for r in group}
    if len(lengths) != 1:
        detail = ", ".join(f"rank {r}: {payloads[r][0].size}" for r in sorted(payloads))
        raise ProtocolError(f"reduce_scatter_v: buffer lengths differ ({detail})")
    ref_counts = payloads[group[0]][1]
    width = payloads[group[0]][2]
    for r in group:
        if not np.array_equal(payloads[r][1], ref_counts) or payloads[r][2] != width:
            raise ProtocolError(
                f"reduce_scatter_v: rank {r} disagrees on partition counts or width"
            )
    total = payloads[group[0]][0].copy()
    for r in sorted(group)[1:]:
        total += payloads[r][0]
    bounds = np.concatenate(([0], np.cumsum(ref_counts))) * width
    outputs = {
        r: total[bounds[i] : bounds[i + 1]].copy() for i, r in enumerate(group)
    }
    total_rows = int(ref_counts.sum())
    sent = tuple(
        (total_rows - int(ref_counts[i])) * width for i in range(len(group))
    )
    record = TrafficRecord(0, 0, group, "reduce_scatter_v", width, sent)
    return outputs, record


def _compute_all_reduce(group: Group, payloads: Dict[int, Any]):
    lengths = {payloads[r][0].size for r in group}
    if len(lengths) != 1:
        detail = ", ".join(f"rank {r}: {payloads[r][0].size}" for r in sorted(payloads))
        raise ProtocolError(f"all_reduce: buffer lengths differ ({detail})")
    shape = payloads[group[0]][1]
    op = payloads[group[0]][2]
    total = payloads[sorted(group)[0]][0].copy()
    for r in sorted(group)[1:]:
        total += payloads[r][0]
    if op == "avg":
        total = total / len(group)
    outputs = {r: total.reshape(shape).copy() for r in group}
    n = len(group)
    per_rank = int(round(total.size * 2 * (n - 1) / n)) if n > 1 else 0
    record = TrafficRecord(0, 0, group, "all_reduce", 1, tuple(per_rank for _ in group))
    return outputs, record


def _compute_exchange_meta(group: Group, payloads: Dict[int, Any]):
    snapshot = dict(payloads)
    outputs = {r: dict(snapshot) for r in group}
    return outputs, None


# The record returned by a completion function carries placeholder epoch and
# seq values; _rendezvous stores it under the real (epoch, seq, group) key,
# and the public ledger rebuilds records with those keys filled in.


def _finalize_record(key: tuple, record: TrafficRecord) -> TrafficRecord:
    epoch, seq, group = key
    return TrafficRecord(epoch, seq, group, record.primitive, record.row_width, record.elements_sent)


@dataclass
class TrafficStats:
    """Ledger bytes aggregated by primitive and span."""

    by_primitive_span: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def bytes_for(self, primitive: str, span: Optional[str] = None) -> float:
        if span is not None:
            return self.by_primitive_span.get((primitive, span), 0.0)
        return sum(v for (p, _), v in self.by_primitive_span.items() if p == primitive)

    @property
    def total_bytes(self) -> float:
        return sum(self.by_primitive_span.values())


def traffic_stats(world: SimWorld, cluster: ClusterModel, elem_bytes: float = 8.0) -> TrafficStats:
    """Aggregate the world's ledger into per-primitive, per-span byte totals.

    ``elem_bytes`` converts ledger element counts into bytes; the default
    matches the double-precision simulation payloads, while cost-model
    cross-checks pass the modeled wire element size instead.
    """
    stats = TrafficStats()
    for rec in world.ledger:
        span = classify_group_span(rec.group, cluster).span
        key = (rec.primitive, span)
        stats.by_primitive_span[key] = (
            stats.by_primitive_span.get(key, 0.0) + rec.total_elements * elem_bytes
        )
    return stats
