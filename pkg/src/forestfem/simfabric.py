"""Deterministic in-process simulation of a P-rank message-passing runtime.

The fabric provides round-based bulk-synchronous collectives: within one
exchange round every message is delivered exactly once before any rank sees
the round complete, and delivery order per (sender, receiver) pair preserves
send order.  Payloads are opaque byte strings; callers define encodings.

Besides the nearest-neighbor exchange and the exclusive prefix sum that the
mesh/DOF algorithms need, a deterministic rank-ascending sum/min/max
reduction is exposed for solver dot products and marking thresholds.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field


def encode(obj) -> bytes:
    return pickle.dumps(obj, protocol=4)


def decode(blob: bytes):
    return pickle.loads(blob)


@dataclass
class Fabric:
    ranks: int
    rounds: int = 0
    bytes_moved: int = 0
    round_log: list = field(default_factory=list)

    def _log(self, src: int, dst: int, nbytes: int):
        self.round_log.append((self.rounds, src, dst, nbytes))
        self.bytes_moved += nbytes

    def neighbor_exchange(self, outboxes: dict[tuple[int, int], list[bytes]]
                          ) -> dict[tuple[int, int], list[bytes]]:
        """Deliver per-(src, dst) message lists; returns (dst, src) inboxes."""
        self.rounds += 1
        inboxes: dict[tuple[int, int], list[bytes]] = {}
        for (src, dst) in sorted(outboxes):
            msgs = outboxes[(src, dst)]
            if not msgs:
                continue
            if not 0 <= src < self.ranks or not 0 <= dst < self.ranks:
                raise ValueError(f"rank out of range: {src}->{dst}")
            if src == dst:
                raise ValueError("self-addressed message")
            for m in msgs:
                self._log(src, dst, len(m))
            inboxes.setdefault((dst, src), []).extend(msgs)
        return inboxes

    def exscan_sum(self, per_rank_value):
        """Exclusive prefix sum: result[p] = sum of values of ranks q < p."""
        if len(per_rank_value) != self.ranks:
            raise ValueError("one value per rank required")
        self.rounds += 1
        out, acc = [], 0
        for p, v in enumerate(per_rank_value):
            out.append(acc)
            acc += v
            if p + 1 < self.ranks:
                self._log(p, p + 1, 8)
        return out

    def allreduce(self, per_rank_value, op="sum"):
        """Rank-ascending deterministic reduction, result replicated."""
        if len(per_rank_value) != self.ranks:
            raise ValueError("one value per rank required")
        self.rounds += 1
        acc = per_rank_value[0]
        for p in range(1, self.ranks):
            v = per_rank_value[p]
            if op == "sum":
                acc = acc + v
            elif op == "min":
                acc = min(acc, v)
            elif op == "max":
                acc = max(acc, v)
            else:
                raise ValueError(f"unknown op {op}")
            self._log(p, 0, 8)
        for p in range(1, self.ranks):
            self._log(0, p, 8)
        return [acc] * self.ranks


def exchange_cell_payloads(fabric: Fabric, views, per_rank_payload):
    """Ship per-local-cell payloads to every rank holding the cell as ghost.

    ``per_rank_payload[p]`` maps local keys of rank p to picklable objects.
    Returns, per rank, a dict ghost key -> object.  One fabric round.
    """
    outboxes: dict[tuple[int, int], list[bytes]] = {}
    for p, view in enumerate(views):
        groups: dict[int, list] = {}
        for key, targets in view.mirror_targets.items():
            obj = per_rank_payload[p].get(key)
            if obj is None:
                continue
            for q in targets:
                groups.setdefault(q, []).append((key, obj))
        for q, items in sorted(groups.items()):
            outboxes[(p, q)] = [encode(items)]
    inboxes = fabric.neighbor_exchange(outboxes)
    received = [dict() for _ in views]
    for (dst, src), msgs in sorted(inboxes.items()):
        for m in msgs:
            for key, obj in decode(m):
                received[dst][key] = obj
    return received
