"""Co-manager state: worker registry, qubit ledger, eviction and placement.

Every method takes the current time explicitly, so the same state machine runs
under the wall clock (server) and under scripted virtual time (tests).

Ledger per worker: ``MR`` is the qubit capacity, ``OR`` the sum of demands of
its active circuits, ``AR = MR - OR``. Placement filters workers with
``AR > demand`` (``>=`` with ``allow_exact_fit``) and picks the lowest CRU,
ties broken by worker id; workers whose CRU sample is older than two heartbeat
periods sort after all fresh ones.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ArgumentError, ConfigError, ConflictError, DuplicateInFlightError

logger = logging.getLogger(__name__)

QUEUED = "queued"


@dataclass(frozen=True)
class Cached:
    fidelity: float


@dataclass
class WorkerRecord:
    worker_id: str
    mr: int
    cru: float = 0.0
    cru_time: float = 0.0
    last_heartbeat: float = 0.0
    active: dict[str, int] = field(default_factory=dict)
    occupied: int = 0
    quarantined: bool = False
    connected: bool = True
    registered: bool = True

    @property
    def available(self) -> int:
        return self.mr - self.occupied

    def recount(self):
        self.occupied = sum(self.active.values())


@dataclass
class CircuitState:
    circuit_id: str
    demand: int
    client_id: Any
    seq: int
    worker_id: str | None = None
    payload: Any = None


@dataclass(frozen=True)
class Placement:
    circuit_id: str
    worker_id: str
    demand: int


class CoManager:
    def __init__(
        self,
        workers=(),
        heartbeat_period: float = 5.0,
        allow_exact_fit: bool = False,
        now: float = 0.0,
        event_sink: Callable[[dict], None] | None = None,
        cache_limit: int = 1_000_000,
    ):
        if heartbeat_period <= 0:
            raise ConfigError("heartbeat period must be positive")
        self.period = float(heartbeat_period)
        self.allow_exact_fit = allow_exact_fit
        self.workers: dict[str, WorkerRecord] = {}
        self.circuits: dict[str, CircuitState] = {}
        self.queue: list[str] = []
        self.results: OrderedDict[str, float] = OrderedDict()
        self.cache_limit = cache_limit
        self.outbox: list[Placement] = []
        self.events: list[dict] = []
        self.event_sink = event_sink
        self._seq = 0
        for worker_id, mr in workers:
            if worker_id in self.workers:
                raise ConfigError(f"duplicate worker id {worker_id!r} in fleet config")
            if mr < 1:
                raise ConfigError(f"worker {worker_id!r} needs MR >= 1")
            self.workers[worker_id] = WorkerRecord(
                worker_id, int(mr), cru_time=now, last_heartbeat=now, registered=False
            )

    # -- bookkeeping -----------------------------------------------------------

    def _event(self, now, kind, worker_id=None, circuit_id=None, **extra):
        rec = self.workers.get(worker_id) if worker_id else None
        event = {
            "t": now,
            "kind": kind,
            "worker_id": worker_id,
            "circuit_id": circuit_id,
            "or": rec.occupied if rec else None,
            "ar": rec.available if rec else None,
        }
        event.update(extra)
        self.events.append(event)
        if self.event_sink is not None:
            self.event_sink(event)

    def audit(self):
        """Raise AssertionError if any ledger invariant is violated."""
        for w in self.workers.values():
            assert w.occupied == sum(w.active.values()), f"{w.worker_id}: OR != sum of demands"
            assert 0 <= w.occupied <= w.mr, f"{w.worker_id}: OR={w.occupied} outside [0, {w.mr}]"
            assert w.available == w.mr - w.occupied
        assert len(set(self.queue)) == len(self.queue), "duplicate circuit in queue"
        for cid in self.queue:
            assert self.circuits[cid].worker_id is None
        for cid, st in self.circuits.items():
            if st.worker_id is not None:
                assert st.worker_id in self.workers, f"{cid} on unknown worker"
                assert cid in self.workers[st.worker_id].active, f"{cid} missing from ledger"

    def pop_outbox(self) -> list[Placement]:
        out, self.outbox = self.outbox, []
        return out

    def _fits(self, w: WorkerRecord, demand: int) -> bool:
        return w.available >= demand if self.allow_exact_fit else w.available > demand

    def candidates(self, demand: int, now: float) -> list[WorkerRecord]:
        cands = [
            w
            for w in self.workers.values()
            if w.connected and not w.quarantined and self._fits(w, demand)
        ]
        stale = 2 * self.period
        cands.sort(key=lambda w: (now - w.cru_time > stale, w.cru, w.worker_id))
        return cands

    def _place(self, st: CircuitState, w: WorkerRecord, now: float) -> Placement:
        st.worker_id = w.worker_id
        w.active[st.circuit_id] = st.demand
        w.recount()
        placement = Placement(st.circuit_id, w.worker_id, st.demand)
        self.outbox.append(placement)
        self._event(now, "assign", w.worker_id, st.circuit_id, demand=st.demand)
        return placement

    def rescan(self, now: float) -> list[Placement]:
        """Assign, in FIFO order, every queued circuit that now fits somewhere."""
        placed = []
        remaining = []
        # fitting is monotone in demand: once d fails, every demand >= d fails too
        blocked = None
        for cid in self.queue:
            st = self.circuits[cid]
            cands = [] if blocked is not None and st.demand >= blocked else self.candidates(st.demand, now)
            if cands:
                placed.append(self._place(st, cands[0], now))
            else:
                blocked = st.demand if blocked is None else min(blocked, st.demand)
                remaining.append(cid)
        self.queue = remaining
        return placed

    # -- registry --------------------------------------------------------------

    def register_worker(self, worker_id: str, mr: int, cru: float, now: float) -> WorkerRecord:
        if mr < 1:
            raise ArgumentError(f"MR must be >= 1, got {mr}")
        existing = self.workers.get(worker_id)
        if existing is not None and existing.registered:
            self._event(now, "register_conflict", worker_id)
            raise ConflictError(f"worker {worker_id!r} is already active")
        if existing is not None:
            # claims a record declared in the fleet config, keeping any placements
            existing.mr = max(int(mr), existing.occupied)
            existing.registered = True
            existing.connected = True
            rec = existing
        else:
            rec = WorkerRecord(worker_id, int(mr))
            self.workers[worker_id] = rec
        rec.cru, rec.cru_time, rec.last_heartbeat = float(cru), now, now
        self._event(now, "register", worker_id, mr=rec.mr)
        self.rescan(now)
        return rec

    def on_heartbeat(self, worker_id: str, active, cru: float, now: float) -> bool:
        """Apply a heartbeat; returns False if it was ignored or found inconsistent."""
        w = self.workers.get(worker_id)
        if w is None:
            logger.info("heartbeat from unknown worker %s ignored", worker_id)
            self._event(now, "heartbeat_unknown", None, None, reporter=worker_id)
            return False
        w.last_heartbeat = now
        w.cru, w.cru_time = float(cru), now
        report: dict[str, int] = {}
        for cid, demand in active:
            if cid in self.results:
                continue  # finished; the report predates the RESULT
            st = self.circuits.get(cid)
            if st is not None and st.worker_id not in (None, worker_id):
                continue  # reassigned elsewhere after an eviction
            report[cid] = int(demand)
        # circuits placed here that the worker has not seen yet
        for cid, demand in w.active.items():
            st = self.circuits.get(cid)
            if st is not None and st.worker_id == worker_id and cid not in report:
                report[cid] = demand
        total = sum(report.values())
        if total > w.mr or any(d < 0 for d in report.values()):
            w.quarantined = True
            logger.error(
                "worker %s reports %d qubits in use but MR=%d; quarantined", worker_id, total, w.mr
            )
            self._event(now, "inconsistent", worker_id, reported=total)
            return False
        w.quarantined = False
        w.active = report
        w.recount()
        self._event(now, "heartbeat", worker_id, cru=w.cru)
        self.rescan(now)
        return True

    def disconnect(self, worker_id: str, now: float):
        """Connection lost: stop placing work there; eviction still follows the heartbeat rule."""
        w = self.workers.get(worker_id)
        if w is not None and w.connected:
            w.connected = False
            self._event(now, "disconnect", worker_id)

    def detect_failures(self, now: float) -> list[str]:
        limit = 3 * self.period
        evicted = [wid for wid, w in self.workers.items() if now - w.last_heartbeat > limit]
        if not evicted:
            return []
        orphans = []
        for wid in evicted:
            del self.workers[wid]
            self._event(now, "evict", None, None, evicted=wid)
            for st in self.circuits.values():
                if st.worker_id == wid:
                    st.worker_id = None
                    orphans.append(st)
        orphans.sort(key=lambda st: st.seq)
        for st in orphans:
            self._event(now, "requeue", None, st.circuit_id)
        self.queue = [st.circuit_id for st in orphans] + self.queue
        self.rescan(now)
        return evicted

    # -- circuits --------------------------------------------------------------

    def assign(self, circuit_id: str, demand: int, now: float, client_id=None, payload=None):
        """Place a new circuit; returns a worker id, ``QUEUED`` or a :class:`Cached` result."""
        if circuit_id in self.results:
            self._event(now, "cached", None, circuit_id)
            return Cached(self.results[circuit_id])
        if circuit_id in self.circuits:
            self._event(now, "duplicate", None, circuit_id)
            raise DuplicateInFlightError(f"circuit {circuit_id!r} is already in flight")
        if demand < 1:
            raise ArgumentError(f"demand must be >= 1, got {demand}")
        self._seq += 1
        st = CircuitState(circuit_id, int(demand), client_id, self._seq, payload=payload)
        self.circuits[circuit_id] = st
        cands = self.candidates(st.demand, now)
        if cands:
            return self._place(st, cands[0], now).worker_id
        self.queue.append(circuit_id)
        self._event(now, "queue", None, circuit_id, demand=st.demand)
        return QUEUED

    def _release(self, circuit_id: str, worker_id: str, now: float, kind: str):
        st = self.circuits.get(circuit_id)
        if st is None or st.worker_id != worker_id:
            logger.info("%s for %s from %s dropped (not assigned there)", kind, circuit_id, worker_id)
            self._event(now, f"{kind}_dropped", None, circuit_id, reporter=worker_id)
            return None
        del self.circuits[circuit_id]
        w = self.workers[worker_id]
        w.active.pop(circuit_id, None)
        w.recount()
        return st

    def complete(self, circuit_id: str, worker_id: str, fidelity: float, now: float):
        """Record a result; returns the finished circuit's state, or None if dropped."""
        if circuit_id in self.results:
            self._event(now, "complete_duplicate", worker_id, circuit_id)
            return None
        st = self._release(circuit_id, worker_id, now, "complete")
        if st is None:
            return None
        self.results[circuit_id] = float(fidelity)
        while len(self.results) > self.cache_limit:
            self.results.popitem(last=False)
        self._event(now, "complete", worker_id, circuit_id, fidelity=float(fidelity))
        self.rescan(now)
        return st

    def fail(self, circuit_id: str, worker_id: str, now: float, code: str = "failed"):
        """A worker could not run the circuit; it is forgotten (not cached) so it may be resubmitted."""
        st = self._release(circuit_id, worker_id, now, "fail")
        if st is None:
            return None
        self._event(now, "fail", worker_id, circuit_id, code=code)
        self.rescan(now)
        return st

    def snapshot(self) -> dict:
        return {
            wid: {"mr": w.mr, "or": w.occupied, "ar": w.available, "cru": w.cru}
            for wid, w in self.workers.items()
        }
