import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqulearn.comanager import QUEUED, Cached, CoManager
from dqulearn.errors import ConfigError, ConflictError, DuplicateInFlightError


class Audited(CoManager):
    """Runs the ledger auditor after every state transition."""

    def _checked(name):
        def method(self, *args, **kwargs):
            out = getattr(CoManager, name)(self, *args, **kwargs)
            self.audit()
            return out

        return method

    register_worker = _checked("register_worker")
    on_heartbeat = _checked("on_heartbeat")
    detect_failures = _checked("detect_failures")
    assign = _checked("assign")
    complete = _checked("complete")
    fail = _checked("fail")
    disconnect = _checked("disconnect")


def fleet(*workers, period=5.0, **kw):
    m = Audited(heartbeat_period=period, **kw)
    for wid, mr, cru in workers:
        m.register_worker(wid, mr, cru, 0.0)
    return m


# -- init ------------------------------------------------------------------------

def test_empty_fleet_queues():
    m = Audited()
    assert m.period == 5.0
    assert m.assign("c1", 3, 0.0) == QUEUED


def test_config_workers():
    m = Audited(workers=[("w1", 5), ("w2", 10)])
    assert {w: r.occupied for w, r in m.workers.items()} == {"w1": 0, "w2": 0}


def test_duplicate_config_id():
    with pytest.raises(ConfigError):
        CoManager(workers=[("w1", 5), ("w1", 6)])


# -- registration ------------------------------------------------------------------

def test_register_sets_available():
    m = fleet(("w1", 10, 0.1))
    assert m.workers["w1"].available == 10


def test_double_registration_conflicts():
    m = fleet(("w1", 10, 0.1))
    with pytest.raises(ConflictError):
        m.register_worker("w1", 10, 0.1, 1.0)


def test_register_after_eviction_is_fresh():
    m = fleet(("w1", 10, 0.1))
    m.assign("c1", 3, 0.0)
    assert m.detect_failures(16.0) == ["w1"]
    rec = m.register_worker("w1", 10, 0.2, 17.0)
    # the old circuit was re-queued and the fresh record picks it up
    assert rec.active == {"c1": 3}
    assert m.circuits["c1"].worker_id == "w1"


def test_registration_rescans_queue():
    m = Audited()
    assert m.assign("c1", 3, 0.0) == QUEUED
    m.register_worker("w1", 5, 0.0, 1.0)
    assert m.circuits["c1"].worker_id == "w1"
    assert [p.circuit_id for p in m.pop_outbox()] == ["c1"]


# -- heartbeats ---------------------------------------------------------------------

def test_heartbeat_fold():
    m = fleet(("w1", 10, 0.1))
    assert m.on_heartbeat("w1", [("c1", 3), ("c2", 4)], 0.2, 1.0)
    assert (m.workers["w1"].occupied, m.workers["w1"].available) == (7, 3)


def test_empty_heartbeat():
    m = fleet(("w1", 10, 0.1))
    m.on_heartbeat("w1", [("x", 4)], 0.2, 1.0)
    m.on_heartbeat("w1", [], 0.2, 2.0)
    assert m.workers["w1"].available == 10


def test_inconsistent_heartbeat_quarantines():
    m = fleet(("w1", 10, 0.1), ("w2", 10, 0.9))
    assert not m.on_heartbeat("w1", [("a", 6), ("b", 5)], 0.1, 1.0)
    assert m.workers["w1"].quarantined
    assert m.events[-1]["kind"] == "inconsistent"
    assert m.assign("c1", 2, 1.0) == "w2"
    assert m.on_heartbeat("w1", [], 0.1, 2.0)
    assert m.assign("c2", 2, 2.0) == "w1"


def test_heartbeat_from_unknown_worker_ignored():
    m = fleet(("w1", 10, 0.1))
    assert not m.on_heartbeat("ghost", [("c", 1)], 0.1, 1.0)
    assert "ghost" not in m.workers


def test_heartbeat_keeps_in_transit_assignment():
    m = fleet(("w1", 10, 0.1))
    m.assign("c1", 4, 0.5)
    # report written before the worker received c1
    m.on_heartbeat("w1", [], 0.1, 1.0)
    assert m.workers["w1"].active == {"c1": 4}


def test_heartbeat_ignores_finished_circuit():
    m = fleet(("w1", 10, 0.1))
    m.assign("c1", 4, 0.5)
    m.complete("c1", "w1", 0.9, 0.8)
    m.on_heartbeat("w1", [("c1", 4)], 0.1, 1.0)
    assert m.workers["w1"].occupied == 0


# -- eviction ---------------------------------------------------------------------

def test_eviction_after_three_periods():
    m = fleet(("w1", 10, 0.1))
    assert m.detect_failures(14.0) == []
    assert m.detect_failures(15.0) == []
    assert m.detect_failures(16.0) == ["w1"]
    assert m.candidates(1, 16.0) == []


def test_evicted_circuits_requeued_in_order():
    m = fleet(("w1", 10, 0.0), ("w2", 2, 0.5))
    m.assign("a", 3, 0.0)
    m.assign("b", 3, 0.0)
    m.assign("q", 5, 0.0)  # w1 has AR 4: queued
    m.on_heartbeat("w2", [], 0.5, 10.0)
    assert m.detect_failures(16.0) == ["w1"]
    assert m.queue == ["a", "b", "q"]
    m.register_worker("w3", 20, 0.1, 17.0)
    placed = [p.circuit_id for p in m.pop_outbox() if p.worker_id == "w3"]
    assert placed == ["a", "b", "q"]


def test_no_double_report_after_eviction():
    m = fleet(("w1", 10, 0.0), ("w2", 10, 0.5))
    m.assign("c1", 3, 0.0)
    m.on_heartbeat("w2", [], 0.5, 10.0)
    m.detect_failures(16.0)
    assert m.circuits["c1"].worker_id == "w2"
    # a late result from the zombie is dropped; the live one is recorded once
    assert m.complete("c1", "w1", 0.7, 17.0) is None
    assert m.complete("c1", "w2", 0.8, 18.0) is not None
    assert m.results == {"c1": 0.8}


def test_disconnected_worker_not_a_candidate():
    m = fleet(("w1", 10, 0.0), ("w2", 10, 0.5))
    m.disconnect("w1", 1.0)
    assert m.assign("c", 2, 1.0) == "w2"


# -- placement ---------------------------------------------------------------------

def test_capacity_filter():
    m = fleet(("w1", 5, 0.2), ("w2", 10, 0.1))
    assert m.assign("c", 7, 0.0) == "w2"


def test_lowest_cru_wins():
    m = fleet(("w1", 10, 0.2), ("w2", 10, 0.1))
    assert m.assign("c", 3, 0.0) == "w2"


def test_cru_tie_broken_by_id():
    m = fleet(("wb", 10, 0.3), ("wa", 10, 0.3))
    assert m.assign("c", 3, 0.0) == "wa"


def test_strict_inequality():
    m = fleet(("w1", 5, 0.1), ("w2", 5, 0.2))
    assert m.assign("c", 5, 0.0) == QUEUED


def test_exact_fit_flag():
    m = fleet(("w1", 5, 0.1), allow_exact_fit=True)
    assert m.assign("c", 5, 0.0) == "w1"


def test_stale_cru_sorts_last():
    m = fleet(("w1", 10, 0.0), ("w2", 10, 0.9))
    m.on_heartbeat("w2", [], 0.9, 11.0)
    # w1's sample is 11 s old (> 2P): the busier but fresh worker wins
    assert m.assign("c", 2, 11.0) == "w2"


def test_optimistic_ledger():
    m = fleet(("w1", 10, 0.1))
    m.assign("c1", 7, 0.0)
    assert m.workers["w1"].available == 3
    assert m.assign("c2", 3, 0.0) == QUEUED


# -- completion ---------------------------------------------------------------------

def test_completion_restores_capacity():
    m = fleet(("w1", 10, 0.1))
    m.assign("c", 7, 0.0)
    m.complete("c", "w1", 0.9, 1.0)
    assert m.workers["w1"].available == 10


def test_completion_unblocks_oldest_fitting():
    m = fleet(("w1", 10, 0.1))
    m.assign("run", 8, 0.0)
    m.assign("big", 9, 0.0)
    m.assign("old", 4, 0.0)
    m.assign("new", 4, 0.0)
    m.pop_outbox()
    m.complete("run", "w1", 0.9, 1.0)
    placed = [p.circuit_id for p in m.pop_outbox()]
    # "big" fits first (AR 10 > 9); then neither 4-qubit circuit fits AR 1
    assert placed == ["big"]
    m.complete("big", "w1", 0.9, 2.0)
    assert [p.circuit_id for p in m.pop_outbox()] == ["old", "new"]


def test_complete_twice_is_idempotent():
    m = fleet(("w1", 10, 0.1))
    m.assign("c", 3, 0.0)
    m.assign("d", 3, 0.0)
    m.complete("c", "w1", 0.9, 1.0)
    before = m.snapshot()
    assert m.complete("c", "w1", 0.1, 2.0) is None
    assert m.snapshot() == before
    assert m.results["c"] == 0.9


def test_cached_and_duplicate():
    m = fleet(("w1", 10, 0.1))
    m.assign("c", 3, 0.0)
    with pytest.raises(DuplicateInFlightError):
        m.assign("c", 3, 0.0)
    m.complete("c", "w1", 0.8, 1.0)
    assert m.assign("c", 3, 2.0) == Cached(0.8)


def test_failed_circuit_not_cached():
    m = fleet(("w1", 10, 0.1))
    m.assign("c", 3, 0.0)
    m.fail("c", "w1", 1.0, "execution_failed")
    assert "c" not in m.results
    assert m.assign("c", 3, 2.0) == "w1"


def test_unknown_completion_dropped():
    m = fleet(("w1", 10, 0.1))
    assert m.complete("nope", "w1", 0.5, 1.0) is None


# -- properties ------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 20), st.floats(0, 1)), min_size=1, max_size=6),
    st.integers(1, 15),
    st.floats(0.01, 100),
)
def test_choice_invariant_under_cru_scaling(workers, demand, scale):
    a = fleet(*[(f"w{i}", mr, cru) for i, (mr, cru) in enumerate(workers)])
    b = fleet(*[(f"w{i}", mr, cru * scale) for i, (mr, cru) in enumerate(workers)])
    ra, rb = a.assign("c", demand, 0.0), b.assign("c", demand, 0.0)
    assert ra == rb
    if ra != QUEUED:
        chosen = a.workers[ra]
        fits = [w for w in a.workers.values() if w.mr > demand]
        assert chosen.cru == min(w.cru for w in fits)


def simulate(seed, n_circuits=200):
    """Random arrivals, heartbeats, service times and one crash under a virtual clock."""
    rng = random.Random(seed)
    m = Audited(heartbeat_period=1.0)
    for wid, mr in (("w1", 5), ("w2", 8), ("w3", 12)):
        m.register_worker(wid, mr, rng.random(), 0.0)
    now = 0.0
    running: dict[str, float] = {}
    dead = set()
    arrived = 0
    while (arrived < n_circuits or m.circuits) and now < 500:
        now = round(now + 0.1, 10)
        if arrived < n_circuits and rng.random() < 0.6:
            m.assign(f"c{arrived}", rng.randint(1, 4), now)
            arrived += 1
        if now == 5.0:
            dead.add("w2")
        for p in m.pop_outbox():
            running[p.circuit_id] = now + rng.uniform(0.1, 1.5)
        for cid, done in list(running.items()):
            st_ = m.circuits.get(cid)
            if st_ is None or st_.worker_id is None:
                running.pop(cid)
                continue
            if done <= now and st_.worker_id not in dead:
                m.complete(cid, st_.worker_id, rng.random(), now)
                running.pop(cid)
        if round(now * 10) % 10 == 0:
            for wid in list(m.workers):
                if wid not in dead:
                    m.on_heartbeat(wid, list(m.workers[wid].active.items()), rng.random(), now)
            m.detect_failures(now)
    return m, arrived


def test_liveness_with_a_crash():
    m, arrived = simulate(1)
    assert arrived == 200
    assert not m.circuits and not m.queue
    assert len(m.results) == 200
    assert "w2" not in m.workers


def test_virtual_clock_replay_is_byte_identical():
    a, _ = simulate(9, 80)
    b, _ = simulate(9, 80)
    assert json.dumps(a.events).encode() == json.dumps(b.events).encode()
