"""Consensus barrier over a shared presence table.

Each waiting robot writes a presence mark under its own id every step and
releases once the table covers the group (size - 1 >= threshold) or once
any peer has published the done flag "d". A timer bounds the wait; on
timeout the local replica is dropped so the caller can resume safely and
later re-enter the same logical barrier.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .stigmergy import (
    StigTable,
    vstig_create,
    vstig_get,
    vstig_put,
    vstig_size,
)

DONE_KEY = "d"
DEFAULT_TIMEOUT = 600


class BarrierOutcome(enum.Enum):
    PROCEED = "proceed"
    WAITING = "waiting"
    TIMED_OUT = "timed_out"


class BarrierNotCreated(RuntimeError):
    """barrier_step called before barrier_create."""


@dataclass
class BarrierState:
    """Barrier bookkeeping private to one robot.

    vstig_counter picks the shared table id. It advances only when a live
    table is replaced, so a robot that timed out (table dropped) re-creates
    the same id and rejoins the barrier its peers still hold; a fresh
    barrier started after a completed one gets a new id on every robot.
    """

    vstig_counter: int = 0
    table: StigTable | None = None
    wait_timer: int = 0
    timeout: int = DEFAULT_TIMEOUT
    outbound: list = field(default_factory=list)


def barrier_create(state: BarrierState) -> BarrierState:
    """Create (or re-create) the shared presence table and reset the timer."""
    if state.table is not None:
        state.table = None
        state.vstig_counter += 1
    state.table = vstig_create(state.vstig_counter)
    state.wait_timer = 0
    return state


def barrier_step(state: BarrierState, self_id: int, threshold: int,
                 on_done=None, on_timeout=None) -> BarrierOutcome:
    """One barrier iteration; broadcast records accumulate in state.outbound.

    Mirrors the reference routine exactly: mark presence, then release on
    size - 1 >= threshold or a visible done flag (publishing the flag in
    turn); otherwise time out or keep waiting. The done-flag read is only
    evaluated when the size check fails, so the query it emits on a miss
    is also only emitted then.
    """
    if state.table is None:
        raise BarrierNotCreated("barrier_create must run before barrier_step")
    table = state.table

    _, rec = vstig_put(table, self_id, 1, self_id)
    state.outbound.append(rec)
    vstig_get(table, self_id)  # local readback, always a hit after the put

    passed = vstig_size(table) - 1 >= threshold
    if not passed:
        done, query = vstig_get(table, DONE_KEY)
        if query is not None:
            state.outbound.append(query)
        passed = done == 1

    if passed:
        _, rec = vstig_put(table, DONE_KEY, 1, self_id)
        state.outbound.append(rec)
        state.wait_timer = 0
        if on_done is not None:
            on_done()
        return BarrierOutcome.PROCEED

    if state.wait_timer >= state.timeout:
        state.table = None  # dropped, not replaced: re-create keeps the id
        state.wait_timer = 0
        if on_timeout is not None:
            on_timeout()
        return BarrierOutcome.TIMED_OUT

    state.wait_timer += 1
    return BarrierOutcome.WAITING


def drain_outbound(state: BarrierState) -> list:
    """Hand the queued broadcast records to the comms layer."""
    out, state.outbound = state.outbound, []
    return out
