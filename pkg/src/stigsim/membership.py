"""Sub-swarm membership, disseminated as a 16-slot bitmap on every envelope."""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_SWARMS = 16
BITMAP_BYTES = 2


@dataclass
class SwarmView:
    """What one robot knows about sub-swarm membership, self included."""

    self_id: int
    own_flags: set[int] = field(default_factory=set)
    memberships: dict[int, set[int]] = field(default_factory=dict)


def _check_sid(sid: int) -> None:
    if not 0 <= sid < MAX_SWARMS:
        raise ValueError(f"swarm id {sid} outside 0..{MAX_SWARMS - 1}")


def swarm_join(view: SwarmView, sid: int) -> None:
    _check_sid(sid)
    view.own_flags.add(sid)
    view.memberships.setdefault(sid, set()).add(view.self_id)


def swarm_leave(view: SwarmView, sid: int) -> None:
    """No-op when not a member."""
    _check_sid(sid)
    view.own_flags.discard(sid)
    view.memberships.setdefault(sid, set()).discard(view.self_id)


def swarm_in(view: SwarmView, sid: int, robot_id: int) -> bool:
    return robot_id in view.memberships.get(sid, ())


def own_bitmap(view: SwarmView) -> int:
    """16-bit membership flags carried in the envelope header."""
    bits = 0
    for sid in view.own_flags:
        bits |= 1 << sid
    return bits


def observe_bitmap(view: SwarmView, robot_id: int, bits: int) -> None:
    """Fold a peer's advertised flags into the local view."""
    for sid in range(MAX_SWARMS):
        members = view.memberships.setdefault(sid, set())
        if bits >> sid & 1:
            members.add(robot_id)
        else:
            members.discard(robot_id)
