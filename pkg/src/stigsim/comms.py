"""Situated broadcast: per-step frame assembly and neighbor bookkeeping.

Every robot emits exactly one envelope per step (a position beacon even
when it carries no records). Payload records wait in a FIFO queue and
ride in the first frame with room; nothing is ever dropped by comms.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

FRAME_CAPACITY = 250
HEADER_BYTES = 16           # sender 2 B + pose 3x4 B + record count 2 B
MEMBER_HEADER_BYTES = 18    # header plus 2 B swarm-membership bitmap


class FrameOverflowError(ValueError):
    """Single record cannot fit any frame."""


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0


@dataclass(frozen=True)
class Envelope:
    """One per-step broadcast frame: sender, sender pose, payload records."""

    sender: int
    pose: Pose
    records: tuple
    byte_size: int
    swarm_bits: int | None = None


@dataclass
class NeighborRecord:
    id: int
    pose: Pose
    last_seen: int


@dataclass
class NeighborTable:
    """Per-robot view of peers heard from recently."""

    entries: dict[int, NeighborRecord] = field(default_factory=dict)
    max_age: int = 10


def enqueue_record(queue: deque, record, capacity: int = FRAME_CAPACITY) -> deque:
    """Append a record for broadcast; rejects records no frame could carry."""
    if record.size_bytes > capacity - HEADER_BYTES:
        raise FrameOverflowError(
            f"record of {record.size_bytes} B exceeds "
            f"{capacity - HEADER_BYTES} B of frame payload")
    queue.append(record)
    return queue


def assemble_frame(self_id: int, pose: Pose, queue: deque,
                   capacity: int = FRAME_CAPACITY,
                   swarm_bits: int | None = None) -> tuple[Envelope, deque]:
    """Build this step's envelope from the longest queue prefix that fits.

    Records that do not fit stay queued for the next step, in order.
    """
    header = HEADER_BYTES if swarm_bits is None else MEMBER_HEADER_BYTES
    assert capacity > header
    size = header
    taken = []
    while queue:
        rec = queue[0]
        if size + rec.size_bytes > capacity:
            break
        size += rec.size_bytes
        taken.append(queue.popleft())
    return Envelope(self_id, pose, tuple(taken), size, swarm_bits), queue


def on_envelope(table: NeighborTable, env: Envelope, now: int) -> list:
    """Record the sender as a neighbor and hand back its records in order."""
    table.entries[env.sender] = NeighborRecord(env.sender, env.pose, now)
    return list(env.records)


def range_bearing(self_pose: Pose, other: Pose) -> tuple[float, float, float]:
    """Euclidean range, azimuth from +x in (-pi, pi], elevation.

    Coincident poses return (0, 0, 0) by convention.
    """
    dx = other.x - self_pose.x
    dy = other.y - self_pose.y
    dz = other.z - self_pose.z
    planar = math.hypot(dx, dy)
    rng = math.hypot(planar, dz)
    if rng == 0.0:
        return 0.0, 0.0, 0.0
    azimuth = math.atan2(dy, dx) if planar > 0.0 else 0.0
    if azimuth <= -math.pi:
        azimuth = math.pi
    elevation = math.atan2(dz, planar)
    return rng, azimuth, elevation


def neighbors_list(table: NeighborTable, now: int,
                   max_age: int | None = None) -> list[NeighborRecord]:
    """Fresh neighbors, sorted by id for deterministic iteration."""
    age = table.max_age if max_age is None else max_age
    fresh = [r for r in table.entries.values() if now - r.last_seen <= age]
    fresh.sort(key=lambda r: r.id)
    return fresh
