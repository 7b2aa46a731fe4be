"""Deterministic discrete-time world for the coordination runtime.

Each step every robot runs the same five phases in order: process the
frames delivered last step, refresh its pose, run one control step
(barriers and the allocation FSM), assemble its outbound frame, and emit
a motion command. Kinematics then moves the bodies and the broadcast
channel decides, one seeded Bernoulli draw per (sender, receiver, frame)
in fixed id order, which frames appear in next step's inboxes.

A world advances single-threaded; identical (config, seed) give an
identical evolution, including the PRNG consumption schedule.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import allocation as alloc_mod
from .allocation import (
    AllocConfig,
    AllocState,
    FsmState,
    FormationGraph,
    GrantRecord,
    JoinedRecord,
    OpenRecord,
    ReqRecord,
    StateTagRecord,
)
from .barrier import (
    BarrierOutcome,
    BarrierState,
    barrier_create,
    barrier_step,
    drain_outbound,
)
from .comms import (
    Envelope,
    NeighborTable,
    Pose,
    assemble_frame,
    enqueue_record,
    neighbors_list,
    on_envelope,
)
from .membership import SwarmView, observe_bitmap, own_bitmap, swarm_join
from .stigmergy import PutDecision, PutRecord, QueryRecord, vstig_on_put, vstig_on_query

AERIAL = "aerial"
GROUND = "ground"

SWARM_AERIAL = 0
SWARM_GROUND = 1

_TAKEOFF_TOL = 1e-9


@dataclass
class RobotBody:
    id: int
    kind: str
    pose: Pose
    waypoint: Pose | None = None
    max_speed: float = 2.0
    cruise_altitude: float = 10.0
    climb_rate: float = 1.0


def make_body(rid: int, kind: str, pose: Pose) -> RobotBody:
    if kind == GROUND:
        if pose.z != 0.0:
            raise ValueError(f"ground robot {rid} must start at z=0")
        return RobotBody(rid, kind, pose, max_speed=1.0, cruise_altitude=0.0,
                         climb_rate=0.0)
    if kind != AERIAL:
        raise ValueError(f"unknown robot kind {kind!r}")
    return RobotBody(rid, kind, pose)


@dataclass(frozen=True)
class MotionCommand:
    active: bool = True
    waypoint: Pose | None = None

    @classmethod
    def hold(cls):
        return cls(True, None)

    @classmethod
    def off(cls):
        return cls(False, None)


def kinematics_step(body: RobotBody, command: MotionCommand, dt: float) -> Pose:
    """Point-mass update: aerial robots regulate altitude toward cruise,
    ground robots stay on the plane, lateral motion is clamped so the
    waypoint is never overshot."""
    assert dt > 0
    if not command.active:
        return body.pose
    x, y, z = body.pose.x, body.pose.y, body.pose.z
    if body.kind == AERIAL and z < body.cruise_altitude:
        z = min(z + body.climb_rate * dt, body.cruise_altitude)
    elif body.kind == GROUND:
        z = 0.0
    wp = command.waypoint
    if wp is not None:
        dx, dy = wp.x - x, wp.y - y
        dist = math.hypot(dx, dy)
        reach = body.max_speed * dt
        if dist <= reach:
            x, y = wp.x, wp.y
        elif dist > 0.0:
            x += dx / dist * reach
            y += dy / dist * reach
    return Pose(x, y, z)


@dataclass(frozen=True)
class RobotSpec:
    id: int
    kind: str = AERIAL
    pose: Pose = Pose()


@dataclass(frozen=True)
class WorldConfig:
    robots: tuple[RobotSpec, ...]
    graph: FormationGraph
    drop_prob: float = 0.0
    comm_range: float = 200.0
    step_period: float = 0.1
    seed: int = 0
    start_step: int = 10
    barrier_threshold: int | None = None   # defaults to len(robots) - 1
    barrier_timeout: int = 600
    neighbor_max_age: int = 10
    alloc: AllocConfig = field(default_factory=AllocConfig)

    def __post_init__(self):
        ids = [r.id for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ValueError("robot ids must be unique")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")


class RobotController:
    """Per-robot runtime: replica tables, comms queue, barrier and FSM."""

    def __init__(self, body: RobotBody, cfg: WorldConfig):
        self.id = body.id
        self.kind = body.kind
        self.cruise = body.cruise_altitude
        self.cfg = cfg
        self.threshold = (cfg.barrier_threshold if cfg.barrier_threshold is not None
                          else len(cfg.robots) - 1)
        self.alloc = AllocState()
        self.electing = False
        self.barrier = BarrierState(timeout=cfg.barrier_timeout)
        self.neighbors = NeighborTable(max_age=cfg.neighbor_max_age)
        self.queue: deque = deque()
        self.view = SwarmView(self.id)
        swarm_join(self.view, SWARM_AERIAL if body.kind == AERIAL else SWARM_GROUND)
        self.envelopes_in = 0
        self.records_in = 0

    @property
    def fsm(self) -> FsmState:
        return self.alloc.fsm

    # -- phase a: process incoming frames ------------------------------------

    def _tables(self):
        tables = {alloc_mod.ASSIGN_TABLE_ID: self.alloc.assign}
        if self.barrier.table is not None:
            tables[self.barrier.table.table_id] = self.barrier.table
        return tables

    def _process_inbox(self, inbox: list[Envelope], now: int):
        grants: list[GrantRecord] = []
        reqs: list[ReqRecord] = []
        self.envelopes_in = len(inbox)
        self.records_in = 0
        tables = self._tables()
        for env in inbox:
            records = on_envelope(self.neighbors, env, now)
            if env.swarm_bits is not None:
                observe_bitmap(self.view, env.sender, env.swarm_bits)
            self.records_in += len(records)
            for rec in records:
                if isinstance(rec, PutRecord):
                    table = tables.get(rec.table_id)
                    if table is None:
                        continue   # no replica of that table here
                    decision = vstig_on_put(table, rec.entry)
                    if decision is PutDecision.ADOPT_AND_REBROADCAST:
                        enqueue_record(self.queue, PutRecord(rec.table_id, rec.entry))
                    elif decision is PutDecision.RESPOND_WITH_LOCAL:
                        local = table.entries[rec.entry.key]
                        enqueue_record(self.queue, PutRecord(rec.table_id, local))
                elif isinstance(rec, QueryRecord):
                    table = tables.get(rec.table_id)
                    if table is None:
                        continue
                    reply = vstig_on_query(table, rec)
                    if reply is not None:
                        enqueue_record(self.queue, reply)
                elif isinstance(rec, OpenRecord):
                    alloc_mod.note_open(self.alloc, rec, now)
                elif isinstance(rec, JoinedRecord):
                    alloc_mod.note_joined(self.alloc, rec.label, rec.robot)
                elif isinstance(rec, GrantRecord):
                    grants.append(rec)
                elif isinstance(rec, ReqRecord):
                    reqs.append(rec)
                elif isinstance(rec, StateTagRecord):
                    alloc_mod.note_state(self.alloc, env.sender, rec.state,
                                         rec.label, now)
                    # a settled robot's tag names its label every step, the
                    # most loss-tolerant "label taken" signal there is
                    if rec.label is not None and rec.state in _SETTLED:
                        alloc_mod.note_joined(self.alloc, rec.label, env.sender)
        return grants, reqs

    # -- phase c: control ----------------------------------------------------

    def _control(self, now: int, pose: Pose,
                 grants: list[GrantRecord], reqs: list[ReqRecord]) -> MotionCommand:
        # one visible FSM transition per step: once a.fsm leaves `entry`,
        # the later state blocks are skipped until the next step, so every
        # state appears in the trace and trace edges stay legal
        a = self.alloc
        cfg = self.cfg.alloc
        graph = self.cfg.graph
        entry = a.fsm
        waypoint: Pose | None = None

        if a.fsm is FsmState.TURNED_OFF:
            if now < self.cfg.start_step:
                return MotionCommand.off()
            a.fsm = FsmState.TAKE_OFF
            return MotionCommand.hold()

        if a.fsm is FsmState.TAKE_OFF:
            if self.kind == GROUND or pose.z >= self.cruise - _TAKEOFF_TOL:
                barrier_create(self.barrier)
                a.fsm = FsmState.BARRIER_A
            return MotionCommand.hold()   # climbing is kinematics' job

        if a.fsm is FsmState.BARRIER_A:
            if not self.electing:
                out = barrier_step(self.barrier, self.id, self.threshold)
                if out is BarrierOutcome.PROCEED:
                    roster = sorted(k for k in self.barrier.table.entries
                                    if isinstance(k, int))
                    alloc_mod.begin_election(a, roster)
                    self.electing = True
                elif out is BarrierOutcome.TIMED_OUT:
                    barrier_create(self.barrier)   # rejoin the same barrier
            if self.electing:
                nxt = alloc_mod.election_step(a, self.id, cfg)
                if nxt is not None:
                    self.electing = False
                    a.fsm = nxt
            return MotionCommand.hold()

        if a.fsm is FsmState.FREE and a.fsm is entry:
            if not alloc_mod.accept_late_grant(a, grants, self.id):
                waypoint = alloc_mod.free_step(a, cfg, graph, pose,
                                               self._peer_poses(),
                                               self._fresh_ids(now), now)

        if a.fsm is FsmState.ASKING and a.fsm is entry:
            alloc_mod.asking_step(a, cfg, grants, self.id)
            waypoint = None   # stand by near the formation while asking

        if a.fsm is FsmState.JOINING and a.fsm is entry:
            waypoint = alloc_mod.joining_step(a, cfg, graph, pose,
                                              self._peer_poses(),
                                              self._fresh_ids(now), self.id, now)

        if a.fsm is FsmState.JOINED and a.fsm is entry:
            alloc_mod.grant_step(a, cfg, graph, reqs, self.id, now)
            alloc_mod.joined_housekeeping(a, cfg, graph, self.id, now)
            waypoint = None   # hold the slot
            if alloc_mod.completion_reached(a, graph):
                barrier_create(self.barrier)
                a.fsm = FsmState.BARRIER_B

        if a.fsm is FsmState.BARRIER_B and a.fsm is entry:
            out = barrier_step(self.barrier, self.id, self.threshold)
            if out is BarrierOutcome.PROCEED:
                a.fsm = FsmState.LOCK
            elif out is BarrierOutcome.TIMED_OUT:
                barrier_create(self.barrier)       # retry in place
            waypoint = None

        return MotionCommand(True, waypoint)

    def _peer_poses(self) -> dict[int, Pose]:
        return {rid: rec.pose for rid, rec in self.neighbors.entries.items()}

    def _fresh_ids(self, now: int) -> set[int]:
        return {r.id for r in neighbors_list(self.neighbors, now)}

    # -- full five-phase step -------------------------------------------------

    def step(self, now: int, inbox: list[Envelope], pose: Pose
             ) -> tuple[Envelope, MotionCommand]:
        grants, reqs = self._process_inbox(inbox, now)
        command = self._control(now, pose, grants, reqs)
        for rec in drain_outbound(self.barrier):
            enqueue_record(self.queue, rec)
        for rec in self.alloc.outbound:
            enqueue_record(self.queue, rec)
        self.alloc.outbound.clear()
        enqueue_record(self.queue, StateTagRecord(self.alloc.fsm, self.alloc.my_label))
        env, self.queue = assemble_frame(self.id, pose, self.queue,
                                         swarm_bits=own_bitmap(self.view))
        return env, command


def robot_step(controller: RobotController, now: int, inbox: list[Envelope],
               pose: Pose) -> tuple[Envelope, MotionCommand]:
    """The five-phase per-robot step (free-function form of Controller.step)."""
    return controller.step(now, inbox, pose)


class World:
    """All robot runtimes plus the lossy broadcast channel, stepped in lockstep."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.bodies = [make_body(r.id, r.kind, r.pose)
                       for r in sorted(cfg.robots, key=lambda r: r.id)]
        self.controllers = {b.id: RobotController(b, cfg) for b in self.bodies}
        self.inboxes: dict[int, list[Envelope]] = {b.id: [] for b in self.bodies}
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.trace: list[tuple] = []

    def channel_step(self, sends: list[tuple[RobotBody, Envelope]]
                     ) -> dict[int, list[Envelope]]:
        """Bernoulli delivery of each frame to every other in-range robot.

        One draw per (sender, receiver, frame), consumed in ascending
        (sender id, receiver id) order; survivors land in next step's
        inboxes, ordered by sender id.
        """
        inboxes: dict[int, list[Envelope]] = {b.id: [] for b in self.bodies}
        pairs = []
        reach = self.cfg.comm_range
        for body, env in sends:
            sp = body.pose
            for other in self.bodies:
                if other.id == body.id:
                    continue
                op = other.pose
                d = math.sqrt((sp.x - op.x) ** 2 + (sp.y - op.y) ** 2
                              + (sp.z - op.z) ** 2)
                if d <= reach:
                    pairs.append((env, other.id))
        if pairs:
            deliver = 1.0 - self.cfg.drop_prob
            draws = self.rng.random(len(pairs))
            for (env, rid), u in zip(pairs, draws):
                if u < deliver:
                    inboxes[rid].append(env)
        return inboxes

    def world_step(self) -> None:
        now = self.step_count
        sends = []
        outputs = {}
        for body in self.bodies:
            ctrl = self.controllers[body.id]
            env, cmd = ctrl.step(now, self.inboxes[body.id], body.pose)
            sends.append((body, env))
            outputs[body.id] = (env, cmd)
        for body in self.bodies:
            env, cmd = outputs[body.id]
            body.waypoint = cmd.waypoint
            body.pose = kinematics_step(body, cmd, self.cfg.step_period)
        self.inboxes = self.channel_step(sends)
        for body in self.bodies:
            ctrl = self.controllers[body.id]
            env, _ = outputs[body.id]
            assert env.byte_size <= 250
            self.trace.append((now, body.id, ctrl.fsm.value,
                               body.pose.x, body.pose.y, body.pose.z,
                               env.byte_size, ctrl.records_in, ctrl.envelopes_in))
        self.step_count += 1

    @property
    def all_locked(self) -> bool:
        return all(c.fsm is FsmState.LOCK for c in self.controllers.values())

    def run(self, step_cap: int) -> bool:
        """Step until every robot locks or the cap is hit; True on completion."""
        while self.step_count < step_cap:
            self.world_step()
            if self.all_locked:
                return True
        return self.all_locked
