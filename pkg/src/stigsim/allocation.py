"""Graph-formation task allocation.

Robots move through a fixed state machine: after the takeoff barrier one
robot wins the root label through the shared assignment table, everyone
else circles the growing formation, asks for labels advertised by joined
robots, and navigates to an offset relative to its parent. A final
barrier locks the completed formation.

Coordination is loss-tolerant by repetition: open labels are advertised
every step, label requests and grants are re-sent until acknowledged by
progress, and joined robots periodically re-announce themselves.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .comms import Pose
from .stigmergy import (
    QueryRecord,
    StigTable,
    resend_record,
    vstig_create,
    vstig_get,
    vstig_put,
)

ASSIGN_TABLE_ID = 100


class FsmState(enum.Enum):
    TURNED_OFF = "TurnedOff"
    TAKE_OFF = "TakeOff"
    BARRIER_A = "BarrierA"
    FREE = "Free"
    ASKING = "Asking"
    JOINING = "Joining"
    JOINED = "Joined"
    BARRIER_B = "BarrierB"
    LOCK = "Lock"


# Legal FSM edges; simulation traces are checked against this set.
# BarrierA -> Joined is the root shortcut; Asking -> Free is the only
# back edge. Barrier timeouts re-create the barrier table in place and
# do not change state.
ALLOWED_TRANSITIONS = frozenset({
    (FsmState.TURNED_OFF, FsmState.TAKE_OFF),
    (FsmState.TAKE_OFF, FsmState.BARRIER_A),
    (FsmState.BARRIER_A, FsmState.FREE),
    (FsmState.BARRIER_A, FsmState.JOINED),
    (FsmState.FREE, FsmState.ASKING),
    (FsmState.ASKING, FsmState.FREE),
    (FsmState.ASKING, FsmState.JOINING),
    (FsmState.JOINING, FsmState.JOINED),
    (FsmState.JOINED, FsmState.BARRIER_B),
    (FsmState.BARRIER_B, FsmState.LOCK),
})

_STATE_CODE = {s: i for i, s in enumerate(FsmState)}


# ---------------------------------------------------------------------------
# formation graph

@dataclass(frozen=True)
class GraphNode:
    offset: Pose                 # relative to the root node, z unused
    predecessors: tuple[int, ...]


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class FormationGraph:
    nodes: dict[int, GraphNode]

    def __len__(self):
        return len(self.nodes)


def validate_graph(graph: FormationGraph) -> None:
    nodes = graph.nodes
    if 0 not in nodes:
        raise GraphError("graph must contain root label 0")
    if nodes[0].predecessors:
        raise GraphError("root label 0 must have no predecessors")
    for label, node in nodes.items():
        if label != 0 and not 1 <= len(node.predecessors) <= 2:
            raise GraphError(f"label {label} must have 1 or 2 predecessors")
        for p in node.predecessors:
            if p not in nodes:
                raise GraphError(f"label {label} references unknown predecessor {p}")
    # reachability from the root doubles as the acyclicity check here,
    # since every non-root node must hang off the root through predecessors
    reached = {0}
    frontier = [0]
    succ: dict[int, list[int]] = {}
    for label, node in nodes.items():
        for p in node.predecessors:
            succ.setdefault(p, []).append(label)
    while frontier:
        cur = frontier.pop()
        for nxt in succ.get(cur, ()):
            node = nodes[nxt]
            if nxt not in reached and all(p in reached for p in node.predecessors):
                reached.add(nxt)
                frontier.append(nxt)
    if reached != set(nodes):
        raise GraphError(f"labels {sorted(set(nodes) - reached)} unreachable from root")


_BRANCH_AZIMUTHS = {
    "L": (0.0, 90.0),
    "Y": (90.0, 210.0, 330.0),
}


def graph_generate(shape: str, n: int, spacing: float) -> FormationGraph:
    """Branch-shaped formation with n nodes spaced along each branch.

    Nodes 1..n-1 go round-robin onto the shape's branches; each branch is
    a chain whose first node has the root as predecessor.
    """
    if n < 1:
        raise GraphError("graph needs at least the root node")
    if spacing <= 0:
        raise GraphError("spacing must be positive")
    if shape not in _BRANCH_AZIMUTHS:
        raise GraphError(f"unknown shape {shape!r}, expected one of {sorted(_BRANCH_AZIMUTHS)}")
    azimuths = _BRANCH_AZIMUTHS[shape]
    nodes = {0: GraphNode(Pose(0.0, 0.0, 0.0), ())}
    branch_tail = [0] * len(azimuths)   # last label per branch
    branch_len = [0] * len(azimuths)
    for label in range(1, n):
        b = (label - 1) % len(azimuths)
        branch_len[b] += 1
        theta = math.radians(azimuths[b])
        d = spacing * branch_len[b]
        offset = Pose(d * math.cos(theta), d * math.sin(theta), 0.0)
        nodes[label] = GraphNode(offset, (branch_tail[b],))
        branch_tail[b] = label
    graph = FormationGraph(nodes)
    validate_graph(graph)
    return graph


def owner_label(graph: FormationGraph, label: int) -> int:
    """The predecessor responsible for advertising and granting a label."""
    return min(graph.nodes[label].predecessors)


def successor_labels(graph: FormationGraph, label: int) -> list[int]:
    return sorted(l for l, node in graph.nodes.items()
                  if l != 0 and owner_label(graph, l) == label)


def compute_target(parent_pose: Pose, parent_label: int, my_label: int,
                   graph: FormationGraph, altitude: float = 0.0) -> Pose:
    """Own slot position: parent's pose shifted by the offset difference."""
    mine = graph.nodes[my_label].offset
    theirs = graph.nodes[parent_label].offset
    return Pose(parent_pose.x + (mine.x - theirs.x),
                parent_pose.y + (mine.y - theirs.y),
                altitude)


# ---------------------------------------------------------------------------
# wire records

@dataclass(frozen=True)
class OpenRecord:
    """A joined robot advertising its unfilled successor labels."""

    labels: tuple[int, ...]
    advertiser: int
    advertiser_label: int

    @property
    def size_bytes(self) -> int:
        # tag + advertiser label + advertiser id, 2 B per advertised label
        return 1 + 2 + 2 + 2 * len(self.labels)


@dataclass(frozen=True)
class ReqRecord:
    label: int
    requester: int

    @property
    def size_bytes(self) -> int:
        return 1 + 2 + 2


@dataclass(frozen=True)
class GrantRecord:
    label: int
    grantee: int

    @property
    def size_bytes(self) -> int:
        return 1 + 2 + 2


@dataclass(frozen=True)
class JoinedRecord:
    label: int
    robot: int

    @property
    def size_bytes(self) -> int:
        return 1 + 2 + 2


@dataclass(frozen=True)
class StateTagRecord:
    """Sender's FSM state, piggybacked on every frame (the sender id is
    already in the envelope header)."""

    state: FsmState
    label: int | None = None

    @property
    def size_bytes(self) -> int:
        return 1 + 1 + 2


# ---------------------------------------------------------------------------
# per-robot allocation state

@dataclass
class AllocConfig:
    orbit_radius: float = 7.5
    orbit_step_rad: float = 0.25
    arrive_tol: float = 0.5
    ask_timeout: int = 50
    grant_timeout: int = 100
    root_settle: int = 20
    claim_grace: int = 100
    joined_beacon_interval: int = 10
    offer_max_age: int = 10
    parent_lost_steps: int = 30


@dataclass
class AllocState:
    fsm: FsmState = FsmState.TURNED_OFF
    my_label: int | None = None
    parent: int | None = None
    parent_pose: Pose | None = None
    parent_missing: int = 0
    ask_target: tuple[int, int] | None = None   # (label, advertiser id)
    ask_timer: int = 0
    assign: StigTable = field(default_factory=lambda: vstig_create(ASSIGN_TABLE_ID))
    outbound: list = field(default_factory=list)
    # election bookkeeping (root claim after the takeoff barrier)
    roster: tuple[int, ...] = ()
    claimed: bool = False
    settle_left: int = 0
    watch_steps: int = 0
    # knowledge gathered from received records
    open_offers: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    known_joined: dict[int, int] = field(default_factory=dict)
    peer_states: dict[int, tuple[FsmState, int | None, int]] = field(default_factory=dict)
    last_formation_pose: Pose | None = None
    # grant bookkeeping while Joined
    outstanding: dict[int, tuple[int, int]] = field(default_factory=dict)  # label -> (grantee, step)


def assigned_robot(alloc: AllocState, label: int) -> int | None:
    entry = alloc.assign.entries.get(label)
    if entry is not None:
        return entry.value
    return alloc.known_joined.get(label)


def filled_labels(alloc: AllocState) -> set[int]:
    labels = set(alloc.known_joined)
    labels.update(k for k in alloc.assign.entries if isinstance(k, int))
    return labels


# -- record ingestion (durable knowledge; REQ/GRANT are per-step inputs) --

def note_open(alloc: AllocState, rec: OpenRecord, now: int) -> None:
    for label in rec.labels:
        alloc.open_offers[label] = (rec.advertiser, rec.advertiser_label, now)


def note_joined(alloc: AllocState, label: int, robot: int) -> None:
    alloc.known_joined[label] = robot
    alloc.open_offers.pop(label, None)
    alloc.outstanding.pop(label, None)


def note_state(alloc: AllocState, robot: int, state: FsmState,
               label: int | None, now: int) -> None:
    alloc.peer_states[robot] = (state, label, now)


# ---------------------------------------------------------------------------
# root election

def begin_election(alloc: AllocState, roster) -> None:
    alloc.roster = tuple(sorted(roster))
    alloc.claimed = False
    alloc.watch_steps = 0


def claim_root(alloc: AllocState, self_id: int, cfg: AllocConfig) -> None:
    """Stake the root claim and arm the settling window."""
    _, rec = vstig_put(alloc.assign, 0, self_id, self_id)
    alloc.outbound.append(rec)
    alloc.claimed = True
    alloc.settle_left = cfg.root_settle


def election_step(alloc: AllocState, self_id: int, cfg: AllocConfig) -> FsmState | None:
    """One election step after the takeoff barrier; returns the next state
    once the claim is resolved, else None.

    Only the lowest id a robot saw in the barrier claims immediately;
    everyone else watches for the winner's claim to arrive (querying each
    step) and claims themselves only after a long grace, which keeps
    concurrent claims rare even under heavy loss. A claimer floods its
    claim during the settling window and, once committed, overwrites the
    entry so its clock dominates any straggler claim for good.
    """
    if not alloc.claimed:
        winner = assigned_robot(alloc, 0)
        if winner is not None:
            return FsmState.FREE if winner != self_id else FsmState.JOINED
        _, query = vstig_get(alloc.assign, 0)
        if query is not None:
            alloc.outbound.append(query)
        first_claimer = alloc.roster and self_id == alloc.roster[0]
        if first_claimer or alloc.watch_steps >= cfg.claim_grace:
            claim_root(alloc, self_id, cfg)
        else:
            alloc.watch_steps += 1
        return None

    if alloc.settle_left > 0:
        alloc.settle_left -= 1
        rec = resend_record(alloc.assign, 0)
        if rec is not None:
            alloc.outbound.append(rec)
        # pull competing claims: a zero-clock probe makes every holder answer
        alloc.outbound.append(QueryRecord(alloc.assign.table_id, 0, 0))
        return None

    winner = assigned_robot(alloc, 0)
    if winner == self_id:
        # committed: bump the clock so later first-write claims always lose
        _, rec = vstig_put(alloc.assign, 0, self_id, self_id)
        alloc.outbound.append(rec)
        alloc.my_label = 0
        note_joined(alloc, 0, self_id)
        return FsmState.JOINED
    return FsmState.FREE


# ---------------------------------------------------------------------------
# state handlers

def free_step(alloc: AllocState, cfg: AllocConfig, graph: FormationGraph,
              self_pose: Pose, neighbor_poses: dict[int, Pose],
              fresh_ids: set[int], now: int) -> Pose | None:
    """Orbit the formation edge and watch for an askable label.

    Returns the orbit waypoint (None means hold). Transitions to Asking
    happen inside by setting ask_target and fsm.
    """
    taken = filled_labels(alloc)
    # an offer is askable when fresh and every predecessor's robot is a
    # fresh neighbor ("within sight")
    for label in sorted(alloc.open_offers):
        advertiser, _, seen = alloc.open_offers[label]
        if now - seen > cfg.offer_max_age or label in taken:
            continue
        holders = [assigned_robot(alloc, p) for p in graph.nodes[label].predecessors]
        if all(h is not None and h in fresh_ids for h in holders):
            alloc.ask_target = (label, advertiser)
            alloc.ask_timer = 0
            alloc.fsm = FsmState.ASKING
            return None
    return _orbit_waypoint(alloc, cfg, self_pose, neighbor_poses)


def _orbit_waypoint(alloc: AllocState, cfg: AllocConfig, self_pose: Pose,
                    neighbor_poses: dict[int, Pose]) -> Pose | None:
    members = set(alloc.known_joined.values())
    members.update(e.value for k, e in alloc.assign.entries.items()
                   if isinstance(k, int))
    best = None
    best_d = math.inf
    for rid in sorted(members):
        pose = neighbor_poses.get(rid)
        if pose is None:
            continue
        d = math.hypot(pose.x - self_pose.x, pose.y - self_pose.y)
        if d < best_d:
            best, best_d = pose, d
    if best is None:
        best = alloc.last_formation_pose
        if best is None:
            return None
    alloc.last_formation_pose = best
    theta = math.atan2(self_pose.y - best.y, self_pose.x - best.x)
    theta += cfg.orbit_step_rad
    return Pose(best.x + cfg.orbit_radius * math.cos(theta),
                best.y + cfg.orbit_radius * math.sin(theta),
                self_pose.z)


def asking_step(alloc: AllocState, cfg: AllocConfig,
                grants_in: list[GrantRecord], self_id: int) -> None:
    """Re-request the target label until granted, lost, or timed out."""
    label, advertiser = alloc.ask_target
    for g in grants_in:
        if g.label != label:
            continue
        if g.grantee == self_id:
            alloc.my_label = label
            alloc.parent = advertiser
            alloc.fsm = FsmState.JOINING
            alloc.parent_missing = 0
            return
        alloc.fsm = FsmState.FREE     # lost the race
        alloc.ask_timer = 0
        return
    if alloc.ask_timer >= cfg.ask_timeout:
        alloc.fsm = FsmState.FREE
        alloc.ask_timer = 0
        return
    alloc.outbound.append(ReqRecord(label, self_id))
    alloc.ask_timer += 1


def accept_late_grant(alloc: AllocState, grants_in: list[GrantRecord],
                      self_id: int) -> bool:
    """A grant that arrives after we gave up asking is still ours to take,
    as long as the label remains unfilled."""
    if alloc.ask_target is None:
        return False
    label, advertiser = alloc.ask_target
    for g in grants_in:
        if g.label == label and g.grantee == self_id and label not in filled_labels(alloc):
            alloc.my_label = label
            alloc.parent = advertiser
            alloc.fsm = FsmState.JOINING
            alloc.parent_missing = 0
            return True
    return False


def joining_step(alloc: AllocState, cfg: AllocConfig, graph: FormationGraph,
                 self_pose: Pose, neighbor_poses: dict[int, Pose],
                 fresh_ids: set[int], self_id: int, now: int) -> Pose | None:
    """Navigate to the slot next to the parent; arrival flips to Joined."""
    if alloc.parent in fresh_ids:
        alloc.parent_pose = neighbor_poses[alloc.parent]
        alloc.parent_missing = 0
    else:
        alloc.parent_missing += 1
    if alloc.parent_pose is None:
        return None
    if alloc.parent_missing > cfg.parent_lost_steps:
        return None   # parent silent too long: hold and keep waiting
    parent_label = _parent_label(alloc, graph)
    target = compute_target(alloc.parent_pose, parent_label, alloc.my_label,
                            graph, self_pose.z)
    if math.hypot(target.x - self_pose.x, target.y - self_pose.y) <= cfg.arrive_tol:
        alloc.fsm = FsmState.JOINED
        note_joined(alloc, alloc.my_label, self_id)
        _, rec = vstig_put(alloc.assign, alloc.my_label, self_id, self_id)
        alloc.outbound.append(rec)
        alloc.outbound.append(JoinedRecord(alloc.my_label, self_id))
    return target


def _parent_label(alloc: AllocState, graph: FormationGraph) -> int:
    preds = graph.nodes[alloc.my_label].predecessors
    for p in preds:
        if assigned_robot(alloc, p) == alloc.parent:
            return p
    return preds[0]


def grant_step(alloc: AllocState, cfg: AllocConfig, graph: FormationGraph,
               reqs_in: list[ReqRecord], self_id: int, now: int) -> None:
    """Serve label requests for the labels this robot owns.

    At most one previously ungranted label is granted per step (lowest
    requester id wins a contested label); repeated requests from the
    current grantee are re-acknowledged for free. A grant whose grantee
    shows no progress within the grant timeout is taken back, unless the
    grantee's last state report says it is still joining.
    """
    owned = successor_labels(graph, alloc.my_label)
    taken = filled_labels(alloc)

    for label in list(alloc.outstanding):
        grantee, since = alloc.outstanding[label]
        if label in taken:
            del alloc.outstanding[label]
            continue
        if now - since < cfg.grant_timeout:
            continue
        state = alloc.peer_states.get(grantee)
        busy = (state is not None
                and state[0] in (FsmState.JOINING, FsmState.JOINED,
                                 FsmState.BARRIER_B, FsmState.LOCK)
                and now - state[2] <= cfg.grant_timeout)
        if busy:
            alloc.outstanding[label] = (grantee, now - cfg.grant_timeout // 2)
        else:
            del alloc.outstanding[label]   # re-opened

    by_label: dict[int, list[int]] = {}
    for r in reqs_in:
        if r.label in owned:
            by_label.setdefault(r.label, []).append(r.requester)

    granted_new = False
    for label in sorted(by_label):
        if label in taken:
            continue
        requesters = sorted(by_label[label])
        if label in alloc.outstanding:
            grantee, since = alloc.outstanding[label]
            if grantee in requesters:
                alloc.outbound.append(GrantRecord(label, grantee))
            continue
        if granted_new:
            continue
        grantee = requesters[0]
        alloc.outstanding[label] = (grantee, now)
        alloc.outbound.append(GrantRecord(label, grantee))
        granted_new = True


def joined_housekeeping(alloc: AllocState, cfg: AllocConfig,
                        graph: FormationGraph, self_id: int, now: int) -> None:
    """Advertise open successor labels and re-announce membership."""
    taken = filled_labels(alloc)
    opens = [l for l in successor_labels(graph, alloc.my_label)
             if l not in taken and l not in alloc.outstanding]
    if opens:
        alloc.outbound.append(OpenRecord(tuple(opens), self_id, alloc.my_label))
    if now % cfg.joined_beacon_interval == 0:
        alloc.outbound.append(JoinedRecord(alloc.my_label, self_id))
        rec = resend_record(alloc.assign, alloc.my_label)
        if rec is not None:
            alloc.outbound.append(rec)


def completion_reached(alloc: AllocState, graph: FormationGraph) -> bool:
    """All labels visibly joined in the assignment table."""
    return all(label in alloc.assign.entries for label in graph.nodes)


def completion_step(alloc: AllocState, graph: FormationGraph) -> bool:
    """Completion check that pulls missing labels through the read path.

    Each miss queues a query, so robots still holding the entry re-send
    it; without this, an assignment written by a robot that has already
    moved past Joined could stay lost forever under heavy drop.
    """
    missing = [label for label in graph.nodes if label not in alloc.assign.entries]
    for label in missing:
        _, query = vstig_get(alloc.assign, label)
        if query is not None:
            alloc.outbound.append(query)
    return not missing
