"""stigsim: swarm coordination runtime with a deterministic lossy-broadcast
simulator.

Building blocks: replicated key-value tables synchronized by gossip with
Lamport-clock conflict resolution (stigmergy), situated broadcast under a
250-byte frame budget (comms), sub-swarm membership (membership), a
consensus barrier (barrier), a graph-formation task-allocation FSM
(allocation), the discrete-time world (simworld), and the experiment
harness (harness).
"""

from .allocation import (
    ALLOWED_TRANSITIONS,
    AllocConfig,
    AllocState,
    FormationGraph,
    FsmState,
    GraphNode,
    compute_target,
    graph_generate,
)
from .barrier import BarrierOutcome, BarrierState, barrier_create, barrier_step
from .comms import (
    Envelope,
    FRAME_CAPACITY,
    NeighborTable,
    Pose,
    assemble_frame,
    enqueue_record,
    neighbors_list,
    on_envelope,
    range_bearing,
)
from .harness import (
    Scenario,
    Summary,
    bandwidth_moving_average,
    load_scenario,
    neighbor_ratio_by_state,
    run_scenario,
    save_scenario,
    sweep_droprate,
    sweep_table,
)
from .membership import SwarmView, swarm_in, swarm_join, swarm_leave
from .simworld import (
    MotionCommand,
    RobotBody,
    RobotSpec,
    World,
    WorldConfig,
    kinematics_step,
    robot_step,
)
from .stigmergy import (
    PutDecision,
    PutRecord,
    QueryRecord,
    StigEntry,
    StigTable,
    vstig_create,
    vstig_get,
    vstig_on_put,
    vstig_on_query,
    vstig_put,
    vstig_size,
)

__version__ = "0.1.0"
