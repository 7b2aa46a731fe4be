"""Scenario ingestion, experiment execution and trace metrics.

Scenarios are JSON files validated down to the field; a run steps one
world until every robot locks (or a step cap) and persists a columnar
trace plus a JSON summary. Sweeps fan a scenario out over drop rates and
seeds and emit a machine-readable completion table. Every run is fully
reproducible from (scenario, seed).
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .allocation import ALLOWED_TRANSITIONS, AllocConfig, FsmState, graph_generate
from .comms import FRAME_CAPACITY, Pose
from .simworld import AERIAL, GROUND, RobotSpec, World, WorldConfig

TRACE_COLUMNS = ("step", "robot", "state", "x", "y", "z",
                 "bytes_out", "records_in", "neighbor_msgs_in")

DEFAULT_STEP_CAP = 20000


class ScenarioError(ValueError):
    """Scenario file failed validation; message names the field."""


@dataclass(frozen=True)
class RobotEntry:
    id: int
    kind: str = AERIAL
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Scenario:
    robots: tuple[RobotEntry, ...]
    shape: str = "Y"
    spacing: float = 5.0
    nodes: int | None = None          # defaults to the robot count
    drop_prob: float = 0.0
    comm_range: float = 200.0
    step_period: float = 0.1
    seed: int = 0
    start_step: int = 10
    step_cap: int = DEFAULT_STEP_CAP
    barrier_timeout: int = 600
    barrier_threshold: int | None = None
    neighbor_max_age: int = 10
    allocation: AllocConfig = field(default_factory=AllocConfig)
    name: str = "scenario"

    def world_config(self, seed: int | None = None,
                     drop_prob: float | None = None) -> WorldConfig:
        n_nodes = self.nodes if self.nodes is not None else len(self.robots)
        graph = graph_generate(self.shape, n_nodes, self.spacing)
        specs = tuple(RobotSpec(r.id, r.kind, Pose(*r.pose)) for r in self.robots)
        return WorldConfig(
            robots=specs,
            graph=graph,
            drop_prob=self.drop_prob if drop_prob is None else drop_prob,
            comm_range=self.comm_range,
            step_period=self.step_period,
            seed=self.seed if seed is None else seed,
            start_step=self.start_step,
            barrier_threshold=self.barrier_threshold,
            barrier_timeout=self.barrier_timeout,
            neighbor_max_age=self.neighbor_max_age,
            alloc=self.allocation,
        )


def default_ring_poses(n: int, radius: float) -> list[tuple[float, float, float]]:
    """Deterministic start positions on a circle around the origin."""
    return [(radius * math.cos(2 * math.pi * i / n),
             radius * math.sin(2 * math.pi * i / n), 0.0) for i in range(n)]


def _require(cond: bool, field_path: str, message: str) -> None:
    if not cond:
        raise ScenarioError(f"{field_path}: {message}")


_SCENARIO_FIELDS = {
    "name", "robots", "graph", "drop_prob", "comm_range", "step_period",
    "seed", "start_step", "step_cap", "barrier_timeout", "barrier_threshold",
    "neighbor_max_age", "allocation",
}
_GRAPH_FIELDS = {"shape", "spacing", "nodes"}
_ALLOC_FIELDS = {f.name for f in fields(AllocConfig)}


def scenario_from_dict(raw: dict, name: str = "scenario") -> Scenario:
    """Validate a raw scenario mapping; unknown fields are rejected."""
    _require(isinstance(raw, dict), "$", "scenario must be a JSON object")
    unknown = set(raw) - _SCENARIO_FIELDS
    _require(not unknown, sorted(unknown)[0], "unknown field")

    graph_raw = raw.get("graph", {})
    _require(isinstance(graph_raw, dict), "graph", "must be an object")
    unknown = set(graph_raw) - _GRAPH_FIELDS
    _require(not unknown, f"graph.{sorted(unknown)[0]}" if unknown else "graph",
             "unknown field")
    shape = graph_raw.get("shape", "Y")
    _require(shape in ("L", "Y"), "graph.shape", f"must be 'L' or 'Y', got {shape!r}")
    spacing = graph_raw.get("spacing", 5.0)
    _require(isinstance(spacing, (int, float)) and spacing > 0,
             "graph.spacing", "must be a positive number")
    nodes = graph_raw.get("nodes")
    _require(nodes is None or (isinstance(nodes, int) and nodes >= 1),
             "graph.nodes", "must be a positive integer")

    robots_raw = raw.get("robots")
    _require(robots_raw is not None, "robots", "is required")
    alloc_raw = dict(raw.get("allocation", {}))
    unknown = set(alloc_raw) - _ALLOC_FIELDS
    _require(not unknown,
             f"allocation.{sorted(unknown)[0]}" if unknown else "allocation",
             "unknown field")
    alloc_raw.setdefault("orbit_radius", 1.5 * spacing)
    allocation = AllocConfig(**alloc_raw)

    if isinstance(robots_raw, int):
        _require(robots_raw >= 1, "robots", "must be at least 1")
        poses = default_ring_poses(robots_raw, 1.5 * spacing)
        robots = tuple(RobotEntry(i, AERIAL, poses[i]) for i in range(robots_raw))
    else:
        _require(isinstance(robots_raw, list) and robots_raw,
                 "robots", "must be a count or a non-empty list")
        robots = []
        for i, r in enumerate(robots_raw):
            path = f"robots[{i}]"
            _require(isinstance(r, dict), path, "must be an object")
            unknown = set(r) - {"id", "kind", "pose"}
            _require(not unknown, f"{path}.{sorted(unknown)[0]}" if unknown else path,
                     "unknown field")
            rid = r.get("id", i)
            _require(isinstance(rid, int) and 0 <= rid <= 0xFFFF,
                     f"{path}.id", "must be a 16-bit integer")
            kind = r.get("kind", AERIAL)
            _require(kind in (AERIAL, GROUND), f"{path}.kind",
                     f"must be '{AERIAL}' or '{GROUND}'")
            pose = tuple(r.get("pose", (0.0, 0.0, 0.0)))
            _require(len(pose) == 3 and all(isinstance(v, (int, float)) for v in pose),
                     f"{path}.pose", "must be [x, y, z]")
            robots.append(RobotEntry(rid, kind, tuple(float(v) for v in pose)))
        robots = tuple(robots)
        ids = [r.id for r in robots]
        _require(len(set(ids)) == len(ids), "robots", "ids must be unique")

    drop_prob = raw.get("drop_prob", 0.0)
    _require(isinstance(drop_prob, (int, float)) and 0.0 <= drop_prob <= 1.0,
             "drop_prob", f"must lie in [0, 1], got {drop_prob}")

    def _num(key, default, positive=True):
        v = raw.get(key, default)
        _require(isinstance(v, (int, float)) and (v > 0 or not positive),
                 key, "must be a positive number")
        return v

    def _int(key, default, minimum=0):
        v = raw.get(key, default)
        _require(isinstance(v, int) and v >= minimum, key,
                 f"must be an integer >= {minimum}")
        return v

    threshold = raw.get("barrier_threshold")
    _require(threshold is None or (isinstance(threshold, int) and threshold >= 0),
             "barrier_threshold", "must be a non-negative integer")

    scenario = Scenario(
        robots=robots,
        shape=shape,
        spacing=float(spacing),
        nodes=nodes,
        drop_prob=float(drop_prob),
        comm_range=float(_num("comm_range", 200.0)),
        step_period=float(_num("step_period", 0.1)),
        seed=_int("seed", 0),
        start_step=_int("start_step", 10),
        step_cap=_int("step_cap", DEFAULT_STEP_CAP, minimum=1),
        barrier_timeout=_int("barrier_timeout", 600, minimum=1),
        barrier_threshold=threshold,
        neighbor_max_age=_int("neighbor_max_age", 10, minimum=1),
        allocation=allocation,
        name=str(raw.get("name", name)),
    )
    n_nodes = scenario.nodes if scenario.nodes is not None else len(robots)
    _require(len(robots) >= n_nodes, "graph.nodes",
             "robot count must be >= graph node count")
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "name": s.name,
        "robots": [{"id": r.id, "kind": r.kind, "pose": list(r.pose)}
                   for r in s.robots],
        "graph": {"shape": s.shape, "spacing": s.spacing,
                  **({"nodes": s.nodes} if s.nodes is not None else {})},
        "drop_prob": s.drop_prob,
        "comm_range": s.comm_range,
        "step_period": s.step_period,
        "seed": s.seed,
        "start_step": s.start_step,
        "step_cap": s.step_cap,
        "barrier_timeout": s.barrier_timeout,
        **({"barrier_threshold": s.barrier_threshold}
           if s.barrier_threshold is not None else {}),
        "neighbor_max_age": s.neighbor_max_age,
        "allocation": asdict(s.allocation),
    }


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"$: not valid JSON ({exc})") from exc
    return scenario_from_dict(raw, name=path.stem)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n")


# ---------------------------------------------------------------------------
# traces

def write_trace(trace: list[tuple], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            step, robot, state, x, y, z, bytes_out, rec_in, msgs_in = row
            if bytes_out > FRAME_CAPACITY:
                raise ValueError(f"trace row has bytes_out {bytes_out} > {FRAME_CAPACITY}")
            writer.writerow((step, robot, state,
                             f"{x:.6f}", f"{y:.6f}", f"{z:.6f}",
                             bytes_out, rec_in, msgs_in))


def read_trace(path) -> list[tuple]:
    rows = []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        for rec in reader:
            rows.append((int(rec[0]), int(rec[1]), rec[2],
                         float(rec[3]), float(rec[4]), float(rec[5]),
                         int(rec[6]), int(rec[7]), int(rec[8])))
    return rows


def check_fsm_edges(trace: list[tuple]) -> list[str]:
    """All state changes in a trace must be legal FSM edges."""
    by_name = {s.value: s for s in FsmState}
    last: dict[int, str] = {}
    violations = []
    for row in trace:
        robot, state = row[1], row[2]
        prev = last.get(robot)
        if prev is not None and prev != state:
            edge = (by_name[prev], by_name[state])
            if edge not in ALLOWED_TRANSITIONS:
                violations.append(f"robot {robot}: {prev} -> {state} at step {row[0]}")
        last[robot] = state
    return violations


# ---------------------------------------------------------------------------
# metrics

def neighbor_ratio_by_state(trace: list[tuple], n_robots: int) -> dict[str, float]:
    """Mean received-envelope ratio per FSM state, Fig-style.

    Step 0 is excluded: no frame can arrive before one step of latency,
    so including it would bias every state's ratio downward.
    """
    if n_robots < 2:
        raise ValueError("neighbor ratio needs at least 2 robots")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    denom = n_robots - 1
    for row in trace:
        if row[0] == 0:
            continue
        state, msgs = row[2], row[8]
        sums[state] = sums.get(state, 0.0) + msgs / denom
        counts[state] = counts.get(state, 0) + 1
    return {state: sums[state] / counts[state] for state in sums}


def bandwidth_moving_average(trace: list[tuple], window: int = 30
                             ) -> dict[int, np.ndarray]:
    """Trailing moving average of bytes_out / frame capacity per robot.

    The first window-1 points average over the available prefix.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    per_robot: dict[int, list[float]] = {}
    for row in trace:
        per_robot.setdefault(row[1], []).append(row[6] / FRAME_CAPACITY)
    out = {}
    for robot, vals in per_robot.items():
        arr = np.asarray(vals)
        csum = np.cumsum(arr)
        ma = np.empty_like(arr)
        head = min(window, len(arr))
        ma[:head] = csum[:head] / np.arange(1, head + 1)
        if len(arr) > window:
            ma[window:] = (csum[window:] - csum[:-window]) / window
        out[robot] = ma
    return out


def max_bandwidth_ratio(trace: list[tuple], window: int = 30) -> float:
    series = bandwidth_moving_average(trace, window)
    return max(float(s.max()) for s in series.values()) if series else 0.0


# ---------------------------------------------------------------------------
# runs

@dataclass
class Summary:
    completed: bool
    total_steps: int
    join_steps: dict[int, int | None]
    join_times: dict[int, float | None]
    barrier_pass_steps: dict[str, dict[int, int | None]]
    max_bandwidth_ratio: float
    neighbor_ratio_by_state: dict[str, float]
    my_labels: dict[int, int | None]

    def to_dict(self) -> dict:
        return {
            "completed": self.completed,
            "total_steps": self.total_steps,
            "join_steps": {str(k): v for k, v in self.join_steps.items()},
            "join_times": {str(k): v for k, v in self.join_times.items()},
            "barrier_pass_steps": {
                name: {str(k): v for k, v in d.items()}
                for name, d in self.barrier_pass_steps.items()},
            "max_bandwidth_ratio": self.max_bandwidth_ratio,
            "neighbor_ratio_by_state": self.neighbor_ratio_by_state,
            "my_labels": {str(k): v for k, v in self.my_labels.items()},
        }


@dataclass
class RunResult:
    scenario: Scenario
    world: World
    trace: list[tuple]
    summary: Summary
    trace_path: Path | None = None
    summary_path: Path | None = None


def _first_step_in_state(trace, robot: int, states: set[str]) -> int | None:
    for row in trace:
        if row[1] == robot and row[2] in states:
            return row[0]
    return None


def summarize(world: World, trace: list[tuple], completed: bool) -> Summary:
    period = world.cfg.step_period
    ids = [b.id for b in world.bodies]
    join_steps = {rid: _first_step_in_state(trace, rid, {FsmState.JOINED.value})
                  for rid in ids}
    takeoff_pass = {rid: _first_step_in_state(
        trace, rid, {FsmState.FREE.value, FsmState.JOINED.value}) for rid in ids}
    formation_pass = {rid: _first_step_in_state(trace, rid, {FsmState.LOCK.value})
                      for rid in ids}
    ratios = (neighbor_ratio_by_state(trace, len(ids)) if len(ids) >= 2 else {})
    return Summary(
        completed=completed,
        total_steps=world.step_count,
        join_steps=join_steps,
        join_times={rid: (s * period if s is not None else None)
                    for rid, s in join_steps.items()},
        barrier_pass_steps={"takeoff": takeoff_pass, "formation": formation_pass},
        max_bandwidth_ratio=max_bandwidth_ratio(trace),
        neighbor_ratio_by_state=ratios,
        my_labels={rid: world.controllers[rid].alloc.my_label for rid in ids},
    )


def label_uniqueness_violations(world: World) -> list[str]:
    """Injectivity of every assignment replica plus global label uniqueness."""
    violations = []
    for rid, ctrl in sorted(world.controllers.items()):
        table = ctrl.alloc.assign
        seen: dict[int, int] = {}
        for key, entry in sorted(table.entries.items(), key=lambda kv: str(kv[0])):
            if not isinstance(key, int):
                continue
            if entry.value in seen:
                violations.append(
                    f"robot {rid}: labels {seen[entry.value]} and {key} "
                    f"both assigned to {entry.value}")
            seen[entry.value] = key
    labels: dict[int, int] = {}
    for rid, ctrl in sorted(world.controllers.items()):
        label = ctrl.alloc.my_label
        if label is None:
            continue
        if label in labels:
            violations.append(
                f"label {label} held by robots {labels[label]} and {rid}")
        else:
            labels[label] = rid
    return violations


def run_scenario(scenario: Scenario, out_dir=None, seed: int | None = None,
                 drop_prob: float | None = None) -> RunResult:
    """Run one world to all-Lock or the step cap; optionally persist outputs."""
    world = World(scenario.world_config(seed=seed, drop_prob=drop_prob))
    completed = world.run(scenario.step_cap)
    summary = summarize(world, world.trace, completed)
    result = RunResult(scenario, world, world.trace, summary)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.trace_path = out / f"{scenario.name}_trace.csv"
        result.summary_path = out / f"{scenario.name}_summary.json"
        write_trace(world.trace, result.trace_path)
        result.summary_path.write_text(
            json.dumps(summary.to_dict(), indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# drop-rate sweeps

@dataclass(frozen=True)
class SweepRow:
    rate: float
    seed: int
    completed: bool
    steps: int
    seconds: float
    uniqueness_ok: bool
    max_bytes_out: int
    max_ma_ratio: float


def _sweep_one(args) -> SweepRow:
    scenario, rate, seed = args
    result = run_scenario(scenario, seed=seed, drop_prob=rate)
    violations = label_uniqueness_violations(result.world)
    max_bytes = max(row[6] for row in result.trace)
    return SweepRow(rate, seed, result.summary.completed,
                    result.summary.total_steps,
                    result.summary.total_steps * scenario.step_period,
                    not violations, max_bytes,
                    result.summary.max_bandwidth_ratio)


def sweep_droprate(scenario: Scenario, rates: list[float], seeds: list[int],
                   workers: int = 1) -> list[SweepRow]:
    """Independent worlds over the (rate, seed) grid, in a fixed order."""
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ScenarioError(f"drop_prob: sweep rate {rate} outside [0, 1]")
    jobs = [(scenario, rate, seed) for rate in rates for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(job) for job in jobs]


def sweep_table(rows: list[SweepRow]) -> dict[float, dict]:
    """Per-rate aggregation: completion ratio and median completion time."""
    table: dict[float, dict] = {}
    for rate in sorted({r.rate for r in rows}):
        sub = [r for r in rows if r.rate == rate]
        done = [r for r in sub if r.completed]
        table[rate] = {
            "runs": len(sub),
            "completion_ratio": len(done) / len(sub),
            "median_seconds": (statistics.median(r.seconds for r in done)
                               if done else None),
        }
    return table


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("rate", "seed", "completed", "steps", "seconds",
                         "uniqueness_ok", "max_bytes_out", "max_ma_ratio"))
        for r in rows:
            writer.writerow((r.rate, r.seed, int(r.completed), r.steps,
                             f"{r.seconds:.1f}", int(r.uniqueness_ok),
                             r.max_bytes_out, f"{r.max_ma_ratio:.4f}"))
