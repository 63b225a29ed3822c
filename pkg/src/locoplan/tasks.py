"""Task specifications: JSON loading, validation, built-in scenarios.

A task bundles everything one solve needs besides the robot model itself:
mesh, contact schedule, end-effector waypoints, posture, objective, and
solver overrides.  Specs are immutable plain data, compare by value, and
round-trip through JSON unchanged.

Task schema (version 1)::

    {
      "schema": 1,
      "name": "step",
      "model": "miniquad",           # built-in name or model-file path
      "duration": 4.0,               # seconds, > 0
      "segments": 40,                # mesh segments N; mesh points are 0..N
      "objective": "baseline",       # feasibility | baseline | robust
      "free_feet": false,            # optimize stance xy instead of pinning
      "boundary_velocity": true,     # pin v_0 = v_N = 0
      "seed": 0,
      "posture": {"base_height": 0.4, "joints": {"lf_hip": 0.45}},
      "schedule": {"rh_foot": [{"start": 0, "end": 16},
                               {"start": 24, "end": 40,
                                "position": [0.1, -0.1, 0.0]}]},
      "waypoints": [{"k": 40, "position": [0.3, 0.0, 0.4],
                     "orientation": [0.0, 0.1, 0.0]}],
      "solver": {"tol_feas": 1e-6, "max_outer": 50}
    }

Feet absent from "schedule" stay in stance over the whole mesh; phases
without "position" plant at the posture's forward-kinematics foothold.
Waypoint orientations are MRP triples of the desired world rotation.
"""
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .model import (RobotModel, SchemaError, ValidationError,
                    BUILTIN_MODELS, builtin_model, load_model, model_hash)
from .solver import SolverOptions, path_initial_guess
from .transcription import (ContactSchedule, LayoutOptions, MeshGrid, StancePhase,
                            TranscribedProblem, Waypoint, assemble_plan_problem)

TASK_SCHEMA = 1

OBJECTIVES = ("feasibility", "baseline", "robust")

# SolverOptions fields a task file may override
SOLVER_KEYS = ("tol_feas", "tol_ineq", "tol_opt", "max_outer", "max_inner",
               "penalty_init", "penalty_growth")
_INT_SOLVER_KEYS = ("max_outer", "max_inner")


# ---------------------------------------------------------------------------
# spec types


@dataclass(frozen=True)
class TaskPhase:
    start: int                       # mesh index, inclusive
    end: int                         # mesh index, inclusive
    position: tuple | None = None    # world foothold; None = posture FK


@dataclass(frozen=True)
class TaskWaypoint:
    k: int                           # mesh index
    position: tuple | None = None
    orientation: tuple | None = None  # MRP of the desired world rotation


@dataclass(frozen=True)
class TaskSpec:
    name: str
    model: str
    duration: float
    segments: int
    objective: str = "baseline"
    free_feet: bool = False
    boundary_velocity: bool = True
    seed: int = 0
    base_height: float = 0.0
    joint_posture: tuple = ()        # (joint name, angle) pairs
    schedule: tuple = ()             # (foot, (TaskPhase, ...)) pairs; () = all stance
    waypoints: tuple = ()            # (TaskWaypoint, ...)
    solver: tuple = ()               # (option name, value) pairs

    @property
    def n_points(self) -> int:
        return self.segments + 1


# ---------------------------------------------------------------------------
# parsing and validation


def _require(cond: bool, msg: str, err=SchemaError):
    if not cond:
        raise err(msg)


def _num(x, path: str) -> float:
    _require(isinstance(x, (int, float)) and not isinstance(x, bool),
             f"{path}: expected a number, got {type(x).__name__}")
    return float(x)


def _int(x, path: str) -> int:
    _require(isinstance(x, int) and not isinstance(x, bool),
             f"{path}: expected an integer, got {type(x).__name__}")
    return x


def _bool(x, path: str) -> bool:
    _require(isinstance(x, bool), f"{path}: expected a boolean, got {type(x).__name__}")
    return x


def _str(x, path: str) -> str:
    _require(isinstance(x, str) and x, f"{path}: expected a non-empty string")
    return x


def _obj(x, path: str) -> dict:
    _require(isinstance(x, dict), f"{path}: expected an object, got {type(x).__name__}")
    return x


def _vec3(x, path: str) -> tuple:
    _require(isinstance(x, (list, tuple)) and len(x) == 3,
             f"{path}: expected 3 numbers")
    return tuple(_num(v, f"{path}[{i}]") for i, v in enumerate(x))


def _parse_phase(d, N: int, path: str) -> TaskPhase:
    d = _obj(d, path)
    _require(set(d) <= {"start", "end", "position"}, f"{path}: unknown keys "
             f"{sorted(set(d) - {'start', 'end', 'position'})}")
    start = _int(d.get("start"), f"{path}.start")
    end = _int(d.get("end"), f"{path}.end")
    _require(0 <= start <= end <= N,
             f"{path}: phase [{start}, {end}] leaves the mesh range [0, {N}]",
             ValidationError)
    pos = _vec3(d["position"], f"{path}.position") if "position" in d else None
    return TaskPhase(start, end, pos)


def _parse_waypoint(d, N: int, path: str) -> TaskWaypoint:
    d = _obj(d, path)
    _require(set(d) <= {"k", "position", "orientation"}, f"{path}: unknown keys "
             f"{sorted(set(d) - {'k', 'position', 'orientation'})}")
    k = _int(d.get("k"), f"{path}.k")
    _require(0 <= k <= N, f"{path}.k: mesh index {k} outside [0, {N}]", ValidationError)
    pos = _vec3(d["position"], f"{path}.position") if "position" in d else None
    ori = _vec3(d["orientation"], f"{path}.orientation") if "orientation" in d else None
    _require(pos is not None or ori is not None,
             f"{path}: needs a position or an orientation", ValidationError)
    return TaskWaypoint(k, pos, ori)


def parse_task(doc: dict) -> TaskSpec:
    """Validate a decoded task document and freeze it into a TaskSpec."""
    doc = _obj(doc, "task")
    known = {"schema", "name", "model", "duration", "segments", "objective",
             "free_feet", "boundary_velocity", "seed", "posture", "schedule",
             "waypoints", "solver"}
    _require(set(doc) <= known, f"task: unknown keys {sorted(set(doc) - known)}")
    _require(doc.get("schema") == TASK_SCHEMA,
             f"schema: expected {TASK_SCHEMA}, got {doc.get('schema')!r}")
    for key in ("name", "model", "duration", "segments"):
        _require(key in doc, f"task: missing required key '{key}'")

    name = _str(doc["name"], "name")
    model = _str(doc["model"], "model")
    duration = _num(doc["duration"], "duration")
    _require(duration > 0, f"duration: must be positive, got {duration}", ValidationError)
    N = _int(doc["segments"], "segments")
    _require(N >= 1, f"segments: must be >= 1, got {N}", ValidationError)

    objective = _str(doc.get("objective", "baseline"), "objective")
    _require(objective in OBJECTIVES,
             f"objective: '{objective}' not one of {', '.join(OBJECTIVES)}",
             ValidationError)
    free_feet = _bool(doc.get("free_feet", False), "free_feet")
    boundary_velocity = _bool(doc.get("boundary_velocity", True), "boundary_velocity")
    seed = _int(doc.get("seed", 0), "seed")
    _require(seed >= 0, f"seed: must be >= 0, got {seed}", ValidationError)

    posture = _obj(doc.get("posture", {}), "posture")
    _require(set(posture) <= {"base_height", "joints"}, "posture: unknown keys "
             f"{sorted(set(posture) - {'base_height', 'joints'})}")
    base_height = _num(posture.get("base_height", 0.0), "posture.base_height")
    joints = _obj(posture.get("joints", {}), "posture.joints")
    joint_posture = tuple((j, _num(a, f"posture.joints.{j}")) for j, a in joints.items())

    schedule = []
    for foot, phases in _obj(doc.get("schedule", {}), "schedule").items():
        _require(isinstance(phases, list) and phases,
                 f"schedule.{foot}: expected a non-empty list of phases")
        parsed = tuple(_parse_phase(ph, N, f"schedule.{foot}[{i}]")
                       for i, ph in enumerate(phases))
        prev_end = -1
        for i, ph in enumerate(parsed):
            _require(ph.start > prev_end,
                     f"schedule.{foot}: phases overlap or are unordered at index {i}",
                     ValidationError)
            prev_end = ph.end
        schedule.append((foot, parsed))

    wps = doc.get("waypoints", [])
    _require(isinstance(wps, list), "waypoints: expected a list")
    waypoints = tuple(_parse_waypoint(w, N, f"waypoints[{i}]") for i, w in enumerate(wps))

    solver = []
    for key, val in _obj(doc.get("solver", {}), "solver").items():
        _require(key in SOLVER_KEYS,
                 f"solver.{key}: unknown option (have {', '.join(SOLVER_KEYS)})",
                 ValidationError)
        v = _num(val, f"solver.{key}")
        if key in _INT_SOLVER_KEYS:
            v = _int(val, f"solver.{key}")
        solver.append((key, v))

    return TaskSpec(name=name, model=model, duration=duration, segments=N,
                    objective=objective, free_feet=free_feet,
                    boundary_velocity=boundary_velocity, seed=seed,
                    base_height=base_height, joint_posture=joint_posture,
                    schedule=tuple(schedule), waypoints=tuple(waypoints),
                    solver=tuple(solver))


def load_task(text: str) -> TaskSpec:
    """Parse task JSON text into a validated TaskSpec."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"task: not valid JSON ({e})") from e
    return parse_task(doc)


def load_task_file(path) -> TaskSpec:
    with open(path) as f:
        return parse_task(json.load(f))


def task_to_dict(spec: TaskSpec) -> dict:
    """JSON-ready document; load_task(json.dumps(...)) returns an equal spec."""
    d = {"schema": TASK_SCHEMA, "name": spec.name, "model": spec.model,
         "duration": spec.duration, "segments": spec.segments,
         "objective": spec.objective, "free_feet": spec.free_feet,
         "boundary_velocity": spec.boundary_velocity, "seed": spec.seed,
         "posture": {"base_height": spec.base_height,
                     "joints": dict(spec.joint_posture)}}
    if spec.schedule:
        d["schedule"] = {
            foot: [{"start": ph.start, "end": ph.end,
                    **({"position": list(ph.position)} if ph.position is not None else {})}
                   for ph in phases]
            for foot, phases in spec.schedule}
    if spec.waypoints:
        d["waypoints"] = [
            {"k": w.k,
             **({"position": list(w.position)} if w.position is not None else {}),
             **({"orientation": list(w.orientation)} if w.orientation is not None else {})}
            for w in spec.waypoints]
    if spec.solver:
        d["solver"] = dict(spec.solver)
    return d


# ---------------------------------------------------------------------------
# spec -> solvable problem


def resolve_model(spec: TaskSpec) -> RobotModel:
    if spec.model in BUILTIN_MODELS:
        return builtin_model(spec.model)
    try:
        return load_model(spec.model)
    except FileNotFoundError:
        raise ValidationError(
            f"model: '{spec.model}' is neither a built-in "
            f"({', '.join(BUILTIN_MODELS)}) nor a readable file") from None


def initial_configuration(model: RobotModel, spec: TaskSpec) -> np.ndarray:
    """Posture of the spec as a configuration vector."""
    q0 = model.neutral_q()
    q0[2] = spec.base_height
    names = [j.name for j in model.actuated_joints()]
    for joint, angle in spec.joint_posture:
        if joint not in names:
            raise ValidationError(f"posture.joints.{joint}: unknown joint "
                                  f"for model '{model.name}'")
        q0[6 + names.index(joint)] = angle
    return q0


def _resolve_schedule(model: RobotModel, spec: TaskSpec, fk0) -> ContactSchedule:
    names = model.contact_names()
    for foot, _ in spec.schedule:
        if foot not in names:
            raise ValidationError(f"schedule.{foot}: unknown contact "
                                  f"for model '{model.name}'")
    by_foot = dict(spec.schedule)
    feet = {}
    for ci, c in enumerate(model.contacts):
        nominal = fk0.contacts[ci]
        phases = by_foot.get(c.name, (TaskPhase(0, spec.segments),))
        out = []
        for ph in phases:
            pos = nominal.copy() if ph.position is None else np.asarray(ph.position)
            out.append(StancePhase(ph.start, ph.end, position=pos,
                                   free_xy=spec.free_feet, ground_z=float(pos[2])))
        feet[c.name] = out
    return ContactSchedule(feet)


def solver_options(spec: TaskSpec, **overrides) -> SolverOptions:
    """Solver options: defaults, then task overrides, then keyword overrides."""
    opts = SolverOptions(seed=spec.seed)
    for key, val in spec.solver:
        setattr(opts, key, val)
    for key, val in overrides.items():
        if val is not None:
            setattr(opts, key, val)
    return opts


@dataclass
class TaskProblem:
    spec: TaskSpec
    model: RobotModel
    problem: TranscribedProblem
    q0: np.ndarray                   # posture configuration
    options: SolverOptions


def build_problem(spec: TaskSpec, model: RobotModel | None = None,
                  **solver_overrides) -> TaskProblem:
    """Assemble the spec's NLP: plan problem, or margin problem for objective
    'robust'."""
    m = model if model is not None else resolve_model(spec)
    q0 = initial_configuration(m, spec)
    grid = MeshGrid(spec.duration, spec.segments)
    schedule = _resolve_schedule(m, spec, dyn.fk(m, q0))
    wps = [Waypoint(w.k,
                    position=None if w.position is None else np.asarray(w.position),
                    orientation=None if w.orientation is None else np.asarray(w.orientation))
           for w in spec.waypoints]
    if spec.objective == "robust":
        from .robustness import assemble_robust_problem
        tp = assemble_robust_problem(m, grid, schedule, waypoints=wps,
                                     boundary_velocity=spec.boundary_velocity)
    else:
        tp = assemble_plan_problem(m, grid, schedule, waypoints=wps,
                                   objective=spec.objective,
                                   boundary_velocity=spec.boundary_velocity)
    tp.meta.update(task=spec.name, objective=spec.objective,
                   model=m.name, model_hash=model_hash(m), seed=spec.seed)
    return TaskProblem(spec, m, tp, q0, solver_options(spec, **solver_overrides))


def _ee_targets(built: TaskProblem) -> np.ndarray:
    """(N + 1, 3) end-effector path: linear through the position waypoints,
    anchored at the posture pose when no waypoint sits at k = 0, constant
    after the last waypoint."""
    N = built.spec.segments
    anchors = sorted((w.k, np.asarray(w.position, float))
                     for w in built.spec.waypoints if w.position is not None)
    if not anchors or anchors[0][0] > 0:
        ee0 = dyn.fk(built.model, built.q0).ee.translation
        anchors.insert(0, (0, np.asarray(ee0, float)))
    ks = np.array([k for k, _ in anchors], float)
    ps = np.array([p for _, p in anchors])
    out = np.empty((N + 1, 3))
    for axis in range(3):
        out[:, axis] = np.interp(np.arange(N + 1), ks, ps[:, axis])
    return out


_SWING_LIFT = 0.04


def _foot_targets(built: TaskProblem) -> list:
    """Per mesh point, [(contact index, world target), ...]: the stance
    position while planted, a sine-lift arc between consecutive stances."""
    lay = built.problem.layout
    N = lay.grid.segments
    names = built.model.contact_names()
    rows = [[] for _ in range(N + 1)]
    for ci, name in enumerate(names):
        phases = lay.schedule.feet.get(name, [])
        for k in range(N + 1):
            ph = lay.schedule.phase_at(name, k)
            if ph is not None:
                rows[k].append((ci, np.asarray(ph.position, float)))
                continue
            prev = max((p for p in phases if p.end < k), key=lambda p: p.end, default=None)
            nxt = min((p for p in phases if p.start > k), key=lambda p: p.start, default=None)
            if prev is None or nxt is None:
                continue
            s = (k - prev.end) / (nxt.start - prev.end)
            tgt = (1.0 - s) * np.asarray(prev.position, float) \
                + s * np.asarray(nxt.position, float)
            tgt[2] += _SWING_LIFT * np.sin(np.pi * s)
            rows[k].append((ci, tgt))
    return rows


def initial_guess(built: TaskProblem) -> np.ndarray:
    """Seed from an interpolated kinematic path instead of a static stand.

    Fits a configuration at every mesh point by damped least squares on
    the scheduled foot positions (swing feet track a lifted arc between
    stances) and the interpolated end-effector waypoints, warm-started
    from the previous point; orientation waypoints are left to the
    solver.  The path then seeds velocities, forces and torques through
    path_initial_guess, so the dynamics block starts at rounding error
    and only the motion cost remains to optimize.
    """
    from scipy.optimize import least_squares

    m = built.model
    N = built.spec.segments
    ee = _ee_targets(built)
    feet = _foot_targets(built)
    b = m.q_bounds()
    lo, hi = b[:, 0], b[:, 1]
    qs = np.empty((N + 1, m.n_q))
    qprev = np.clip(built.q0.astype(float), lo, hi)
    for k in range(N + 1):
        def resid(q, rows=feet[k], tgt=ee[k], qa=qprev):
            fk = dyn.fk(m, q)
            parts = [fk.contacts[ci] - p for ci, p in rows]
            parts.append(fk.ee.translation - tgt)
            parts.append(1e-3 * (q - qa))
            return np.concatenate(parts)

        sol = least_squares(resid, qprev, bounds=(lo, hi),
                            ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=400)
        qs[k] = sol.x
        qprev = sol.x
    return path_initial_guess(built.problem, qs)


# ---------------------------------------------------------------------------
# built-in scenarios (desk-scale quadruped with an arm)

# standing posture used by every built-in
_STAND_HEIGHT = 0.3981
_STAND_JOINTS = tuple([(f"{leg}_hip", 0.45) for leg in ("lf", "rf", "lh", "rh")]
                      + [(f"{leg}_knee", -0.9) for leg in ("lf", "rf", "lh", "rh")]
                      + [("arm_pitch", 0.6), ("arm_elbow", 0.8)])

_N, _T = 40, 4.0


def _stand_fk():
    m = builtin_model("miniquad")
    spec = TaskSpec("posture", "miniquad", _T, _N,
                    base_height=_STAND_HEIGHT, joint_posture=_STAND_JOINTS)
    fk0 = dyn.fk(m, initial_configuration(m, spec))
    ee0 = tuple(float(v) for v in fk0.ee.translation)
    feet = {c.name: tuple(float(v) for v in fk0.contacts[ci])
            for ci, c in enumerate(m.contacts)}
    return ee0, feet


def builtin_tasks() -> dict:
    """Named desk-scale scenarios; every one solves with default options."""
    ee0, feet = _stand_fk()

    def spec(name, **kw):
        return TaskSpec(name=name, model="miniquad", duration=_T, segments=_N,
                        base_height=_STAND_HEIGHT, joint_posture=_STAND_JOINTS, **kw)

    def shift(p, dx=0.0, dy=0.0, dz=0.0):
        return (p[0] + dx, p[1] + dy, p[2] + dz)

    # static stance, arm held at its nominal pose
    hold = spec("hold", waypoints=(TaskWaypoint(_N, ee0),))

    # arm reaches a laterally offset target, whole body free to lean
    target = shift(ee0, dx=0.10, dy=-0.06, dz=-0.04)
    reach = spec("reach", waypoints=(TaskWaypoint(_N // 2, target),
                                     TaskWaypoint(_N, target)))

    # right hind foot breaks and re-makes contact; gripper pinned throughout
    step = spec("step",
                schedule=(("rh_foot", (TaskPhase(0, 16), TaskPhase(24, _N))),),
                waypoints=tuple(TaskWaypoint(k, ee0) for k in range(_N + 1)))

    # three backward steps with a simultaneously retreating end effector
    dstep = -0.06
    crawl = spec(
        "crawl-pull",
        schedule=(("rh_foot", (TaskPhase(0, 4),
                               TaskPhase(13, _N, shift(feet["rh_foot"], dx=dstep)))),
                  ("lh_foot", (TaskPhase(0, 14),
                               TaskPhase(23, _N, shift(feet["lh_foot"], dx=dstep)))),
                  ("rf_foot", (TaskPhase(0, 24),
                               TaskPhase(33, _N, shift(feet["rf_foot"], dx=dstep))))),
        waypoints=tuple(TaskWaypoint(k, shift(ee0, dx=-0.10 * k / _N))
                        for k in (0, 13, 27, _N)))

    free = replace(reach, name="freefeet-reach", free_feet=True)

    return {t.name: t for t in (hold, reach, step, crawl, free)}


def get_task(name_or_path: str) -> TaskSpec:
    """Built-in task by name, or a spec loaded from a JSON file path."""
    builtins = builtin_tasks()
    if name_or_path in builtins:
        return builtins[name_or_path]
    try:
        return load_task_file(name_or_path)
    except FileNotFoundError:
        raise ValidationError(
            f"task: '{name_or_path}' is neither a built-in "
            f"({', '.join(builtins)}) nor a readable file") from None
