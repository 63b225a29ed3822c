"""Robot model schema: parsing, validation, built-ins.

A model file is a JSON document (schema version 1) with fields
``schema, name, links, joints, contacts, end_effector``.  Inertia is given
as a 6-vector (ixx, iyy, izz, ixy, ixz, iyz) about the link frame origin.
Exactly one floating joint is allowed and it must root the tree at the
reserved parent name "world".
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .spatial import Transform, rpy_to_rotation

SCHEMA_VERSION = 1
WORLD = "world"
JOINT_KINDS = ("floating", "revolute", "prismatic")


class ModelError(Exception):
    pass


class SchemaError(ModelError):
    """Structurally malformed input (missing/extra/badly-typed fields)."""


class ValidationError(ModelError):
    """Well-formed input that violates a physical or topological rule."""


@dataclass
class SpatialInertia:
    mass: float
    com: np.ndarray           # (3,) link frame
    inertia: np.ndarray       # (3,3) about link frame origin

    def com_inertia(self) -> np.ndarray:
        # parallel-axis shift to the COM
        c = self.com
        return self.inertia - self.mass * ((c @ c) * np.eye(3) - np.outer(c, c))


@dataclass
class LinkSpec:
    name: str
    inertia: SpatialInertia


@dataclass
class JointSpec:
    name: str
    kind: str
    parent: str
    child: str
    axis: np.ndarray          # (3,) unit, joint frame
    origin: Transform         # parent link frame -> joint frame
    q_limits: tuple | None = None
    v_limits: tuple | None = None
    tau_limits: tuple | None = None


@dataclass
class ContactPoint:
    name: str
    link: str
    offset: np.ndarray        # (3,) link frame
    mu: float
    normal: np.ndarray        # (3,) unit, world frame
    tangent: np.ndarray = field(default=None)   # t, with (t, b, n) right-handed
    bitangent: np.ndarray = field(default=None)


@dataclass
class EndEffector:
    link: str
    offset: np.ndarray


@dataclass
class RobotModel:
    name: str
    links: list
    joints: list              # floating root first, then topological order
    contacts: list
    end_effector: EndEffector

    @property
    def n_j(self) -> int:
        return sum(1 for j in self.joints if j.kind != "floating")

    @property
    def n_q(self) -> int:
        return 6 + self.n_j

    @property
    def n_v(self) -> int:
        return 6 + self.n_j

    @property
    def n_s(self) -> int:
        return 3 * len(self.contacts)

    def total_mass(self) -> float:
        return float(sum(l.inertia.mass for l in self.links))

    def link(self, name: str) -> LinkSpec:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(name)

    def contact(self, name: str) -> ContactPoint:
        for c in self.contacts:
            if c.name == name:
                return c
        raise KeyError(name)

    def contact_names(self) -> list:
        return [c.name for c in self.contacts]

    def actuated_joints(self) -> list:
        return [j for j in self.joints if j.kind != "floating"]

    def q_bounds(self) -> np.ndarray:
        """(n_q, 2) lower/upper; +-inf where the file gives no limit."""
        b = np.full((self.n_q, 2), (-np.inf, np.inf))
        root = self.joints[0]
        if root.q_limits is not None:
            b[:6] = root.q_limits
        for i, j in enumerate(self.actuated_joints()):
            if j.q_limits is not None:
                b[6 + i] = j.q_limits
        return b

    def v_bounds(self) -> np.ndarray:
        b = np.full((self.n_v, 2), (-np.inf, np.inf))
        root = self.joints[0]
        if root.v_limits is not None:
            b[:6] = root.v_limits
        for i, j in enumerate(self.actuated_joints()):
            if j.v_limits is not None:
                b[6 + i] = j.v_limits
        return b

    def tau_bounds(self) -> np.ndarray:
        """(n_j, 2); torque limits are required on actuated joints."""
        return np.array([j.tau_limits for j in self.actuated_joints()])

    def neutral_q(self) -> np.ndarray:
        return np.zeros(self.n_q)


def _require(cond: bool, msg: str, err=SchemaError):
    if not cond:
        raise err(msg)


def _vec(x, n, what) -> np.ndarray:
    _require(isinstance(x, (list, tuple)) and len(x) == n, f"{what}: expected a {n}-vector")
    try:
        v = np.array([float(e) for e in x])
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: non-numeric entry")
    _require(np.all(np.isfinite(v)), f"{what}: non-finite entry", ValidationError)
    return v


def _pair(x, what) -> tuple:
    v = _vec(x, 2, what)
    _require(v[0] <= v[1], f"{what}: lower bound exceeds upper", ValidationError)
    return (float(v[0]), float(v[1]))


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    _require(abs(n - 1.0) < 1e-6, f"{what}: not a unit vector (norm {n:.6g})", ValidationError)
    return v / n


def _tangent_basis(normal: np.ndarray):
    ref = np.array([0.0, 1.0, 0.0])
    if abs(normal @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    t = np.cross(ref, normal)
    t = t / np.linalg.norm(t)
    b = np.cross(normal, t)
    return t, b


def _parse_inertia(d: dict, link_name: str) -> SpatialInertia:
    _require("mass" in d and "com" in d and "inertia" in d, f"link '{link_name}': missing mass/com/inertia")
    mass = float(d["mass"])
    _require(mass > 0.0, f"link '{link_name}': mass must be positive", ValidationError)
    com = _vec(d["com"], 3, f"link '{link_name}' com")
    ix = _vec(d["inertia"], 6, f"link '{link_name}' inertia")
    ixx, iyy, izz, ixy, ixz, iyz = ix
    I = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    si = SpatialInertia(mass, com, I)
    ev = np.linalg.eigvalsh(I)
    _require(ev[0] > 0.0, f"link '{link_name}': inertia not positive-definite (min eigenvalue {ev[0]:.3g})", ValidationError)
    evc = np.sort(np.linalg.eigvalsh(si.com_inertia()))
    scale = max(evc[2], 1e-12)
    _require(evc[0] > -1e-9 * scale, f"link '{link_name}': COM inertia not positive semi-definite", ValidationError)
    _require(evc[0] + evc[1] >= evc[2] * (1.0 - 1e-9) - 1e-12,
             f"link '{link_name}': principal moments violate the triangle inequality", ValidationError)
    return si


def parse_model(doc: dict) -> RobotModel:
    _require(isinstance(doc, dict), "model document must be a JSON object")
    for key in ("schema", "name", "links", "joints", "contacts", "end_effector"):
        _require(key in doc, f"missing top-level field '{key}'")
    _require(doc["schema"] == SCHEMA_VERSION, f"unsupported schema version {doc['schema']!r}")
    name = doc["name"]
    _require(isinstance(name, str) and name, "model name must be a non-empty string")

    links = []
    for ld in doc["links"]:
        _require(isinstance(ld, dict) and "name" in ld, "link entries need a name")
        links.append(LinkSpec(ld["name"], _parse_inertia(ld, ld["name"])))
    link_names = [l.name for l in links]
    _require(len(set(link_names)) == len(link_names), "duplicate link names", ValidationError)

    joints = []
    for jd in doc["joints"]:
        for key in ("name", "kind", "parent", "child"):
            _require(key in jd, f"joint entry missing '{key}'")
        kind = jd["kind"]
        _require(kind in JOINT_KINDS, f"joint '{jd['name']}': unknown kind '{kind}'")
        origin = Transform.identity()
        if "origin" in jd:
            od = jd["origin"]
            xyz = _vec(od.get("xyz", [0, 0, 0]), 3, f"joint '{jd['name']}' origin xyz")
            rpy = _vec(od.get("rpy", [0, 0, 0]), 3, f"joint '{jd['name']}' origin rpy")
            origin = Transform(rpy_to_rotation(rpy), xyz)
        axis = np.array([0.0, 0.0, 1.0])
        if kind != "floating":
            _require("axis" in jd, f"joint '{jd['name']}': axis required")
            axis = _unit(_vec(jd["axis"], 3, f"joint '{jd['name']}' axis"), f"joint '{jd['name']}' axis")
        lim = jd.get("limits", {})
        q_lim = _pair(lim["q"], f"joint '{jd['name']}' q limits") if "q" in lim else None
        v_lim = _pair(lim["v"], f"joint '{jd['name']}' v limits") if "v" in lim else None
        tau_lim = _pair(lim["tau"], f"joint '{jd['name']}' tau limits") if "tau" in lim else None
        if kind != "floating":
            _require(tau_lim is not None, f"joint '{jd['name']}': tau limits required on actuated joints",
                     ValidationError)
        joints.append(JointSpec(jd["name"], kind, jd["parent"], jd["child"], axis, origin,
                                q_lim, v_lim, tau_lim))
    joint_names = [j.name for j in joints]
    _require(len(set(joint_names)) == len(joint_names), "duplicate joint names", ValidationError)

    floating = [j for j in joints if j.kind == "floating"]
    _require(len(floating) == 1, "exactly one floating joint required", ValidationError)
    root = floating[0]
    _require(root.parent == WORLD, f"floating joint '{root.name}' must have parent '{WORLD}'", ValidationError)
    _require(root.child in link_names, f"floating joint child '{root.child}' is not a link", ValidationError)

    for j in joints:
        if j is root:
            continue
        _require(j.parent in link_names, f"joint '{j.name}': unknown parent link '{j.parent}'", ValidationError)
        _require(j.child in link_names, f"joint '{j.name}': unknown child link '{j.child}'", ValidationError)

    # each link has exactly one incoming joint, tree is connected
    parent_of = {}
    for j in joints:
        _require(j.child not in parent_of, f"link '{j.child}' has multiple parent joints", ValidationError)
        parent_of[j.child] = j
    for ln in link_names:
        _require(ln in parent_of, f"link '{ln}' is not connected to the tree", ValidationError)
    ordered = [root]
    attached = {root.child}
    pending = [j for j in joints if j is not root]
    while pending:
        progress = [j for j in pending if j.parent in attached]
        _require(progress, "joint graph contains a cycle or unreachable subtree", ValidationError)
        for j in progress:
            ordered.append(j)
            attached.add(j.child)
            pending.remove(j)

    contacts = []
    for cd in doc["contacts"]:
        for key in ("name", "link", "offset", "mu", "normal"):
            _require(key in cd, f"contact entry missing '{key}'")
        _require(cd["link"] in link_names, f"contact '{cd['name']}': unknown link '{cd['link']}'", ValidationError)
        mu = float(cd["mu"])
        _require(mu > 0.0, f"contact '{cd['name']}': mu must be positive", ValidationError)
        normal = _unit(_vec(cd["normal"], 3, f"contact '{cd['name']}' normal"), f"contact '{cd['name']}' normal")
        t, b = _tangent_basis(normal)
        contacts.append(ContactPoint(cd["name"], cd["link"], _vec(cd["offset"], 3, f"contact '{cd['name']}' offset"),
                                     mu, normal, t, b))
    cnames = [c.name for c in contacts]
    _require(len(set(cnames)) == len(cnames), "duplicate contact names", ValidationError)

    ee = doc["end_effector"]
    _require(isinstance(ee, dict) and "link" in ee and "offset" in ee, "end_effector needs link and offset")
    _require(ee["link"] in link_names, f"end_effector link '{ee['link']}' is not a link", ValidationError)

    return RobotModel(name, links, ordered, contacts,
                      EndEffector(ee["link"], _vec(ee["offset"], 3, "end_effector offset")))


def load_model(path) -> RobotModel:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON in {path}: {e}")
    return parse_model(doc)


def _origin_dict(t: Transform) -> dict:
    R = t.rotation
    # recover rpy from Rz(y) Ry(p) Rx(r)
    p = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        r = float(np.arctan2(R[2, 1], R[2, 2]))
        y = float(np.arctan2(R[1, 0], R[0, 0]))
    else:
        r = float(np.arctan2(-R[1, 2], R[1, 1]))
        y = 0.0
    return {"xyz": [float(x) for x in t.translation], "rpy": [r, p, y]}


def model_to_dict(m: RobotModel) -> dict:
    def inertia6(I):
        return [float(I[0, 0]), float(I[1, 1]), float(I[2, 2]),
                float(I[0, 1]), float(I[0, 2]), float(I[1, 2])]

    joints = []
    for j in m.joints:
        jd = {"name": j.name, "kind": j.kind, "parent": j.parent, "child": j.child,
              "axis": [float(x) for x in j.axis], "origin": _origin_dict(j.origin)}
        lim = {}
        if j.q_limits is not None:
            lim["q"] = list(j.q_limits)
        if j.v_limits is not None:
            lim["v"] = list(j.v_limits)
        if j.tau_limits is not None:
            lim["tau"] = list(j.tau_limits)
        if lim:
            jd["limits"] = lim
        joints.append(jd)
    return {
        "schema": SCHEMA_VERSION,
        "name": m.name,
        "links": [{"name": l.name, "mass": l.inertia.mass,
                   "com": [float(x) for x in l.inertia.com],
                   "inertia": inertia6(l.inertia.inertia)} for l in m.links],
        "joints": joints,
        "contacts": [{"name": c.name, "link": c.link, "offset": [float(x) for x in c.offset],
                      "mu": c.mu, "normal": [float(x) for x in c.normal]} for c in m.contacts],
        "end_effector": {"link": m.end_effector.link,
                         "offset": [float(x) for x in m.end_effector.offset]},
    }


def model_hash(m: RobotModel) -> str:
    blob = json.dumps(model_to_dict(m), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


BUILTIN_MODELS = ("pendulum", "miniquad", "fullquad")


def builtin_model(name: str) -> RobotModel:
    if name not in BUILTIN_MODELS:
        raise KeyError(f"no built-in model '{name}' (have {', '.join(BUILTIN_MODELS)})")
    ref = resources.files("locoplan.data.models").joinpath(f"{name}.json")
    return parse_model(json.loads(ref.read_text()))


def builtin_models() -> dict:
    return {name: builtin_model(name) for name in BUILTIN_MODELS}
