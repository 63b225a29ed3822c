"""Command line front end: plan, analyze, robustify, legcheck, oracle.

Outputs are machine readable: trajectories and margin profiles as CSV,
run reports as versioned JSON.  stdout carries exactly one line, the
report path; diagnostics go to stderr.  Exit codes: 0 success, 2 input
or schema errors, 3 solver failure, 4 trajectory audit failure.

Trajectory CSV layout: a ``#``-prefixed header block (schema version,
creation time, model name and hash, task name, mesh, seed), one row per
mesh point ``t, q[..], v[..]``, then one row per knot
``k, tau[..], lam[contact.axis ..], active`` where ``active`` lists the
stance contacts joined by ``|`` and swing contacts carry zero force
columns.  All floats are written in shortest round-trip form, so a
re-loaded trajectory is bit-identical to the solved one.
"""
import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dyn
from . import robustness as rb
from . import solver as sv
from . import tasks as tk
from .model import (BUILTIN_MODELS, RobotModel, SchemaError, ValidationError,
                    builtin_model, load_model, model_hash)
from .robustness import DynamicsMismatch, InfeasibleNominal, UnknownLeg

REPORT_SCHEMA = 1
TRAJECTORY_SCHEMA = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_AUDIT = 4


def _note(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _f(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# trajectory files


@dataclass
class Trajectory:
    task: str
    seed: int
    model_name: str
    model_hash: str
    segments: int
    h: float
    qs: np.ndarray                 # (N + 1, n_q)
    vs: np.ndarray                 # (N + 1, n_v)
    taus: np.ndarray               # (N, n_j)
    lams: np.ndarray               # (N, 3 n_contacts), zeros off-stance
    actives: list                  # per knot, indices into model.contacts

    def knot_states(self):
        """Per-knot (q, v, vdot, tau, lam_active, active) with the mesh
        divided-difference acceleration."""
        out = []
        for k in range(self.segments):
            vdot = (self.vs[k + 1] - self.vs[k]) / self.h
            act = self.actives[k]
            lam = self.lams[k].reshape(-1, 3)[act].ravel()
            out.append((self.qs[k], self.vs[k], vdot, self.taus[k], lam, act))
        return out


def write_trajectory(path, model: RobotModel, layout, x: np.ndarray,
                     task: str, seed: int):
    N = layout.grid.segments
    h = layout.grid.h
    names = model.contact_names()
    jnames = [j.name for j in model.actuated_joints()]
    lines = [f"# schema {TRAJECTORY_SCHEMA}",
             f"# created {time.strftime('%Y-%m-%dT%H:%M:%S')}",
             f"# model {model.name} {model_hash(model)}",
             f"# task {task}",
             f"# segments {N} h {_f(h)} seed {seed}"]
    lines.append(",".join(["t"] + [f"q[{i}]" for i in range(model.n_q)]
                          + [f"v[{i}]" for i in range(model.n_v)]))
    for k in range(N + 1):
        vals = [k * h, *x[layout.q(k)], *x[layout.v(k)]]
        lines.append(",".join(_f(v) for v in vals))
    lines.append(",".join(["k"] + [f"tau[{j}]" for j in jnames]
                          + [f"lam[{c}.{ax}]" for c in names for ax in "xyz"]
                          + ["active"]))
    for k in range(N):
        lam = np.zeros(3 * len(names))
        act = layout.active[k]
        il = layout.lam(k)
        if il.size:
            blocks = x[il].reshape(-1, 3)
            for i, ci in enumerate(act):
                lam[3 * ci:3 * ci + 3] = blocks[i]
        row = [str(k)] + [_f(v) for v in x[layout.tau(k)]] + [_f(v) for v in lam]
        row.append("|".join(names[ci] for ci in act))
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_trajectory(path, model: RobotModel) -> Trajectory:
    """Parse and validate a trajectory file against the given model."""
    with open(path) as f:
        raw = [ln.rstrip("\n") for ln in f if ln.strip()]
    header = {}
    body = []
    for ln in raw:
        if ln.startswith("#"):
            parts = ln[1:].split()
            if parts:
                header[parts[0]] = parts[1:]
        else:
            body.append(ln)
    if header.get("schema") != [str(TRAJECTORY_SCHEMA)]:
        raise SchemaError(f"trajectory: unsupported schema {header.get('schema')}")
    for key in ("model", "task", "segments"):
        if key not in header:
            raise SchemaError(f"trajectory: missing header line '# {key} ...'")
    mname, mhash = header["model"]
    if mhash != model_hash(model):
        raise ValidationError(
            f"trajectory: model hash {mhash} does not match '{model.name}' "
            f"({model_hash(model)})")
    seg = header["segments"]           # ["<N>", "h", "<h>", "seed", "<seed>"]
    N, h, seed = int(seg[0]), float(seg[2]), int(seg[4])
    task = header["task"][0]

    n_q, n_v, n_j = model.n_q, model.n_v, model.n_j
    n_c = len(model.contacts)
    names = model.contact_names()
    if len(body) != (N + 1) + N + 2:
        raise SchemaError(f"trajectory: expected {(N + 1) + N + 2} data rows "
                          f"for {N} segments, found {len(body)}")
    mesh, knots = body[1:N + 2], body[N + 3:]
    qs = np.empty((N + 1, n_q))
    vs = np.empty((N + 1, n_v))
    for k, ln in enumerate(mesh):
        vals = ln.split(",")
        if len(vals) != 1 + n_q + n_v:
            raise SchemaError(f"trajectory: mesh row {k} has {len(vals)} columns, "
                              f"expected {1 + n_q + n_v}")
        qs[k] = [float(v) for v in vals[1:1 + n_q]]
        vs[k] = [float(v) for v in vals[1 + n_q:]]
    taus = np.empty((N, n_j))
    lams = np.zeros((N, 3 * n_c))
    actives = []
    for k, ln in enumerate(knots):
        vals = ln.split(",")
        if len(vals) != 2 + n_j + 3 * n_c:
            raise SchemaError(f"trajectory: knot row {k} has {len(vals)} columns, "
                              f"expected {2 + n_j + 3 * n_c}")
        taus[k] = [float(v) for v in vals[1:1 + n_j]]
        lams[k] = [float(v) for v in vals[1 + n_j:1 + n_j + 3 * n_c]]
        act = []
        for nm in (vals[-1].split("|") if vals[-1] else []):
            if nm not in names:
                raise ValidationError(f"trajectory: knot {k} lists unknown "
                                      f"contact '{nm}'")
            act.append(names.index(nm))
        actives.append(act)
    return Trajectory(task, seed, mname, mhash, N, h, qs, vs, taus, lams, actives)


# ---------------------------------------------------------------------------
# profile and report files


def write_suf_profile(path, profile: rb.SufProfile):
    lines = ["k,t,rho,status"]
    for k, knot in enumerate(profile.knots):
        lines.append(f"{k},{_f(profile.times[k])},{_f(knot.rho)},{knot.status}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_gains(path, model: RobotModel, profile: rb.SufProfile):
    names = model.contact_names()
    jnames = [j.name for j in model.actuated_joints()]
    cols = ["k"]
    cols += [f"Klam[{c}.{ax}.d{d}]" for c in names for ax in "xyz" for d in "xyz"]
    cols += [f"Ktau[{j}.d{d}]" for j in jnames for d in "xyz"]
    lines = [",".join(cols)]
    for k, knot in enumerate(profile.knots):
        kl = np.zeros((3 * len(names), 3))
        for i, ci in enumerate(knot.active):
            kl[3 * ci:3 * ci + 3] = knot.gain_contact[3 * i:3 * i + 3]
        vals = [str(k)] + [_f(v) for v in kl.ravel()]
        vals += [_f(v) for v in np.asarray(knot.gain_torque).ravel()]
        lines.append(",".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_report(outdir, payload: dict) -> int:
    payload = {"schema": REPORT_SCHEMA,
               "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **payload}
    path = outdir / "report.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(path)
    return EXIT_OK


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _profile_summary(profile: rb.SufProfile) -> dict:
    s = profile.summary()
    s["statuses"] = sorted({k.status for k in profile.knots})
    return s


# ---------------------------------------------------------------------------
# shared argument handling


def _model_from_arg(name: str) -> RobotModel:
    if name in BUILTIN_MODELS:
        return builtin_model(name)
    try:
        return load_model(name)
    except FileNotFoundError:
        raise ValidationError(
            f"model: '{name}' is neither a built-in ({', '.join(BUILTIN_MODELS)}) "
            f"nor a readable file") from None


def _task_from_args(args) -> tk.TaskSpec:
    spec = tk.get_task(args.task)
    if getattr(args, "model", None):
        spec = replace(spec, model=args.model)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def _solver_overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("tol_feas", "tol_opt", "max_outer")
            if getattr(args, k, None) is not None}


def _suf_options(args) -> sv.SolverOptions:
    opts = sv.SolverOptions()
    for key, val in _solver_overrides(args).items():
        setattr(opts, key, val)
    return opts


class _SolverLog:
    """Line-delimited JSON stream of outer-iteration records."""

    def __init__(self, path):
        self.f = open(path, "w") if path else None
        self.label = ""

    def __call__(self, rec):
        if self.f:
            self.f.write(json.dumps({"solve": self.label, **rec}) + "\n")
            self.f.flush()

    def close(self):
        if self.f:
            self.f.close()


def _solve(nlp, x0, opts, log, label):
    log.label = label
    t0 = time.perf_counter()
    res = sv.solve(nlp, x0, opts, log=log if log.f else None)
    _note(f"{label}: {res.status} objective {res.objective:.6g} "
          f"eq {res.max_eq_violation:.2e} ineq {res.max_ineq_violation:.2e} "
          f"outers {res.outer_iters} inners {res.inner_iters} "
          f"{time.perf_counter() - t0:.1f}s")
    return res


def _solve_result_dict(res, include_objective=True) -> dict:
    d = {"status": res.status,
         "eq_violation": res.max_eq_violation,
         "ineq_violation": res.max_ineq_violation,
         "outer_iters": res.outer_iters,
         "inner_iters": res.inner_iters}
    if include_objective:
        d["objective"] = res.objective
    return d


def _outdir(args):
    from pathlib import Path
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    spec = _task_from_args(args)
    if args.objective:
        spec = replace(spec, objective=args.objective)
    if spec.objective == "robust":
        raise ValidationError("objective: 'robust' is solved by the robustify "
                              "command, not plan")
    out = _outdir(args)
    built = tk.build_problem(spec, **_solver_overrides(args))
    nlp = sv.NlpProblem.from_transcribed(built.problem)
    x0 = tk.initial_guess(built)
    log = _SolverLog(args.log_solver)
    try:
        res = _solve(nlp, x0, built.options, log, "plan")
    finally:
        log.close()
    write_trajectory(out / "trajectory.csv", built.model, built.problem.layout,
                     res.x, spec.name, spec.seed)
    code = write_report(out, {
        "command": "plan",
        "model": {"name": built.model.name, "hash": model_hash(built.model)},
        "task": tk.task_to_dict(spec),
        "result": _solve_result_dict(res, spec.objective != "feasibility"),
        "files": {"trajectory": "trajectory.csv"}})
    return code if res.feasible else EXIT_SOLVER


def cmd_analyze(args) -> int:
    model = _model_from_arg(args.model)
    digest = _sha256(args.trajectory)
    traj = read_trajectory(args.trajectory, model)
    states = traj.knot_states()
    opts = _suf_options(args)
    t0 = time.perf_counter()
    profile = rb.suf_of_trajectory(
        model, *[[s[i] for s in states] for i in range(6)],
        times=np.arange(traj.segments) * traj.h, opts=opts,
        workers=args.workers, audit_tol=args.audit_tol)
    _note(f"analyze: {traj.segments} knots in {time.perf_counter() - t0:.1f}s")
    if _sha256(args.trajectory) != digest:
        raise RuntimeError("input trajectory changed during analysis")
    out = _outdir(args)
    write_suf_profile(out / "suf.csv", profile)
    files = {"suf": "suf.csv"}
    if args.gains:
        write_gains(out / "gains.csv", model, profile)
        files["gains"] = "gains.csv"
    return write_report(out, {
        "command": "analyze",
        "model": {"name": model.name, "hash": traj.model_hash},
        "task": traj.task,
        "input": {"path": str(args.trajectory), "sha256": digest,
                  "unchanged": True},
        "profile": _profile_summary(profile),
        "files": files})


def cmd_robustify(args) -> int:
    spec = _task_from_args(args)
    out = _outdir(args)
    overrides = _solver_overrides(args)
    log = _SolverLog(args.log_solver)
    try:
        base = tk.build_problem(replace(spec, objective="baseline"), **overrides)
        nlp_b = sv.NlpProblem.from_transcribed(base.problem)
        x0 = tk.initial_guess(base)
        res_b = _solve(nlp_b, x0, base.options, log, "baseline")
        if not res_b.feasible:
            write_report(out, {"command": "robustify",
                               "model": {"name": base.model.name,
                                         "hash": model_hash(base.model)},
                               "task": tk.task_to_dict(spec),
                               "baseline": _solve_result_dict(res_b)})
            return EXIT_SOLVER

        robust = tk.build_problem(replace(spec, objective="robust"), **overrides)
        nlp_r = sv.NlpProblem.from_transcribed(robust.problem)
        xw = rb.seed_from_plan(robust.problem, base.problem, res_b.x)
        res_r = _solve(nlp_r, xw, robust.options, log, "robust")
    finally:
        log.close()

    model = robust.model
    lay = robust.problem.layout
    write_trajectory(out / "trajectory.csv", model, lay, res_r.x,
                     spec.name, spec.seed)
    report = {
        "command": "robustify",
        "model": {"name": model.name, "hash": model_hash(model)},
        "task": tk.task_to_dict(spec),
        "result": _solve_result_dict(res_r),
        "margins": [float(res_r.x[lay.rho(k)]) for k in range(spec.segments)],
        "files": {"trajectory": "trajectory.csv", "suf": "suf.csv"}}
    if lay._foot_xy:
        report["foot_xy"] = {
            f"{foot}[{pi}]": [float(v) for v in res_r.x[lay.foot_xy(foot, pi)]]
            for (foot, pi) in lay._foot_xy}
    if not res_r.feasible:
        write_report(out, report)
        return EXIT_SOLVER

    suf_opts = _suf_options(args)
    traj_r = read_trajectory(out / "trajectory.csv", model)
    sts = traj_r.knot_states()
    prof_r = rb.suf_of_trajectory(model, *[[s[i] for s in sts] for i in range(6)],
                                  times=np.arange(spec.segments) * traj_r.h,
                                  opts=suf_opts, workers=args.workers,
                                  audit_tol=args.audit_tol)
    write_suf_profile(out / "suf.csv", prof_r)
    report["profile"] = _profile_summary(prof_r)
    if args.gains:
        write_gains(out / "gains.csv", model, prof_r)
        report["files"]["gains"] = "gains.csv"

    if args.compare:
        write_trajectory(out / "baseline_trajectory.csv", model,
                         base.problem.layout, res_b.x, spec.name, spec.seed)
        traj_b = read_trajectory(out / "baseline_trajectory.csv", model)
        stb = traj_b.knot_states()
        prof_b = rb.suf_of_trajectory(model, *[[s[i] for s in stb] for i in range(6)],
                                      times=np.arange(spec.segments) * traj_b.h,
                                      opts=suf_opts, workers=args.workers,
                                      audit_tol=args.audit_tol)
        write_suf_profile(out / "baseline_suf.csv", prof_b)
        rmin, bmin = prof_r.rho.min(), prof_b.rho.min()
        report["baseline"] = _solve_result_dict(res_b)
        report["baseline"]["profile"] = _profile_summary(prof_b)
        report["comparison"] = {
            "baseline_min_rho": float(bmin),
            "robust_min_rho": float(rmin),
            "improvement": float(rmin - bmin),
            "improvement_rel": float((rmin - bmin) / max(bmin, 1e-12)),
            "robust_ge_baseline": bool(rmin >= bmin - 1e-6)}
        report["files"]["baseline_trajectory"] = "baseline_trajectory.csv"
        report["files"]["baseline_suf"] = "baseline_suf.csv"
    return write_report(out, report)


def cmd_legcheck(args) -> int:
    model = _model_from_arg(args.model)
    traj = read_trajectory(args.trajectory, model)
    states = traj.knot_states()
    cols = [[s[i] for s in states] for i in range(6)]
    times = np.arange(traj.segments) * traj.h
    opts = _suf_options(args)
    nominal = rb.suf_of_trajectory(model, *cols, times=times, opts=opts,
                                   workers=args.workers, audit_tol=args.audit_tol)
    out = _outdir(args)
    write_suf_profile(out / "suf_nominal.csv", nominal)
    legs = {}
    files = {"nominal": "suf_nominal.csv"}
    for leg in model.contact_names():
        prof = rb.leg_failure_analysis(model, *cols, leg=leg, times=times,
                                       opts=opts, workers=args.workers,
                                       audit_tol=args.audit_tol)
        fname = f"suf_{leg}.csv"
        write_suf_profile(out / fname, prof)
        files[leg] = fname
        excess = float((prof.rho - nominal.rho).max())
        legs[leg] = {**_profile_summary(prof),
                     "max_excess_over_nominal": excess,
                     "le_nominal": bool(excess <= 1e-6)}
        _note(f"legcheck {leg}: min {legs[leg]['min']:.4f} "
              f"excess {excess:.2e}")
    mins = {leg: legs[leg]["min"] for leg in legs}
    critical = min(mins, key=mins.get)
    tied = sorted(leg for leg in mins if mins[leg] <= mins[critical] + 1e-6)
    return write_report(out, {
        "command": "legcheck",
        "model": {"name": model.name, "hash": traj.model_hash},
        "task": traj.task,
        "nominal": _profile_summary(nominal),
        "legs": legs,
        "critical_leg": critical,
        "tie": len(tied) > 1,
        "tied_legs": tied,
        "files": files})


def cmd_oracle(args) -> int:
    model = _model_from_arg(args.model)
    traj = read_trajectory(args.trajectory, model)
    if not 1 <= args.knot <= traj.segments:
        raise ValidationError(f"knot: {args.knot} outside [1, {traj.segments}]")
    k = args.knot - 1
    q, v, vdot, tau, lam, act = traj.knot_states()[k]
    seed = traj.seed if args.seed is None else args.seed
    opts = _suf_options(args)
    knot = rb.suf_at_knot(model, q, v, vdot, tau, lam, act, opts=opts,
                          audit_tol=args.audit_tol)
    omin, vals = rb.suf_oracle(model, q, v, vdot, tau, lam, act,
                               n_dirs=args.n_dirs, audit_tol=args.audit_tol,
                               seed=seed)
    dirs = rb.oracle_directions(args.n_dirs, seed)
    out = _outdir(args)
    lines = ["i,ux,uy,uz,max_force"]
    for i, (u, val) in enumerate(zip(dirs, vals)):
        lines.append(f"{i},{_f(u[0])},{_f(u[1])},{_f(u[2])},{_f(val)}")
    with open(out / "directions.csv", "w") as f:
        f.write("\n".join(lines) + "\n")
    gap = float(omin - knot.rho)
    return write_report(out, {
        "command": "oracle",
        "model": {"name": model.name, "hash": traj.model_hash},
        "task": traj.task,
        "knot": args.knot,
        "seed": seed,
        "n_dirs": args.n_dirs,
        "rho": float(knot.rho),
        "status": knot.status,
        "oracle_min": float(omin),
        "gap": gap,
        "gap_rel": gap / max(float(omin), 1e-12),
        "bound_ok": bool(knot.rho <= omin + 1e-3),
        "files": {"directions": "directions.csv"}})


# ---------------------------------------------------------------------------
# argument parser


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--tol-feas", dest="tol_feas", type=float, default=None)
    common.add_argument("--tol-opt", dest="tol_opt", type=float, default=None)
    common.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    common.add_argument("--log-solver", dest="log_solver", default=None,
                        help="line-delimited JSON stream of outer iterations")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--trajectory", required=True)
    analysis.add_argument("--model", required=True,
                          help="built-in model name or model file")
    analysis.add_argument("--workers", type=int, default=4,
                          help="parallel per-knot margin solves")
    analysis.add_argument("--audit-tol", dest="audit_tol", type=float,
                          default=1e-3, help="nominal-dynamics audit tolerance")

    p = argparse.ArgumentParser(
        prog="locoplan",
        description="Trajectory optimization with force-disturbance margins.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", parents=[common],
                        help="solve a task for a nominal trajectory")
    sp.add_argument("--task", required=True, help="built-in task name or task file")
    sp.add_argument("--model", default=None, help="override the task's model")
    sp.add_argument("--objective", choices=("feasibility", "baseline"), default=None)
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("analyze", parents=[common, analysis],
                        help="per-knot disturbance margins of a trajectory")
    sp.add_argument("--gains", action="store_true",
                    help="also write the per-knot feedback gains")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("robustify", parents=[common],
                        help="re-plan a task maximizing the margins")
    sp.add_argument("--task", required=True)
    sp.add_argument("--model", default=None)
    sp.add_argument("--compare", action="store_true",
                    help="also emit the baseline trajectory and its margins")
    sp.add_argument("--gains", action="store_true")
    sp.add_argument("--workers", type=int, default=4)
    sp.add_argument("--audit-tol", dest="audit_tol", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_robustify)

    sp = sub.add_parser("legcheck", parents=[common, analysis],
                        help="margins with each leg's compensation disabled")
    sp.set_defaults(fn=cmd_legcheck)

    sp = sub.add_parser("oracle", parents=[common, analysis],
                        help="direction-sampled margin bound at one knot")
    sp.add_argument("--knot", type=int, required=True,
                    help="1-based knot index in [1, N]")
    sp.add_argument("--n-dirs", dest="n_dirs", type=int, default=200)
    sp.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, ValidationError) as e:
        _note(f"error: {e}")
        return EXIT_INPUT
    except FileNotFoundError as e:
        _note(f"error: {e}")
        return EXIT_INPUT
    except (DynamicsMismatch, InfeasibleNominal, UnknownLeg) as e:
        _note(f"audit failure: {e}")
        return EXIT_AUDIT
    except sv.CallbackError as e:
        _note(f"solver failure: {e}")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
