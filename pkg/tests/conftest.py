"""Shared fixtures: models, the standing pose, and a session-wide cache of
task solves so expensive trajectories are computed once and reused."""
import time
from dataclasses import replace

import numpy as np
import pytest

from locoplan import builtin_model
from locoplan import dynamics as dyn
from locoplan import robustness as rb
from locoplan import solver as sv
from locoplan import tasks as tk


@pytest.fixture(scope="session")
def miniquad():
    return builtin_model("miniquad")


@pytest.fixture(scope="session")
def standing_q(miniquad):
    return tk.initial_configuration(miniquad, tk.builtin_tasks()["hold"])


class SolveStore:
    """Lazy per-session cache of built problems, solutions and margin
    profiles, with the wall time of every solve recorded for the runtime
    budgets."""

    def __init__(self):
        self.specs = tk.builtin_tasks()
        self.built = {}
        self.results = {}
        self.solve_times = {}
        self.profiles = {}
        self.profile_times = {}

    def build(self, name, objective):
        key = (name, objective)
        if key not in self.built:
            self.built[key] = tk.build_problem(replace(self.specs[name],
                                                       objective=objective))
        return self.built[key]

    def solve(self, name, objective="baseline"):
        key = (name, objective)
        if key not in self.results:
            built = self.build(name, objective)
            nlp = sv.NlpProblem.from_transcribed(built.problem)
            if objective == "robust":
                # margin solves warm-start from the task's nominal solution
                base = self.solve(name, "baseline")
                x0 = rb.seed_from_plan(built.problem,
                                       self.build(name, "baseline").problem, base.x)
            else:
                x0 = tk.initial_guess(built)
            t0 = time.perf_counter()
            self.results[key] = sv.solve(nlp, x0, built.options)
            self.solve_times[key] = time.perf_counter() - t0
        return self.results[key]

    def knot_states(self, name, objective="baseline"):
        built = self.build(name, objective)
        res = self.solve(name, objective)
        lay = built.problem.layout
        h = lay.grid.h
        N = lay.grid.segments
        x = res.x
        qs = [x[lay.q(k)] for k in range(N)]
        vs = [x[lay.v(k)] for k in range(N)]
        vds = [(x[lay.v(k + 1)] - x[lay.v(k)]) / h for k in range(N)]
        taus = [x[lay.tau(k)] for k in range(N)]
        lams = [x[lay.lam(k)] for k in range(N)]
        acts = [lay.active[k] for k in range(N)]
        return qs, vs, vds, taus, lams, acts

    def profile(self, name, objective="baseline"):
        key = (name, objective)
        if key not in self.profiles:
            built = self.build(name, objective)
            cols = self.knot_states(name, objective)
            t0 = time.perf_counter()
            self.profiles[key] = rb.suf_of_trajectory(
                built.model, *cols, times=built.problem.layout.grid.times()[:-1],
                audit_tol=1e-3)
            self.profile_times[key] = time.perf_counter() - t0
        return self.profiles[key]


@pytest.fixture(scope="session")
def store():
    return SolveStore()
