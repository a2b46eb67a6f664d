"""Exact simulation of the multistage PS queue and the freelance-website model.

Both simulators use the direct (Gillespie) method: draw the time to the next
event from the total rate, then pick the event category in proportion to
its rate.  Uniform variates come in blocks from a PCG64 generator seeded
with a 64-bit integer; replica ``k`` of a run uses ``seed ^ k``.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ModelError,
    ModelParams,
    ScenarioConfig,
    Trajectory,
    fmt,
    time_grid,
)

_BLOCK = 8192


class UnequalServiceRates(ModelError):
    pass


class WrongMode(ModelError):
    pass


class ExitCause(enum.Enum):
    IMPATIENCE = "impatience"
    FULL_APPLICATIONS = "full_applications"


@dataclass(frozen=True)
class JobRecord:
    arrival_time: float
    applications: int
    exit_cause: ExitCause
    winner_applicant: int | None
    # Jobs already on the board at time 0 have an unknown arrival time.
    initial: bool = False


@dataclass
class SimResult:
    trajectory: Trajectory
    event_counts: dict
    seed: int
    jobs: list[JobRecord] | None = None
    time_average: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # Freelance mode: (arrival_time, applications, initial) of jobs still on the board at T.
    open_jobs: list[tuple[float, int, bool]] | None = None


class _Uniforms:
    """Block-buffered U(0,1) stream."""

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._buf: list[float] = []
        self._pos = 0

    def __call__(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._rng.random(_BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


def replica_seed(base_seed: int, k: int) -> int:
    return (int(base_seed) ^ int(k)) & (2**64 - 1)


def _integer_state(values, stages: int) -> list[int]:
    q = [float(v) for v in values]
    if len(q) != stages:
        raise ModelError(f"initial state has {len(q)} coordinates, expected {stages}")
    if any(v < 0 or v != int(v) for v in q):
        raise ModelError(f"stochastic initial state must be nonnegative integers, got {q}")
    return [int(v) for v in q]


def _gillespie_ps(lam, mu, nu, q0, horizon, grid, seed) -> SimResult:
    stages = len(mu)
    q = list(q0)
    n = sum(q)
    uni = _Uniforms(seed)
    arrivals = 0
    served = [0] * stages
    abandoned = [0] * stages
    area = [0.0] * stages
    busy = 0.0
    samples = np.empty((len(grid), stages))
    g = 0
    n_grid = len(grid)
    t = 0.0
    while True:
        weighted = 0.0
        for i in range(stages):
            weighted += mu[i] * q[i]
        service_rate = weighted / n if n else 0.0
        total = lam + service_rate + nu * n
        t_next = t - math.log(1.0 - uni()) / total
        # Grid samples read the state just before each grid time.
        while g < n_grid and grid[g] < t_next:
            samples[g] = q
            g += 1
        end = min(t_next, horizon)
        dt = end - t
        for i in range(stages):
            area[i] += q[i] * dt
        if n:
            busy += dt
        if t_next > horizon:
            break
        t = t_next
        x = uni() * total
        if x < lam:
            q[0] += 1
            n += 1
            arrivals += 1
            continue
        x -= lam
        if x < service_rate:
            x *= n
            i = 0
            while i < stages - 1 and x >= mu[i] * q[i]:
                x -= mu[i] * q[i]
                i += 1
            while q[i] == 0:  # guard against round-off at the category boundary
                i -= 1
            served[i] += 1
            q[i] -= 1
            if i + 1 < stages:
                q[i + 1] += 1
            else:
                n -= 1
            continue
        x = (x - service_rate) / nu
        i = 0
        while i < stages - 1 and x >= q[i]:
            x -= q[i]
            i += 1
        while q[i] == 0:
            i -= 1
        abandoned[i] += 1
        q[i] -= 1
        n -= 1
    while g < n_grid:
        samples[g] = q
        g += 1
    counts = {
        "arrivals": arrivals,
        "service_completions": served,
        "abandonments": abandoned,
        "busy_time": busy,
        "horizon": horizon,
        "final_state": list(q),
        "initial_state": list(q0),
    }
    return SimResult(
        trajectory=Trajectory(grid, samples),
        event_counts=counts,
        seed=seed,
        time_average=np.array(area) / horizon,
    )


def simulate_ps(config: ScenarioConfig, seed: int | None = None) -> SimResult:
    """One CTMC path of the multistage PS queue with impatience."""
    p = config.params
    seed = config.seed if seed is None else seed
    q0 = _integer_state(config.initial_state, p.stages)
    grid = time_grid(config.horizon, config.grid_step)
    return _gillespie_ps(p.lam, list(p.mu), p.nu, q0, config.horizon, grid, seed)


def _gillespie_freelance(lam, mu, nu, stages, q0, horizon, grid, seed) -> SimResult:
    uni = _Uniforms(seed)
    # classes[i] holds ids of jobs with i applications; jobs in a class are exchangeable.
    classes: list[list[int]] = [[] for _ in range(stages)]
    born: list[float] = []
    initial: list[bool] = []
    for i, count in enumerate(q0):
        for _ in range(count):
            classes[i].append(len(born))
            born.append(0.0)
            initial.append(True)
    counts = [len(c) for c in classes]
    n = sum(counts)
    jobs: list[JobRecord] = []
    job_arrivals = 0
    freelancers = 0
    idle_visits = 0
    applied = [0] * stages
    abandoned = [0] * stages
    area = [0.0] * stages
    busy = 0.0
    samples = np.empty((len(grid), stages))
    g = 0
    n_grid = len(grid)
    t = 0.0

    def pick() -> tuple[int, int]:
        # Uniform job: class by weight Q_i / |Q|, then a uniform member.
        k = int(uni() * n)
        if k >= n:
            k = n - 1
        i = 0
        while k >= counts[i]:
            k -= counts[i]
            i += 1
        return i, k

    def remove(i: int, k: int) -> int:
        members = classes[i]
        job = members[k]
        members[k] = members[-1]
        members.pop()
        counts[i] -= 1
        return job

    def finish(job: int, apps: int, cause: ExitCause) -> None:
        winner = int(uni() * apps) if apps else None
        if winner is not None and winner >= apps:
            winner = apps - 1
        jobs.append(JobRecord(born[job], apps, cause, winner, initial[job]))

    while True:
        total = lam + mu + nu * n
        t_next = t - math.log(1.0 - uni()) / total
        while g < n_grid and grid[g] < t_next:
            samples[g] = counts
            g += 1
        end = min(t_next, horizon)
        dt = end - t
        for i in range(stages):
            area[i] += counts[i] * dt
        if n:
            busy += dt
        if t_next > horizon:
            break
        t = t_next
        x = uni() * total
        if x < lam:
            classes[0].append(len(born))
            born.append(t)
            initial.append(False)
            counts[0] += 1
            n += 1
            job_arrivals += 1
        elif x < lam + mu:
            freelancers += 1
            if n == 0:
                idle_visits += 1
                continue
            i, k = pick()
            job = remove(i, k)
            applied[i] += 1
            if i + 1 < stages:
                classes[i + 1].append(job)
                counts[i + 1] += 1
            else:
                n -= 1
                finish(job, stages, ExitCause.FULL_APPLICATIONS)
        else:
            i, k = pick()
            job = remove(i, k)
            abandoned[i] += 1
            n -= 1
            finish(job, i, ExitCause.IMPATIENCE)
    while g < n_grid:
        samples[g] = counts
        g += 1
    open_jobs = sorted(
        (born[job], i, initial[job]) for i in range(stages) for job in classes[i]
    )
    event_counts = {
        "arrivals": job_arrivals,
        "freelancer_arrivals": freelancers,
        "idle_freelancer_visits": idle_visits,
        "service_completions": applied,
        "abandonments": abandoned,
        "busy_time": busy,
        "horizon": horizon,
        "final_state": list(counts),
        "initial_state": list(q0),
    }
    return SimResult(
        trajectory=Trajectory(grid, samples),
        event_counts=event_counts,
        seed=seed,
        jobs=jobs,
        time_average=np.array(area) / horizon,
        open_jobs=open_jobs,
    )


def _freelancer_rate(params: ModelParams) -> float:
    if any(m != params.mu[0] for m in params.mu):
        raise UnequalServiceRates(
            f"the freelance model needs equal stage rates, got {list(params.mu)}"
        )
    return params.mu[0]


def simulate_freelance(config: ScenarioConfig, seed: int | None = None) -> SimResult:
    """One path of the freelance-website model (job classes by application count)."""
    p = config.params
    mu = _freelancer_rate(p)
    seed = config.seed if seed is None else seed
    q0 = _integer_state(config.initial_state, p.stages)
    grid = time_grid(config.horizon, config.grid_step)
    return _gillespie_freelance(p.lam, mu, p.nu, p.stages, q0, config.horizon, grid, seed)


def scaled_simulation(
    config: ScenarioConfig, r: float, mode: str = "ps", seed: int | None = None
) -> SimResult:
    """Run the model with impatience ``nu / r`` over ``[0, r T]`` and rescale.

    The fluid initial state ``z(0)`` becomes ``round(r z(0))`` customers.
    The returned trajectory is ``Q(r t) / r`` on the configured grid,
    time averages are divided by ``r``, and job arrival times are in fluid
    time units.
    """
    if not r > 0:
        raise ModelError("scale r must be positive")
    p = config.params
    seed = config.seed if seed is None else seed
    q0 = [int(round(r * v)) for v in config.initial_state]
    fluid_grid = time_grid(config.horizon, config.grid_step)
    grid = r * fluid_grid
    horizon = r * config.horizon
    if mode == "ps":
        res = _gillespie_ps(p.lam, list(p.mu), p.nu / r, q0, horizon, grid, seed)
    elif mode == "freelance":
        mu = _freelancer_rate(p)
        res = _gillespie_freelance(p.lam, mu, p.nu / r, p.stages, q0, horizon, grid, seed)
        res.jobs = [
            JobRecord(j.arrival_time / r, j.applications, j.exit_cause, j.winner_applicant, j.initial)
            for j in res.jobs
        ]
        res.open_jobs = [(t / r, a, init) for t, a, init in res.open_jobs]
    else:
        raise ModelError(f"unknown simulation mode {mode!r}")
    res.trajectory = Trajectory(fluid_grid, res.trajectory.states / r)
    res.time_average = res.time_average / r
    return res


def scaled_run(config: ScenarioConfig, r: float, seed: int | None = None) -> Trajectory:
    """Fluid-scaled PS trajectory ``Q^r(r t) / r`` on the configured grid."""
    return scaled_simulation(config, r, "ps", seed).trajectory


def run_replicas(config: ScenarioConfig, mode: str = "ps", r: float | None = None) -> list[SimResult]:
    """``config.replicas`` independent runs with seeds ``config.seed ^ k``."""
    out = []
    for k in range(config.replicas):
        seed = replica_seed(config.seed, k)
        if r is not None:
            out.append(scaled_simulation(config, r, mode, seed))
        elif mode == "ps":
            out.append(simulate_ps(config, seed))
        elif mode == "freelance":
            out.append(simulate_freelance(config, seed))
        else:
            raise ModelError(f"unknown simulation mode {mode!r}")
    return out


def flow_balance(result: SimResult) -> list[int]:
    """Per-stage ``Q_i(T) - Q_i(0) - (inflow_i - outflow_i)``; zero on every path."""
    c = result.event_counts
    served, abandoned = c["service_completions"], c["abandonments"]
    out = []
    for i in range(len(served)):
        inflow = c["arrivals"] if i == 0 else served[i - 1]
        outflow = served[i] + abandoned[i]
        out.append(c["final_state"][i] - c["initial_state"][i] - (inflow - outflow))
    return out


def sup_distance(traj: Trajectory, reference: Trajectory) -> float:
    """``max_t |traj(t) - reference(t)|_1`` over a shared grid."""
    if len(traj) != len(reference) or not np.allclose(traj.times, reference.times, rtol=1e-12, atol=1e-12):
        raise ModelError("trajectories must share a time grid")
    return float(np.abs(traj.states - reference.states).sum(axis=1).max())


def job_outcome_stats(
    result: SimResult, include_initial: bool = False, arrived_by: float | None = None
) -> dict:
    """Exit fractions by application count and the two job-probability estimators.

    Only finished jobs are counted.  ``arrived_by`` keeps jobs that arrived
    no later than that time, which leaves room for them to finish before the
    horizon; ``censored`` counts the ones that had not.  ``per_job`` averages
    ``1/applications`` over jobs (0 for jobs nobody applied to);
    ``per_freelancer`` divides the number of jobs with an applicant by the
    number of applications.
    """
    if result.jobs is None:
        raise WrongMode("job statistics need a freelance-mode result")
    stages = result.trajectory.stages

    def keep(arrival: float, initial: bool) -> bool:
        return (include_initial or not initial) and (arrived_by is None or arrival <= arrived_by)

    jobs = [j for j in result.jobs if keep(j.arrival_time, j.initial)]
    censored = sum(1 for t, _, init in (result.open_jobs or []) if keep(t, init))
    by_count = np.zeros(stages + 1)
    share = 0.0
    share_sq = 0.0
    applications = 0
    for j in jobs:
        by_count[j.applications] += 1
        v = 1.0 / j.applications if j.applications else 0.0
        share += v
        share_sq += v * v
        applications += j.applications
    n = len(jobs)
    mean = share / n if n else float("nan")
    var = (share_sq / n - mean * mean) if n else float("nan")
    placed = n - by_count[0]
    return {
        "jobs": n,
        "censored": censored,
        "exit_fractions": (by_count / n).tolist() if n else [float("nan")] * (stages + 1),
        "per_job": mean,
        "per_job_se_iid": math.sqrt(max(var, 0.0) / n) if n > 1 else float("nan"),
        "per_freelancer": float(placed / applications) if applications else float("nan"),
        "applications": applications,
    }


def write_jobs_csv(path: str | Path, jobs: list[JobRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arrival_time", "applications", "exit_cause"])
        for j in jobs:
            w.writerow([fmt(j.arrival_time), j.applications, j.exit_cause.value])


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
