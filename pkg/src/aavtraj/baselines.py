"""Reference planners and the mission evaluator.

Greedy picks, each slot, the grid candidate that maximizes the summed
rate of still-active users at the post-move position. The genetic
algorithm searches directly over open-loop control sequences with the
same objective the trained policy descends, so the comparison is
apples to apples.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import Control, Scenario, ScenarioError, State, TrajectoryRecord, rates, rollout
from .smoothing import smoothness_penalty

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# control sources
# ---------------------------------------------------------------------------


class SequenceController:
    """Replays a fixed (T, 2) array of (v, theta) rows."""

    def __init__(self, controls: np.ndarray):
        self.controls = np.asarray(controls, dtype=np.float64).reshape(-1, 2)

    def __call__(self, t: int, x: State) -> Control:
        if t >= self.controls.shape[0]:
            raise ScenarioError(f"control sequence exhausted at step {t}")
        v, theta = self.controls[t]
        return Control(float(v), float(theta))


class ConstantController:
    """Same control every slot; (0, theta) hovers in place."""

    def __init__(self, v: float, theta: float):
        self.control = Control(float(v), float(theta))

    def __call__(self, t: int, x: State) -> Control:
        return self.control


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------


@dataclass
class GreedyConfig:
    """Candidate grid: headings even on [0, 2pi), speeds default to

    (0, v_max/2, v_max). Ties resolve to the lowest candidate index,
    speed-major then heading.
    """

    heading_grid: int = 64
    speed_grid: Optional[tuple] = None

    def __post_init__(self):
        if self.heading_grid < 1:
            raise ScenarioError("heading_grid must be >= 1")
        if self.speed_grid is not None:
            self.speed_grid = tuple(float(s) for s in self.speed_grid)


def greedy_action(x: State, scn: Scenario, cfg: GreedyConfig) -> Control:
    """One-step lookahead: maximize the summed active-user rate at the

    post-move position; hover at heading 0 when no user is active.
    """
    active = x.d > 0.0
    if not np.any(active):
        return Control(0.0, 0.0)
    speeds = np.asarray(
        cfg.speed_grid if cfg.speed_grid is not None else (0.0, scn.v_max / 2.0, scn.v_max)
    )
    if np.any(speeds < 0) or np.any(speeds > scn.v_max):
        raise ScenarioError("speed grid entries must lie in [0, v_max]")
    headings = TWO_PI * np.arange(cfg.heading_grid) / cfg.heading_grid
    cand_v = np.repeat(speeds, cfg.heading_grid)
    cand_th = np.tile(headings, speeds.size)
    moves = scn.tau * cand_v[:, None] * np.stack([np.cos(cand_th), np.sin(cand_th)], axis=1)
    scores = np.sum(rates(x.q + moves, scn)[:, active], axis=1)
    best = int(np.argmax(scores))  # first max = lowest candidate index
    return Control(float(cand_v[best]), float(cand_th[best]))


class GreedyController:
    def __init__(self, scn: Scenario, cfg: Optional[GreedyConfig] = None):
        self.scn = scn
        self.cfg = cfg if cfg is not None else GreedyConfig()

    def __call__(self, t: int, x: State) -> Control:
        return greedy_action(x, self.scn, self.cfg)


# ---------------------------------------------------------------------------
# genetic algorithm over control sequences
# ---------------------------------------------------------------------------


@dataclass
class GaConfig:
    population: int = 50
    generations: int = 300
    tournament_size: int = 3
    crossover_rate: float = 0.9
    mutation_std: tuple = (0.02, 0.3)
    elitism: int = 1
    chromosome_length: int = 500
    stop_eps: float = 1e-3
    beta: float = 1.0
    alpha: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.generations < 0:
            raise ScenarioError("population must be >= 2 and generations >= 0")
        if not 1 <= self.tournament_size <= self.population:
            raise ScenarioError("tournament_size must be in [1, population]")
        if not 0 <= self.elitism < self.population:
            raise ScenarioError("elitism must be in [0, population)")
        if self.chromosome_length < 1:
            raise ScenarioError("chromosome_length must be >= 1")


def _fitness(chrom: np.ndarray, scn: Scenario, cfg: GaConfig) -> float:
    traj = rollout(SequenceController(chrom), scn, cfg.chromosome_length, cfg.stop_eps)
    j = float(sum(traj.stage_costs)) + cfg.beta * smoothness_penalty(
        traj.controls_array(), cfg.alpha
    )
    return -j


def _tournament(rng: np.random.Generator, fitness: np.ndarray, size: int) -> int:
    idx = rng.integers(0, fitness.size, size=size)
    return int(idx[np.argmax(fitness[idx])])


def ga_optimize(
    scn: Scenario, cfg: GaConfig, *, timing_ms: Optional[list] = None
) -> tuple[np.ndarray, list]:
    """Evolve open-loop control sequences; returns the best chromosome

    (T, 2) and the best-so-far fitness per generation (generation 0
    first, hence length generations + 1). Deterministic in cfg.seed.
    When timing_ms is a list it receives the cumulative wall-clock in
    ms after each generation's evaluation, aligned with the fitness log.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    t_len = cfg.chromosome_length
    pop = np.empty((cfg.population, t_len, 2))
    pop[:, :, 0] = rng.uniform(0.0, scn.v_max, size=(cfg.population, t_len))
    pop[:, :, 1] = rng.uniform(0.0, TWO_PI, size=(cfg.population, t_len))
    fitness = np.array([_fitness(c, scn, cfg) for c in pop])

    best_idx = int(np.argmax(fitness))
    best = pop[best_idx].copy()
    best_fit = float(fitness[best_idx])
    log = [best_fit]
    if timing_ms is not None:
        timing_ms.append(1e3 * (time.perf_counter() - t0))

    v_std, th_std = cfg.mutation_std
    for _ in range(cfg.generations):
        order = np.argsort(-fitness, kind="stable")
        children = [pop[i].copy() for i in order[: cfg.elitism]]
        while len(children) < cfg.population:
            pa = pop[_tournament(rng, fitness, cfg.tournament_size)]
            pb = pop[_tournament(rng, fitness, cfg.tournament_size)]
            ca, cb = pa.copy(), pb.copy()
            if t_len > 1 and rng.random() < cfg.crossover_rate:
                cut = int(rng.integers(1, t_len))
                ca[:cut], cb[:cut] = pb[:cut].copy(), pa[:cut].copy()
            for child in (ca, cb):
                child[:, 0] = np.clip(
                    child[:, 0] + rng.normal(0.0, v_std, t_len), 0.0, scn.v_max
                )
                child[:, 1] = child[:, 1] + rng.normal(0.0, th_std, t_len)
            children.append(ca)
            if len(children) < cfg.population:
                children.append(cb)
        pop = np.stack(children)
        fitness = np.array([_fitness(c, scn, cfg) for c in pop])
        gen_best = int(np.argmax(fitness))
        if float(fitness[gen_best]) > best_fit:
            best_fit = float(fitness[gen_best])
            best = pop[gen_best].copy()
        log.append(best_fit)
        if timing_ms is not None:
            timing_ms.append(1e3 * (time.perf_counter() - t0))

    return best, log


# ---------------------------------------------------------------------------
# mission evaluation
# ---------------------------------------------------------------------------


@dataclass
class MissionMetrics:
    """Per-trial summary used by the sweep harness."""

    completion_steps: list
    mean_completion_steps: float
    mission_steps: int
    completed: bool
    avg_rate: float


def mission_metrics(traj: TrajectoryRecord, scn: Scenario, t_max: int) -> MissionMetrics:
    """Summarize a rollout. Users not individually drained by mission end

    get the termination step (residual below the stop threshold); in an
    incomplete mission unfinished users take the t_max sentinel. The
    average rate is taken over active users at pre-step positions,
    skipping slots where nobody is active.
    """
    completed = traj.terminated_step is not None
    steps_per_user = []
    for cs in traj.completion_step:
        if cs is None:
            cs = traj.terminated_step if completed else t_max
        steps_per_user.append(int(cs))
    mission_steps = max(steps_per_user) if completed else t_max

    step_means = []
    for t in range(traj.steps):
        d = traj.states[t].d
        active = d > 0.0
        if np.any(active):
            step_means.append(float(np.mean(rates(traj.states[t].q, scn)[active])))
    avg_rate = float(np.mean(step_means)) if step_means else 0.0

    return MissionMetrics(
        completion_steps=steps_per_user,
        mean_completion_steps=float(np.mean(steps_per_user)),
        mission_steps=int(mission_steps),
        completed=bool(completed),
        avg_rate=avg_rate,
    )


def evaluate_policy(policy, scn: Scenario, t_max: int, stop_eps: float) -> MissionMetrics:
    """Roll out any (t, state) -> Control source and summarize it."""
    traj = rollout(policy, scn, t_max, stop_eps)
    return mission_metrics(traj, scn, t_max)
