"""Gradient-descent training of the control law on a single scenario.

Each iteration rolls the current policy out, runs the closed-loop
reverse sweep for an exact parameter gradient, rescales it to a norm
cap and applies one optimizer step. Training stops early once the
objective has moved less than a threshold for a fixed number of
consecutive iterations. A numeric blow-up triggers one retry from
scratch at half the learning rate before the run is declared failed.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .adjoint import backward_closedloop
from .env import NumericFailure, Scenario, ScenarioError, rollout
from .policy import PolicyController, PolicyParams, init_params

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training aborted after the retry budget; carries the partial log."""

    def __init__(self, msg: str, log: "TrainingLog"):
        super().__init__(msg)
        self.log = log


@dataclass
class TrainConfig:
    max_iters: int = 2000
    t_max: int = 500
    stop_eps: float = 1e-3
    early_stop_delta: float = 1e-3
    early_stop_patience: int = 5
    beta: float = 1.0
    alpha: float = 1e-3
    clip_threshold: float = 10.0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple = (64, 64, 32)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.optimizer not in ("adam", "sgd"):
            raise ScenarioError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iters < 1 or self.t_max < 1 or self.early_stop_patience < 1:
            raise ScenarioError("max_iters, t_max and early_stop_patience must be >= 1")
        if self.learning_rate <= 0 or self.clip_threshold <= 0 or self.stop_eps <= 0:
            raise ScenarioError("learning_rate, clip_threshold and stop_eps must be > 0")
        if self.early_stop_delta < 0:
            raise ScenarioError("early_stop_delta must be >= 0 (0 disables early stop)")


@dataclass
class IterationRecord:
    iteration: int
    j_task: float
    j_smooth: float
    j_total: float
    grad_norm_pre: float
    grad_norm_post: float
    ms: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    learning_rate: float = 0.0
    seed: int = 0

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def wallclock_ms(self) -> float:
        return float(sum(r.ms for r in self.rows))


def clip_gradient(grad: np.ndarray, threshold: float) -> np.ndarray:
    """Rescale to norm <= threshold without changing direction."""
    if threshold <= 0:
        raise ScenarioError("clip threshold must be > 0")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= threshold or norm == 0.0:
        return grad.copy()
    return grad * (threshold / norm)


@dataclass
class OptState:
    """Optimizer scratch: step count plus Adam moments when applicable."""

    mode: str
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def init_opt_state(mode: str, n_params: int) -> OptState:
    if mode == "adam":
        return OptState(mode="adam", m=np.zeros(n_params), v=np.zeros(n_params))
    if mode == "sgd":
        return OptState(mode="sgd")
    raise ScenarioError(f"unknown optimizer {mode!r}")


def optimizer_step(
    flat: np.ndarray, grad: np.ndarray, state: OptState, lr: float
) -> tuple[np.ndarray, OptState]:
    """One deterministic update; inputs are never mutated."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericFailure(state.step, "optimizer")
    if state.mode == "sgd":
        return flat - lr * grad, OptState(mode="sgd", step=state.step + 1)
    t = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_flat = flat - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_flat, OptState(mode="adam", step=t, m=m, v=v)


def _train_once(scn: Scenario, cfg: TrainConfig, lr: float) -> tuple[PolicyParams, TrainingLog]:
    params = init_params(cfg.seed, scn.k, hidden=cfg.hidden, v_max=scn.v_max)
    opt = init_opt_state(cfg.optimizer, params.flat.size)
    log = TrainingLog(learning_rate=lr, seed=cfg.seed)
    consecutive = 0
    prev_j: Optional[float] = None

    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        try:
            traj = rollout(PolicyController(params, scn), scn, cfg.t_max, cfg.stop_eps)
            if traj.steps == 0:
                # nothing left to collect at mission start: no iteration to log
                log.converged = True
                log.stop_reason = "mission_complete_at_start"
                return params, log
            bundle = backward_closedloop(traj, params, scn, beta=cfg.beta, alpha=cfg.alpha)
            pre = float(np.linalg.norm(bundle.param_grad))
            clipped = clip_gradient(bundle.param_grad, cfg.clip_threshold)
            post = float(np.linalg.norm(clipped))
            new_flat, opt = optimizer_step(params.flat, clipped, opt, lr)
        except NumericFailure as exc:
            exc.log = log  # partial log for diagnostics
            raise
        ms = (time.perf_counter() - t0) * 1e3
        log.rows.append(
            IterationRecord(it, bundle.j_task, bundle.j_smooth, bundle.j_total, pre, post, ms)
        )
        params = replace(params, flat=new_flat)
        if prev_j is not None and abs(bundle.j_total - prev_j) < cfg.early_stop_delta:
            consecutive += 1
        else:
            consecutive = 0
        prev_j = bundle.j_total
        if consecutive >= cfg.early_stop_patience:
            log.converged = True
            log.stop_reason = "early_stop"
            return params, log

    log.converged = False
    log.stop_reason = "max_iters"
    return params, log


def train(scn: Scenario, cfg: TrainConfig) -> tuple[PolicyParams, TrainingLog]:
    """Run training; on numeric failure retry once at half the rate."""
    try:
        return _train_once(scn, cfg, cfg.learning_rate)
    except NumericFailure:
        pass
    try:
        return _train_once(scn, cfg, cfg.learning_rate / 2.0)
    except NumericFailure as exc:
        log = getattr(exc, "log", TrainingLog())
        raise TrainingError(
            f"training failed twice with non-finite values (last at step {exc.step}, "
            f"{exc.where}); see attached log",
            log,
        ) from exc


TRAINING_LOG_COLUMNS = (
    "iteration",
    "j_task",
    "j_smooth",
    "j_total",
    "grad_norm_pre",
    "grad_norm_post",
    "ms",
)


def save_training_log(log: TrainingLog, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for r in log.rows:
            writer.writerow(
                [r.iteration, repr(r.j_task), repr(r.j_smooth), repr(r.j_total),
                 repr(r.grad_norm_pre), repr(r.grad_norm_post), repr(r.ms)]
            )
