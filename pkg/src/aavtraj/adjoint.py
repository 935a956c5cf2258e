"""Exact reverse-mode gradients of the rollout objective.

Both sweeps walk a recorded trajectory tape backwards with explicit
co-state algebra; no general-purpose autodiff is involved, so every
intermediate is inspectable. The open-loop sweep treats the recorded
controls as free variables and yields the classic costate recursion
plus per-step action gradients. The closed-loop sweep additionally
chains through the control law, which is what makes its parameter
gradient match finite differences of the training objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import (
    Control,
    NumericFailure,
    Scenario,
    ScenarioError,
    State,
    TrajectoryRecord,
    rate_gradients,
    stage_cost,
    step,
)
from .policy import PolicyParams, observation_jacobian, observe, vjp
from .smoothing import smoothness_grads, smoothness_penalty


def jacobian_state(x: State, u: Control, mask: np.ndarray, scn: Scenario) -> np.ndarray:
    """d next_state / d state at (x, u) given the recorded clamp mask.

    Block structure: the position rows are the identity (position does
    not feed back on itself beyond translation), clamped backlog rows
    are zero, active backlog rows couple to position through the rate
    gradient at the pre-step position.
    """
    k = scn.k
    mask = np.asarray(mask, dtype=np.float64).reshape(k)
    jac = np.zeros((2 + k, 2 + k))
    jac[0, 0] = 1.0
    jac[1, 1] = 1.0
    jac[2:, :2] = -mask[:, None] * scn.tau * rate_gradients(x.q, scn)
    jac[2:, 2:] = np.diag(mask)
    return jac


def jacobian_control(x: State, u: Control, scn: Scenario) -> np.ndarray:
    """d next_state / d control at (x, u); backlog rows are zero because

    the drain rate uses the pre-step position.
    """
    k = scn.k
    jac = np.zeros((2 + k, 2))
    c, s = np.cos(u.theta), np.sin(u.theta)
    jac[0, 0] = scn.tau * c
    jac[1, 0] = scn.tau * s
    jac[0, 1] = -u.v * scn.tau * s
    jac[1, 1] = u.v * scn.tau * c
    return jac


def cost_grad_state(x: State, scn: Scenario) -> np.ndarray:
    """Gradient of the stage cost in the state; the distance term takes

    the zero subgradient when the vehicle sits exactly on a user.
    """
    k = scn.k
    grad = np.zeros(2 + k)
    grad[2:] = 1.0
    if scn.dist_weight > 0.0:
        diff = x.q - scn.user_positions
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        nonzero = dist > 0.0
        units = np.zeros_like(diff)
        units[nonzero] = diff[nonzero] / dist[nonzero, None]
        grad[:2] = scn.dist_weight * np.sum(units, axis=0)
    return grad


def _check_record(traj: TrajectoryRecord) -> int:
    t = traj.steps
    if len(traj.states) != t + 1 or len(traj.active_masks) != t or len(traj.stage_costs) != t:
        raise ScenarioError("trajectory record has inconsistent lengths")
    return t


def backward_openloop(traj: TrajectoryRecord, scn: Scenario) -> tuple[list, np.ndarray]:
    """Costate recursion over the tape with the controls held as free

    variables. Returns (costates, action_grads): costates[t] is the total
    derivative of the task cost in states[t] (length T+1) and
    action_grads[t] = B_t^T costate[t+1] is d J / d u_t (shape (T, 2)).
    The initial state carries no direct cost term, so costates[0] is the
    pure dynamics pullback.
    """
    t_len = _check_record(traj)
    n = 2 + scn.k
    if t_len == 0:
        return [np.zeros(n)], np.zeros((0, 2))
    lam = cost_grad_state(traj.states[t_len], scn)
    costates = [lam]
    grads = np.zeros((t_len, 2))
    for t in range(t_len - 1, -1, -1):
        b_mat = jacobian_control(traj.states[t], traj.controls[t], scn)
        grads[t] = b_mat.T @ lam
        a_mat = jacobian_state(traj.states[t], traj.controls[t], traj.active_masks[t], scn)
        lam = a_mat.T @ lam
        if t >= 1:
            lam = lam + cost_grad_state(traj.states[t], scn)
        costates.append(lam)
    costates.reverse()
    return costates, grads


def hamiltonian(x: State, u: Control, lam_next: np.ndarray, scn: Scenario) -> float:
    """Stage cost plus the costate-weighted transition, the scalar whose

    control derivative the action gradients realize.
    """
    lam_next = np.asarray(lam_next, dtype=np.float64).reshape(2 + scn.k)
    x_next, _ = step(x, u, scn)
    return stage_cost(x, scn) + float(lam_next @ x_next.as_vector())


@dataclass
class GradientBundle:
    """Everything the optimizer needs from one reverse sweep."""

    action_grads: np.ndarray
    param_grad: np.ndarray
    j_task: float
    j_smooth: float
    j_total: float


def backward_closedloop(
    traj: TrajectoryRecord,
    params: PolicyParams,
    scn: Scenario,
    beta: float = 0.0,
    alpha: float = 1e-3,
) -> GradientBundle:
    """Reverse sweep of the full training objective through the policy.

    The tape must come from rolling out this same params object. Unlike
    the open-loop sweep, the costate here also flows backwards through
    the control law (observation Jacobian composed with the policy VJP),
    and the smoothness partials enter each action gradient directly.
    """
    t_len = _check_record(traj)
    p = params.flat.size
    controls = traj.controls_array()
    j_task = float(sum(traj.stage_costs))
    j_smooth = smoothness_penalty(controls, alpha)
    j_total = j_task + beta * j_smooth
    if t_len == 0:
        return GradientBundle(np.zeros((0, 2)), np.zeros(p), j_task, j_smooth, j_total)

    s_grads = smoothness_grads(controls, alpha) if beta != 0.0 else np.zeros((t_len, 2))
    obs_jac = observation_jacobian(scn)
    param_grad = np.zeros(p)
    action_grads = np.zeros((t_len, 2))

    lam = cost_grad_state(traj.states[t_len], scn)
    for t in range(t_len - 1, -1, -1):
        x = traj.states[t]
        u = traj.controls[t]
        b_mat = jacobian_control(x, u, scn)
        g_u = b_mat.T @ lam + beta * s_grads[t]
        action_grads[t] = g_u
        obs = observe(x, scn)
        p_grad, o_grad = vjp(params, obs, g_u)
        param_grad += p_grad
        a_mat = jacobian_state(x, u, traj.active_masks[t], scn)
        lam = a_mat.T @ lam + obs_jac.T @ o_grad
        if t >= 1:
            lam = lam + cost_grad_state(x, scn)
        if not np.all(np.isfinite(lam)):
            raise NumericFailure(t, "backward")

    if not np.all(np.isfinite(param_grad)):
        raise NumericFailure(0, "backward")
    return GradientBundle(action_grads, param_grad, j_task, j_smooth, j_total)
