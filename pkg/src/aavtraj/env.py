"""Data-collection environment: scenario, smooth dynamics, rollout tape.

A single aerial vehicle flies at a fixed altitude over K ground users.
Each user holds a data backlog that drains through a distance-dependent
line-of-sight uplink rate while the vehicle steers with a speed/heading
control. The transition map is smooth everywhere except the backlog
clamp at zero, so exact derivatives exist step by step as long as the
clamp branch taken in the forward pass is recorded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

LN2 = math.log(2.0)


class ScenarioError(ValueError):
    """Invalid scenario data or operation arguments."""


class NumericFailure(RuntimeError):
    """Non-finite value produced during simulation or differentiation."""

    def __init__(self, step: int, where: str = "rollout"):
        super().__init__(f"non-finite value at step {step} ({where})")
        self.step = step
        self.where = where


# ---------------------------------------------------------------------------
# scenario and state containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Static problem instance: user layout, backlogs and radio physics.

    Attributes
    ----------
    user_positions : (K, 2) array of ground user coordinates.
    demands : (K,) array of initial data backlogs, non-negative.
    area_side : side length of the square operating region centred at 0.
    eta : reference SNR numerator (transmit power folded with channel gain).
    sigma2 : noise power at the receiver.
    altitude : fixed flight height of the vehicle.
    bandwidth : total uplink bandwidth, split evenly across the K users.
    tau : slot duration.
    v_max : speed limit of the vehicle.
    dist_weight : weight of the distance shaping term in the stage cost.
    seed : RNG seed the instance was generated from, None if hand built.
    """

    user_positions: np.ndarray
    demands: np.ndarray
    area_side: float
    eta: float = 1.0
    sigma2: float = 0.1
    altitude: float = 1.0
    bandwidth: Optional[float] = None
    tau: float = 1.0
    v_max: float = 0.2
    dist_weight: float = 0.01
    seed: Optional[int] = None

    def __post_init__(self):
        users = np.atleast_2d(np.asarray(self.user_positions, dtype=np.float64))
        demands = np.asarray(self.demands, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "user_positions", users)
        object.__setattr__(self, "demands", demands)
        if self.bandwidth is None:
            # per-user bandwidth defaults to 1
            object.__setattr__(self, "bandwidth", float(users.shape[0]))
        if users.ndim != 2 or users.shape[1] != 2 or users.shape[0] < 1:
            raise ScenarioError("user_positions must have shape (K, 2) with K >= 1")
        if demands.shape[0] != users.shape[0]:
            raise ScenarioError("demands length must match the number of users")
        if np.any(demands < 0) or not np.all(np.isfinite(demands)):
            raise ScenarioError("demands must be finite and >= 0")
        if not np.all(np.isfinite(users)):
            raise ScenarioError("user positions must be finite")
        for name in ("area_side", "eta", "sigma2", "altitude", "bandwidth", "tau", "v_max"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
                raise ScenarioError(f"{name} must be a positive finite number")
        if not (math.isfinite(self.dist_weight) and self.dist_weight >= 0):
            raise ScenarioError("dist_weight must be finite and >= 0")

    @property
    def k(self) -> int:
        return self.user_positions.shape[0]


@dataclass(frozen=True)
class State:
    """Vehicle position q (2,) and remaining backlogs d (K,)."""

    q: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(2))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=np.float64).reshape(-1))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.d])


@dataclass(frozen=True)
class Control:
    """Speed v in [0, v_max] and absolute heading theta in radians."""

    v: float
    theta: float


@dataclass
class TrajectoryRecord:
    """Forward-pass tape consumed by the reverse sweeps.

    states has length T+1, every other per-step list has length T.
    stage_costs[t] is the cost of states[t+1]; active_masks[t] records
    which backlogs were still draining (clamp not hit) on step t.
    observations is empty unless the control source exposes an
    ``observe`` method.
    """

    states: list
    observations: list
    controls: list
    stage_costs: list
    active_masks: list
    completion_step: list
    terminated_step: Optional[int]

    @property
    def steps(self) -> int:
        return len(self.controls)

    def controls_array(self) -> np.ndarray:
        return np.array([[c.v, c.theta] for c in self.controls], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# radio model
# ---------------------------------------------------------------------------


def rates(q: np.ndarray, scn: Scenario) -> np.ndarray:
    """Per-user uplink rates at vehicle position(s) q.

    q may be a single position (2,) or a batch (..., 2); the result has
    shape (..., K). Rate model: (B/K) * log2(1 + eta / ((r^2 + H^2) * sigma2)).
    """
    q = np.asarray(q, dtype=np.float64)
    diff = q[..., None, :] - scn.user_positions
    d2 = np.sum(diff * diff, axis=-1)
    snr = scn.eta / ((d2 + scn.altitude**2) * scn.sigma2)
    return (scn.bandwidth / scn.k) * np.log2(1.0 + snr)


def rate(q: np.ndarray, i: int, scn: Scenario) -> float:
    """Uplink rate of user i at vehicle position q."""
    if not 0 <= i < scn.k:
        raise ScenarioError(f"user index {i} out of range for K={scn.k}")
    return float(rates(q, scn)[..., i])


def rate_gradients(q: np.ndarray, scn: Scenario) -> np.ndarray:
    """(K, 2) array of d rate_i / d q at a single position q."""
    q = np.asarray(q, dtype=np.float64).reshape(2)
    diff = q - scn.user_positions
    d2 = np.sum(diff * diff, axis=1)
    den = d2 + scn.altitude**2
    snr = scn.eta / (den * scn.sigma2)
    coef = -(scn.bandwidth / scn.k) / LN2 * (1.0 / (1.0 + snr)) * 2.0 * scn.eta / (scn.sigma2 * den * den)
    return coef[:, None] * diff


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def step_kinematics(q: np.ndarray, u: Control, scn: Scenario) -> np.ndarray:
    """Next position under constant speed/heading for one slot."""
    if not 0.0 <= u.v <= scn.v_max:
        raise ScenarioError(f"speed {u.v} outside [0, {scn.v_max}]")
    q = np.asarray(q, dtype=np.float64).reshape(2)
    return q + u.v * scn.tau * np.array([math.cos(u.theta), math.sin(u.theta)])


def step_tasks(d: np.ndarray, q: np.ndarray, scn: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Drain backlogs for one slot at the pre-step position q.

    Returns the clamped next backlogs and the {0,1} active mask. A user
    whose backlog lands exactly on zero counts as clamped (mask 0).
    """
    r = rates(q, scn)
    raw = d - r * scn.tau
    mask = (raw > 0.0).astype(np.float64)
    return np.maximum(0.0, raw), mask


def step(x: State, u: Control, scn: Scenario) -> tuple[State, np.ndarray]:
    """One transition of the full state; rates use the pre-step position."""
    d_next, mask = step_tasks(x.d, x.q, scn)
    q_next = step_kinematics(x.q, u, scn)
    return State(q_next, d_next), mask


def stage_cost(x: State, scn: Scenario) -> float:
    """Backlog sum plus distance shaping: sum_i d_i + w * sum_i |q - w_i|."""
    cost = float(np.sum(x.d))
    if scn.dist_weight > 0.0:
        dists = np.sqrt(np.sum((x.q - scn.user_positions) ** 2, axis=1))
        cost += scn.dist_weight * float(np.sum(dists))
    return cost


def initial_state(scn: Scenario) -> State:
    """Mission start: vehicle at the origin, backlogs at their demands."""
    return State(np.zeros(2), scn.demands.copy())


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def rollout(
    policy: Callable[[int, State], Control],
    scn: Scenario,
    t_max: int,
    stop_eps: float,
) -> TrajectoryRecord:
    """Unroll the closed loop until the residual backlog is negligible.

    policy is any callable (t, state) -> Control. Termination is checked
    before each step: the mission ends once sum_i d_i < stop_eps * K, or
    after t_max steps. If the policy exposes an ``observe(state)`` method
    its per-step observations are recorded on the tape.
    """
    if t_max < 1:
        raise ScenarioError("t_max must be >= 1")
    if stop_eps <= 0:
        raise ScenarioError("stop_eps must be > 0")
    obs_fn = getattr(policy, "observe", None)

    x = initial_state(scn)
    states = [x]
    observations: list = []
    controls: list = []
    stage_costs: list = []
    active_masks: list = []
    completion: list = [0 if di == 0.0 else None for di in x.d]
    terminated: Optional[int] = None
    threshold = stop_eps * scn.k

    for t in range(t_max):
        if float(np.sum(x.d)) < threshold:
            terminated = t
            break
        u = policy(t, x)
        if not (math.isfinite(u.v) and math.isfinite(u.theta)):
            raise NumericFailure(t, "control")
        if obs_fn is not None:
            observations.append(obs_fn(x))
        x_next, mask = step(x, u, scn)
        if not (np.all(np.isfinite(x_next.q)) and np.all(np.isfinite(x_next.d))):
            raise NumericFailure(t, "state")
        states.append(x_next)
        controls.append(u)
        active_masks.append(mask)
        stage_costs.append(stage_cost(x_next, scn))
        for i in range(scn.k):
            if completion[i] is None and x_next.d[i] == 0.0:
                completion[i] = t + 1
        x = x_next
    else:
        if float(np.sum(x.d)) < threshold:
            terminated = t_max

    return TrajectoryRecord(
        states=states,
        observations=observations,
        controls=controls,
        stage_costs=stage_costs,
        active_masks=active_masks,
        completion_step=completion,
        terminated_step=terminated,
    )


# ---------------------------------------------------------------------------
# scenario generation and serialization
# ---------------------------------------------------------------------------


def generate_scenario(
    seed: int,
    k: int = 4,
    area_side: float = 10.0,
    demand_lo: float = 0.5,
    demand_hi: float = 1.0,
    *,
    eta: float = 1.0,
    sigma2: float = 0.1,
    altitude: float = 1.0,
    bandwidth: Optional[float] = None,
    tau: float = 1.0,
    v_max: float = 0.2,
    dist_weight: float = 0.01,
) -> Scenario:
    """Sample a random instance: users uniform on the square, backlogs

    uniform in [demand_lo, demand_hi]. Deterministic in the seed.
    """
    if k < 1:
        raise ScenarioError("k must be >= 1")
    if not 0 <= demand_lo <= demand_hi:
        raise ScenarioError("need 0 <= demand_lo <= demand_hi")
    rng = np.random.default_rng(seed)
    half = area_side / 2.0
    users = rng.uniform(-half, half, size=(k, 2))
    demands = rng.uniform(demand_lo, demand_hi, size=k)
    return Scenario(
        user_positions=users,
        demands=demands,
        area_side=area_side,
        eta=eta,
        sigma2=sigma2,
        altitude=altitude,
        bandwidth=bandwidth,
        tau=tau,
        v_max=v_max,
        dist_weight=dist_weight,
        seed=seed,
    )


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "users": scn.user_positions.tolist(),
        "demands": scn.demands.tolist(),
        "area_side": scn.area_side,
        "eta": scn.eta,
        "sigma2": scn.sigma2,
        "altitude": scn.altitude,
        "bandwidth": scn.bandwidth,
        "tau": scn.tau,
        "v_max": scn.v_max,
        "dist_weight": scn.dist_weight,
        "seed": scn.seed,
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        return Scenario(
            user_positions=np.asarray(data["users"], dtype=np.float64),
            demands=np.asarray(data["demands"], dtype=np.float64),
            area_side=float(data["area_side"]),
            eta=float(data.get("eta", 1.0)),
            sigma2=float(data.get("sigma2", 0.1)),
            altitude=float(data.get("altitude", 1.0)),
            bandwidth=None if data.get("bandwidth") is None else float(data["bandwidth"]),
            tau=float(data.get("tau", 1.0)),
            v_max=float(data.get("v_max", 0.2)),
            dist_weight=float(data.get("dist_weight", 0.01)),
            seed=data.get("seed"),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing required field {exc}") from exc


def save_scenario(scn: Scenario, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2)
        fh.write("\n")


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
