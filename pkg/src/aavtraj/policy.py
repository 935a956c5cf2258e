"""Deterministic MLP control law with hand-written forward and VJP.

The network maps a normalized observation of the world state to a
speed/heading pair. The speed head is squashed through a sigmoid and
scaled by v_max so the kinematic bound holds by construction; the
heading head is left unbounded. Parameters live in one flat float64
vector whose layout is, layer by layer, the row-major weight matrix
followed by the bias.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import Control, Scenario, ScenarioError, State

CHECKPOINT_FORMAT = "aavtraj-policy-v1"


@dataclass(frozen=True)
class LayerSpec:
    """Architecture descriptor: K fixes the input width 2 + 3K."""

    k: int
    hidden: tuple = (64, 64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.k < 1:
            raise ScenarioError("k must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ScenarioError("hidden sizes must be >= 1")

    @property
    def input_dim(self) -> int:
        return 2 + 3 * self.k

    @property
    def output_dim(self) -> int:
        return 2

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    def param_count(self) -> int:
        dims = self.dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class PolicyParams:
    """Flat parameter vector plus the metadata needed to interpret it."""

    flat: np.ndarray
    spec: LayerSpec
    v_max: float = 0.2
    seed: Optional[int] = None

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.size != self.spec.param_count():
            raise ScenarioError(
                f"flat vector has {self.flat.size} entries, spec wants {self.spec.param_count()}"
            )
        if not (math.isfinite(self.v_max) and self.v_max > 0):
            raise ScenarioError("v_max must be a positive finite number")


def init_params(seed: int, k: int, hidden: tuple = (64, 64, 32), v_max: float = 0.2) -> PolicyParams:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    spec = LayerSpec(k=k, hidden=tuple(hidden))
    rng = np.random.default_rng(seed)
    chunks = []
    dims = spec.dims
    for din, dout in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(din)
        chunks.append(rng.uniform(-bound, bound, size=(dout, din)).ravel())
        chunks.append(np.zeros(dout))
    return PolicyParams(flat=np.concatenate(chunks), spec=spec, v_max=v_max, seed=seed)


def unpack(params: PolicyParams) -> list:
    """Split the flat vector into [(W, b), ...] views, one per layer."""
    dims = params.spec.dims
    layers = []
    off = 0
    for din, dout in zip(dims[:-1], dims[1:]):
        w = params.flat[off : off + din * dout].reshape(dout, din)
        off += din * dout
        b = params.flat[off : off + dout]
        off += dout
        layers.append((w, b))
    return layers


# ---------------------------------------------------------------------------
# observation map
# ---------------------------------------------------------------------------


def observe(x: State, scn: Scenario) -> np.ndarray:
    """Normalized observation vector of length 2 + 3K.

    Layout: vehicle position scaled by 2/area_side, the K user offsets
    w_i - q under the same scale, then backlogs normalized by their
    demands (0 for a zero-demand user).
    """
    s = 2.0 / scn.area_side
    rel = (scn.user_positions - x.q) * s
    safe = np.where(scn.demands > 0.0, scn.demands, 1.0)
    frac = np.where(scn.demands > 0.0, x.d / safe, 0.0)
    return np.concatenate([x.q * s, rel.ravel(), frac])


def observation_jacobian(scn: Scenario) -> np.ndarray:
    """Constant (2+3K, 2+K) Jacobian of observe with respect to [q; d]."""
    k = scn.k
    s = 2.0 / scn.area_side
    jac = np.zeros((2 + 3 * k, 2 + k))
    jac[0, 0] = s
    jac[1, 1] = s
    for i in range(k):
        jac[2 + 2 * i, 0] = -s
        jac[3 + 2 * i, 1] = -s
        if scn.demands[i] > 0.0:
            jac[2 + 2 * k + i, 2 + i] = 1.0 / scn.demands[i]
    return jac


# ---------------------------------------------------------------------------
# forward and reverse passes
# ---------------------------------------------------------------------------


def _sigmoid(z: float) -> float:
    # 0.5 * (1 + tanh(z/2)) is stable for large |z|
    return 0.5 * (1.0 + math.tanh(0.5 * z))


def _forward_core(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, list]:
    """Raw two-element head output and the per-layer activations."""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if obs.size != params.spec.input_dim:
        raise ScenarioError(
            f"observation has {obs.size} entries, policy wants {params.spec.input_dim}"
        )
    layers = unpack(params)
    acts = [obs]
    a = obs
    for w, b in layers[:-1]:
        a = np.tanh(w @ a + b)
        acts.append(a)
    w, b = layers[-1]
    return w @ a + b, acts


def forward(params: PolicyParams, obs: np.ndarray) -> Control:
    """Evaluate the control law: v = v_max * sigmoid(z0), theta = z1."""
    z, _ = _forward_core(params, obs)
    return Control(params.v_max * _sigmoid(float(z[0])), float(z[1]))


def vjp(params: PolicyParams, obs: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull an upstream cotangent on (v, theta) back to parameters and obs.

    Returns (param_grad, obs_grad) with param_grad laid out exactly like
    the flat parameter vector. A single backward pass serves both outputs.
    """
    upstream = np.asarray(upstream, dtype=np.float64).reshape(2)
    z, acts = _forward_core(params, obs)
    sig = _sigmoid(float(z[0]))
    delta = np.array([upstream[0] * params.v_max * sig * (1.0 - sig), upstream[1]])

    layers = unpack(params)
    w_grads: list = [None] * len(layers)
    b_grads: list = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        w_grads[idx] = np.outer(delta, acts[idx])
        b_grads[idx] = delta
        g_prev = w.T @ delta
        if idx > 0:
            delta = g_prev * (1.0 - acts[idx] ** 2)
        else:
            obs_grad = g_prev
    flat = np.concatenate([np.concatenate([wg.ravel(), bg]) for wg, bg in zip(w_grads, b_grads)])
    return flat, obs_grad


class PolicyController:
    """Adapter giving the rollout loop a (t, state) -> Control callable."""

    def __init__(self, params: PolicyParams, scn: Scenario):
        if params.spec.k != scn.k:
            raise ScenarioError(
                f"policy built for K={params.spec.k} cannot run on a K={scn.k} scenario"
            )
        if params.v_max != scn.v_max:
            raise ScenarioError(
                f"policy speed scale {params.v_max} does not match scenario v_max {scn.v_max}"
            )
        self.params = params
        self.scn = scn

    def __call__(self, t: int, x: State) -> Control:
        return forward(self.params, observe(x, self.scn))

    def observe(self, x: State) -> np.ndarray:
        return observe(x, self.scn)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path: str) -> None:
    data = {
        "format": CHECKPOINT_FORMAT,
        "k": params.spec.k,
        "hidden": list(params.spec.hidden),
        "v_max": params.v_max,
        "seed": params.seed,
        "params": params.flat.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_checkpoint(path: str) -> PolicyParams:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ScenarioError(f"unrecognized checkpoint format in {path}")
    spec = LayerSpec(k=int(data["k"]), hidden=tuple(data["hidden"]))
    return PolicyParams(
        flat=np.asarray(data["params"], dtype=np.float64),
        spec=spec,
        v_max=float(data["v_max"]),
        seed=data.get("seed"),
    )
