"""Intelligent Driver Model with fixed or time-varying parameters.

Parameter vectors are ordered ``(v0, T, s0, a_max, b)`` everywhere in the
package.  The scalar functions here are the readable reference; the
``*_batch`` helpers broadcast over leading axes so that calibration can
evaluate thousands of candidate parameter sets in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

DELTA = 4.0
PARAM_NAMES = ("v0", "T", "s0", "a_max", "b")


class DomainError(ValueError):
    """Raised when a model is evaluated outside its domain (e.g. s <= 0)."""


class IdmParams(NamedTuple):
    v0: float
    T: float
    s0: float
    a_max: float
    b: float

    @classmethod
    def from_array(cls, arr) -> "IdmParams":
        arr = np.asarray(arr, dtype=float).reshape(5)
        return cls(*(float(a) for a in arr))

    def as_dict(self) -> dict:
        return dict(zip(PARAM_NAMES, self))


class KinematicState(NamedTuple):
    x: float
    v: float


class TrafficCondition(NamedTuple):
    """The 6-component input seen by a car-following model."""

    dv: float
    v: float
    s: float
    v_lead: float
    a_lat_lead: float
    a_lon_lead: float


@dataclass(frozen=True)
class ParamBounds:
    lb: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.1, 0.1, 0.1, 0.1]))
    ub: np.ndarray = field(default_factory=lambda: np.array([40.0, 5.0, 10.0, 6.0, 6.0]))

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=float).reshape(5)
        ub = np.asarray(self.ub, dtype=float).reshape(5)
        if not np.all(lb < ub):
            raise ValueError("bounds must satisfy lb < ub elementwise")
        if not np.all(lb > 0):
            raise ValueError("IDM parameters must be strictly positive")
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def width(self) -> np.ndarray:
        return self.ub - self.lb

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lb) & (theta <= self.ub), axis=-1)

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lb, self.ub)

    def normalize(self, theta) -> np.ndarray:
        """Min-max scale parameter values into [0, 1] using the bounds."""
        return (np.asarray(theta, dtype=float) - self.lb) / self.width

    def to_dict(self) -> dict:
        return {"lb": self.lb.tolist(), "ub": self.ub.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        return cls(np.asarray(d["lb"]), np.asarray(d["ub"]))


def desired_spacing(theta, v: float, dv: float) -> float:
    v0, T, s0, a_max, b = theta
    return s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(a_max * b)))


def idm_acceleration(theta, cond: TrafficCondition, clamp: tuple[float, float] | None = None) -> float:
    """IDM acceleration for one traffic condition.

    ``clamp`` optionally bounds the result to ``(low, high)``; the default
    leaves the acceleration unclamped.
    """
    if cond.s <= 0:
        raise DomainError(f"spacing must be positive, got {cond.s}")
    v0, T, s0, a_max, b = theta
    s_star = desired_spacing(theta, cond.v, cond.dv)
    a = a_max * (1.0 - (cond.v / v0) ** DELTA - (s_star / cond.s) ** 2)
    if clamp is not None:
        a = min(max(a, clamp[0]), clamp[1])
    return a


def idm_acceleration_batch(theta, v, dv, s) -> np.ndarray:
    """Vectorised IDM acceleration; ``theta[..., 5]`` broadcasts against v, dv, s."""
    theta = np.asarray(theta, dtype=float)
    v0, T, s0, a_max, b = (theta[..., i] for i in range(5))
    s_star = s0 + np.maximum(0.0, v * T + v * dv / (2.0 * np.sqrt(a_max * b)))
    return a_max * (1.0 - (v / v0) ** DELTA - (s_star / s) ** 2)


def equilibrium_spacing(theta, v: float) -> float:
    """Spacing at which a follower at constant speed v has zero acceleration."""
    v0 = theta[0]
    if not 0 <= v < v0:
        raise DomainError("equilibrium exists only for 0 <= v < v0")
    return desired_spacing(theta, v, 0.0) / math.sqrt(1.0 - (v / v0) ** DELTA)


def ballistic_step(state: KinematicState, a: float, dt: float) -> KinematicState:
    """Advance one step with constant acceleration (trapezoidal position update).

    If the speed would turn negative the vehicle stops at ``t* = v / -a`` inside
    the step and stays put for the remainder.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, v = state
    v_new = v + a * dt
    if v_new < 0.0:
        # a < 0 here; distance covered until standstill
        return KinematicState(x + v * v / (-2.0 * a), 0.0)
    return KinematicState(x + (v_new + v) / 2.0 * dt, v_new)


def ballistic_step_batch(x, v, a, dt: float):
    v_new = v + a * dt
    stopped = v_new < 0.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x_stop = x + v * v / (-2.0 * a)
    x_new = np.where(stopped, x_stop, x + (v_new + v) / 2.0 * dt)
    return x_new, np.where(stopped, 0.0, v_new)


def gof_rmse(obs, sim) -> float:
    obs = np.asarray(obs, dtype=float)
    sim = np.asarray(sim, dtype=float)
    if obs.shape != sim.shape:
        raise ValueError(f"length mismatch: {obs.shape} vs {sim.shape}")
    if obs.size == 0:
        raise ValueError("gof_rmse needs at least one value")
    return float(np.sqrt(np.mean((obs - sim) ** 2)))


@dataclass
class Rollout:
    """Follower trajectory produced by a closed-loop simulation."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    s: np.ndarray
    a: np.ndarray
    dv: np.ndarray
    collided: bool = False
    collision_step: int | None = None

    def __len__(self):
        return len(self.t)


AccelSource = Callable[[float, TrafficCondition], float]


def simulate_follower(leader, initial: KinematicState, accel_source: AccelSource, dt: float) -> Rollout:
    """Closed-loop rollout of a follower behind an observed leader.

    ``leader`` is anything with ``t``, ``x``, ``v``, ``a_lat``, ``a_lon`` arrays
    and a ``length`` (see :class:`hybridcf.trajectory.LeaderFrames`).  The
    acceleration returned for frame k is applied over [t_k, t_k + dt].  A
    non-positive spacing stops the rollout and is reported as a collision.
    """
    n = len(leader.t)
    t_out, x_out, v_out, s_out, a_out, dv_out = ([] for _ in range(6))
    state = initial
    collided, collision_step = False, None
    for k in range(n):
        s = leader.x[k] - state.x - leader.length
        if s <= 0:
            collided, collision_step = True, k
            break
        cond = TrafficCondition(state.v - leader.v[k], state.v, s, leader.v[k], leader.a_lat[k], leader.a_lon[k])
        a = accel_source(leader.t[k], cond)
        t_out.append(leader.t[k])
        x_out.append(state.x)
        v_out.append(state.v)
        s_out.append(s)
        a_out.append(a)
        dv_out.append(cond.dv)
        if k < n - 1:
            state = ballistic_step(state, a, dt)
    arr = lambda xs: np.asarray(xs, dtype=float)  # noqa: E731
    return Rollout(arr(t_out), arr(x_out), arr(v_out), arr(s_out), arr(a_out), arr(dv_out), collided, collision_step)


def rollout_idm_batch(theta, leader_x, leader_v, leader_length: float, x0: float, v0: float, dt: float,
                      min_spacing: float = 1e-3):
    """Closed-loop IDM spacing for many parameter sets at once.

    ``theta`` has shape ``(K, 5)`` (constant per candidate) or ``(K, n, 5)``
    (one parameter set per frame).  Returns ``(s, collided)`` where ``s`` has
    shape ``(K, n)``.  Collided candidates keep a floored spacing so the loop
    stays finite; callers decide how to penalise them.
    """
    theta = np.asarray(theta, dtype=float)
    n = len(leader_x)
    per_frame = theta.ndim == 3
    if theta.ndim == 1:
        theta = theta[None, :]
    K = theta.shape[0]
    x = np.full(K, float(x0))
    v = np.full(K, float(v0))
    s_hist = np.empty((K, n))
    collided = np.zeros(K, dtype=bool)
    for k in range(n):
        s = leader_x[k] - x - leader_length
        hit = s <= 0
        collided |= hit
        s = np.where(hit, min_spacing, s)
        s_hist[:, k] = s
        if k == n - 1:
            break
        th = theta[:, k, :] if per_frame else theta
        a = idm_acceleration_batch(th, v, v - leader_v[k], s)
        x, v = ballistic_step_batch(x, v, a, dt)
    return s_hist, collided
