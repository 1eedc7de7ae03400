"""Synthetic car-following drivers with known time-varying IDM parameters.

Stands in for a real drone dataset in tests and examples.  Each driver has an
aggressiveness level ``g`` in [0, 1] that sets a base parameter vector; the
parameters then drift slowly and react to the leader's acceleration, which
is what a constant-parameter IDM cannot reproduce.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .idm import IdmParams, ParamBounds, equilibrium_spacing
from .trajectory import DEFAULT_DT, CFEpisode, GenerationError, generate_synthetic_episode

CONSERVATIVE = np.array([34.0, 2.2, 2.8, 1.6, 1.6])
AGGRESSIVE = np.array([39.0, 1.3, 1.8, 3.4, 1.0])


def leader_profile(rng: np.random.Generator, n: int, dt: float = DEFAULT_DT, base: float | None = None) -> np.ndarray:
    """Smooth urban leader speed trace: a few sinusoids plus one braking dip."""
    t = np.arange(n) * dt
    base = rng.uniform(8.0, 13.0) if base is None else base
    v = np.full(n, base)
    for _ in range(3):
        amp = rng.uniform(0.5, 2.0)
        period = rng.uniform(6.0, 20.0)
        v += amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    centre = rng.uniform(0.3, 0.7) * t[-1] if n > 1 else 0.0
    depth = rng.uniform(2.0, 5.0)
    width = rng.uniform(2.0, 4.0)
    v -= depth * np.exp(-0.5 * ((t - centre) / width) ** 2)
    return np.maximum(v, 0.0)


def base_params(g: float, rng: np.random.Generator | None = None, jitter: float = 0.05) -> np.ndarray:
    theta = CONSERVATIVE + g * (AGGRESSIVE - CONSERVATIVE)
    if rng is not None and jitter > 0:
        theta = theta * (1.0 + jitter * rng.standard_normal(5))
    return theta


def parameter_schedule(theta0: np.ndarray, leader_speed: np.ndarray, dt: float, rng: np.random.Generator,
                       drift: float = 0.12, reactivity: float = 0.35, bounds: ParamBounds | None = None,
                       hold: int | None = None) -> np.ndarray:
    """Per-frame parameters: slow sinusoidal drift plus reaction to leader acceleration.

    With ``hold`` the schedule is sampled every ``hold`` frames and held in
    between, giving a piecewise-constant drifting schedule.
    """
    n = len(leader_speed)
    t = np.arange(n) * dt
    a_lead = np.gradient(leader_speed, dt) if n > 1 else np.zeros(n)
    react = np.tanh(a_lead)
    sched = np.empty((n, 5))
    for i in range(5):
        period = rng.uniform(15.0, 40.0)
        sched[:, i] = theta0[i] * (1.0 + drift * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)))
    # leader speeding up: shorter headway, stronger acceleration; braking: the reverse
    sched[:, 1] *= 1.0 - reactivity * react
    sched[:, 3] *= 1.0 + reactivity * react
    sched[:, 4] *= 1.0 - 0.5 * reactivity * react
    if hold:
        sched = sched[(np.arange(n) // hold) * hold]
    bounds = bounds or ParamBounds()
    return bounds.clip(sched)


@dataclass
class SyntheticDriver:
    driver_id: int
    aggressiveness: float
    theta_base: IdmParams
    schedule: np.ndarray
    episode: CFEpisode


def make_driver(driver_id: int, g: float, rng: np.random.Generator, duration: float = 30.0, dt: float = DEFAULT_DT,
                noise_std: float = 0.0, drift: float = 0.12, reactivity: float = 0.35,
                hold: int | None = None, gap_jitter: float = 0.0) -> SyntheticDriver:
    """One synthetic driver; ``gap_jitter`` scales the initial gap away from
    equilibrium by a factor drawn from U(1 - j, 1 + j) so the episode opens with a transient."""
    n = int(round(duration / dt)) + 1
    for _ in range(20):
        vl = leader_profile(rng, n, dt)
        theta0 = base_params(g, rng)
        sched = parameter_schedule(theta0, vl, dt, rng, drift, reactivity, hold=hold)
        gap0 = None
        if gap_jitter > 0:
            gap0 = equilibrium_spacing(sched[0], min(vl[0], 0.95 * sched[0][0]))
            gap0 *= rng.uniform(1.0 - gap_jitter, 1.0 + gap_jitter)
        try:
            ep = generate_synthetic_episode(sched, vl, dt=dt, initial_gap=gap0, noise_std=noise_std, rng=rng,
                                            follower_id=driver_id, leader_id=driver_id + 100000)
        except GenerationError:
            continue
        return SyntheticDriver(driver_id, g, IdmParams.from_array(theta0), sched, ep)
    raise GenerationError(f"could not generate a collision-free episode for driver {driver_id}")


def make_population(n_drivers: int, seed: int = 0, duration: float = 30.0, dt: float = DEFAULT_DT,
                    noise_std: float = 0.0, first_id: int = 1000, **kwargs) -> list[SyntheticDriver]:
    """Drivers with aggressiveness levels spread evenly over [0, 1] (shuffled)."""
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.0, 1.0, n_drivers) if n_drivers > 1 else np.array([0.5])
    levels = rng.permutation(levels)
    return [make_driver(first_id + i, float(g), rng, duration, dt, noise_std, **kwargs) for i, g in enumerate(levels)]


def write_trajectory_csv(episodes: list[CFEpisode], path, dt: float = DEFAULT_DT) -> None:
    """Dump episodes as a raw long-format trajectory file (one lane per pair)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "time", "position", "speed", "lane", "lat_acc", "lon_acc", "type", "length"])
        for lane, ep in enumerate(episodes, start=1):
            for k in range(len(ep)):
                w.writerow([ep.follower_id, repr(float(ep.t[k])), repr(float(ep.x[k])), repr(float(ep.v[k])), lane,
                            0.0, repr(float(ep.a[k])), "car", 4.5])
            for k in range(len(ep)):
                w.writerow([ep.leader_id, repr(float(ep.t[k])), repr(float(ep.x_lead[k])),
                            repr(float(ep.v_lead[k])), lane, repr(float(ep.a_lat_lead[k])),
                            repr(float(ep.a_lon_lead[k])), "car", ep.leader_length])


def make_repeat_drivers(n_drivers: int, episodes_per_driver: int, seed: int = 0, first_id: int = 2000,
                        **kwargs) -> list[list[SyntheticDriver]]:
    """Several independent episodes per driver (new leader each time, same aggressiveness level).

    Useful as NP training data: one driver's points then cover more of the
    (spacing, speed, relative speed) space than a single episode would.
    """
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.0, 1.0, n_drivers) if n_drivers > 1 else np.array([0.5])
    return [[make_driver(first_id + i, float(g), rng, **kwargs) for _ in range(episodes_per_driver)]
            for i, g in enumerate(levels)]
