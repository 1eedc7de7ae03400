"""Closed-loop rollouts driven by the NP decoder, with a safe-distance override.

The follower accelerates with the decoder's mean (or a draw from its
predictive distribution) unless the spacing is below ``response_time * v``,
in which case it brakes at ``brake_decel``.  The latent z is drawn once per
rollout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .idm import KinematicState, Rollout, simulate_follower
from .neural_process import NPModel, decode, encode_latent
from .trajectory import DEFAULT_DT, CFEpisode, LeaderFrames


@dataclass
class SafetyConfig:
    response_time: float = 1.5
    brake_decel: float = 5.0
    enabled: bool = True

    def __post_init__(self):
        if self.response_time <= 0 or self.brake_decel <= 0:
            raise ValueError("response_time and brake_decel must be positive")


def ttc(s: float, dv: float) -> float:
    """Signed time to collision ``s / dv``; NaN when dv == 0, negative when diverging."""
    if s <= 0:
        raise ValueError("ttc needs a positive spacing")
    if dv == 0:
        return float("nan")
    with np.errstate(over="ignore"):      # a vanishing dv gives +-inf, which is the right answer
        return float(s / dv)


def ttc_series(s, dv) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    dv = np.asarray(dv, dtype=float)
    out = np.full(s.shape, np.nan)
    nz = dv != 0
    with np.errstate(over="ignore"):
        out[nz] = s[nz] / dv[nz]
    return out


@dataclass
class SimResult:
    rollout: Rollout
    leader: LeaderFrames
    override_steps: np.ndarray
    z: float
    r: np.ndarray

    @property
    def collided(self) -> bool:
        return self.rollout.collided

    @property
    def spacing(self) -> np.ndarray:
        return self.rollout.s

    @property
    def speed(self) -> np.ndarray:
        return self.rollout.v

    @property
    def ttc(self) -> np.ndarray:
        return ttc_series(self.rollout.s, self.rollout.dv)


def simulate_with_style(leader: LeaderFrames, initial: KinematicState, model: NPModel, r, *, context=None,
                        z_mode: str = "mean", stochastic: bool = False, safety: SafetyConfig | None = None,
                        dt: float = DEFAULT_DT, seed: int = 0) -> SimResult:
    """Roll out a follower whose acceleration comes from the decoder for style ``r``.

    ``context`` (an ``(x, y)`` pair) supplies the latent distribution of an
    observed driver; without it z comes from N(0, 1).  ``z_mode="mean"`` uses
    the distribution mean, ``"sample"`` one seeded draw.  ``stochastic`` samples
    each acceleration from N(mu_y, sigma_y^2) instead of using mu_y.
    """
    safety = safety or SafetyConfig()
    rng = np.random.default_rng(seed)
    if context is not None and len(context[1]):
        lat = encode_latent(model, *context)
        mu_z, sigma_z = lat.mu_z, lat.sigma_z
    else:
        mu_z, sigma_z = 0.0, 1.0
    if z_mode == "mean":
        z = mu_z
    elif z_mode == "sample":
        z = mu_z + sigma_z * float(rng.standard_normal())
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    r = np.asarray(r, dtype=float).reshape(5)
    overrides: list[int] = []
    t0 = leader.t[0]

    def accel(t, cond):
        if safety.enabled and cond.s < safety.response_time * cond.v:
            overrides.append(int(round((t - t0) / dt)))
            return -safety.brake_decel
        mu, sigma = decode(model, np.asarray(cond)[None, :], r, z)
        if stochastic:
            return float(mu[0] + sigma[0] * rng.standard_normal())
        return float(mu[0])

    rollout = simulate_follower(leader, initial, accel, dt)
    return SimResult(rollout, leader, np.asarray(overrides, dtype=int), float(z), r)


def episode_context(episode: CFEpisode, accel=None, stop: int | None = None):
    """(x, y) context pair from an episode's frames (default y: observed acceleration)."""
    x = episode.conditions()[:stop]
    y = (episode.a if accel is None else np.asarray(accel))[:stop]
    return x, y


# ----------------------------------------------------------------------------
# metrics

SERIES = ("spacing", "speed", "ttc")

# Positive TTC values above this many seconds are treated as "no interaction".
# The plain mean of s/dv over dv > 0 is dominated by the few frames with dv
# close to zero (its expectation diverges when dv has density at 0).
TTC_HORIZON = 60.0


def positive_ttc(ttc_values, horizon: float | None = TTC_HORIZON) -> np.ndarray:
    x = np.asarray(ttc_values, dtype=float)
    keep = np.isfinite(x) & (x > 0)
    if horizon is not None:
        keep &= x <= horizon
    return x[keep]


def _series(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, SimResult):
        s, v, dv = obj.rollout.s, obj.rollout.v, obj.rollout.dv
    else:
        s, v, dv = obj.s, obj.v, obj.dv
    return {"spacing": np.asarray(s), "speed": np.asarray(v), "ttc": ttc_series(s, dv)}


def _stats(x: np.ndarray) -> dict:
    x = x[np.isfinite(x)]
    if not len(x):
        return {"n": 0}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {"n": int(len(x)), "mean": float(x.mean()), "std": float(x.std()), "q1": float(q1),
            "median": float(med), "q3": float(q3)}


def histogram(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    x = x[np.isfinite(x)]
    counts, _ = np.histogram(np.clip(x, edges[0], edges[-1]), bins=edges)
    return counts


def total_variation(c1: np.ndarray, c2: np.ndarray) -> float:
    p = c1 / max(c1.sum(), 1)
    q = c2 / max(c2.sum(), 1)
    return 0.5 * float(np.abs(p - q).sum())


def shared_edges(*arrays, bins: int = 30) -> np.ndarray:
    pooled = np.concatenate([a[np.isfinite(a)] for a in arrays])
    lo, hi = (float(pooled.min()), float(pooled.max())) if len(pooled) else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def summarize(result, reference=None, bins: int = 30, ttc_range: tuple[float, float] | None = None,
              ttc_horizon: float | None = TTC_HORIZON) -> dict:
    """Series statistics, histograms on shared edges and (with a reference) TV distances.

    ``result`` and ``reference`` may be a :class:`SimResult`, an episode or a
    rollout.  TTC values where dv == 0 are excluded and counted as undefined;
    ``ttc_range`` optionally limits the TTC histogram range.  ``positive_mean``
    averages positive TTC up to ``ttc_horizon``; ``positive_mean_all`` has no cap.
    """
    ser = _series(result)
    ref = _series(reference) if reference is not None else None
    report: dict = {}
    for name in SERIES:
        x = ser[name]
        entry = {"stats": _stats(x)}
        if name == "ttc":
            entry["undefined"] = int(np.isnan(x).sum())
            pos = positive_ttc(x, ttc_horizon)
            entry["positive_mean"] = float(pos.mean()) if len(pos) else float("nan")
            allpos = positive_ttc(x, None)
            entry["positive_mean_all"] = float(allpos.mean()) if len(allpos) else float("nan")
        arrays = [x] if ref is None else [x, ref[name]]
        if name == "ttc" and ttc_range is not None:
            edges = np.linspace(ttc_range[0], ttc_range[1], bins + 1)
        else:
            edges = shared_edges(*arrays, bins=bins)
        entry["edges"] = edges.tolist()
        entry["counts"] = histogram(x, edges).tolist()
        if ref is not None:
            rc = histogram(ref[name], edges)
            entry["reference_counts"] = rc.tolist()
            entry["reference_stats"] = _stats(ref[name])
            entry["tv_distance"] = total_variation(np.asarray(entry["counts"]), rc)
        report[name] = entry
    return report


def write_sim_result(result: SimResult, out_dir, report: dict | None = None, stem: str = "sim") -> None:
    """Frame record file plus a JSON metrics file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ro = result.rollout
    n = len(ro)
    ttc_vals = result.ttc
    with open(out / f"{stem}_frames.csv", "w", newline="\n") as fh:
        fh.write("t,x,v,s,a,dv,ttc,x_lead,v_lead,override\n")
        ov = set(result.override_steps.tolist())
        for k in range(n):
            row = [ro.t[k], ro.x[k], ro.v[k], ro.s[k], ro.a[k], ro.dv[k], ttc_vals[k], result.leader.x[k],
                   result.leader.v[k]]
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(k in ov)}\n")
    meta = {"collided": result.collided, "collision_step": ro.collision_step, "z": result.z,
            "r": result.r.tolist(), "n_override": int(len(result.override_steps)),
            "metrics": report if report is not None else summarize(result)}
    (out / f"{stem}_metrics.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
