"""Fixed and time-varying IDM calibration for a single driver.

The fixed fit minimises closed-loop spacing RMSE over a whole episode.  The
time-varying fit walks the episode in blocks of ``stride`` frames and, per
block, runs a rejection-sampling loop whose prior is the previous block's
posterior (diagonal Gaussians throughout).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from .idm import (PARAM_NAMES, IdmParams, KinematicState, ParamBounds, ballistic_step, gof_rmse,
                  idm_acceleration, idm_acceleration_batch, ballistic_step_batch, rollout_idm_batch,
                  simulate_follower)
from .trajectory import CFEpisode

log = logging.getLogger(__name__)

COLLISION_PENALTY = 1e3
POSTERIOR_MAGIC = "# hybridcf posterior v1"


@dataclass
class GaussianParams:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(5)
        self.var = np.asarray(self.var, dtype=float).reshape(5)
        if not np.all(self.var > 0):
            raise ValueError("variances must be strictly positive")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass
class CalibConfig:
    n_samples: int = 5000
    max_iters: int = 500
    eps: float = 0.01
    n_min: int = 100
    p_pct: float = 0.95
    sigma_frac: float = 0.05
    sigma: list | None = None
    stride: int = 25
    var_floor_frac: float = 1e-3

    def __post_init__(self):
        if not self.n_samples > self.n_min > 0:
            raise ValueError("require n_samples > n_min > 0")
        if not 0 < self.p_pct < 1:
            raise ValueError("p_pct must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def sigma_vector(self, bounds: ParamBounds) -> np.ndarray:
        if self.sigma is not None:
            return np.asarray(self.sigma, dtype=float).reshape(5)
        return self.sigma_frac * bounds.width

    def var_floor(self, bounds: ParamBounds) -> np.ndarray:
        return (self.var_floor_frac * bounds.width) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# fixed-parameter calibration

def closed_loop_spacing(episode: CFEpisode, theta) -> np.ndarray:
    """Closed-loop spacing of ``theta`` (``(5,)`` or per-frame ``(n, 5)``) over the episode."""
    theta = np.asarray(theta, dtype=float)
    th = theta[None, :, :] if theta.ndim == 2 else theta[None, :]
    s, _ = rollout_idm_batch(th, episode.x_lead, episode.v_lead, episode.leader_length,
                             episode.x[0], episode.v[0], episode.dt)
    return s[0]


def closed_loop_rmse(episode: CFEpisode, theta) -> float:
    """Spacing RMSE of a closed-loop rollout; collisions score a fixed penalty."""
    theta = np.asarray(theta, dtype=float)
    th = theta[None, :, :] if theta.ndim == 2 else theta[None, :]
    s, hit = rollout_idm_batch(th, episode.x_lead, episode.v_lead, episode.leader_length,
                               episode.x[0], episode.v[0], episode.dt)
    return COLLISION_PENALTY if hit[0] else gof_rmse(episode.s, s[0])


def _scalar_rmse(theta, x_lead, v_lead, s_obs, L: float, x0: float, v0: float, dt: float) -> float:
    """Plain-float closed-loop RMSE; far faster than numpy for a single candidate."""
    V0, T, S0, A, B = (float(p) for p in theta)
    two_sqrt_ab = 2.0 * (A * B) ** 0.5
    x, v = x0, v0
    sq = 0.0
    n = len(x_lead)
    for k in range(n):
        s = x_lead[k] - x - L
        if s <= 0:
            return COLLISION_PENALTY
        sq += (s_obs[k] - s) ** 2
        if k == n - 1:
            break
        dv = v - v_lead[k]
        s_star = S0 + max(0.0, v * T + v * dv / two_sqrt_ab)
        a = A * (1.0 - (v / V0) ** 4 - (s_star / s) ** 2)
        v_new = v + a * dt
        if v_new < 0.0:
            x, v = x + v * v / (-2.0 * a), 0.0
        else:
            x, v = x + (v_new + v) / 2.0 * dt, v_new
    return (sq / n) ** 0.5


def _population_rmse(episode: CFEpisode, thetas: np.ndarray) -> np.ndarray:
    s, hit = rollout_idm_batch(thetas, episode.x_lead, episode.v_lead, episode.leader_length,
                               episode.x[0], episode.v[0], episode.dt)
    rmse = np.sqrt(np.mean((s - episode.s[None, :]) ** 2, axis=1))
    return np.where(hit | ~np.isfinite(rmse), COLLISION_PENALTY, rmse)


@dataclass
class FixedFit:
    theta: IdmParams
    rmse: float
    improved: bool


def calibrate_fixed(episode: CFEpisode, bounds: ParamBounds | None = None, seed: int = 0,
                    maxiter: int = 60, popsize: int = 12, polish_iters: int = 2000,
                    initial=None) -> FixedFit:
    """Bounded global search for the constant parameters with least closed-loop RMSE.

    Differential evolution (population evaluated in one vectorised rollout)
    followed by a bounded Nelder-Mead polish.  ``improved`` is False, with a
    warning, when nothing beats the initial guess.
    """
    bounds = bounds or ParamBounds()
    if len(episode) < 50:
        raise ValueError("fixed calibration needs at least 50 frames")
    x0 = bounds.clip(initial) if initial is not None else (bounds.lb + bounds.ub) / 2.0
    base = float(_population_rmse(episode, x0[None, :])[0])

    res = optimize.differential_evolution(
        lambda X: _population_rmse(episode, np.asarray(X).T), list(zip(bounds.lb, bounds.ub)),
        maxiter=maxiter, popsize=popsize, seed=seed, polish=False, vectorized=True, updating="deferred",
        init="latinhypercube", tol=1e-10,
    )
    best, best_f = res.x, float(res.fun)
    args = (episode.x_lead.tolist(), episode.v_lead.tolist(), episode.s.tolist(), episode.leader_length,
            float(episode.x[0]), float(episode.v[0]), episode.dt)
    nm = optimize.minimize(_scalar_rmse, best, args=args,
                           method="Nelder-Mead", bounds=list(zip(bounds.lb, bounds.ub)),
                           options={"maxiter": polish_iters, "xatol": 1e-6, "fatol": 1e-9})
    if nm.fun < best_f:
        best, best_f = nm.x, float(nm.fun)
    improved = best_f < base
    if not improved:
        warnings.warn("fixed calibration did not improve on the initial guess", RuntimeWarning)
        best, best_f = x0, base
    return FixedFit(IdmParams.from_array(bounds.clip(best)), best_f, improved)


# ----------------------------------------------------------------------------
# per-step goodness of fit

def _window(episode: CFEpisode, k: int, stride: int) -> int:
    if not 0 <= k < len(episode) - 1:
        raise IndexError(f"frame {k} has no successor in an episode of {len(episode)} frames")
    return min(stride, len(episode) - 1 - k)


def per_step_gof(theta, episode: CFEpisode, k: int, stride: int = 5) -> float:
    """Spacing RMSE of a short open-start rollout from the observed state at frame k.

    The follower starts from its observed position and speed at frame ``k``,
    is advanced ``stride`` frames with constant ``theta`` and compared to the
    observed spacing at frames ``k+1 .. k+stride`` (truncated at the episode end).
    """
    h = _window(episode, k, stride)
    state = episode.state(k)
    sim = []
    for j in range(k, k + h):
        s = episode.x_lead[j] - state.x - episode.leader_length
        cond = episode.condition(j)._replace(v=state.v, s=s, dv=state.v - episode.v_lead[j])
        if s <= 0:
            return float("inf")
        state = ballistic_step(state, idm_acceleration(theta, cond), episode.dt)
        sim.append(episode.x_lead[j + 1] - state.x - episode.leader_length)
    return gof_rmse(episode.s[k + 1:k + 1 + h], sim)


def per_step_gof_batch(thetas: np.ndarray, episode: CFEpisode, k: int, stride: int = 5) -> np.ndarray:
    """Vectorised :func:`per_step_gof` for an ``(N, 5)`` array of candidates."""
    h = _window(episode, k, stride)
    N = len(thetas)
    x = np.full(N, episode.x[k])
    v = np.full(N, episode.v[k])
    sq = np.zeros(N)
    bad = np.zeros(N, dtype=bool)
    L = episode.leader_length
    for j in range(k, k + h):
        s = episode.x_lead[j] - x - L
        bad |= s <= 0
        s = np.where(s <= 0, 1e-3, s)
        a = idm_acceleration_batch(thetas, v, v - episode.v_lead[j], s)
        x, v = ballistic_step_batch(x, v, a, episode.dt)
        sq += (episode.s[j + 1] - (episode.x_lead[j + 1] - x - L)) ** 2
    gof = np.sqrt(sq / h)
    return np.where(bad | ~np.isfinite(gof), np.inf, gof)


# ----------------------------------------------------------------------------
# time-varying calibration

def fit_gaussian(samples, var_floor=1e-12) -> GaussianParams:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or len(samples) < 2:
        raise ValueError("fit_gaussian needs at least two samples")
    var = np.maximum(samples.var(axis=0, ddof=1), var_floor)
    return GaussianParams(samples.mean(axis=0), var)


def sample_in_bounds(prior: GaussianParams, n: int, bounds: ParamBounds, rng: np.random.Generator,
                     max_attempts_factor: int = 10) -> np.ndarray:
    """Draw n samples, redrawing out-of-bounds rows; leftovers are clipped."""
    out = rng.normal(prior.mean, prior.std, size=(n, 5))
    bad = ~bounds.contains(out)
    budget = max_attempts_factor * n
    while bad.any() and budget > 0:
        idx = np.flatnonzero(bad)[:budget]
        budget -= len(idx)
        out[idx] = rng.normal(prior.mean, prior.std, size=(len(idx), 5))
        bad[idx] = ~bounds.contains(out[idx])
    if bad.any():
        out[bad] = bounds.clip(out[bad])
    return out


@dataclass
class StepRecord:
    frame: int
    iterations: int
    fallback: bool
    early_stop: bool
    accepted_total: int


@dataclass
class ParamPosteriorSeries:
    driver_id: int
    times: np.ndarray
    frames: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    theta_fix: IdmParams
    stride: int
    steps: list[StepRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def __len__(self):
        return len(self.times)

    @property
    def posteriors(self) -> list[GaussianParams]:
        return [GaussianParams(m, v) for m, v in zip(self.means, self.vars)]

    @property
    def n_fallback(self) -> int:
        return sum(s.fallback for s in self.steps)

    def theta_per_frame(self, n_frames: int) -> np.ndarray:
        """Posterior means expanded to one parameter set per frame."""
        idx = np.minimum(np.arange(n_frames) // self.stride, len(self.means) - 1)
        return self.means[idx]


Hook = Callable[..., None]


def calibrate_time_varying(episode: CFEpisode, cfg: CalibConfig | None = None, bounds: ParamBounds | None = None,
                           seed: int = 0, theta_fix=None, hook: Hook | None = None) -> ParamPosteriorSeries:
    """Sequential rejection-sampling calibration of per-step parameter posteriors.

    ``hook(event, frame, **data)`` receives ``"prior"`` (the prior entering
    each step), ``"accepted"`` (samples and their GoF added to the accepted
    set) and ``"posterior"`` (the finalised posterior) events.
    """
    cfg = cfg or CalibConfig()
    bounds = bounds or ParamBounds()
    rng = np.random.default_rng(seed)
    if theta_fix is None:
        theta_fix = calibrate_fixed(episode, bounds, seed=seed).theta
    theta_fix = IdmParams.from_array(theta_fix)
    sigma2 = cfg.sigma_vector(bounds) ** 2
    floor = cfg.var_floor(bounds)
    fix_prior = GaussianParams(np.asarray(theta_fix), sigma2)

    prior = fix_prior
    frames = list(range(0, len(episode) - 1, cfg.stride))
    means, variances, steps = [], [], []
    for k in frames:
        if hook:
            hook("prior", k, prior=prior)
        accepted: list[np.ndarray] = []
        n_acc = 0
        ever_accepted = False
        early = False
        it = 0
        for it in range(1, cfg.max_iters + 1):
            draw = sample_in_bounds(prior, cfg.n_samples, bounds, rng)
            gof = per_step_gof_batch(draw, episode, k, cfg.stride)
            ok = gof < cfg.eps
            n_new = int(ok.sum())
            if n_new:
                accepted.append(draw[ok])
                n_acc += n_new
                ever_accepted = True
                if hook:
                    hook("accepted", k, samples=draw[ok], gof=gof[ok])
            if n_acc == 0:
                prior = GaussianParams(draw[int(np.argmin(gof))], sigma2)
            elif n_acc > cfg.n_min:
                prior = fit_gaussian(np.concatenate(accepted), floor)
                prior = GaussianParams(bounds.clip(prior.mean), prior.var)
                accepted, n_acc = [], 0
            if n_new / cfg.n_samples > cfg.p_pct:
                early = True
                break
        fallback = not ever_accepted
        if fallback:
            prior = fix_prior
        means.append(prior.mean.copy())
        variances.append(prior.var.copy())
        steps.append(StepRecord(k, it, fallback, early, n_acc))
        if hook:
            hook("posterior", k, posterior=prior)

    return ParamPosteriorSeries(
        driver_id=episode.follower_id, times=episode.t[frames].copy(), frames=np.asarray(frames),
        means=np.asarray(means).reshape(-1, 5), vars=np.asarray(variances).reshape(-1, 5),
        theta_fix=theta_fix, stride=cfg.stride, steps=steps, config=cfg.to_dict(), seed=seed,
    )


def time_varying_accelerations(episode: CFEpisode, series: ParamPosteriorSeries) -> np.ndarray:
    """IDM accelerations on the observed states using the posterior mean of each step."""
    theta = series.theta_per_frame(len(episode))
    return idm_acceleration_batch(theta, episode.v, episode.dv, episode.s)


# ----------------------------------------------------------------------------
# persistence

def write_posterior(series: ParamPosteriorSeries, path) -> None:
    """One header block (JSON) plus rows ``t,param,mean,var``."""
    header = {
        "driver_id": series.driver_id,
        "theta_fix": list(series.theta_fix),
        "stride": series.stride,
        "seed": series.seed,
        "config": series.config,
        "frames": [int(f) for f in series.frames],
        "steps": [asdict(s) for s in series.steps],
    }
    with open(path, "w", newline="\n") as fh:
        fh.write(POSTERIOR_MAGIC + "\n")
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("t,param,mean,var\n")
        for t, m, v in zip(series.times, series.means, series.vars):
            for name, mi, vi in zip(PARAM_NAMES, m, v):
                fh.write(f"{float(t)!r},{name},{float(mi)!r},{float(vi)!r}\n")


def read_posterior(path) -> ParamPosteriorSeries:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != POSTERIOR_MAGIC:
        raise ValueError(f"{path}: not a posterior file")
    header = json.loads(lines[1][2:])
    rows = [ln.split(",") for ln in lines[3:] if ln]
    n = len(rows) // 5
    times = np.array([float(rows[5 * i][0]) for i in range(n)])
    means = np.array([float(r[2]) for r in rows]).reshape(n, 5)
    variances = np.array([float(r[3]) for r in rows]).reshape(n, 5)
    return ParamPosteriorSeries(
        driver_id=header["driver_id"], times=times, frames=np.asarray(header["frames"], dtype=int),
        means=means, vars=variances, theta_fix=IdmParams(*header["theta_fix"]), stride=header["stride"],
        steps=[StepRecord(**s) for s in header["steps"]], config=header["config"], seed=header["seed"],
    )


def simulate_with_series(episode: CFEpisode, series: ParamPosteriorSeries):
    """Closed-loop rollout through :func:`simulate_follower` using posterior means."""
    theta = series.theta_per_frame(len(episode))
    t0 = episode.t[0]

    def accel(t, cond):
        k = int(round((t - t0) / episode.dt))
        return idm_acceleration(theta[k], cond)

    return simulate_follower(episode.leader(), KinematicState(episode.x[0], episode.v[0]), accel, episode.dt)
