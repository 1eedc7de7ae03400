"""Shared, session-scoped synthetic worlds for the heavier tests.

Two populations are built once per session:

* ``calib_world``: 20 drivers with slowly drifting, piecewise-constant IDM
  parameters, each calibrated with a fixed and a time-varying parameter set
  (desk-scale sampler settings).
* ``np_world``: 20 training drivers (5 episodes each) with leader-reactive
  parameters, a trained neural process, index values from time-varying
  calibration, the fitted style mapping, and 10 held-out test drivers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from hybridcf.calibration import CalibConfig, calibrate_fixed, calibrate_time_varying, closed_loop_rmse
from hybridcf.neural_process import DriverPoints, TrainConfig, encode_deterministic, train
from hybridcf.style import aggressiveness_index, fit_mapping, population_scaling
from hybridcf.synthetic import make_population, make_repeat_drivers

DESK_CALIB = CalibConfig(n_samples=500, max_iters=50, eps=0.005, sigma_frac=0.02, stride=25)
SEED = 0


@dataclass
class CalibWorld:
    drivers: list
    fixed: list
    series: list
    rmse_fixed: np.ndarray
    rmse_tv: np.ndarray
    events: list = field(default_factory=list)  # per driver: list of (event, frame, payload)


@pytest.fixture(scope="session")
def calib_world() -> CalibWorld:
    drivers = make_population(20, seed=SEED, reactivity=0.0, drift=0.05, hold=DESK_CALIB.stride)
    fixed, series, rf, rt, events = [], [], [], [], []
    for i, d in enumerate(drivers):
        ep = d.episode
        log: list = []

        def hook(event, frame, **data):
            log.append((event, frame, data))

        fx = calibrate_fixed(ep, seed=i)
        s = calibrate_time_varying(ep, DESK_CALIB, seed=i, theta_fix=fx.theta, hook=hook)
        fixed.append(fx)
        series.append(s)
        rf.append(fx.rmse)
        rt.append(closed_loop_rmse(ep, s.theta_per_frame(len(ep))))
        events.append(log)
    return CalibWorld(drivers, fixed, series, np.asarray(rf), np.asarray(rt), events)


@dataclass
class NPWorld:
    train_drivers: list        # list of lists of SyntheticDriver (episodes per driver)
    dataset: list              # DriverPoints per training driver
    result: object             # TrainResult
    H: np.ndarray
    styles: np.ndarray
    mapping: object
    series: list               # posterior series of each training driver's first episode
    test_drivers: list         # 10 held-out drivers, 30 s
    profiles: list             # 10 held-out drivers, 90 s (leader profiles for style simulation)

    @property
    def model(self):
        return self.result.model


@pytest.fixture(scope="session")
def np_world() -> NPWorld:
    groups = make_repeat_drivers(20, 5, seed=SEED + 100, gap_jitter=0.5, reactivity=0.6)
    dataset = [DriverPoints(g[0].driver_id, np.concatenate([d.episode.conditions() for d in g]),
                            np.concatenate([d.episode.a for d in g])) for g in groups]
    result = train(dataset, TrainConfig(epochs=200, seed=SEED))
    series = []
    for i, g in enumerate(groups):
        ep = g[0].episode
        fx = calibrate_fixed(ep, seed=i)
        series.append(calibrate_time_varying(ep, DESK_CALIB, seed=i, theta_fix=fx.theta))
    scaling = population_scaling(series)
    H = np.array([aggressiveness_index(s, scaling) for s in series])
    styles = np.array([encode_deterministic(result.model, d.x, d.y) for d in dataset])
    mapping = fit_mapping(H, styles, scaling)
    test = make_population(10, seed=SEED, gap_jitter=0.3, reactivity=0.6)
    profiles = make_population(10, seed=SEED + 1, gap_jitter=0.3, reactivity=0.6, duration=90.0, first_id=3000)
    return NPWorld(groups, dataset, result, H, styles, mapping, series, test, profiles)


# ----------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion in the terminal summary

def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    """Call ``acceptance(number, passed, detail)``; the line is printed now and in the summary."""
    lines = request.config._acceptance_lines

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
