"""Calibrate one synthetic driver with fixed and with time-varying parameters.

Run: python demos/02_calibration.py   (about a minute)
"""
import numpy as np

from hybridcf import CalibConfig, calibrate_fixed, calibrate_time_varying, closed_loop_rmse
from hybridcf.synthetic import make_population

driver = make_population(1, seed=3, reactivity=0.0, drift=0.05, hold=25)[0]
ep = driver.episode

fixed = calibrate_fixed(ep, seed=0)
print("fixed parameters:", np.round(fixed.theta, 3), f"rmse {fixed.rmse:.4f} m")

cfg = CalibConfig(n_samples=500, max_iters=50, eps=0.005, sigma_frac=0.02, stride=25)
series = calibrate_time_varying(ep, cfg, seed=0, theta_fix=fixed.theta)
per_frame = series.theta_per_frame(len(ep))
print(f"time-varying rmse {closed_loop_rmse(ep, per_frame):.4f} m over {len(series.steps)} steps, "
      f"{series.n_fallback} fallbacks")

# how well is the drifting desired headway tracked?
truth_T = driver.schedule[:, 1]
print("T truth   (every 5 s):", np.round(truth_T[::125], 3))
print("T tracked (every 5 s):", np.round(per_frame[::125, 1], 3))
