"""Follow a leader that brakes hard, using fixed IDM parameters.

Run: python demos/01_idm_basics.py
"""
import numpy as np

from hybridcf import IdmParams, TrafficCondition, equilibrium_spacing, idm_acceleration
from hybridcf.trajectory import generate_synthetic_episode

theta = IdmParams(v0=30.0, T=1.5, s0=2.0, a_max=1.0, b=2.0)

print("equilibrium gaps at a few speeds:")
for v in (5.0, 10.0, 20.0):
    print(f"  v={v:4.1f} m/s  s_eq={equilibrium_spacing(theta, v):6.2f} m")

# at the equilibrium gap the model asks for (almost) no acceleration
s_eq = equilibrium_spacing(theta, 10.0)
print("accel at equilibrium:", round(idm_acceleration(theta, TrafficCondition(dv=0.0, v=10.0, s=s_eq, v_lead=10.0, a_lat_lead=0.0, a_lon_lead=0.0)), 6))

# leader cruises at 12 m/s, then brakes to 2 m/s within two seconds
t = np.arange(0, 30, 0.04)
leader_speed = np.where(t < 10, 12.0, np.maximum(2.0, 12.0 - 5.0 * (t - 10)))
ep = generate_synthetic_episode(theta, leader_speed)
k = int(np.argmin(ep.s))
print(f"closest approach {ep.s[k]:.2f} m at t={ep.t[k]:.2f} s, follower speed {ep.v[k]:.2f} m/s")
print(f"strongest braking {ep.a.min():.2f} m/s^2")
