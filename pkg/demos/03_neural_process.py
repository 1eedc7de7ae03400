"""Train a small neural process on a handful of synthetic drivers and query it.

Run: python demos/03_neural_process.py
"""
import numpy as np

from hybridcf import TrainConfig, encode_deterministic, predict, train
from hybridcf.neural_process import DriverPoints
from hybridcf.synthetic import make_population

drivers = make_population(6, seed=1, duration=20.0, gap_jitter=0.3)
data = [DriverPoints(d.driver_id, d.episode.conditions(), d.episode.a) for d in drivers]
result = train(data, TrainConfig(epochs=150, seed=0))
curve = result.loss_curve
print(f"loss: first {curve[0]:.1f}, last {curve[-1]:.1f}")

# each driver's context summarises into a 5-d style vector
for d in sorted(drivers, key=lambda d: d.aggressiveness)[::2]:
    r = encode_deterministic(result.model, d.episode.conditions(), d.episode.a)
    print(f"driver {d.driver_id} aggressiveness {d.aggressiveness:.2f} style {np.round(r, 2)}")

# predictive accelerations for one driver at three unseen states
d = drivers[0]
x = np.array([[0.0, 10.0, 15.0, 10.0, 0.0, 0.0],
              [0.0, 10.0, 40.0, 10.0, 0.0, 0.0],
              [0.0, 10.0, 25.0, 12.0, 0.0, 0.0]])
mu, sigma = predict(result.model, (d.episode.conditions(), d.episode.a), x)
for row, m, s in zip(x, mu, sigma):
    print(f"  gap {row[2]:4.0f} m, leader {row[3]:4.1f} m/s -> {m:+.2f} +/- {s:.2f} m/s^2")
