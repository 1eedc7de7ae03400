"""Aggressiveness index from parameter series, and the index-to-style map.

Run: python demos/04_style_index.py
"""
import numpy as np

from hybridcf import aggressiveness_index, fit_mapping, population_scaling, style_from_index
from hybridcf.idm import ParamBounds

bounds = ParamBounds()
rng = np.random.default_rng(0)

# hand-made series: an 'aggressive' driver keeps short gaps and strong acceleration
calm = bounds.lb + np.array([0.3, 0.7, 0.6, 0.3, 0.3]) * bounds.width
bold = bounds.lb + np.array([0.7, 0.2, 0.2, 0.7, 0.6]) * bounds.width
population = []
for level in np.linspace(0, 1, 8):
    centre = (1 - level) * calm + level * bold
    population.append(centre * (1 + 0.03 * np.cumsum(rng.normal(0, 0.3, (40, 5)), axis=0)))

scaling = population_scaling(population)
H = np.array([aggressiveness_index(s, scaling) for s in population])
print("index per driver (calm -> bold):", np.round(H, 2))

# pretend the style vectors line up with the index, plus a little noise
direction = np.array([0.5, -0.5, 0.5, 0.0, 0.5])
styles = np.outer(H, direction) + rng.normal(0, 0.05, (len(H), 5))
mapping = fit_mapping(H, styles, scaling)
print("map diagnostics:", {k: round(v, 3) for k, v in mapping.diagnostics.items()})
for h in (0.0, 2.5, 5.0):
    print(f"  H={h}: style {np.round(style_from_index(h, mapping), 2)}")
