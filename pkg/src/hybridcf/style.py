"""Aggressiveness index from time-varying IDM parameters and its link to the NP style vector.

The index sums, per parameter, statistics of the (bound-normalised) parameter
trajectory and of the scaled increase/decrease amplitudes, signed by how the
parameter relates to aggressive driving::

    H = sum_i R_i * (M_i + Q1_i + Q3_i + M(d+)_i + S(d+)_i - M(d-)_i - S(d-)_i)
    R = (+1, -1, -1, +1, -1)   for (v0, T, s0, a_max, b)

A one-component PCA of the style vectors and an affine fit from H to the
reduced coordinate then let any H be turned into a style vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .idm import ParamBounds

SIGNS = np.array([1.0, -1.0, -1.0, 1.0, -1.0])


class DegenerateInputError(ValueError):
    pass


def _as_series(series) -> np.ndarray:
    means = getattr(series, "means", series)
    arr = np.asarray(means, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def raw_differential_sequences(series) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per parameter: (increments > 0, increments < 0), zeros discarded, unscaled."""
    arr = _as_series(series)
    if len(arr) < 2:
        raise ValueError("differential sequences need at least two time steps")
    d = np.diff(arr, axis=0)
    return [(d[:, i][d[:, i] > 0], d[:, i][d[:, i] < 0]) for i in range(arr.shape[1])]


@dataclass
class DiffScaling:
    """Population-wide min/max of increase and decrease amplitudes per parameter."""

    pos_min: np.ndarray
    pos_max: np.ndarray
    neg_min: np.ndarray
    neg_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffScaling":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("pos_min", "pos_max", "neg_min", "neg_max")))


def population_scaling(population) -> DiffScaling:
    """Pool the differential sequences of every driver to fix the [0, 1] scaling."""
    seqs = [raw_differential_sequences(s) for s in population]
    p = len(seqs[0])
    out = {k: np.zeros(p) for k in ("pos_min", "pos_max", "neg_min", "neg_max")}
    for i in range(p):
        pos = np.concatenate([s[i][0] for s in seqs])
        neg = np.abs(np.concatenate([s[i][1] for s in seqs]))
        out["pos_min"][i], out["pos_max"][i] = (pos.min(), pos.max()) if len(pos) else (0.0, 1.0)
        out["neg_min"][i], out["neg_max"][i] = (neg.min(), neg.max()) if len(neg) else (0.0, 1.0)
    return DiffScaling(**out)


def _scale(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.where(values > 0, 1.0, 0.0) if span == 0 else np.zeros_like(values)
    return np.clip((values - lo) / span, 0.0, 1.0)


def differential_sequences(series, scaling: DiffScaling | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Increase and decrease sub-sequences per parameter.

    Without ``scaling`` the raw signed increments are returned.  With it,
    increases and decrease *amplitudes* are min-max scaled into [0, 1].
    """
    raw = raw_differential_sequences(series)
    if scaling is None:
        return raw
    return [(_scale(pos, scaling.pos_min[i], scaling.pos_max[i]),
             _scale(np.abs(neg), scaling.neg_min[i], scaling.neg_max[i])) for i, (pos, neg) in enumerate(raw)]


def _mean_std(x: np.ndarray) -> tuple[float, float]:
    if len(x) == 0:
        return 0.0, 0.0
    return float(np.mean(x)), float(np.std(x))


def index_terms(series, scaling: DiffScaling, bounds: ParamBounds | None = None, normalize: bool = True) -> np.ndarray:
    """Unsigned per-parameter bracket of the index, shape ``(5,)``."""
    arr = _as_series(series)
    if len(arr) == 0:
        raise ValueError("empty parameter series")
    vals = (bounds or ParamBounds()).normalize(arr) if normalize else arr
    q1, q3 = np.percentile(vals, [25, 75], axis=0, method="linear")
    stat = vals.mean(axis=0) + q1 + q3
    if len(arr) < 2:
        return stat
    terms = stat.copy()
    for i, (pos, neg) in enumerate(differential_sequences(arr, scaling)):
        mp, sp = _mean_std(pos)
        mn, sn = _mean_std(neg)
        terms[i] += mp + sp - mn - sn
    return terms


def aggressiveness_index(series, scaling: DiffScaling, bounds: ParamBounds | None = None,
                         normalize: bool = True) -> float:
    """Scalar aggressiveness of one driver from its per-step posterior means."""
    return float(SIGNS @ index_terms(series, scaling, bounds, normalize))


# ----------------------------------------------------------------------------
# PCA and the index -> style map

@dataclass
class PCAResult:
    W: np.ndarray
    u: np.ndarray
    explained_ratio: float

    def reduce(self, styles) -> np.ndarray:
        return (np.atleast_2d(styles) - self.u) @ self.W

    def reconstruct(self, reduced) -> np.ndarray:
        return np.outer(np.atleast_1d(reduced), self.W) + self.u


def fit_pca(styles) -> PCAResult:
    """Leading principal direction of the style vectors (first nonzero entry positive)."""
    X = np.asarray(styles, dtype=float)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("PCA needs at least three style vectors")
    u = X.mean(axis=0)
    cov = np.cov(X - u, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(1.0, np.abs(X).max() ** 2):
        raise DegenerateInputError("style vectors have no spread")
    W = evecs[:, -1]
    nz = np.flatnonzero(np.abs(W) > 1e-12)
    if W[nz[0]] < 0:
        W = -W
    return PCAResult(W / np.linalg.norm(W), u, float(evals[-1] / evals.sum()))


def fit_style_map(H, reduced) -> tuple[float, float, float]:
    """Least-squares ``reduced = slope * H + intercept``; returns (slope, intercept, pearson r)."""
    H = np.asarray(H, dtype=float)
    y = np.asarray(reduced, dtype=float)
    if H.shape != y.shape or len(H) < 3:
        raise ValueError("need equal-length sequences of at least three values")
    if np.ptp(H) == 0:
        raise DegenerateInputError("aggressiveness values have zero variance")
    if np.ptp(y) == 0:
        return 0.0, float(y[0]), 0.0
    slope, intercept = np.polyfit(H, y, 1)
    return float(slope), float(intercept), float(np.corrcoef(H, y)[0, 1])


@dataclass
class StyleMapping:
    W: np.ndarray
    u: np.ndarray
    slope: float
    intercept: float
    scaling: DiffScaling | None = None
    diagnostics: dict = field(default_factory=dict)

    def style(self, H) -> np.ndarray:
        """Style vector(s) for aggressiveness value(s) H."""
        H = np.asarray(H, dtype=float)
        out = np.multiply.outer(self.slope * H + self.intercept, self.W) + self.u
        return out

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(), "u": self.u.tolist(), "slope": self.slope, "intercept": self.intercept,
            "scaling": self.scaling.to_dict() if self.scaling else None, "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleMapping":
        return cls(np.asarray(d["W"], dtype=float), np.asarray(d["u"], dtype=float), float(d["slope"]),
                   float(d["intercept"]), DiffScaling.from_dict(d["scaling"]) if d.get("scaling") else None,
                   d.get("diagnostics", {}))


def style_from_index(H, mapping: StyleMapping) -> np.ndarray:
    return mapping.style(H)


def fit_mapping(H, styles, scaling: DiffScaling | None = None) -> StyleMapping:
    """PCA on the styles plus the affine index map, with fit diagnostics.

    ``reconstruction_rmse`` is the root mean squared Euclidean distance between
    each style and the style rebuilt from its index.
    """
    styles = np.asarray(styles, dtype=float)
    H = np.asarray(H, dtype=float)
    pca = fit_pca(styles)
    reduced = pca.reduce(styles)
    slope, intercept, corr = fit_style_map(H, reduced)
    mapping = StyleMapping(pca.W, pca.u, slope, intercept, scaling)
    rebuilt = mapping.style(H)
    mapping.diagnostics = {
        "pearson": corr,
        "reconstruction_rmse": float(np.sqrt(np.mean(np.sum((styles - rebuilt) ** 2, axis=1)))),
        "explained_ratio": pca.explained_ratio,
        "n_drivers": int(len(H)),
    }
    return mapping


def save_mapping(mapping: StyleMapping, path) -> None:
    Path(path).write_text(json.dumps(mapping.to_dict(), indent=2, sort_keys=True) + "\n")


def load_mapping(path) -> StyleMapping:
    return StyleMapping.from_dict(json.loads(Path(path).read_text()))
