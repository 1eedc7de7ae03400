"""Neural-process car-following model in plain numpy.

Three networks:

* deterministic encoder ``(x, y) -> r_i`` (7 -> 128 -> 128 -> 128 -> 5), mean
  aggregated into the style vector ``r``;
* latent encoder ``(x, y) -> h_i`` (7 -> 5 -> 5), mean aggregated, then two
  linear heads give ``mu_z`` and ``sigma_z``;
* decoder ``(x, r, z) -> (mu_y, sigma_y)`` (12 -> 128 -> 128 -> 128, two
  heads), with ``mu_y`` clipped to the acceleration bounds.

Gradients are computed by hand (reverse mode over a recorded tape) and the
weights are updated with Adam.  Traffic conditions ``x`` are standardised with
training-set constants stored in the model; accelerations ``y`` are used raw.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

MODEL_MAGIC = b"HCFNP\x00\x00\x01"
MODEL_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
X_DIM = 6
R_DIM = 5
Z_DIM = 1


class TrainingError(RuntimeError):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


ACTIVATIONS = {
    "softplus": (_softplus, expit),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)),
}


@dataclass
class NPArch:
    det_hidden: tuple = (128, 128, 128)
    lat_hidden: tuple = (5, 5)
    dec_hidden: tuple = (128, 128, 128)
    activation: str = "softplus"
    accel_bounds: tuple = (-5.0, 5.0)
    sigma_floor: float = 1e-3

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) of every dense layer, in serialisation order."""
        shapes = []
        dims = [X_DIM + 1, *self.det_hidden, R_DIM]
        shapes += [(f"det.{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        dims = [X_DIM + 1, *self.lat_hidden]
        shapes += [(f"lat.{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        shapes += [("lat.mu", dims[-1], Z_DIM), ("lat.sigma", dims[-1], Z_DIM)]
        dims = [X_DIM + R_DIM + Z_DIM, *self.dec_hidden]
        shapes += [(f"dec.{i}", a, b) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        shapes += [("dec.mu", dims[-1], 1), ("dec.sigma", dims[-1], 1)]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NPArch":
        d = dict(d)
        for k in ("det_hidden", "lat_hidden", "dec_hidden", "accel_bounds"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class NPModel:
    arch: NPArch
    params: dict[str, np.ndarray]
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(X_DIM))
    x_std: np.ndarray = field(default_factory=lambda: np.ones(X_DIM))

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_std

    def param_names(self) -> list[str]:
        return [f"{name}.{p}" for name, _, _ in self.arch.layer_shapes() for p in ("W", "b")]

    def copy(self) -> "NPModel":
        return NPModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.x_mean.copy(),
                       self.x_std.copy())


def init_model(arch: NPArch | None = None, seed: int = 0, x_mean=None, x_std=None) -> NPModel:
    arch = arch or NPArch()
    if arch.activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {arch.activation!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in arch.layer_shapes():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    model = NPModel(arch, params)
    if x_mean is not None:
        model.x_mean = np.asarray(x_mean, dtype=float)
    if x_std is not None:
        model.x_std = np.asarray(x_std, dtype=float)
    return model


# ----------------------------------------------------------------------------
# forward / backward building blocks

def _mlp_forward(model: NPModel, prefix: str, n_layers: int, h: np.ndarray, final_linear: bool):
    act = ACTIVATIONS[model.arch.activation][0]
    cache = []
    for i in range(n_layers):
        W, b = model.params[f"{prefix}.{i}.W"], model.params[f"{prefix}.{i}.b"]
        pre = h @ W + b
        cache.append((h, pre))
        h = pre if (final_linear and i == n_layers - 1) else act(pre)
    return h, cache


def _mlp_backward(model: NPModel, prefix: str, cache, dout: np.ndarray, grads: dict, final_linear: bool):
    dact = ACTIVATIONS[model.arch.activation][1]
    n = len(cache)
    for i in reversed(range(n)):
        h, pre = cache[i]
        if not (final_linear and i == n - 1):
            dout = dout * dact(pre)
        W = model.params[f"{prefix}.{i}.W"]
        _acc(grads, f"{prefix}.{i}.W", h.T @ dout)
        _acc(grads, f"{prefix}.{i}.b", dout.sum(axis=0))
        dout = dout @ W.T
    return dout


def _acc(grads: dict, key: str, value: np.ndarray):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def _head(model: NPModel, name: str, h: np.ndarray) -> np.ndarray:
    return (h @ model.params[f"{name}.W"] + model.params[f"{name}.b"])[..., 0]


def _xy(model: NPModel, x, y) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    if len(x) == 0:
        raise ValueError("encoder needs at least one point")
    return np.hstack([model.standardize(x), y])


class LatentDist(NamedTuple):
    mu_z: float
    sigma_z: float


def _det_forward(model: NPModel, xy: np.ndarray):
    out, cache = _mlp_forward(model, "det", len(model.arch.det_hidden) + 1, xy, final_linear=True)
    return out.mean(axis=0), cache


def _lat_forward(model: NPModel, xy: np.ndarray):
    h, cache = _mlp_forward(model, "lat", len(model.arch.lat_hidden), xy, final_linear=False)
    hbar = h.mean(axis=0, keepdims=True)
    mu = float(_head(model, "lat.mu", hbar)[0])
    raw = float(_head(model, "lat.sigma", hbar)[0])
    sigma = float(_softplus(raw)) + model.arch.sigma_floor
    return mu, sigma, raw, (cache, hbar, len(xy))


def _dec_forward(model: NPModel, xs: np.ndarray, r: np.ndarray, z: float):
    m = len(xs)
    inp = np.hstack([xs, np.broadcast_to(r, (m, R_DIM)), np.full((m, 1), z)])
    h, cache = _mlp_forward(model, "dec", len(model.arch.dec_hidden), inp, final_linear=False)
    mu_raw = _head(model, "dec.mu", h)
    sig_raw = _head(model, "dec.sigma", h)
    lo, hi = model.arch.accel_bounds
    mu = np.clip(mu_raw, lo, hi)
    sigma = _softplus(sig_raw) + model.arch.sigma_floor
    return mu, sigma, (cache, h, mu_raw, sig_raw)


# ----------------------------------------------------------------------------
# public operations

def encode_deterministic(model: NPModel, x, y) -> np.ndarray:
    """Style vector: mean of per-point deterministic-encoder outputs."""
    return _det_forward(model, _xy(model, x, y))[0]


def encode_latent(model: NPModel, x, y) -> LatentDist:
    mu, sigma, _, _ = _lat_forward(model, _xy(model, x, y))
    return LatentDist(mu, sigma)


def decode(model: NPModel, x, r, z: float) -> tuple[np.ndarray, np.ndarray]:
    """Acceleration mean and std for traffic conditions ``x`` (raw units)."""
    xs = model.standardize(np.atleast_2d(x))
    mu, sigma, _ = _dec_forward(model, xs, np.asarray(r, dtype=float).reshape(R_DIM), float(z))
    return mu, sigma


def kl_normal(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """KL( N(mu1, s1^2) || N(mu2, s2^2) )."""
    return math.log(s2 / s1) + (s1 * s1 + (mu1 - mu2) ** 2) / (2.0 * s2 * s2) - 0.5


class LossTerms(NamedTuple):
    total: float
    nll: float
    kl: float
    rec: float


@dataclass
class _Tape:
    xyC: np.ndarray
    xyT: np.ndarray
    yT: np.ndarray
    xi: float
    det_cache: list
    latC: tuple
    latT: tuple
    dec: tuple
    r: np.ndarray
    z: float
    mu: np.ndarray
    sigma: np.ndarray


def np_loss(model: NPModel, context, target, xi: float):
    """Training loss for one context/target split.

    ``context`` and ``target`` are ``(x, y)`` pairs.  The deterministic path
    sees the context only; ``z = mu_T + sigma_T * xi`` is drawn from the
    latent distribution of the targets (reparameterised).  Returns the loss
    terms and a tape for :func:`backward`.
    """
    xyC = _xy(model, *context)
    xyT = _xy(model, *target)
    yT = xyT[:, -1]
    r, det_cache = _det_forward(model, xyC)
    muC, sC, rawC, cC = _lat_forward(model, xyC)
    muT, sT, rawT, cT = _lat_forward(model, xyT)
    z = muT + sT * xi
    mu, sigma, dcache = _dec_forward(model, xyT[:, :X_DIM], r, z)
    resid = mu - yT
    nll = float(np.sum(np.log(sigma) + 0.5 * LOG_2PI + resid ** 2 / (2.0 * sigma ** 2)))
    kl = kl_normal(muC, sC, muT, sT)
    rec = float(np.sqrt(np.sum(resid ** 2)))
    tape = _Tape(xyC, xyT, yT, xi, det_cache, (muC, sC, rawC, cC), (muT, sT, rawT, cT), dcache, r, z, mu, sigma)
    return LossTerms(nll + kl + rec, nll, kl, rec), tape


def _lat_backward(model: NPModel, lat, dmu: float, dsigma: float, grads: dict):
    _, _, raw, (cache, hbar, n) = lat
    draw = dsigma * float(expit(raw))
    for name, d in (("lat.mu", dmu), ("lat.sigma", draw)):
        _acc(grads, f"{name}.W", hbar.T * d)
        _acc(grads, f"{name}.b", np.array([d]))
    dh = (dmu * model.params["lat.mu.W"][:, 0] + draw * model.params["lat.sigma.W"][:, 0])[None, :]
    dh = np.repeat(dh / n, n, axis=0)
    _mlp_backward(model, "lat", cache, dh, grads, final_linear=False)


def backward(model: NPModel, tape: _Tape) -> dict[str, np.ndarray]:
    """Gradients of the total loss with respect to every weight."""
    grads: dict[str, np.ndarray] = {}
    mu, sigma, yT = tape.mu, tape.sigma, tape.yT
    resid = mu - yT
    rec = math.sqrt(float(np.sum(resid ** 2)))
    dmu = resid / sigma ** 2 + (resid / rec if rec > 0 else 0.0)
    dsigma = 1.0 / sigma - resid ** 2 / sigma ** 3

    cache, h, mu_raw, sig_raw = tape.dec
    lo, hi = model.arch.accel_bounds
    dmu_raw = dmu * ((mu_raw > lo) & (mu_raw < hi))
    dsig_raw = dsigma * expit(sig_raw)
    for name, d in (("dec.mu", dmu_raw), ("dec.sigma", dsig_raw)):
        _acc(grads, f"{name}.W", h.T @ d[:, None])
        _acc(grads, f"{name}.b", np.array([d.sum()]))
    dh = np.outer(dmu_raw, model.params["dec.mu.W"][:, 0]) + np.outer(dsig_raw, model.params["dec.sigma.W"][:, 0])
    dinp = _mlp_backward(model, "dec", cache, dh, grads, final_linear=False)
    dr = dinp[:, X_DIM:X_DIM + R_DIM].sum(axis=0)
    dz = float(dinp[:, X_DIM + R_DIM].sum())

    muC, sC = tape.latC[0], tape.latC[1]
    muT, sT = tape.latT[0], tape.latT[1]
    diff = muC - muT
    dmuC = diff / sT ** 2
    dsC = -1.0 / sC + sC / sT ** 2
    dmuT = -diff / sT ** 2 + dz
    dsT = 1.0 / sT - (sC ** 2 + diff ** 2) / sT ** 3 + dz * tape.xi
    _lat_backward(model, tape.latC, dmuC, dsC, grads)
    _lat_backward(model, tape.latT, dmuT, dsT, grads)

    n = len(tape.xyC)
    _mlp_backward(model, "det", tape.det_cache, np.repeat(dr[None, :] / n, n, axis=0), grads, final_linear=True)
    for k, v in model.params.items():
        grads.setdefault(k, np.zeros_like(v))
    return grads


# ----------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.9
    decay_every: int = 50
    epochs: int = 200
    n_context: tuple = (5, 50)
    n_extra_target: tuple = (5, 50)
    steps_per_driver: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``decay`` every ``decay_every`` epochs (0-based)."""
        return self.lr * self.decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        for k in ("n_context", "n_extra_target"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class DriverPoints:
    driver_id: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class TrainResult:
    model: NPModel
    loss_curve: np.ndarray
    term_curve: np.ndarray


def sample_split(rng: np.random.Generator, n: int, cfg: TrainConfig):
    """Random context indices plus extra targets drawn from the rest without replacement."""
    nc = int(rng.integers(cfg.n_context[0], cfg.n_context[1] + 1))
    nc = max(1, min(nc, n - 1))
    ne = int(rng.integers(cfg.n_extra_target[0], cfg.n_extra_target[1] + 1))
    ne = max(1, min(ne, n - nc))
    perm = rng.permutation(n)
    ctx = perm[:nc]
    return ctx, np.concatenate([ctx, perm[nc:nc + ne]])


def standardization(dataset: list[DriverPoints]) -> tuple[np.ndarray, np.ndarray]:
    allx = np.concatenate([d.x for d in dataset])
    mean = allx.mean(axis=0)
    std = allx.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def train(dataset: list[DriverPoints], cfg: TrainConfig | None = None, arch: NPArch | None = None,
          model: NPModel | None = None) -> TrainResult:
    """Fit the model with one Adam step per driver per epoch (driver order shuffled)."""
    cfg = cfg or TrainConfig()
    if len(dataset) < 2:
        raise ValueError("training needs at least two drivers")
    if any(len(d) < 20 for d in dataset):
        raise ValueError("every driver needs at least 20 points")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        mean, std = standardization(dataset)
        model = init_model(arch, seed=int(rng.integers(2**31)), x_mean=mean, x_std=std)
    opt = Adam(model.params)
    curve, terms_curve = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        ep_terms = []
        for di in rng.permutation(len(dataset)):
            d = dataset[di]
            for _ in range(cfg.steps_per_driver):
                ctx, tgt = sample_split(rng, len(d), cfg)
                xi = float(rng.standard_normal())
                terms, tape = np_loss(model, (d.x[ctx], d.y[ctx]), (d.x[tgt], d.y[tgt]), xi)
                if not np.isfinite(terms.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, driver {d.driver_id}: {terms}; "
                                        f"context size {len(ctx)}, target size {len(tgt)}")
                opt.step(model.params, backward(model, tape), lr)
                ep_terms.append(terms)
        arr = np.asarray(ep_terms)
        curve.append(arr[:, 0].mean())
        terms_curve.append(arr.mean(axis=0))
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, curve[-1])
    return TrainResult(model, np.asarray(curve), np.asarray(terms_curve))


def predict(model: NPModel, context, x_targets, mode: str = "mean", rng: np.random.Generator | None = None,
            r=None) -> tuple[np.ndarray, np.ndarray]:
    """Predict acceleration mean/std at ``x_targets`` given context points.

    ``mode="mean"`` uses z = mu_z (deterministic); ``"sample"`` draws z.  With
    an empty context the caller must supply ``r`` and z comes from N(0, 1).
    """
    cx, cy = context if context is not None else (np.zeros((0, X_DIM)), np.zeros(0))
    if len(cy):
        r = encode_deterministic(model, cx, cy) if r is None else r
        lat = encode_latent(model, cx, cy)
    else:
        if r is None:
            raise ValueError("empty context requires a caller-supplied style vector r")
        lat = LatentDist(0.0, 1.0)
    if mode == "mean":
        z = lat.mu_z
    elif mode == "sample":
        rng = rng or np.random.default_rng()
        z = lat.mu_z + lat.sigma_z * float(rng.standard_normal())
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return decode(model, x_targets, r, z)


# ----------------------------------------------------------------------------
# persistence

def save_model(model: NPModel, path) -> None:
    """Binary layout: magic, u32 version, u32 descriptor length, JSON descriptor,
    6 f8 means, 6 f8 stds, then each layer's W (row-major) and b as <f8."""
    desc = {"arch": model.arch.to_dict(),
            "layers": [[n, a, b] for n, a, b in model.arch.layer_shapes()]}
    blob = json.dumps(desc, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(blob)))
    buf.write(blob)
    buf.write(np.asarray(model.x_mean, dtype="<f8").tobytes())
    buf.write(np.asarray(model.x_std, dtype="<f8").tobytes())
    for name in model.param_names():
        buf.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> NPModel:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 16
    desc = json.loads(data[off:off + n])
    off += n
    arch = NPArch.from_dict(desc["arch"])

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float).reshape(shape)
        off += 8 * count
        return arr

    x_mean, x_std = take(X_DIM, (X_DIM,)), take(X_DIM, (X_DIM,))
    params = {}
    for name, a, b in arch.layer_shapes():
        params[f"{name}.W"] = take(a * b, (a, b))
        params[f"{name}.b"] = take(b, (b,))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in model file")
    return NPModel(arch, params, x_mean, x_std)
