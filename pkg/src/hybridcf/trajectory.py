"""Trajectory ingestion, car-following episode extraction and episode files.

Raw input is a long-format delimited file with one row per (vehicle, frame).
Column names are configurable through :class:`ColumnMap`.  Extraction pairs
each car with its immediate same-lane predecessor, trims frames around lane
changes, drops stop-and-wait periods and keeps segments of sufficient length.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .idm import KinematicState, TrafficCondition, ballistic_step, equilibrium_spacing, idm_acceleration

log = logging.getLogger(__name__)

DEFAULT_DT = 0.04
DEFAULT_LEADER_LENGTH = 4.0
EPISODE_MAGIC = "# hybridcf episode v1"
EPISODE_COLUMNS = ("t", "v", "v_lead", "x", "x_lead", "s", "dv", "a", "a_lat_lead", "a_lon_lead")


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class ColumnMap:
    vehicle_id: str = "track_id"
    time: str = "time"
    position: str = "position"
    speed: str = "speed"
    lane: str = "lane"
    lat_acc: str = "lat_acc"
    lon_acc: str = "lon_acc"
    vehicle_class: str = "type"
    length: str = "length"

    REQUIRED = ("vehicle_id", "time", "position", "speed", "lane")

    @classmethod
    def from_dict(cls, d: dict | None) -> "ColumnMap":
        return cls(**(d or {}))


@dataclass
class Track:
    """Time-sorted frames of one vehicle."""

    vehicle_id: int
    vehicle_class: str
    length: float
    t: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    lane: np.ndarray
    a_lon: np.ndarray
    a_lat: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class LoadResult:
    tracks: dict[int, Track]
    n_rows: int
    n_malformed: int


def load_trajectories(path, columns: ColumnMap | None = None, dt: float = DEFAULT_DT,
                      delimiter: str = ",") -> LoadResult:
    """Read a trajectory file into per-vehicle tracks.

    Rows with unparseable numbers are dropped and counted; an empty cell in a
    required column is a schema error, as is a missing required column.
    """
    columns = columns or ColumnMap()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    missing = [getattr(columns, k) for k in ColumnMap.REQUIRED if getattr(columns, k) not in raw.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    numeric = ["vehicle_id", "time", "position", "speed", "lane", "lat_acc", "lon_acc", "length"]
    df = pd.DataFrame(index=raw.index)
    for key in ColumnMap.REQUIRED:
        col = raw[getattr(columns, key)].str.strip()
        empty = col == ""
        if empty.any():
            row = int(np.flatnonzero(empty.to_numpy())[0])
            raise SchemaError(f"row {row + 2}: empty value in required column '{getattr(columns, key)}'")
    for key in numeric:
        name = getattr(columns, key)
        if name in raw.columns:
            df[key] = pd.to_numeric(raw[name].str.strip().replace("", "nan"), errors="coerce")
        else:
            df[key] = np.nan
    cls_name = columns.vehicle_class
    df["vehicle_class"] = raw[cls_name].str.strip().str.lower() if cls_name in raw.columns else "car"

    bad = df[["vehicle_id", "time", "position", "speed", "lane"]].isna().any(axis=1)
    n_malformed = int(bad.sum())
    if n_malformed:
        log.warning("dropped %d malformed row(s) from %s", n_malformed, path)
    df = df[~bad]

    tracks: dict[int, Track] = {}
    for vid, g in df.groupby("vehicle_id", sort=True):
        vid = int(vid)
        t = g["time"].to_numpy(float)
        if np.any(np.diff(t) <= 0):
            raise DataError(f"vehicle {vid}: time is not strictly increasing")
        speed = g["speed"].to_numpy(float)
        if np.any(speed < 0):
            raise DataError(f"vehicle {vid}: negative speed")
        a_lon = g["lon_acc"].to_numpy(float)
        if np.isnan(a_lon).any():
            a_lon = _central_diff(speed, dt)
        a_lat = np.nan_to_num(g["lat_acc"].to_numpy(float))
        lengths = g["length"].to_numpy(float)
        length = float(lengths[0]) if np.isfinite(lengths[0]) else DEFAULT_LEADER_LENGTH
        tracks[vid] = Track(
            vehicle_id=vid,
            vehicle_class="car" if g["vehicle_class"].iloc[0] == "car" else "other",
            length=length,
            t=t,
            position=g["position"].to_numpy(float),
            speed=speed,
            lane=g["lane"].to_numpy().astype(int),
            a_lon=a_lon,
            a_lat=a_lat,
        )
    return LoadResult(tracks, len(raw), n_malformed)


def _central_diff(values: np.ndarray, dt: float) -> np.ndarray:
    if len(values) < 2:
        return np.zeros_like(values, dtype=float)
    return np.gradient(np.asarray(values, dtype=float), dt)


@dataclass
class LeaderFrames:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a_lat: np.ndarray
    a_lon: np.ndarray
    length: float = DEFAULT_LEADER_LENGTH


@dataclass
class CFEpisode:
    """Aligned follower/leader kinematics of one car-following episode."""

    follower_id: int
    leader_id: int
    dt: float
    leader_length: float
    t: np.ndarray
    v: np.ndarray
    v_lead: np.ndarray
    x: np.ndarray
    x_lead: np.ndarray
    s: np.ndarray
    dv: np.ndarray
    a: np.ndarray
    a_lat_lead: np.ndarray
    a_lon_lead: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return max(len(self) - 1, 0) * self.dt

    @property
    def key(self) -> str:
        start = int(round(self.t[0] / self.dt)) if len(self) else 0
        return f"{self.follower_id}_{self.leader_id}_{start}"

    def leader(self) -> LeaderFrames:
        return LeaderFrames(self.t, self.x_lead, self.v_lead, self.a_lat_lead, self.a_lon_lead, self.leader_length)

    def state(self, k: int) -> KinematicState:
        return KinematicState(float(self.x[k]), float(self.v[k]))

    def condition(self, k: int) -> TrafficCondition:
        return TrafficCondition(self.dv[k], self.v[k], self.s[k], self.v_lead[k], self.a_lat_lead[k], self.a_lon_lead[k])

    def conditions(self) -> np.ndarray:
        """All traffic conditions as an ``(n, 6)`` array."""
        return np.column_stack([self.dv, self.v, self.s, self.v_lead, self.a_lat_lead, self.a_lon_lead])

    def slice(self, start: int, stop: int | None = None) -> "CFEpisode":
        sl = slice(start, stop)
        arrays = {c: getattr(self, c)[sl].copy() for c in EPISODE_COLUMNS}
        return CFEpisode(self.follower_id, self.leader_id, self.dt, self.leader_length, **arrays)

    def frame_index(self, t: float) -> int:
        k = int(round((t - self.t[0]) / self.dt))
        if k < 0 or k >= len(self) or abs(self.t[k] - t) > 1e-6:
            raise LookupError(f"t={t} is not a frame time of episode {self.key}")
        return k


def derive_condition(episode: CFEpisode, t: float) -> TrafficCondition:
    return episode.condition(episode.frame_index(t))


@dataclass
class StopFilter:
    speed_eps: float = 0.1
    min_duration: float = 3.0


@dataclass
class ExtractionConfig:
    min_duration: float = 10.0
    trim_window: float = 2.0
    stop: StopFilter = field(default_factory=StopFilter)
    dt: float = DEFAULT_DT

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExtractionConfig":
        d = dict(d or {})
        stop = StopFilter(**d.pop("stop", {}))
        return cls(stop=stop, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExtractionReport:
    raw_vehicles: int = 0
    candidate_pairs: int = 0
    frames_lane_change: int = 0
    frames_stopped: int = 0
    frames_non_positive_gap: int = 0
    pairs_non_car: int = 0
    segments_too_short: int = 0
    episodes_kept: int = 0


def _runs(mask: np.ndarray):
    """Yield (start, stop) index pairs of consecutive True values."""
    if not len(mask):
        return
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    for a, b in zip(edges[::2], edges[1::2]):
        yield int(a), int(b)


def _lane_change_times(track: Track) -> np.ndarray:
    idx = np.flatnonzero(np.diff(track.lane) != 0) + 1
    return track.t[idx]


def _near(times: np.ndarray, events: np.ndarray, window: float) -> np.ndarray:
    if not len(events):
        return np.zeros(len(times), dtype=bool)
    return np.any(np.abs(times[:, None] - events[None, :]) <= window + 1e-9, axis=1)


def extract_cf_episodes(tracks: dict[int, Track], cfg: ExtractionConfig | None = None,
                        report: ExtractionReport | None = None) -> list[CFEpisode]:
    """Extract car-following episodes from per-vehicle tracks.

    The leader of a vehicle at a frame is the nearest vehicle ahead in the same
    lane.  Output order is deterministic (sorted by follower, then start time).
    """
    cfg = cfg or ExtractionConfig()
    report = report if report is not None else ExtractionReport()
    report.raw_vehicles = len(tracks)
    dt = cfg.dt
    if not tracks:
        return []

    rows = []
    for vid, tr in tracks.items():
        frames = np.rint(tr.t / dt).astype(np.int64)
        if len(tr) > 1 and np.any(np.abs(np.diff(tr.t) - dt) > 1e-6):
            raise DataError(f"vehicle {vid}: frame spacing differs from dt={dt}")
        rows.append(pd.DataFrame({"vid": vid, "frame": frames, "pos": tr.position, "lane": tr.lane,
                                  "idx": np.arange(len(tr))}))
    table = pd.concat(rows, ignore_index=True).sort_values(["frame", "lane", "pos", "vid"], kind="mergesort")
    grp = table.groupby(["frame", "lane"], sort=False)
    table["leader"] = grp["vid"].shift(-1)
    table["leader_idx"] = grp["idx"].shift(-1)
    table = table.dropna(subset=["leader"]).sort_values(["vid", "frame"], kind="mergesort")

    lane_changes = {vid: _lane_change_times(tr) for vid, tr in tracks.items()}
    episodes: list[CFEpisode] = []
    for vid, g in table.groupby("vid", sort=True):
        follower = tracks[int(vid)]
        frames = g["frame"].to_numpy()
        leaders = g["leader"].to_numpy().astype(np.int64)
        # split wherever the leader changes or a frame is skipped
        brk = np.flatnonzero((np.diff(frames) != 1) | (np.diff(leaders) != 0)) + 1
        bounds = np.concatenate([[0], brk, [len(frames)]])
        for a, b in zip(bounds[:-1], bounds[1:]):
            report.candidate_pairs += 1
            lid = int(leaders[a])
            leader = tracks[lid]
            if follower.vehicle_class != "car":
                report.pairs_non_car += 1
                continue
            fi = g["idx"].to_numpy()[a:b].astype(int)
            li = g["leader_idx"].to_numpy()[a:b].astype(int)
            episodes.extend(_clean_segments(follower, leader, fi, li, lane_changes, cfg, report))
    report.episodes_kept = len(episodes)
    return episodes


def _clean_segments(follower: Track, leader: Track, fi, li, lane_changes, cfg: ExtractionConfig,
                    report: ExtractionReport) -> list[CFEpisode]:
    dt = cfg.dt
    t = follower.t[fi]
    events = np.concatenate([lane_changes[follower.vehicle_id], lane_changes[leader.vehicle_id]])
    keep = ~_near(t, events, cfg.trim_window)
    report.frames_lane_change += int((~keep).sum())

    s = leader.position[li] - follower.position[fi] - leader.length
    bad_gap = s <= 0
    report.frames_non_positive_gap += int((bad_gap & keep).sum())
    keep &= ~bad_gap

    stopped = (follower.speed[fi] < cfg.stop.speed_eps) & (leader.speed[li] < cfg.stop.speed_eps)
    min_len = int(np.ceil(cfg.stop.min_duration / dt - 1e-9))
    for a, b in _runs(stopped):
        if b - a >= min_len:
            report.frames_stopped += int(keep[a:b].sum())
            keep[a:b] = False

    out = []
    for a, b in _runs(keep):
        if (b - a - 1) * dt < cfg.min_duration - 1e-9:
            report.segments_too_short += 1
            continue
        f, l = fi[a:b], li[a:b]
        v, vl = follower.speed[f], leader.speed[l]
        out.append(CFEpisode(
            follower_id=follower.vehicle_id, leader_id=leader.vehicle_id, dt=dt, leader_length=leader.length,
            t=follower.t[f].copy(), v=v.copy(), v_lead=vl.copy(), x=follower.position[f].copy(),
            x_lead=leader.position[l].copy(), s=s[a:b].copy(), dv=v - vl, a=follower.a_lon[f].copy(),
            a_lat_lead=leader.a_lat[l].copy(), a_lon_lead=leader.a_lon[l].copy(),
        ))
    return out


def generate_synthetic_episode(theta_schedule, leader_speed, dt: float = DEFAULT_DT, duration: float | None = None,
                               initial_gap: float | None = None, initial_speed: float | None = None,
                               leader_length: float = DEFAULT_LEADER_LENGTH, noise_std: float = 0.0,
                               rng: np.random.Generator | None = None, follower_id: int = 0,
                               leader_id: int = 1) -> CFEpisode:
    """Simulate a follower driven by IDM with a per-frame parameter schedule.

    ``theta_schedule`` is a single parameter set or an ``(n, 5)`` array.
    ``leader_speed`` is the leader speed per frame; leader positions are
    integrated with the trapezoid rule.  ``noise_std`` adds Gaussian
    observation noise to the stored spacing only.  The stored acceleration at
    frame k is the IDM value evaluated on the stored (noise-free) state.
    """
    leader_speed = np.asarray(leader_speed, dtype=float)
    n = len(leader_speed) if duration is None else min(len(leader_speed), int(round(duration / dt)) + 1)
    if duration is not None and duration <= 0:
        n = 0
    if np.any(leader_speed[:n] < 0):
        raise ValueError("leader speeds must be non-negative")
    theta = np.asarray(theta_schedule, dtype=float)
    if theta.ndim == 1:
        theta = np.broadcast_to(theta, (max(n, 1), 5))
    if n == 0:
        empty = np.zeros(0)
        return CFEpisode(follower_id, leader_id, dt, leader_length, *(empty.copy() for _ in EPISODE_COLUMNS))
    if len(theta) < n:
        raise ValueError("theta schedule shorter than the requested horizon")

    vl = leader_speed[:n]
    t = np.arange(n) * dt
    a_lon_lead = _central_diff(vl, dt)
    gap0 = initial_gap
    v_f0 = vl[0] if initial_speed is None else initial_speed
    if gap0 is None:
        gap0 = equilibrium_spacing(theta[0], min(v_f0, 0.95 * theta[0][0]))
    x_lead = np.empty(n)
    x_lead[0] = gap0 + leader_length
    for k in range(1, n):
        x_lead[k] = x_lead[k - 1] + (vl[k] + vl[k - 1]) / 2.0 * dt

    x, v, s, a = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    state = KinematicState(0.0, float(v_f0))
    for k in range(n):
        gap = x_lead[k] - state.x - leader_length
        if gap <= 0:
            raise GenerationError(f"follower collided with leader at frame {k}; soften the schedule")
        x[k], v[k], s[k] = state.x, state.v, gap
        cond = TrafficCondition(state.v - vl[k], state.v, gap, vl[k], 0.0, a_lon_lead[k])
        a[k] = idm_acceleration(theta[k], cond)
        if k < n - 1:
            state = ballistic_step(state, a[k], dt)

    if noise_std > 0:
        rng = rng or np.random.default_rng()
        s = s + rng.normal(0.0, noise_std, n)
    return CFEpisode(follower_id, leader_id, dt, leader_length, t=t, v=v, v_lead=vl.copy(), x=x,
                     x_lead=x_lead, s=s, dv=v - vl, a=a, a_lat_lead=np.zeros(n), a_lon_lead=a_lon_lead)


def write_episode(episode: CFEpisode, path) -> None:
    """Write an episode as a header block followed by comma-separated frame rows."""
    path = Path(path)
    header = [
        EPISODE_MAGIC,
        f"# follower_id: {episode.follower_id}",
        f"# leader_id: {episode.leader_id}",
        f"# dt: {episode.dt!r}",
        f"# leader_length: {episode.leader_length!r}",
        ",".join(EPISODE_COLUMNS),
    ]
    data = np.column_stack([getattr(episode, c) for c in EPISODE_COLUMNS]) if len(episode) else np.zeros((0, 10))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_episode(path) -> CFEpisode:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != EPISODE_MAGIC:
        raise SchemaError(f"{path}: not an episode file")
    meta = {}
    i = 1
    while lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(": ")
        meta[key] = value
        i += 1
    if tuple(lines[i].split(",")) != EPISODE_COLUMNS:
        raise SchemaError(f"{path}: unexpected column header")
    body = [list(map(float, ln.split(","))) for ln in lines[i + 1:] if ln]
    data = np.asarray(body, dtype=float).reshape(-1, len(EPISODE_COLUMNS))
    arrays = {c: data[:, j].copy() for j, c in enumerate(EPISODE_COLUMNS)}
    return CFEpisode(int(meta["follower_id"]), int(meta["leader_id"]), float(meta["dt"]),
                     float(meta["leader_length"]), **arrays)
