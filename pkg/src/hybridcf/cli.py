"""Command-line pipeline: ingest -> calibrate -> train -> style -> simulate.

Every command writes ``resolved_config.json`` to its output directory.  Passing
that file back through ``--config`` reproduces the run.  Exit codes:

    0 success, 1 schema/data error or total failure, 2 input not found,
    3 non-finite training loss, 4 fewer than three drivers, 5 unknown driver.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import neural_process as npm
from . import simulation as sim
from . import style as sty
from .idm import PARAM_NAMES, ParamBounds
from .synthetic import make_population, write_trajectory_csv
from .trajectory import (ColumnMap, DataError, ExtractionConfig, ExtractionReport, SchemaError, extract_cf_episodes,
                         load_trajectories, read_episode, write_episode)

log = logging.getLogger("hybridcf")

EXIT_OK, EXIT_ERROR, EXIT_NOT_FOUND, EXIT_NAN, EXIT_FEW_DRIVERS, EXIT_UNKNOWN_DRIVER = 0, 1, 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "paths": {},
    "extraction": ExtractionConfig().to_dict(),
    "columns": asdict(ColumnMap()),
    "calibration": cal.CalibConfig().to_dict(),
    "fixed": {"maxiter": 60, "popsize": 12, "polish_iters": 2000},
    "train": npm.TrainConfig().to_dict(),
    "arch": npm.NPArch().to_dict(),
    "safety": asdict(sim.SafetyConfig()),
    "bounds": ParamBounds().to_dict(),
    "simulate": {"z_mode": "mean", "stochastic": False, "bins": 30},
    "synth": {"n_drivers": 10, "duration": 30.0, "noise_std": 0.0},
}

# environment variables may override paths only
PATH_ENV = {"input": "HYBRIDCF_INPUT", "episodes": "HYBRIDCF_EPISODES", "posteriors": "HYBRIDCF_POSTERIORS",
            "model": "HYBRIDCF_MODEL", "mapping": "HYBRIDCF_MAPPING", "out": "HYBRIDCF_OUT"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(EXIT_NOT_FOUND, f"input not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    for key, env in PATH_ENV.items():
        if os.environ.get(env):
            cfg["paths"][key] = os.environ[env]
    for key in PATH_ENV:
        value = getattr(args, key, None)
        if value is not None:
            cfg["paths"][key] = str(value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["command"] = args.command
    for key in ("train_split", "driver", "index", "leader", "z_mode", "stochastic", "no_safety", "epochs"):
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg.setdefault("options", {})[key] = value
    if "out" not in cfg["paths"]:
        raise CliError(EXIT_ERROR, "an output directory is required (--out)")
    return cfg


def driver_seed(root: int, driver_id: int) -> int:
    """Independent per-driver seed so results do not depend on processing order."""
    return int(np.random.SeedSequence([int(root), int(driver_id)]).generate_state(1)[0])


def _require(cfg: dict, key: str) -> Path:
    value = cfg["paths"].get(key)
    if value is None:
        raise CliError(EXIT_ERROR, f"missing required path: --{key}")
    path = Path(value)
    if not path.exists():
        raise CliError(EXIT_NOT_FOUND, f"input not found: {path}")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _load_episodes(directory: Path) -> dict[int, object]:
    episodes = {}
    for f in sorted(directory.glob("*.csv")):
        ep = read_episode(f)
        episodes[ep.follower_id] = ep
    return episodes


def _load_posteriors(directory: Path) -> dict[int, cal.ParamPosteriorSeries]:
    return {s.driver_id: s for s in (cal.read_posterior(f) for f in sorted(directory.glob("*.csv")))}


# ----------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict) -> int:
    """Write a synthetic raw trajectory file (a stand-in for a drone dataset)."""
    out = _out_dir(cfg)
    sc = cfg["synth"]
    pop = make_population(int(sc["n_drivers"]), seed=cfg["seed"], duration=float(sc["duration"]),
                          noise_std=float(sc["noise_std"]))
    write_trajectory_csv([d.episode for d in pop], out / "trajectories.csv")
    with open(out / "ground_truth.csv", "w", newline="\n") as fh:
        fh.write("driver_id,aggressiveness," + ",".join(PARAM_NAMES) + "\n")
        for d in pop:
            fh.write(f"{d.driver_id},{d.aggressiveness!r}," + ",".join(repr(float(v)) for v in d.theta_base) + "\n")
    return EXIT_OK


def cmd_ingest(cfg: dict) -> int:
    src = _require(cfg, "input")
    out = _out_dir(cfg)
    ecfg = ExtractionConfig.from_dict(cfg["extraction"])
    try:
        loaded = load_trajectories(src, ColumnMap.from_dict(cfg["columns"]), dt=ecfg.dt)
        report = ExtractionReport()
        episodes = extract_cf_episodes(loaded.tracks, ecfg, report)
    except (SchemaError, DataError) as exc:
        raise CliError(EXIT_ERROR, str(exc)) from exc
    # keep the longest episode per follower so that one episode == one driver downstream
    best: dict[int, object] = {}
    for ep in episodes:
        if ep.follower_id not in best or len(ep) > len(best[ep.follower_id]):
            best[ep.follower_id] = ep
    store = out / "episodes"
    store.mkdir(exist_ok=True)
    for vid in sorted(best):
        write_episode(best[vid], store / f"{vid}.csv")
    summary = asdict(report) | {"rows": loaded.n_rows, "malformed_rows": loaded.n_malformed,
                                "drivers_written": len(best)}
    (out / "ingest_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not best:
        log.warning("no car-following episodes survived extraction; the episode store is empty")
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    episodes = _load_episodes(_require(cfg, "episodes"))
    out = _out_dir(cfg)
    bounds = ParamBounds.from_dict(cfg["bounds"])
    ccfg = cal.CalibConfig(**cfg["calibration"])
    ids = sorted(episodes)
    split = cfg.get("options", {}).get("train_split")
    reserved = []
    if split is not None:
        ids, reserved = ids[:split], ids[split:]
    store = out / "posteriors"
    store.mkdir(exist_ok=True)
    rows, failures = [], 0
    for vid in ids:
        ep = episodes[vid]
        seed = driver_seed(cfg["seed"], vid)
        try:
            fixed = cal.calibrate_fixed(ep, bounds, seed=seed, **cfg["fixed"])
            series = cal.calibrate_time_varying(ep, ccfg, bounds, seed=seed, theta_fix=fixed.theta)
        except Exception as exc:  # per-driver failures are logged and skipped
            log.error("driver %s: calibration failed: %s", vid, exc)
            failures += 1
            continue
        cal.write_posterior(series, store / f"{vid}.csv")
        tv = cal.closed_loop_rmse(ep, series.theta_per_frame(len(ep)))
        rows.append((vid, fixed.rmse, tv, series.n_fallback))
    with open(out / "calibration_rmse.csv", "w", newline="\n") as fh:
        fh.write("driver_id,rmse_fixed,rmse_time_varying,fallback_steps\n")
        for vid, f, t, nfb in rows:
            fh.write(f"{vid},{f!r},{t!r},{nfb}\n")
    (out / "split.json").write_text(json.dumps({"calibrated": [int(i) for i in ids],
                                                "reserved": [int(i) for i in reserved]}, indent=2) + "\n")
    if ids and failures == len(ids):
        raise CliError(EXIT_ERROR, "calibration failed for every driver")
    return EXIT_OK


def training_set(episodes: dict, posteriors: dict) -> list[npm.DriverPoints]:
    """Inputs from observed frames, targets from the calibrated time-varying IDM."""
    data = []
    for vid in sorted(posteriors):
        if vid not in episodes:
            continue
        ep = episodes[vid]
        data.append(npm.DriverPoints(vid, ep.conditions(), cal.time_varying_accelerations(ep, posteriors[vid])))
    return data


def cmd_train(cfg: dict) -> int:
    episodes = _load_episodes(_require(cfg, "episodes"))
    posteriors = _load_posteriors(_require(cfg, "posteriors"))
    out = _out_dir(cfg)
    data = training_set(episodes, posteriors)
    if len(data) < 2:
        raise CliError(EXIT_ERROR, "training needs at least two calibrated drivers")
    tdict = dict(cfg["train"], seed=cfg["seed"])
    if cfg.get("options", {}).get("epochs"):
        tdict["epochs"] = cfg["options"]["epochs"]
    try:
        result = npm.train(data, npm.TrainConfig.from_dict(tdict), npm.NPArch.from_dict(cfg["arch"]))
    except npm.TrainingError as exc:
        raise CliError(EXIT_NAN, str(exc)) from exc
    npm.save_model(result.model, out / "model.bin")
    with open(out / "loss_curve.csv", "w", newline="\n") as fh:
        fh.write("epoch,total,nll,kl,rec\n")
        for e, row in enumerate(result.term_curve):
            fh.write(f"{e}," + ",".join(repr(float(v)) for v in row) + "\n")
    return EXIT_OK


def _histogram_file(path: Path, values: np.ndarray, bins: int) -> None:
    counts, edges = np.histogram(values, bins=bins)
    with open(path, "w", newline="\n") as fh:
        fh.write("lo,hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo!r},{hi!r},{int(c)}\n")


def cmd_style(cfg: dict) -> int:
    episodes = _load_episodes(_require(cfg, "episodes"))
    posteriors = _load_posteriors(_require(cfg, "posteriors"))
    model = npm.load_model(_require(cfg, "model"))
    out = _out_dir(cfg)
    ids = [vid for vid in sorted(posteriors) if vid in episodes]
    if len(ids) < 3:
        raise CliError(EXIT_FEW_DRIVERS, f"style mapping needs at least three drivers, got {len(ids)}")
    bounds = ParamBounds.from_dict(cfg["bounds"])
    scaling = sty.population_scaling([posteriors[i] for i in ids])
    H = np.array([sty.aggressiveness_index(posteriors[i], scaling, bounds) for i in ids])
    data = training_set(episodes, {i: posteriors[i] for i in ids})
    R = np.array([npm.encode_deterministic(model, d.x, d.y) for d in data])
    try:
        mapping = sty.fit_mapping(H, R, scaling)
    except sty.DegenerateInputError as exc:
        raise CliError(EXIT_FEW_DRIVERS, str(exc)) from exc
    sty.save_mapping(mapping, out / "mapping.json")
    reduced = (R - mapping.u) @ mapping.W
    with open(out / "style_table.csv", "w", newline="\n") as fh:
        fh.write("driver_id,H," + ",".join(f"r{j}" for j in range(R.shape[1])) + ",r_reduced\n")
        for vid, h, r, rr in zip(ids, H, R, reduced):
            fh.write(f"{vid},{h!r}," + ",".join(repr(float(v)) for v in r) + f",{float(rr)!r}\n")
    bins = int(cfg["simulate"]["bins"])
    _histogram_file(out / "hist_H.csv", H, bins)
    _histogram_file(out / "hist_r_reduced.csv", reduced, bins)
    (out / "diagnostics.json").write_text(json.dumps(mapping.diagnostics, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    episodes = _load_episodes(_require(cfg, "episodes"))
    model = npm.load_model(_require(cfg, "model"))
    out = _out_dir(cfg)
    opts = cfg.get("options", {})
    scfg = cfg["simulate"]
    safety = sim.SafetyConfig(**cfg["safety"])
    if opts.get("no_safety"):
        safety = sim.SafetyConfig(safety.response_time, safety.brake_decel, enabled=False)
    z_mode = opts.get("z_mode", scfg["z_mode"])
    stochastic = bool(opts.get("stochastic", scfg["stochastic"]))
    driver, index = opts.get("driver"), opts.get("index")
    if (driver is None) == (index is None):
        raise CliError(EXIT_ERROR, "give exactly one of --driver or --index")
    leader_id = opts.get("leader", driver)
    if driver is not None and driver not in episodes:
        raise CliError(EXIT_UNKNOWN_DRIVER, f"unknown driver id {driver}")
    if leader_id is None:
        leader_id = sorted(episodes)[0] if episodes else None
    if leader_id not in episodes:
        raise CliError(EXIT_UNKNOWN_DRIVER, f"unknown driver id {leader_id}")
    ref = episodes[leader_id]
    if driver is not None:
        ep = episodes[driver]
        posteriors_dir = cfg["paths"].get("posteriors")
        y = ep.a
        if posteriors_dir and (Path(posteriors_dir) / f"{driver}.csv").exists():
            y = cal.time_varying_accelerations(ep, cal.read_posterior(Path(posteriors_dir) / f"{driver}.csv"))
        context = (ep.conditions(), y)
        r = npm.encode_deterministic(model, *context)
        label = f"driver_{driver}"
    else:
        mapping = sty.load_mapping(_require(cfg, "mapping"))
        context = None
        r = mapping.style(float(index))
        label = f"index_{index:g}"
    result = sim.simulate_with_style(ref.leader(), ref.state(0), model, r, context=context, z_mode=z_mode,
                                     stochastic=stochastic, safety=safety, dt=ref.dt, seed=cfg["seed"])
    report = sim.summarize(result, ref.slice(0, len(result.rollout)), bins=int(scfg["bins"]))
    sim.write_sim_result(result, out, report, stem=label)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "calibrate": cmd_calibrate, "train": cmd_train,
            "style": cmd_style, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridcf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; missing keys take defaults")
        p.add_argument("--seed", type=int, help="root random seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="write a synthetic raw trajectory file"))
    p = common(sub.add_parser("ingest", help="extract car-following episodes from a trajectory file"))
    p.add_argument("--input")
    p = common(sub.add_parser("calibrate", help="fixed and time-varying IDM calibration per driver"))
    p.add_argument("--episodes")
    p.add_argument("--train-split", type=int, help="calibrate only the first N drivers (sorted by id)")
    p = common(sub.add_parser("train", help="train the neural process"))
    p.add_argument("--episodes")
    p.add_argument("--posteriors")
    p.add_argument("--epochs", type=int)
    p = common(sub.add_parser("style", help="fit the aggressiveness-to-style mapping"))
    p.add_argument("--episodes")
    p.add_argument("--posteriors")
    p.add_argument("--model")
    p = common(sub.add_parser("simulate", help="closed-loop simulation for a driver or an index value"))
    p.add_argument("--episodes")
    p.add_argument("--posteriors")
    p.add_argument("--model")
    p.add_argument("--mapping")
    who = p.add_mutually_exclusive_group()
    who.add_argument("--driver", type=int)
    who.add_argument("--index", type=float)
    p.add_argument("--leader", type=int, help="driver id whose leader trajectory is replayed")
    p.add_argument("--z-mode", choices=("mean", "sample"))
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--no-safety", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: input not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_NOT_FOUND


if __name__ == "__main__":
    sys.exit(main())
