"""Command-line interface.

One JSON configuration document drives every command; selected flags
override individual scalars.  Exit codes: 0 success, 1 runtime or
convergence failure, 2 usage or configuration error.  All outputs are
deterministic given (config, seed): dictionaries are built in fixed
order and floats are written with shortest round-trip formatting.

The interactive session speaks a line protocol on stdin/stdout::

    SUGGEST <n> <x components>     (artifact -> user)
    OBSERVE <decimal>              (user -> artifact)
    ESTIMATE <theta components>    (artifact -> user, after each refit)
    QUIT                           (user -> artifact, finalize)
    ERR <reason>                   (artifact -> user, then re-prompt)

A file of OBSERVE lines therefore doubles as the replay format.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .adaptive import (
    LSAdaptiveEstimator,
    ReplaySource,
    Scenario,
    SimulatedSource,
    Trajectory,
    WynnConfig,
    WynnState,
    _space_echo,
    build_initial_design,
    run,
    wynn_step,
)
from .design import equivalence_gap, info_matrix, log_det, solve_locally_d_optimal
from .errors import AdwynnError, ConfigError
from .estimator import FitConfig, fit_ls
from .model import ModelBundle, builtin_bundle
from .noise import ErrorSpec, make_error_spec, make_rng

JSON_KW = {"indent": 2, "ensure_ascii": True}


# --------------------------------------------------------------------------
# Configuration loading
# --------------------------------------------------------------------------


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _expect(cfg: dict, key: str, types, where: str, required: bool = True, default=None):
    if key not in cfg:
        if required:
            raise ConfigError(f"missing required key {where}.{key}")
        return default
    val = cfg[key]
    if types is not None and not isinstance(val, types):
        raise ConfigError(f"{where}.{key} has wrong type {type(val).__name__}")
    return val


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return int(value)


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _as_vector(value, where: str) -> np.ndarray:
    try:
        vec = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be an array of numbers") from None
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise ConfigError(f"{where} must be a flat array of finite numbers")
    return vec


class RunConfig:
    """Validated configuration; see docs/formats.md for the schema."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a JSON object")
        self.raw = raw
        model_cfg = _expect(raw, "model", dict, "$")
        name = _expect(model_cfg, "name", str, "$.model")
        params = _expect(model_cfg, "params", dict, "$.model", required=False, default={})
        try:
            self.bundle: ModelBundle = builtin_bundle(
                name, **{k: _tupled(v) for k, v in params.items()}
            )
        except TypeError as exc:
            raise ConfigError(f"$.model.params invalid for {name!r}: {exc}") from None
        except AdwynnError as exc:
            raise ConfigError(f"$.model: {exc}") from None

        self.seed = int(_expect(raw, "seed", int, "$", required=False, default=0))

        fit_cfg = _expect(raw, "fit", dict, "$", required=False, default={})
        self.fit = FitConfig(
            grid_points_per_axis=int(
                _expect(fit_cfg, "grid_points_per_axis", int, "$.fit", False, 15)
            ),
            max_iterations=int(_expect(fit_cfg, "max_iterations", int, "$.fit", False, 200)),
            step_tol=float(_expect(fit_cfg, "step_tol", (int, float), "$.fit", False, 1e-10)),
            max_halvings=int(_expect(fit_cfg, "max_halvings", int, "$.fit", False, 40)),
        )

        wynn_cfg = _expect(raw, "wynn", dict, "$", required=False, default={})
        self.wynn_raw = wynn_cfg
        self.n_max = wynn_cfg.get("n_max")

        self.theta_bar = None
        if "theta_bar" in raw:
            theta = _as_vector(raw["theta_bar"], "$.theta_bar")
            if theta.shape != (self.bundle.model.p,):
                raise ConfigError(
                    f"$.theta_bar must have length p = {self.bundle.model.p}"
                )
            if not self.bundle.parameter_space.contains(theta):
                raise ConfigError("$.theta_bar lies outside the parameter space")
            self.theta_bar = theta

        self.noise: Optional[ErrorSpec] = None
        if "noise" in raw:
            noise_cfg = _expect(raw, "noise", dict, "$")
            variant = _expect(noise_cfg, "variant", str, "$.noise")
            params = {k: v for k, v in noise_cfg.items() if k != "variant"}
            try:
                self.noise = make_error_spec(variant, **params)
            except AdwynnError as exc:
                raise ConfigError(f"$.noise: {exc}") from None

        source_cfg = _expect(raw, "source", dict, "$", required=False, default={})
        self.source_kind = _expect(
            source_cfg, "kind", str, "$.source", required=False, default="simulated"
        )
        if self.source_kind not in ("simulated", "replay"):
            raise ConfigError("$.source.kind must be 'simulated' or 'replay'")
        self.replay_file = _expect(
            source_cfg, "replay_file", str, "$.source", required=False
        )

        oracle_cfg = _expect(raw, "oracle", dict, "$", required=False, default={})
        self.oracle_theta = None
        if "theta" in oracle_cfg:
            th = _as_vector(oracle_cfg["theta"], "$.oracle.theta")
            if th.shape != (self.bundle.model.p,):
                raise ConfigError("$.oracle.theta must have length p")
            self.oracle_theta = th
        self.oracle_tol = float(
            _expect(oracle_cfg, "tol", (int, float), "$.oracle", False, 1e-5)
        )
        self.oracle_max_iterations = int(
            _expect(oracle_cfg, "max_iterations", int, "$.oracle", False, 100000)
        )

        mc_cfg = _expect(raw, "mc", dict, "$", required=False, default={})
        self.mc_replicates = _expect(mc_cfg, "replicates", int, "$.mc", required=False)
        self.mc_checkpoints = _expect(mc_cfg, "checkpoints", list, "$.mc", required=False)
        self.mc_workers = _expect(mc_cfg, "workers", int, "$.mc", required=False)
        self.mc_keep_paths = int(_expect(mc_cfg, "keep_paths", int, "$.mc", False, 0))

        out_cfg = _expect(raw, "output", dict, "$", required=False, default={})
        self.out_dir = _expect(out_cfg, "dir", str, "$.output", required=False, default=".")
        self.prefix = _expect(out_cfg, "prefix", str, "$.output", required=False, default="adwynn")

    def wynn_config(self, n_max_override: Optional[int] = None) -> WynnConfig:
        n_max = n_max_override if n_max_override is not None else self.n_max
        if n_max is None:
            raise ConfigError("missing required key $.wynn.n_max")
        w = self.wynn_raw
        try:
            return WynnConfig(
                n_max=_as_int(n_max, "$.wynn.n_max"),
                pd_floor=_as_number(w.get("pd_floor", 1e-8), "$.wynn.pd_floor"),
                polish=bool(w.get("polish", False)),
                refresh_every=_as_int(w.get("refresh_every", 1), "$.wynn.refresh_every"),
                theta_check_points_per_axis=_as_int(
                    w.get("theta_check_points_per_axis", 5),
                    "$.wynn.theta_check_points_per_axis",
                ),
                fit=self.fit,
                estimator=str(w.get("estimator", "ls")),
            )
        except AdwynnError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"$.wynn: {exc}") from None

    def scenario(self, n_max_override: Optional[int] = None) -> Scenario:
        if self.theta_bar is None:
            raise ConfigError("missing required key $.theta_bar (simulation mode)")
        if self.noise is None:
            raise ConfigError("missing required key $.noise (simulation mode)")
        return Scenario(
            model=self.bundle.model,
            design_space=self.bundle.design_space,
            parameter_space=self.bundle.parameter_space,
            theta_bar=self.theta_bar,
            noise=self.noise,
            config=self.wynn_config(n_max_override),
        )

    def to_jsonable(self) -> dict:
        return json.loads(json.dumps(self.raw))


def load_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
        ) from None
    return RunConfig(raw)


# --------------------------------------------------------------------------
# Output writers
# --------------------------------------------------------------------------


def _out_path(cfg: RunConfig, args, suffix: str) -> Path:
    out_dir = Path(getattr(args, "out_dir", None) or cfg.out_dir)
    prefix = getattr(args, "prefix", None) or cfg.prefix
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / f"{prefix}_{suffix}"


def write_json(path: Path, obj: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, **JSON_KW)
        fh.write("\n")


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_trajectory_files(trajectory: Trajectory, cfg: RunConfig, args) -> tuple[Path, Path]:
    jpath = _out_path(cfg, args, "trajectory.json")
    cpath = _out_path(cfg, args, "trajectory.csv")
    write_json(jpath, trajectory.to_jsonable())
    header, rows = trajectory.csv_rows()
    write_csv(cpath, header, rows)
    return jpath, cpath


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if cfg.source_kind == "replay":
        if not cfg.replay_file:
            raise ConfigError("$.source.replay_file is required for replay runs")
        values = read_replay_file(cfg.replay_file)
        source = ReplaySource(values)
        wynn = cfg.wynn_config(args.n_max)
        trajectory = run(
            cfg.bundle.model,
            cfg.bundle.design_space,
            cfg.bundle.parameter_space,
            wynn,
            source,
            seed,
        )
    else:
        scenario = cfg.scenario(args.n_max)
        source = SimulatedSource(
            scenario.model, scenario.theta_bar, scenario.noise, make_rng(seed)
        )
        trajectory = run(
            scenario.model,
            scenario.design_space,
            scenario.parameter_space,
            scenario.config,
            source,
            seed,
        )
    jpath, cpath = write_trajectory_files(trajectory, cfg, args)
    print(f"wrote {jpath} and {cpath}")
    return 0


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    theta = cfg.oracle_theta if cfg.oracle_theta is not None else cfg.theta_bar
    if theta is None:
        raise ConfigError("oracle needs $.oracle.theta or $.theta_bar")
    tol = args.tol if args.tol is not None else cfg.oracle_tol
    grid = cfg.bundle.design_space.grid()
    design = solve_locally_d_optimal(
        cfg.bundle.model, theta, grid, tol=tol, max_iterations=cfg.oracle_max_iterations
    )
    gap = equivalence_gap(design, theta, cfg.bundle.model, grid)
    obj = design.to_jsonable()
    obj.update(
        {
            "schema": "adwynn.design.v1",
            "model": cfg.bundle.model.name,
            "theta": [float(v) for v in theta],
            "equivalence_gap": gap,
            "logdet": log_det(info_matrix(design, theta, cfg.bundle.model)),
            "tol": tol,
        }
    )
    path = _out_path(cfg, args, "design.json")
    write_json(path, obj)
    print(f"wrote {path}")
    return 0


def cmd_mc(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    replicates = args.replicates if args.replicates is not None else cfg.mc_replicates
    if replicates is None:
        raise ConfigError("missing required key $.mc.replicates")
    checkpoints = cfg.mc_checkpoints
    if checkpoints is None:
        if cfg.n_max is None:
            raise ConfigError("missing $.mc.checkpoints (or $.wynn.n_max)")
        checkpoints = [cfg.n_max]
    checkpoints = [_as_int(c, "$.mc.checkpoints[]") for c in checkpoints]
    workers = args.workers if args.workers is not None else cfg.mc_workers
    if workers is None:
        workers = os.cpu_count() or 1
    scenario = cfg.scenario(max(checkpoints))
    report = analysis.run_study(
        scenario,
        _as_int(replicates, "$.mc.replicates"),
        checkpoints,
        int(seed),
        workers=_as_int(workers, "$.mc.workers"),
        keep_paths=cfg.mc_keep_paths,
    )
    jpath = _out_path(cfg, args, "mc.json")
    cpath = _out_path(cfg, args, "mc.csv")
    write_json(jpath, report.to_jsonable())
    header, rows = report.csv_rows()
    write_csv(cpath, header, rows)
    print(f"wrote {jpath} and {cpath}")
    return 0


def cmd_diagnose(args) -> int:
    try:
        text = Path(args.trajectory).read_text()
        obj = json.loads(text)
        trajectory = Trajectory.from_jsonable(obj)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot parse trajectory file {args.trajectory}: {exc}") from None
    n = args.n if args.n is not None else trajectory.n
    diag = analysis.extract_clusters(trajectory, n, args.cell_diameter)
    curve = analysis.window_mass_curve(trajectory, args.d, n_from=1)
    p = diag.requested
    bound = 1.0 / p + args.epsilon
    # first stage after which the mass bound holds for good
    violations = [m for m, v in curve.items() if v > bound]
    n0 = (max(violations) + 1) if violations else min(curve)
    if violations and max(violations) == max(curve):
        n0 = None  # still violated at the final stage
    diag = analysis.MassDiagnostics(
        n=diag.n,
        cell_diameter=diag.cell_diameter,
        window_diameter=args.d,
        requested=diag.requested,
        found=diag.found,
        clusters=diag.clusters,
        separations=diag.separations,
        pi0=diag.pi0,
        excluded_mass=diag.excluded_mass,
        window_masses=curve,
        n0=n0,
    )
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{args.prefix or 'adwynn'}_diagnostics.json"
    write_json(path, diag.to_jsonable())
    print(f"wrote {path}")
    return 0


class _SessionQuit(Exception):
    pass


class _SessionEOF(Exception):
    pass


class SessionSource:
    """Interactive response source speaking the line protocol."""

    def __init__(self, fin, fout):
        self.fin = fin
        self.fout = fout

    def _emit(self, line: str) -> None:
        self.fout.write(line + "\n")
        self.fout.flush()

    def observe(self, x, step: int) -> float:
        prompt = "SUGGEST " + str(step) + " " + " ".join(repr(float(v)) for v in np.atleast_1d(x))
        self._emit(prompt)
        while True:
            line = self.fin.readline()
            if line == "":
                raise _SessionEOF
            line = line.strip()
            if line == "QUIT":
                raise _SessionQuit
            if not line:
                self._emit("ERR empty line")
                self._emit(prompt)
                continue
            parts = line.split()
            if parts[0] != "OBSERVE" or len(parts) != 2:
                self._emit(f"ERR expected 'OBSERVE <decimal>' or 'QUIT', got {parts[0]!r}")
                self._emit(prompt)
                continue
            try:
                y = float(parts[1])
            except ValueError:
                self._emit(f"ERR not a decimal: {parts[1]!r}")
                self._emit(prompt)
                continue
            if not np.isfinite(y):
                self._emit("ERR observation must be finite")
                self._emit(prompt)
                continue
            return y


def cmd_session(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    config = cfg.wynn_config(args.n_max)
    model = cfg.bundle.model
    dspace, pspace = cfg.bundle.design_space, cfg.bundle.parameter_space
    source = SessionSource(sys.stdin, sys.stdout)

    estimator = LSAdaptiveEstimator(model, pspace, config.fit)
    state = WynnState(model, dspace, pspace, config, estimator)
    complete = False
    try:
        theta_sample = pspace.sample_grid(config.theta_check_points_per_axis)
        initial = build_initial_design(
            model, pspace, state.grid, theta_sample, config.pd_floor
        )
        if config.n_max < initial.shape[0]:
            raise ConfigError(
                f"n_max = {config.n_max} is below the starting design size {initial.shape[0]}"
            )
        for i, x in enumerate(initial):
            y = source.observe(x, i + 1)
            state._append(np.asarray(x, dtype=float), float(y))
            estimator.update(np.asarray(x, dtype=float), float(y))
        state.n_start = state.n
        state._refresh(force=True)
        source._emit("ESTIMATE " + " ".join(repr(float(v)) for v in state.theta))
        while state.n < config.n_max:
            wynn_step(state, source)
            source._emit("ESTIMATE " + " ".join(repr(float(v)) for v in state.theta))
        complete = True
    except (_SessionQuit, _SessionEOF):
        pass

    final_fit = None
    if state.n >= max(1, state.n_start) and state.n_start > 0:
        final_fit = fit_ls(state.data_batch(), model, pspace, config.fit, warm_start=state.theta)
    estimates = (
        np.asarray(state.estimates, dtype=float)
        if state.estimates
        else np.zeros((0, model.p))
    )
    trajectory = Trajectory(
        model_name=model.name,
        seed=int(seed),
        config_echo=config.to_jsonable(),
        n_start=state.n_start,
        points=state.xs[: state.n].copy(),
        responses=state.ys[: state.n].copy(),
        estimates=estimates,
        records=tuple(state.records),
        final_fit=final_fit,
        design_space_echo=_space_echo(dspace),
        parameter_space_echo={
            "lower": [float(v) for v in pspace.lower],
            "upper": [float(v) for v in pspace.upper],
        },
    )
    jpath, cpath = write_trajectory_files(trajectory, cfg, args)
    print(f"wrote {jpath} and {cpath}", file=sys.stderr)
    return 0 if complete else 1


def read_replay_file(path: str) -> list[float]:
    """Parse a replay file: one OBSERVE line per response."""
    values = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read replay file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "QUIT":
            break
        if parts[0] != "OBSERVE" or len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'OBSERVE <decimal>'")
        try:
            values.append(float(parts[1]))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: not a decimal: {parts[1]!r}") from None
    return values


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adwynn",
        description="Sequential adaptive D-optimal design: simulate, verify, interact.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override $.seed")
        p.add_argument("--out-dir", default=None, help="override $.output.dir")
        p.add_argument("--prefix", default=None, help="override $.output.prefix")

    p_sim = sub.add_parser("simulate", help="run one adaptive trajectory")
    common(p_sim)
    p_sim.add_argument("--n-max", type=int, default=None, help="override $.wynn.n_max")
    p_sim.set_defaults(func=cmd_simulate)

    p_oracle = sub.add_parser("oracle", help="solve the locally D-optimal design")
    common(p_oracle)
    p_oracle.add_argument("--tol", type=float, default=None, help="override $.oracle.tol")
    p_oracle.set_defaults(func=cmd_oracle)

    p_mc = sub.add_parser("mc", help="Monte Carlo consistency/normality study")
    common(p_mc)
    p_mc.add_argument("--replicates", type=int, default=None, help="override $.mc.replicates")
    p_mc.add_argument("--workers", type=int, default=None, help="override $.mc.workers")
    p_mc.set_defaults(func=cmd_mc)

    p_diag = sub.add_parser("diagnose", help="design-mass diagnostics of a trajectory")
    p_diag.add_argument("trajectory", help="trajectory JSON file")
    p_diag.add_argument("--d", type=float, required=True, help="window diameter")
    p_diag.add_argument("--cell-diameter", type=float, required=True)
    p_diag.add_argument("--epsilon", type=float, default=0.1)
    p_diag.add_argument("--n", type=int, default=None, help="stage (default: final)")
    p_diag.add_argument("--out-dir", default=None)
    p_diag.add_argument("--prefix", default=None)
    p_diag.set_defaults(func=cmd_diagnose)

    p_sess = sub.add_parser("session", help="interactive suggest/observe loop")
    common(p_sess)
    p_sess.add_argument("--n-max", type=int, default=None, help="override $.wynn.n_max")
    p_sess.set_defaults(func=cmd_session)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AdwynnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
