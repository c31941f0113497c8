"""Command-line harness.

Subcommands::

    omdl run [--config FILE] [--override] [options]
    omdl validate-config FILE
    omdl resume SNAPSHOT [--steps N]
    omdl export-plots RUN_DIR

Settings come from, in increasing priority: built-in defaults, the
``OMDL_OUTPUT_DIR`` / ``OMDL_WORKERS`` environment variables, the TOML config
file, and command-line flags. ``--override`` swaps the last two so that the
config file beats the flags. Every flag has a config key of the same name with
dashes replaced by underscores (``--use-sample-weight`` -> ``use_sample_weight``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import bench, plots
from .learner import LearnerConfig, OnlineMultilinearDL

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

EXPERIMENTS = ("compare-tmod", "sparsity-sweep", "custom")
DEFAULT_ALGOS = {
    "compare-tmod": ["omdl-sd", "omdl-qn", "tmod"],
    "sparsity-sweep": ["omdl-qn"],
    "custom": ["omdl-qn"],
}
SENTINEL = "COMPLETE"
SESSION_SUFFIX = ".session.json"

# key -> (type, default); None defaults are resolved later
SCHEMA = {
    "experiment": (str, "compare-tmod"),
    "algos": (list, None),
    "modes": (int, 3),
    "rows": (int, 10),
    "atoms": (int, 20),
    "sparsity": (int, 10),
    "snr": (float, 50.0),
    "snr_db": (bool, True),
    "trials": (int, 100),
    "steps": (int, 2000),
    "seed": (int, 0),
    "lambda0": (float, 0.8),
    "tau": (int, 100),
    "window": (int, None),
    "allow_short_window": (bool, False),
    "use_sample_weight": (bool, True),
    "share_weight": (bool, False),
    "eps_reg": (float, 1e-10),
    "eps_denom": (float, 1e-12),
    "alpha_max": (float, 1.0),
    "project_every_step": (bool, False),
    "ridge": (float, 0.0),
    "coding": (str, "omp"),
    "init": (str, "random"),
    "on_divergence": (str, "continue"),
    "sweep": (list, [10, 30, 100]),
    "output": (str, "results"),
    "workers": (int, 1),
    "checkpoint_every": (int, 0),
}
ENV_KEYS = {"OMDL_OUTPUT_DIR": "output", "OMDL_WORKERS": "workers"}

log = logging.getLogger("omdl")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunSpec:
    experiment: str
    gen: bench.GenConfig
    learner: LearnerConfig
    algos: list[str]
    sweep: list[int]
    ridge: float
    coding: str
    init: str
    on_divergence: str
    output: Path
    workers: int
    checkpoint_every: int
    settings: dict = field(default_factory=dict)


def _coerce(key: str, value):
    kind, _ = SCHEMA[key]
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if kind is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if key == "sweep":
            try:
                return [int(v) for v in value]
            except (TypeError, ValueError):
                raise ConfigError(key, "expected a list of integers") from None
        return [str(v) for v in value]
    if kind is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected an integer, got {value!r}") from None
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    return str(value)


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"malformed TOML in {path}: {exc}") from None
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    return {k: _coerce(k, v) for k, v in raw.items()}


def _check(key, ok, message):
    if not ok:
        raise ConfigError(key, message)


def parse_config(path=None, flags: dict | None = None, env: dict | None = None,
                 override: bool = False) -> RunSpec:
    """Merge defaults, environment, config file and flags into a validated spec."""
    settings = {k: default for k, (_, default) in SCHEMA.items()}
    env = os.environ if env is None else env
    for var, key in ENV_KEYS.items():
        if env.get(var):
            settings[key] = _coerce(key, env[var])
    from_file = load_config_file(path) if path else {}
    from_flags = {k: _coerce(k, v) for k, v in (flags or {}).items() if v is not None}
    unknown = sorted(set(from_flags) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    layers = (from_flags, from_file) if override else (from_file, from_flags)
    for layer in layers:
        settings.update(layer)
    return build_spec(settings)


def build_spec(s: dict) -> RunSpec:
    _check("experiment", s["experiment"] in EXPERIMENTS, f"must be one of {EXPERIMENTS}")
    algos = s["algos"] or DEFAULT_ALGOS[s["experiment"]]
    for a in algos:
        _check("algos", a in bench.ALGOS, f"unknown algorithm {a!r}; choose from {bench.ALGOS}")
    for key in ("modes", "rows", "atoms", "trials", "steps", "tau", "workers"):
        _check(key, s[key] >= 1, "must be >= 1")
    _check("modes", s["modes"] <= 8, "at most 8 modes are supported")
    _check("atoms", s["rows"] < s["atoms"], "must exceed rows (over-complete dictionaries)")
    limit = s["rows"] ** s["modes"]
    _check("sparsity", 0 <= s["sparsity"] < limit, f"must lie in [0, {limit})")
    for k in s["sweep"] if s["experiment"] == "sparsity-sweep" else []:
        _check("sweep", 1 <= k < limit, f"values must lie in [1, {limit})")
    _check("lambda0", 0.0 < s["lambda0"] <= 1.0, "must lie in (0, 1]")
    _check("snr", s["snr_db"] or s["snr"] > 0, "a linear SNR must be positive")
    _check("snr", not math.isnan(s["snr"]), "must be a number")
    if s["window"] is not None:
        _check("window", s["window"] >= 1, "must be >= 1")
        _check("window", s["window"] >= s["atoms"] or s["allow_short_window"],
               f"must be >= atoms ({s['atoms']}) unless allow_short_window is set")
    for key in ("eps_reg", "eps_denom", "alpha_max"):
        _check(key, s[key] > 0, "must be positive")
    _check("ridge", s["ridge"] >= 0, "must be non-negative")
    _check("coding", s["coding"] in ("omp", "oracle"), "must be 'omp' or 'oracle'")
    _check("init", s["init"] in ("random", "truth"), "must be 'random' or 'truth'")
    _check("on_divergence", s["on_divergence"] in ("continue", "truncate"),
           "must be 'continue' or 'truncate'")
    _check("seed", s["seed"] >= 0, "must be non-negative")
    _check("checkpoint_every", s["checkpoint_every"] >= 0, "must be >= 0")
    if s["checkpoint_every"]:
        _check("checkpoint_every", s["experiment"] == "custom" and s["trials"] == 1
               and len(algos) == 1, "checkpoints need a custom experiment with one trial "
               "and one algorithm")

    gen = bench.GenConfig(modes=s["modes"], rows=s["rows"], atoms=s["atoms"],
                          sparsity=s["sparsity"], snr=s["snr"], snr_db=s["snr_db"],
                          trials=s["trials"], steps=s["steps"], seed=s["seed"])
    learner = gen.learner_config(
        lambda0=s["lambda0"], tau=s["tau"], window=s["window"],
        allow_short_window=s["allow_short_window"], use_sample_weight=s["use_sample_weight"],
        share_weight=s["share_weight"], eps_reg=s["eps_reg"], eps_denom=s["eps_denom"],
        alpha_max=s["alpha_max"], project_every_step=s["project_every_step"])
    return RunSpec(s["experiment"], gen, learner, list(algos), list(s["sweep"]), s["ridge"],
                   s["coding"], s["init"], s["on_divergence"], Path(s["output"]),
                   s["workers"], s["checkpoint_every"], dict(s, algos=list(algos)))


# -- running ------------------------------------------------------------------

class Progress:
    """Prints one line each time another 10% of the work is done."""

    def __init__(self, total: int, stream=None):
        self.total = max(total, 1)
        self.done = 0
        self.next_decile = 1
        self.stream = stream or sys.stdout

    def __call__(self, n: int = 1) -> None:
        self.done += n
        while self.next_decile <= 10 and self.done * 10 >= self.next_decile * self.total:
            print(f"progress {self.next_decile * 10:3d}% ({self.done}/{self.total} steps)",
                  file=self.stream, flush=True)
            log.info(json.dumps({"event": "progress", "percent": self.next_decile * 10}))
            self.next_decile += 1


def _setup_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _log_trials(label: str, trials) -> None:
    for t in trials:
        if not t:
            continue
        counts = bench.flag_counts(t)
        div_step = next((r.step for r in t if r.diverged), None)
        log.info(json.dumps({"event": "trial", "label": label, "trial": t[0].trial,
                             "flags": counts, "diverged_at": div_step}))


def _jobs(spec: RunSpec):
    """``(label, gen, learner, algo)`` for every curve the run asks for."""
    if spec.experiment == "sparsity-sweep":
        for algo in spec.algos:
            for k in spec.sweep:
                yield (f"{algo}-k{k}", replace(spec.gen, sparsity=k),
                       replace(spec.learner, sparsity=k), algo)
    else:
        for algo in spec.algos:
            yield algo, spec.gen, spec.learner, algo


def execute(spec: RunSpec, stream=None) -> Path:
    """Run every curve of ``spec`` and write CSVs, plot data, figures and the sentinel."""
    out = spec.output
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    if sentinel.exists():
        sentinel.unlink()
    for stale in ("run.log",):
        (out / stale).unlink(missing_ok=True)
    handler = _setup_log(out)
    try:
        (out / "spec.json").write_text(json.dumps(spec.settings, indent=2, sort_keys=True) + "\n")
        log.info(json.dumps({"event": "start", "experiment": spec.experiment}))
        if spec.checkpoint_every:
            return _run_session(spec, stream)
        jobs = list(_jobs(spec))
        progress = Progress(sum(g.trials * g.steps for _, g, _, _ in jobs), stream)
        records_path = out / "records.csv"
        bench.write_records_csv(records_path, [])
        summary = []
        for label, gen, lcfg, algo in jobs:
            trials = bench.run_experiment(gen, lcfg, algo, spec.coding, spec.ridge,
                                          spec.on_divergence, spec.workers, spec.init,
                                          progress)
            for t in trials:
                for r in t:
                    r.algo = label
            bench.write_records_csv(records_path, trials, header=False, mode="a")
            _log_trials(label, trials)
            summary.extend(bench.summarize(trials))
        _finish(out, summary, spec.experiment)
        return out
    finally:
        log.removeHandler(handler)
        handler.close()


def _finish(out: Path, summary, title: str) -> None:
    bench.write_summary_csv(out / "summary.csv", summary)
    plots.write_plot_data(out / "plots", summary)
    plots.render_figures(out / "plots", summary, title)
    log.info(json.dumps({"event": "complete"}))
    (out / SENTINEL).write_text("ok\n")


# -- single-learner sessions with checkpoints ---------------------------------

def _save_session(path: Path, spec: RunSpec, state: bench.TrialState, algo: str) -> None:
    state.learner.save(path)
    session = {
        "settings": {k: (str(v) if isinstance(v, Path) else v) for k, v in spec.settings.items()},
        "algo": algo,
        "trial": state.trial,
        "step": state.step,
        "diverged": state.diverged,
        "rng": state.rng.bit_generator.state,
        "true_dicts": [D.tolist() for D in state.true_dicts],
    }
    Path(str(path) + SESSION_SUFFIX).write_text(json.dumps(session))
    log.info(json.dumps({"event": "checkpoint", "step": state.step, "path": str(path)}))


def _run_session(spec: RunSpec, stream, state: bench.TrialState | None = None) -> Path:
    out = spec.output
    algo = spec.algos[0]
    records_path = out / "records.csv"
    if state is None:
        state = bench.start_trial(spec.gen, spec.learner, algo, 0, spec.ridge, spec.init)
        bench.write_records_csv(records_path, [])
    progress = Progress(spec.gen.steps, stream)
    progress.done = state.step
    progress.next_decile = state.step * 10 // spec.gen.steps + 1
    snapshot = out / "checkpoint.npz"
    while state.step < spec.gen.steps:
        until = min(spec.gen.steps, state.step + spec.checkpoint_every)
        recs = bench.continue_trial(state, spec.gen, algo, until, spec.coding,
                                    spec.on_divergence, progress)
        bench.write_records_csv(records_path, [recs], header=False, mode="a")
        _save_session(snapshot, spec, state, algo)
        if recs and recs[-1].diverged and spec.on_divergence == "truncate":
            break
    records = bench.read_records_csv(records_path)
    _finish(out, bench.summarize([records]), spec.experiment)
    return out


def resume(snapshot, steps: int | None = None, stream=None) -> Path:
    """Continue a checkpointed single-learner session from ``snapshot``."""
    snapshot = Path(snapshot)
    session_path = Path(str(snapshot) + SESSION_SUFFIX)
    if not snapshot.exists() or not session_path.exists():
        raise FileNotFoundError(f"no session checkpoint at {snapshot}")
    session = json.loads(session_path.read_text())
    settings = dict(session["settings"])
    if steps is not None:
        settings["steps"] = steps
    spec = build_spec(settings)
    learner = OnlineMultilinearDL.load(snapshot)
    rng = np.random.default_rng()
    rng.bit_generator.state = session["rng"]
    state = bench.TrialState(session["trial"], session["step"],
                             [np.array(D) for D in session["true_dicts"]], rng, learner,
                             session["diverged"])
    out = spec.output
    out.mkdir(parents=True, exist_ok=True)
    (out / SENTINEL).unlink(missing_ok=True)
    records_path = out / "records.csv"
    kept = [r for r in bench.read_records_csv(records_path) if r.step <= state.step] \
        if records_path.exists() else []
    bench.write_records_csv(records_path, [kept])
    handler = _setup_log(out)
    try:
        log.info(json.dumps({"event": "resume", "step": state.step}))
        return _run_session(spec, stream, state)
    finally:
        log.removeHandler(handler)
        handler.close()


def export_plots(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    summary = bench.read_summary_csv(run_dir / "summary.csv")
    return plots.write_plot_data(run_dir / "plots", summary) + \
        plots.render_figures(run_dir / "plots", summary)


# -- argument parsing ----------------------------------------------------------

def _add_setting_flags(p: argparse.ArgumentParser) -> None:
    for key, (kind, _) in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if key == "algos":
            p.add_argument("--algo", "--algos", dest="algos", action="append",
                           help="algorithm(s): omdl-sd, omdl-qn, tmod (repeatable or comma list)")
        elif kind is bool:
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        elif kind is list:
            p.add_argument(flag, dest=key, default=None, help="comma-separated list")
        else:
            p.add_argument(flag, dest=key, default=None,
                           type=float if kind is float else (int if kind is int else str))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omdl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="TOML settings file")
    run.add_argument("--override", action="store_true",
                     help="let the config file take precedence over flags")
    run.add_argument("--resume", metavar="SNAPSHOT", help="continue a checkpointed session")
    _add_setting_flags(run)

    val = sub.add_parser("validate-config", help="check a settings file")
    val.add_argument("path")

    res = sub.add_parser("resume", help="continue a checkpointed session")
    res.add_argument("snapshot")
    res.add_argument("--steps", type=int, default=None)

    exp = sub.add_parser("export-plots", help="write plot data and figures for a run")
    exp.add_argument("run_dir")
    return parser


def _flags(args) -> dict:
    flags = {k: getattr(args, k) for k in SCHEMA if getattr(args, k, None) is not None}
    if "algos" in flags:
        flags["algos"] = [a.strip() for item in flags["algos"] for a in item.split(",") if a.strip()]
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            spec = parse_config(args.path, env={})
            print(json.dumps(spec.settings, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "export-plots":
            for p in export_plots(args.run_dir):
                print(p)
            return EXIT_OK
        if args.command == "resume" or (args.command == "run" and args.resume):
            snapshot = args.snapshot if args.command == "resume" else args.resume
            out = resume(snapshot, args.steps)
        else:
            spec = parse_config(args.config, _flags(args), override=args.override)
            out = execute(spec)
        print(f"results written to {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"omdl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"omdl: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
