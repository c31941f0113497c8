"""Synthetic benchmark: data generation, metrics and Monte-Carlo trials.

Observations follow the separable sparse model: Gaussian mode dictionaries
with unit columns, a core with ``sparsity`` Gaussian non-zeros at uniformly
drawn positions, and white Gaussian noise at a target SNR.

Every trial draws its data and learner initialization from
``SeedSequence(seed, spawn_key=(trial,))``, so trials are independent of the
number of workers and of the order in which they finish.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .baselines import TModLearner
from .coding import SparseCore, code_oracle_support
from .learner import LearnerConfig, OnlineMultilinearDL, project_unit_columns
from .tensor import tucker_reconstruct

log = logging.getLogger(__name__)

ALGOS = ("omdl-sd", "omdl-qn", "tmod")
RECORD_FIELDS = ("trial", "step", "algo", "mse", "recovery", "lambda",
                 "alpha_mean", "diverged")
SUMMARY_FIELDS = ("step", "algo", "mse", "recovery", "lambda", "alpha_mean",
                  "diverged_fraction", "trials")
RECOVERY_THRESHOLD = 0.95


@dataclass
class GenConfig:
    modes: int = 3
    rows: int = 10
    atoms: int = 20
    sparsity: int = 10
    snr: float = 50.0
    snr_db: bool = True
    trials: int = 100
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.modes < 1 or self.rows < 1 or self.atoms < 1:
            raise ValueError("modes, rows and atoms must be positive")
        if self.rows >= self.atoms:
            raise ValueError("dictionaries must be over-complete (rows < atoms)")
        if not 0 <= self.sparsity < self.rows ** self.modes:
            raise ValueError(
                f"sparsity must lie in [0, {self.rows ** self.modes})")
        if self.trials < 1 or self.steps < 1:
            raise ValueError("trials and steps must be positive")
        if not self.snr_db and self.snr <= 0:
            raise ValueError("a linear SNR must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.rows,) * self.modes

    @property
    def core_shape(self) -> tuple[int, ...]:
        return (self.atoms,) * self.modes

    def noise_ratio(self) -> float:
        """Noise-to-signal power ratio implied by ``snr``."""
        if math.isinf(self.snr):
            return 0.0
        return 10.0 ** (-self.snr / 10.0) if self.snr_db else 1.0 / self.snr

    def learner_config(self, **overrides) -> LearnerConfig:
        kw = dict(rows=(self.rows,) * self.modes, atoms=(self.atoms,) * self.modes,
                  sparsity=self.sparsity)
        kw.update(overrides)
        return LearnerConfig(**kw)


@dataclass
class ExperimentRecord:
    trial: int
    step: int
    algo: str
    mse: float
    recovery: float
    lam: float
    alpha_mean: float
    diverged: bool
    recovery_modes: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def row(self) -> list[str]:
        return [str(self.trial), str(self.step), self.algo, _fmt(self.mse),
                _fmt(self.recovery), _fmt(self.lam), _fmt(self.alpha_mean),
                str(int(self.diverged))]


def _fmt(x: float) -> str:
    return repr(float(x))


def draw_sample(cfg: GenConfig, dicts: Sequence[np.ndarray],
                rng: np.random.Generator) -> tuple[np.ndarray, SparseCore]:
    """One noisy observation and its generating core.

    Noise power is the sample's signal power times the noise ratio; a sample
    without signal (``sparsity == 0``) uses the power of one unit atom with
    unit coefficient, ``1 / prod(rows)``.
    """
    n_atoms = cfg.atoms ** cfg.modes
    flat = rng.choice(n_atoms, size=cfg.sparsity, replace=False)
    values = rng.standard_normal(cfg.sparsity)
    indices = [tuple(int(i) for i in np.unravel_index(f, cfg.core_shape)) for f in flat]
    core = SparseCore(cfg.core_shape, indices, values)
    X = tucker_reconstruct(core.to_dense(), dicts)
    ratio = cfg.noise_ratio()
    if ratio > 0.0:
        power = float(np.mean(X ** 2))
        if power == 0.0:
            power = 1.0 / X.size
        X = X + math.sqrt(power * ratio) * rng.standard_normal(X.shape)
    return X, core


def generate_instance(cfg: GenConfig, rng: np.random.Generator
                      ) -> tuple[list[np.ndarray], Iterator[tuple[np.ndarray, SparseCore]]]:
    """True dictionaries and an endless stream of ``(X_t, S_t)``."""
    dicts = [project_unit_columns(rng.standard_normal((cfg.rows, cfg.atoms)))[0]
             for _ in range(cfg.modes)]

    def stream():
        while True:
            yield draw_sample(cfg, dicts, rng)

    return dicts, stream()


def mse(E: np.ndarray) -> float:
    E = np.asarray(E, dtype=float)
    return float(np.sum(E * E) / E.size)


def atom_recovery(est: np.ndarray, truth: np.ndarray,
                  threshold: float = RECOVERY_THRESHOLD) -> float:
    """Fraction of true atoms matched by an estimated atom.

    Pairs are formed greedily by decreasing ``|<est_i, truth_j>|``, one-to-one;
    a pair counts when the absolute inner product exceeds ``threshold``.
    """
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {truth.shape}")
    mats = []
    for name, M in (("estimate", est), ("truth", truth)):
        norms = np.linalg.norm(M, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-8):
            log.debug("atom_recovery: normalizing %s columns", name)
            M = M / np.where(norms == 0.0, 1.0, norms)
        mats.append(M)
    if not np.all(np.isfinite(mats[0])):
        return 0.0
    corr = np.abs(mats[0].T @ mats[1])
    matched = 0
    for _ in range(min(corr.shape)):
        i, j = np.unravel_index(int(np.argmax(corr)), corr.shape)
        if corr[i, j] <= threshold:
            break
        matched += 1
        corr[i, :] = -1.0
        corr[:, j] = -1.0
    return matched / truth.shape[1]


def _trial_seeds(seed: int, trial: int) -> tuple[np.random.Generator, int]:
    data_ss, learner_ss = np.random.SeedSequence(seed, spawn_key=(trial,)).spawn(2)
    return np.random.default_rng(data_ss), int(learner_ss.generate_state(1)[0])


def make_learner(algo: str, lcfg: LearnerConfig, dicts=None, ridge: float = 0.0):
    if algo == "omdl-sd":
        return OnlineMultilinearDL(replace(lcfg, direction="sd"), dicts)
    if algo == "omdl-qn":
        return OnlineMultilinearDL(replace(lcfg, direction="qn"), dicts)
    if algo == "tmod":
        return TModLearner(lcfg, dicts, ridge=ridge)
    raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGOS}")


@dataclass
class TrialState:
    """Everything needed to continue a trial mid-stream."""

    trial: int
    step: int
    true_dicts: list[np.ndarray]
    rng: np.random.Generator
    learner: OnlineMultilinearDL
    diverged: bool = False


def start_trial(gen: GenConfig, lcfg: LearnerConfig, algo: str, trial: int,
                ridge: float = 0.0, init: str = "random") -> TrialState:
    """Fresh instance and learner for one trial.

    ``init="truth"`` starts the learner at the generating dictionaries.
    """
    rng, learner_seed = _trial_seeds(gen.seed, trial)
    true_dicts, _ = generate_instance(gen, rng)
    lcfg = replace(lcfg, seed=learner_seed)
    dicts = [D.copy() for D in true_dicts] if init == "truth" else None
    return TrialState(trial, 0, true_dicts, rng, make_learner(algo, lcfg, dicts, ridge))


def advance_trial(state: TrialState, gen: GenConfig, algo: str, coding: str = "omp"
                  ) -> ExperimentRecord:
    """Feed one sample to the trial's learner and measure it."""
    X, true_core = draw_sample(gen, state.true_dicts, state.rng)
    state.step += 1
    learner = state.learner
    if state.diverged:
        return ExperimentRecord(state.trial, state.step, algo, float("nan"), 0.0,
                                float("nan"), float("nan"), True)
    core = None
    if coding == "oracle":
        core = code_oracle_support(X, learner.unit_dicts(), true_core.indices)
    report = learner.step(X, core)
    err = report.residual_mse
    diverged = learner.diverged or not math.isfinite(err)
    if diverged:
        state.diverged = True
        rec_modes = [0.0] * gen.modes
    else:
        unit = learner.unit_dicts()
        rec_modes = [atom_recovery(U, T) for U, T in zip(unit, state.true_dicts)]
    return ExperimentRecord(
        state.trial, state.step, algo, err if not diverged else float("nan"),
        float(np.mean(rec_modes)), report.lam, report.alpha_mean, diverged,
        rec_modes, report.flags)


def run_trial(gen: GenConfig, lcfg: LearnerConfig, algo: str, trial: int,
              coding: str = "omp", ridge: float = 0.0, on_divergence: str = "continue",
              init: str = "random", on_step: Callable[[], None] | None = None
              ) -> list[ExperimentRecord]:
    state = start_trial(gen, lcfg, algo, trial, ridge, init)
    return continue_trial(state, gen, algo, gen.steps, coding, on_divergence, on_step)


def continue_trial(state: TrialState, gen: GenConfig, algo: str, until: int,
                   coding: str = "omp", on_divergence: str = "continue",
                   on_step: Callable[[], None] | None = None) -> list[ExperimentRecord]:
    """Advance ``state`` up to step ``until``; returns the new records."""
    records = []
    while state.step < until:
        rec = advance_trial(state, gen, algo, coding)
        records.append(rec)
        if on_step:
            on_step()
        if rec.diverged and on_divergence == "truncate":
            break
    return records


def _run_trial_args(args):
    return run_trial(*args)


def run_experiment(gen: GenConfig, lcfg: LearnerConfig, algo: str, coding: str = "omp",
                   ridge: float = 0.0, on_divergence: str = "continue",
                   workers: int = 1, init: str = "random",
                   progress: Callable[[int], None] | None = None
                   ) -> list[list[ExperimentRecord]]:
    """Run ``gen.trials`` independent trials; returns records per trial in trial order.

    ``progress(n)`` is called with the number of steps completed since the
    previous call.
    """
    if on_divergence not in ("continue", "truncate"):
        raise ValueError("on_divergence must be 'continue' or 'truncate'")
    if coding not in ("omp", "oracle"):
        raise ValueError("coding must be 'omp' or 'oracle'")
    if init not in ("random", "truth"):
        raise ValueError("init must be 'random' or 'truth'")
    jobs = [(gen, lcfg, algo, k, coding, ridge, on_divergence, init)
            for k in range(gen.trials)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs in pool.map(_run_trial_args, jobs):
                results.append(recs)
                if progress:
                    progress(gen.steps)
    else:
        step_cb = (lambda: progress(1)) if progress else None
        for job in jobs:
            recs = run_trial(*job, on_step=step_cb)
            results.append(recs)
            if progress and len(recs) < gen.steps:
                progress(gen.steps - len(recs))
    return results


def summarize(trials: Sequence[Sequence[ExperimentRecord]]) -> list[dict]:
    """Per-step means across trials.

    Truncated (diverged) trials keep counting as diverged with zero recovery;
    the MSE mean is taken over trials with a finite value at that step.
    """
    if not trials:
        return []
    steps = max(len(t) for t in trials)
    algo = next(r.algo for t in trials for r in t)
    out = []
    for s in range(steps):
        mses, recs, lams, alphas, div = [], [], [], [], []
        for t in trials:
            if s < len(t):
                r = t[s]
                if math.isfinite(r.mse):
                    mses.append(r.mse)
                recs.append(r.recovery)
                lams.append(r.lam)
                if math.isfinite(r.alpha_mean):
                    alphas.append(r.alpha_mean)
                div.append(float(r.diverged))
            else:
                recs.append(0.0)
                div.append(1.0)
        finite_lams = [x for x in lams if math.isfinite(x)]
        out.append({
            "step": s + 1,
            "algo": algo,
            "mse": float(np.mean(mses)) if mses else float("nan"),
            "recovery": float(np.mean(recs)),
            "lambda": float(np.mean(finite_lams)) if finite_lams else float("nan"),
            "alpha_mean": float(np.mean(alphas)) if alphas else float("nan"),
            "diverged_fraction": float(np.mean(div)),
            "trials": len(trials),
        })
    return out


def flag_counts(trial: Sequence[ExperimentRecord]) -> dict[str, int]:
    """Occurrences of each flag kind over one trial (mode prefixes kept)."""
    counts: Counter = Counter()
    for r in trial:
        for f in r.flags:
            parts = f.split(":")
            counts[":".join(parts[:2]) if parts[0].startswith("mode") else parts[0]] += 1
    return dict(sorted(counts.items()))


def steps_to_recovery(summary: Sequence[dict], level: float) -> float:
    """First step whose mean recovery reaches ``level``; ``inf`` if never."""
    for row in summary:
        if row["recovery"] >= level:
            return float(row["step"])
    return math.inf


def sparsity_sweep(gen: GenConfig, lcfg: LearnerConfig, sparsities: Sequence[int],
                   algo: str = "omdl-qn", **kw) -> dict[int, list[dict]]:
    """Mean curves for each core sparsity, all else equal."""
    out = {}
    for k in sparsities:
        g = replace(gen, sparsity=k)
        out[k] = summarize(run_experiment(g, replace(lcfg, sparsity=k), algo, **kw))
    return out


def write_records_csv(path, trials: Sequence[Sequence[ExperimentRecord]], header: bool = True,
                      mode: str = "w") -> None:
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(RECORD_FIELDS)
        for t in trials:
            for r in t:
                w.writerow(r.row())


def write_summary_csv(path, summaries: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in summaries:
            w.writerow([row["step"], row["algo"], _fmt(row["mse"]), _fmt(row["recovery"]),
                        _fmt(row["lambda"]), _fmt(row["alpha_mean"]),
                        _fmt(row["diverged_fraction"]), row["trials"]])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({
                "step": int(r["step"]), "algo": r["algo"], "mse": float(r["mse"]),
                "recovery": float(r["recovery"]), "lambda": float(r["lambda"]),
                "alpha_mean": float(r["alpha_mean"]),
                "diverged_fraction": float(r["diverged_fraction"]),
                "trials": int(r["trials"]),
            })
    return rows


def read_records_csv(path) -> list[ExperimentRecord]:
    with open(path, newline="") as fh:
        return [ExperimentRecord(int(r["trial"]), int(r["step"]), r["algo"], float(r["mse"]),
                                 float(r["recovery"]), float(r["lambda"]),
                                 float(r["alpha_mean"]), bool(int(r["diverged"])))
                for r in csv.DictReader(fh)]
