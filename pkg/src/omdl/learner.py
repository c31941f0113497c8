"""Online multilinear dictionary learning.

Each observation updates every mode dictionary in turn. For mode ``n`` the
running cost is the quadratic ``tr(1/2 Psi R Psi^T - P Psi^T)`` whose
statistics ``R`` (``L x L``) and ``P`` (``J x L``) are kept recursively with a
forgetting factor, a sliding window and a per-sample correcting weight. One
descent step (steepest descent or BFGS quasi-Newton) with exact line search is
taken per mode and sample; the gradient is carried by a dual recursion instead
of being recomputed from ``R`` and ``P``.

Column normalization is not applied to the learner's own dictionaries unless
``project_every_step`` is set: :meth:`OnlineMultilinearDL.unit_dicts` gives the
normalized view used for coding and reporting, and cores coded against that
view are rescaled back to the raw dictionaries before the statistics update.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coding import SparseCore, code_omp
from .tensor import (contract_all_but_n, frobenius_inner, partial_reconstruct_excluding,
                     tucker_reconstruct)

log = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "omdl-snapshot"
SNAPSHOT_VERSION = 1

DIRECTIONS = ("sd", "qn")


@dataclass
class LearnerConfig:
    """Settings of one learner instance.

    ``rows`` and ``atoms`` hold ``J_n`` and ``L_n`` per mode. ``window``
    defaults to ``max(atoms)``; shorter windows are rejected unless
    ``allow_short_window`` is set, since fewer samples than atoms cannot make
    ``R`` full rank.
    """

    rows: tuple[int, ...] = (10, 10, 10)
    atoms: tuple[int, ...] = (20, 20, 20)
    sparsity: int = 10
    direction: str = "qn"
    lambda0: float = 0.8
    tau: int = 100
    window: int | None = None
    allow_short_window: bool = False
    use_sample_weight: bool = True
    share_weight: bool = False
    eps_reg: float = 1e-10
    eps_denom: float = 1e-12
    alpha_max: float = 1.0
    project_every_step: bool = False
    seed: int = 0

    def __post_init__(self):
        self.rows = tuple(int(j) for j in self.rows)
        self.atoms = tuple(int(a) for a in self.atoms)
        if len(self.rows) != len(self.atoms) or not self.rows:
            raise ValueError("rows and atoms must list one extent per mode")
        if any(j < 1 for j in self.rows) or any(a < 1 for a in self.atoms):
            raise ValueError("extents must be positive")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if not 0.0 < self.lambda0 <= 1.0:
            raise ValueError(f"lambda0 must lie in (0, 1], got {self.lambda0}")
        if self.tau < 1:
            raise ValueError("tau must be a positive integer")
        if self.window is None:
            self.window = max(self.atoms)
        if self.window < 1:
            raise ValueError("window must be a positive integer")
        if self.window < max(self.atoms) and not self.allow_short_window:
            raise ValueError(
                f"window {self.window} is shorter than the largest atom count "
                f"{max(self.atoms)}; set allow_short_window to force it")
        if self.eps_reg <= 0 or self.eps_denom <= 0 or self.alpha_max <= 0:
            raise ValueError("eps_reg, eps_denom and alpha_max must be positive")
        if self.sparsity < 0:
            raise ValueError("sparsity must be non-negative")

    @property
    def ndim(self) -> int:
        return len(self.atoms)


@dataclass
class WindowEntry:
    A: np.ndarray
    B: np.ndarray
    mu: float
    tag: float = 1.0  # product of the forgetting factors applied since arrival


@dataclass
class ModeStats:
    """Recursive state of one mode."""

    R: np.ndarray
    P: np.ndarray
    G_post: np.ndarray
    C: np.ndarray
    capacity: int
    window: deque = field(default_factory=deque)
    # last accepted direction and its curvature image D R (diagnostics)
    last_D: np.ndarray | None = None
    last_H: np.ndarray | None = None

    @classmethod
    def zeros(cls, rows: int, atoms: int, capacity: int) -> "ModeStats":
        return cls(np.zeros((atoms, atoms)), np.zeros((rows, atoms)),
                   np.zeros((rows, atoms)), np.eye(atoms), capacity)


@dataclass
class StepReport:
    t: int
    lam: float
    alpha: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    mu: list[float] = field(default_factory=list)
    direction: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    core: SparseCore | None = None
    residual_mse: float = float("nan")  # coding error before the update

    @property
    def alpha_mean(self) -> float:
        a = [x for x in self.alpha if np.isfinite(x)]
        return float(np.mean(a)) if a else float("nan")


def forgetting_schedule(t: int, lambda0: float, tau: int) -> float:
    """Quartic ramp of the forgetting factor from ``lambda0`` (t=0) to 1 (t>=tau)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t >= tau:
        return 1.0
    return 1.0 - (1.0 - lambda0) * (1.0 - t / tau) ** 4


def compute_arrivals(X: np.ndarray, S: np.ndarray, dicts: Sequence[np.ndarray],
                     n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample Gram ``A`` (``L x L``) and cross term ``B`` (``J x L``) for mode n."""
    S_tilde = partial_reconstruct_excluding(S, dicts, n)
    return (contract_all_but_n(S_tilde, S_tilde, n),
            contract_all_but_n(X, S_tilde, n))


def sample_weight(H_hat: np.ndarray, A: np.ndarray,
                  eps_denom: float = 1e-12) -> tuple[float, bool]:
    """Correcting weight ``1 / (1 + ||H_hat||_F / sqrt(tr A))``.

    Returns ``(mu, degenerate)``; a sample with ``tr A <= eps_denom`` carries
    no energy and gets ``mu = 1``.
    """
    energy = float(np.trace(A))
    if energy <= eps_denom:
        return 1.0, True
    return 1.0 / (1.0 + np.linalg.norm(H_hat) / np.sqrt(energy)), False


def update_statistics(stats: ModeStats, A: np.ndarray, B: np.ndarray,
                      mu: float, lam_prev: float) -> tuple[np.ndarray, np.ndarray]:
    """Fold one weighted sample into ``R``/``P`` and return the increments.

    Every retained window entry is discounted by ``lam_prev``; when the window
    is full the oldest entry leaves with its accumulated discount.
    """
    for entry in stats.window:
        entry.tag *= lam_prev
    S_inc = mu * A
    Q_inc = mu * B
    if len(stats.window) >= stats.capacity:
        old = stats.window.popleft()
        S_inc = S_inc - old.tag * old.mu * old.A
        Q_inc = Q_inc - old.tag * old.mu * old.B
    stats.window.append(WindowEntry(A.copy(), B.copy(), float(mu)))
    R = lam_prev * stats.R + S_inc
    stats.R = 0.5 * (R + R.T)
    stats.P = lam_prev * stats.P + Q_inc
    return S_inc, Q_inc


def a_priori_gradient(stats: ModeStats, Psi_prev: np.ndarray, S_inc: np.ndarray,
                      Q_inc: np.ndarray, lam_prev: float) -> np.ndarray:
    """Gradient at the previous dictionary via ``lam * G_post + (Psi S_inc - Q_inc)``."""
    return lam_prev * stats.G_post + (Psi_prev @ S_inc - Q_inc)


def direction_sd(G: np.ndarray) -> np.ndarray:
    return -G


def direction_qn(G: np.ndarray, C_prev: np.ndarray,
                 eps_denom: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Quasi-Newton direction ``-G C``.

    Returns ``(D, fell_back)``. When ``-G C`` is not a clear descent direction
    the steepest-descent direction is returned instead and the caller must
    reset ``C`` to the identity.
    """
    D = -G @ C_prev
    slope = frobenius_inner(D, G)
    if slope >= -eps_denom * np.linalg.norm(G) * np.linalg.norm(D) or not np.isfinite(slope):
        if np.any(G):
            return -G, True
    return D, False


def exact_line_search(D: np.ndarray, G: np.ndarray, R: np.ndarray,
                      eps_denom: float = 1e-12,
                      alpha_max: float = 1.0) -> tuple[float, np.ndarray, bool]:
    """Minimize the quadratic cost along ``D``.

    Returns ``(alpha, H, clipped)`` with ``H = D R`` and
    ``alpha = -<D, G> / <D, H>``. If the curvature ``<D, H>`` is not above
    ``eps_denom * ||D||^2`` the step is capped at ``alpha_max``.
    """
    H = D @ R
    num = -frobenius_inner(D, G)
    den = frobenius_inner(D, H)
    if den <= eps_denom * frobenius_inner(D, D):
        alpha = alpha_max if num > 0 else 0.0
        return alpha, H, True
    return num / den, H, False


def dual_posterior_update(G: np.ndarray, alpha: float, H: np.ndarray) -> np.ndarray:
    """Gradient at the updated dictionary, ``G + alpha H``."""
    return G + alpha * H


def bfgs_update(C_prev: np.ndarray, D: np.ndarray, H: np.ndarray,
                eps_reg: float = 1e-10) -> tuple[np.ndarray, bool]:
    """Block BFGS correction of the inverse-curvature estimate.

    With ``F = (D H^T)^{-1} D`` the update is
    ``C = (I - F^T H) C_prev (I - H^T F) + D^T F``, which enforces the secant
    condition ``C H^T = D^T``. Returns ``(C, skipped)``; the update is skipped
    when ``D H^T`` is ill-conditioned beyond ``1 / eps_reg``.
    """
    M = D @ H.T
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1.0 / eps_reg:
        return C_prev, True
    F = np.linalg.solve(M, D)
    I = np.eye(C_prev.shape[0])
    C = (I - F.T @ H) @ C_prev @ (I - H.T @ F) + D.T @ F
    return 0.5 * (C + C.T), False


def project_unit_columns(Psi: np.ndarray, rng: np.random.Generator | None = None
                         ) -> tuple[np.ndarray, list[int]]:
    """Scale every column to unit 2-norm.

    Zero columns are replaced by random unit vectors; their indices are
    returned alongside the projected matrix.
    """
    norms = np.linalg.norm(Psi, axis=0)
    zero = [int(i) for i in np.flatnonzero(norms == 0.0)]
    out = Psi / np.where(norms == 0.0, 1.0, norms)
    if zero:
        rng = rng if rng is not None else np.random.default_rng()
        for i in zero:
            v = rng.standard_normal(Psi.shape[0])
            out[:, i] = v / np.linalg.norm(v)
    return out, zero


def mode_cost(Psi: np.ndarray, R: np.ndarray, P: np.ndarray) -> float:
    """``tr(1/2 Psi R Psi^T - P Psi^T)``."""
    return 0.5 * frobenius_inner(Psi @ R, Psi) - frobenius_inner(P, Psi)


def random_dictionaries(rows: Sequence[int], atoms: Sequence[int],
                        rng: np.random.Generator) -> list[np.ndarray]:
    """Gaussian dictionaries with unit columns."""
    return [project_unit_columns(rng.standard_normal((j, a)))[0]
            for j, a in zip(rows, atoms)]


Coder = Callable[[np.ndarray, list], SparseCore]


class OnlineMultilinearDL:
    """Online learner for separable mode dictionaries.

    Parameters
    ----------
    config : LearnerConfig
    dicts : list of arrays, optional
        Initial dictionaries; Gaussian with unit columns when omitted.
    coder : callable, optional
        ``coder(X, unit_dicts) -> SparseCore``; OMP with ``config.sparsity``
        terms by default.
    """

    kind = "omdl"

    def __init__(self, config: LearnerConfig, dicts: Sequence[np.ndarray] | None = None,
                 coder: Coder | None = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        if dicts is None:
            dicts = random_dictionaries(config.rows, config.atoms, self.rng)
        self.dicts = [np.array(D, dtype=float) for D in dicts]
        for D, j, a in zip(self.dicts, config.rows, config.atoms):
            if D.shape != (j, a):
                raise ValueError(f"dictionary shape {D.shape} != {(j, a)}")
        self.stats = [ModeStats.zeros(j, a, config.window)
                      for j, a in zip(config.rows, config.atoms)]
        self.coder = coder
        self.t = 0

    def unit_dicts(self) -> list[np.ndarray]:
        return [project_unit_columns(D, self.rng)[0] for D in self.dicts]

    @property
    def diverged(self) -> bool:
        return not all(np.all(np.isfinite(D)) for D in self.dicts)

    def code(self, X: np.ndarray, unit: list[np.ndarray] | None = None) -> SparseCore:
        unit = self.unit_dicts() if unit is None else unit
        if self.coder is not None:
            return self.coder(X, unit)
        if self.config.sparsity == 0:
            return SparseCore(tuple(self.config.atoms))
        return code_omp(X, unit, self.config.sparsity)

    def _repair_zero_columns(self, report: StepReport) -> None:
        for n, D in enumerate(self.dicts):
            fixed, zero = project_unit_columns(D, self.rng)
            for i in zero:
                D[:, i] = fixed[:, i]
                report.flags.append(f"mode{n}:zero_column_replaced:{i}")

    def step(self, X: np.ndarray, core: SparseCore | None = None) -> StepReport:
        """Consume one observation and update every mode dictionary.

        ``core`` overrides the coder; it is expressed in the unit-column
        coordinates, like the coder output.
        """
        cfg = self.config
        X = np.asarray(X, dtype=float)
        t = self.t + 1
        lam_prev = forgetting_schedule(t - 1, cfg.lambda0, cfg.tau)
        report = StepReport(t=t, lam=lam_prev)
        self._repair_zero_columns(report)
        unit = self.unit_dicts()
        if core is None:
            core = self.code(X, unit)
        report.core = core
        report.flags.extend(core.flags)
        err = X - tucker_reconstruct(core.to_dense(), unit)
        report.residual_mse = float(np.mean(err * err))

        # coefficients for the raw (unnormalized) dictionaries
        S = core.to_dense()
        for n, D in enumerate(self.dicts):
            norms = np.linalg.norm(D, axis=0)
            S = S / norms.reshape([-1 if m == n else 1 for m in range(S.ndim)])

        shared_mu = None
        for n in range(cfg.ndim):
            A, B = compute_arrivals(X, S, self.dicts, n)
            mu = 1.0
            if cfg.use_sample_weight:
                if cfg.share_weight and shared_mu is not None:
                    mu = shared_mu
                else:
                    mu, degenerate = sample_weight(self.dicts[n] @ A - B, A, cfg.eps_denom)
                    if degenerate:
                        report.flags.append(f"mode{n}:zero_energy_sample")
                    shared_mu = mu
            report.mu.append(mu)
            stats = self.stats[n]
            S_inc, Q_inc = update_statistics(stats, A, B, mu, lam_prev)
            self._update_mode(n, S_inc, Q_inc, lam_prev, report)
            if cfg.project_every_step:
                self.dicts[n] = project_unit_columns(self.dicts[n], self.rng)[0]
        self.t = t
        return report

    def _update_mode(self, n: int, S_inc: np.ndarray, Q_inc: np.ndarray,
                     lam_prev: float, report: StepReport) -> None:
        cfg = self.config
        stats = self.stats[n]
        Psi = self.dicts[n]
        G = a_priori_gradient(stats, Psi, S_inc, Q_inc, lam_prev)
        gnorm = float(np.linalg.norm(G))
        report.grad_norm.append(gnorm)
        if cfg.direction == "qn":
            D, fell_back = direction_qn(G, stats.C, cfg.eps_denom)
            if fell_back:
                stats.C = np.eye(stats.C.shape[0])
                report.flags.append(f"mode{n}:qn_fallback")
            report.direction.append("sd" if fell_back else "qn")
        else:
            D = direction_sd(G)
            report.direction.append("sd")

        if not np.any(D):
            report.alpha.append(0.0)
            stats.G_post = G
            return
        alpha, H, clipped = exact_line_search(D, G, stats.R, cfg.eps_denom, cfg.alpha_max)
        if clipped:
            report.flags.append(f"mode{n}:line_search_clipped")
        report.alpha.append(alpha)
        self.dicts[n] = Psi + alpha * D
        stats.last_D, stats.last_H = D, H
        stats.G_post = dual_posterior_update(G, alpha, H)
        if cfg.direction == "qn" and not clipped and alpha > 0:
            stats.C, skipped = bfgs_update(stats.C, D, H, cfg.eps_reg)
            if skipped:
                report.flags.append(f"mode{n}:bfgs_skipped")

    # -- checkpointing -------------------------------------------------

    def save(self, path) -> None:
        """Write a versioned ``.npz`` snapshot (dictionaries are stored bit-exactly)."""
        arrays = {
            "format": np.array(SNAPSHOT_FORMAT),
            "version": np.array(SNAPSHOT_VERSION),
            "kind": np.array(self.kind),
            "config": np.array(json.dumps(asdict(self.config))),
            "extra": np.array(json.dumps(self._extra_state())),
            "t": np.array(self.t),
            "rng": np.array(json.dumps(self.rng.bit_generator.state)),
        }
        for n, (D, st) in enumerate(zip(self.dicts, self.stats)):
            arrays[f"dict_{n}"] = D
            arrays[f"R_{n}"] = st.R
            arrays[f"P_{n}"] = st.P
            arrays[f"Gpost_{n}"] = st.G_post
            arrays[f"C_{n}"] = st.C
            J, L = st.P.shape
            w = list(st.window)
            arrays[f"winA_{n}"] = np.array([e.A for e in w]).reshape(len(w), L, L)
            arrays[f"winB_{n}"] = np.array([e.B for e in w]).reshape(len(w), J, L)
            arrays[f"winmu_{n}"] = np.array([e.mu for e in w], dtype=float)
            arrays[f"wintag_{n}"] = np.array([e.tag for e in w], dtype=float)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def _extra_state(self) -> dict:
        return {}

    @classmethod
    def load(cls, path, coder: Coder | None = None) -> "OnlineMultilinearDL":
        """Restore a learner written by :meth:`save`."""
        with np.load(path, allow_pickle=False) as z:
            if str(z["format"]) != SNAPSHOT_FORMAT:
                raise ValueError(f"{path} is not a learner snapshot")
            version = int(z["version"])
            if version != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            kind = str(z["kind"])
            target = cls._registry().get(kind)
            if target is None:
                raise ValueError(f"unknown learner kind {kind!r}")
            config = LearnerConfig(**json.loads(str(z["config"])))
            obj = target(config, [z[f"dict_{n}"] for n in range(config.ndim)], coder=coder)
            obj._set_extra_state(json.loads(str(z["extra"])))
            obj.t = int(z["t"])
            obj.rng.bit_generator.state = json.loads(str(z["rng"]))
            for n, st in enumerate(obj.stats):
                st.R = z[f"R_{n}"].copy()
                st.P = z[f"P_{n}"].copy()
                st.G_post = z[f"Gpost_{n}"].copy()
                st.C = z[f"C_{n}"].copy()
                st.window = deque(
                    WindowEntry(a.copy(), b.copy(), float(m), float(g))
                    for a, b, m, g in zip(z[f"winA_{n}"], z[f"winB_{n}"],
                                          z[f"winmu_{n}"], z[f"wintag_{n}"]))
        return obj

    def _set_extra_state(self, extra: dict) -> None:
        pass

    @staticmethod
    def _registry() -> dict:
        from .baselines import TModLearner
        return {"omdl": OnlineMultilinearDL, "tmod": TModLearner}
