"""Closed-form per-mode baseline (T-MOD style) on the online statistics.

The baseline shares the coder and the forgetting/window/weight pipeline of
:class:`~omdl.learner.OnlineMultilinearDL`; only the dictionary update
differs: each mode is replaced by the minimizer ``P (R + ridge I)^{-1}`` of
its running cost. With ``ridge = 0`` nothing protects the solve against the
rank-deficient ``R`` produced by very sparse cores.
"""

from __future__ import annotations

import warnings

import numpy as np

from .learner import LearnerConfig, OnlineMultilinearDL, StepReport


def tmod_update(R: np.ndarray, P: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``Psi (R + ridge I) = P`` for ``Psi``.

    A numerically singular system is still solved; if LAPACK reports exact
    singularity the result is all-NaN so that the caller sees a divergence.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    M = R + ridge * np.eye(R.shape[0]) if ridge else R
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.linalg.solve(M.T, P.T).T
    except np.linalg.LinAlgError:
        return np.full(P.shape, np.nan)


class TModLearner(OnlineMultilinearDL):
    """Online driver replacing each mode by the closed-form minimizer."""

    kind = "tmod"

    def __init__(self, config: LearnerConfig, dicts=None, coder=None, ridge: float = 0.0):
        super().__init__(config, dicts, coder)
        if ridge < 0:
            raise ValueError("ridge must be non-negative")
        self.ridge = float(ridge)

    def step(self, X, core=None) -> StepReport:
        if self.diverged:
            report = StepReport(t=self.t + 1, lam=float("nan"))
            report.flags.append("diverged")
            self.t += 1
            return report
        with np.errstate(all="ignore"):
            return super().step(X, core)

    def _update_mode(self, n, S_inc, Q_inc, lam_prev, report) -> None:
        st = self.stats[n]
        report.grad_norm.append(float(np.linalg.norm(self.dicts[n] @ st.R - st.P)))
        report.direction.append("tmod")
        report.alpha.append(float("nan"))
        Psi = tmod_update(st.R, st.P, self.ridge)
        if not np.all(np.isfinite(Psi)):
            report.flags.append(f"mode{n}:non_finite_update")
        self.dicts[n] = Psi
        st.G_post = Psi @ st.R - st.P

    def _extra_state(self) -> dict:
        return {"ridge": self.ridge}

    def _set_extra_state(self, extra: dict) -> None:
        self.ridge = float(extra.get("ridge", 0.0))
