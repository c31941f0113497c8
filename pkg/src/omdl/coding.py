"""Sparse coding of a tensor against a separable (Kronecker) dictionary.

The learner treats the core as given; this module supplies it. ``code_omp``
runs orthogonal matching pursuit over the implicit Kronecker product of the
mode dictionaries, never materializing it: correlations with the residual
are one multilinear product by the transposed dictionaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeMismatchError, tucker_reconstruct

RIDGE_EPS = 1e-10
# condition number beyond which a least-squares design is treated as singular
SINGULAR_COND = 1e10


@dataclass
class SparseCore:
    """K-sparse core tensor as ``(index tuple, value)`` pairs."""

    shape: tuple[int, ...]
    indices: list[tuple[int, ...]] = field(default_factory=list)
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.indices = [tuple(int(i) for i in idx) for idx in self.indices]
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.indices) != self.values.size:
            raise ValueError("indices and values differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate core indices")
        for idx in self.indices:
            if len(idx) != len(self.shape) or any(
                    not 0 <= i < s for i, s in zip(idx, self.shape)):
                raise ValueError(f"index {idx} outside shape {self.shape}")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for idx, v in zip(self.indices, self.values):
            out[idx] = v
        return out

    @classmethod
    def from_dense(cls, S: np.ndarray, tol: float = 0.0) -> "SparseCore":
        idx = np.argwhere(np.abs(S) > tol)
        indices = [tuple(i) for i in idx]
        return cls(S.shape, indices, np.array([S[i] for i in indices]))


def _atom(dicts: Sequence[np.ndarray], idx: tuple[int, ...]) -> np.ndarray:
    """Flattened separable atom, outer product of one column per mode."""
    out = np.ones(1)
    for D, i in zip(dicts, idx):
        out = np.multiply.outer(out, D[:, i])
    return out.reshape(-1)


def _check_compatible(X: np.ndarray, dicts: Sequence[np.ndarray]) -> None:
    if len(dicts) != X.ndim:
        raise ShapeMismatchError(
            f"{len(dicts)} dictionaries for a {X.ndim}-way observation")
    for m, D in enumerate(dicts):
        if D.shape[0] != X.shape[m]:
            raise ShapeMismatchError(
                f"mode {m}: dictionary has {D.shape[0]} rows, observation "
                f"extent is {X.shape[m]}")


def correlations(R: np.ndarray, dicts: Sequence[np.ndarray]) -> np.ndarray:
    """Inner products of ``R`` with every separable atom, shape ``(L_1..L_N)``."""
    return tucker_reconstruct(R, [D.T for D in dicts])


def code_omp(X: np.ndarray, dicts: Sequence[np.ndarray], K: int) -> SparseCore:
    """Greedy K-term OMP over the Kronecker dictionary.

    Each of the ``K`` iterations selects the atom with the largest absolute
    correlation with the residual and re-fits all selected coefficients by
    least squares. Iteration stops early once the residual vanishes, so a
    zero observation yields an empty core. An atom that makes the design
    rank deficient is dropped, excluded from later selection, and reported in
    ``flags``.
    """
    _check_compatible(X, dicts)
    core_shape = tuple(D.shape[1] for D in dicts)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > int(np.prod(core_shape)):
        raise ValueError(f"K={K} exceeds the {np.prod(core_shape)} atoms")

    x = X.reshape(-1)
    xnorm = np.linalg.norm(x)
    support: list[tuple[int, ...]] = []
    columns: list[np.ndarray] = []
    excluded = np.zeros(core_shape, dtype=bool)
    flags: list[str] = []
    coef = np.zeros(0)
    residual = X.copy()
    for _ in range(K):
        if np.linalg.norm(residual) <= 1e-13 * xnorm or xnorm == 0.0:
            break
        c = np.abs(correlations(residual, dicts))
        c[excluded] = -1.0
        for idx in support:
            c[idx] = -1.0
        idx = np.unravel_index(int(np.argmax(c)), core_shape)
        if c[idx] <= 0.0:
            break
        atom = _atom(dicts, idx)
        Phi = np.column_stack(columns + [atom])
        if np.linalg.cond(Phi) > SINGULAR_COND:
            excluded[idx] = True
            flags.append(f"dropped_atom:{idx}")
            continue
        support.append(tuple(int(i) for i in idx))
        columns.append(atom)
        coef, *_ = np.linalg.lstsq(Phi, x, rcond=None)
        residual = (x - Phi @ coef).reshape(X.shape)
    return SparseCore(core_shape, support, coef[:len(support)], flags)


def code_oracle_support(X: np.ndarray, dicts: Sequence[np.ndarray],
                        support: Sequence[Sequence[int]]) -> SparseCore:
    """Least-squares coefficients on a prescribed support.

    Solves the normal equations; when they are singular (condition number
    above ``1e10``) a ridge of ``1e-10 * trace / k`` is added and the event
    is flagged.
    """
    _check_compatible(X, dicts)
    core_shape = tuple(D.shape[1] for D in dicts)
    support = [tuple(int(i) for i in idx) for idx in support]
    if not support:
        return SparseCore(core_shape)
    Phi = np.column_stack([_atom(dicts, idx) for idx in support])
    gram = Phi.T @ Phi
    rhs = Phi.T @ X.reshape(-1)
    flags = []
    if np.linalg.cond(gram) > SINGULAR_COND:
        k = len(support)
        gram = gram + RIDGE_EPS * max(np.trace(gram) / k, 1.0) * np.eye(k)
        flags.append("ridge_regularized")
    coef = np.linalg.solve(gram, rhs)
    return SparseCore(core_shape, support, coef, flags)
