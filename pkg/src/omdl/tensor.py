"""Dense multilinear algebra on numpy arrays.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order, so the
*last* mode varies fastest in the flat data. Modes are 0-based.

The mode-n unfolding puts mode ``n`` on the rows; the columns enumerate the
remaining modes in ascending order, again with the last one varying fastest.
For a 2x2x2 tensor filled with 1..8 the mode-0 unfolding is
``[[1, 2, 3, 4], [5, 6, 7, 8]]``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

MAX_MODES = 8


class ShapeMismatchError(ValueError):
    """Raised when operand extents disagree."""


def _check_mode(ndim: int, n: int) -> None:
    if not 0 <= n < ndim:
        raise ValueError(f"mode {n} out of range for a {ndim}-way tensor")


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float tensor, optionally reshaping flat row-major ``data``."""
    arr = np.asarray(data, dtype=float)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeMismatchError(
                f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim < 1 or arr.ndim > MAX_MODES:
        raise ValueError(f"tensors need 1..{MAX_MODES} modes, got {arr.ndim}")
    return arr


def unfold(T: np.ndarray, n: int) -> np.ndarray:
    """Mode-n matricization, shape ``(T.shape[n], prod(other extents))``."""
    _check_mode(T.ndim, n)
    return np.moveaxis(T, n, 0).reshape(T.shape[n], -1)


def refold(M: np.ndarray, n: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given full shape."""
    shape = tuple(shape)
    _check_mode(len(shape), n)
    moved = (shape[n],) + shape[:n] + shape[n + 1:]
    return np.moveaxis(np.reshape(M, moved), 0, n)


def mode_n_product(T: np.ndarray, M: np.ndarray, n: int) -> np.ndarray:
    """Multiply ``T`` by matrix ``M`` along mode ``n``.

    ``out[..., i, ...] = sum_j M[i, j] * T[..., j, ...]``
    """
    _check_mode(T.ndim, n)
    if M.ndim != 2 or M.shape[1] != T.shape[n]:
        raise ShapeMismatchError(
            f"mode {n}: matrix with {M.shape[-1]} columns cannot act on "
            f"extent {T.shape[n]}")
    out = np.tensordot(M, T, axes=([1], [n]))
    return np.moveaxis(out, 0, n)


def contract_all_but_n(A: np.ndarray, B: np.ndarray, n: int) -> np.ndarray:
    """Contract two tensors over every mode except ``n``.

    Returns the ``A.shape[n] x B.shape[n]`` matrix
    ``unfold(A, n) @ unfold(B, n).T``.
    """
    if A.ndim != B.ndim:
        raise ShapeMismatchError(f"{A.ndim}-way vs {B.ndim}-way tensor")
    _check_mode(A.ndim, n)
    for m in range(A.ndim):
        if m != n and A.shape[m] != B.shape[m]:
            raise ShapeMismatchError(
                f"mode {m}: extents {A.shape[m]} and {B.shape[m]} differ")
    return unfold(A, n) @ unfold(B, n).T


def _check_dicts(S: np.ndarray, dicts: Sequence[np.ndarray]) -> None:
    if len(dicts) != S.ndim:
        raise ShapeMismatchError(
            f"{len(dicts)} dictionaries for a {S.ndim}-way core")
    for m, D in enumerate(dicts):
        if D.shape[1] != S.shape[m]:
            raise ShapeMismatchError(
                f"mode {m}: dictionary has {D.shape[1]} atoms, core extent "
                f"is {S.shape[m]}")


def tucker_reconstruct(S: np.ndarray, dicts: Sequence[np.ndarray]) -> np.ndarray:
    """``S x_0 dicts[0] x_1 dicts[1] ... x_{N-1} dicts[N-1]``."""
    _check_dicts(S, dicts)
    out = S
    for m, D in enumerate(dicts):
        out = mode_n_product(out, D, m)
    return out


def partial_reconstruct_excluding(S: np.ndarray, dicts: Sequence[np.ndarray],
                                  n: int) -> np.ndarray:
    """Multiply the core by every dictionary except the mode-``n`` one."""
    _check_dicts(S, dicts)
    _check_mode(S.ndim, n)
    out = S
    for m, D in enumerate(dicts):
        if m != n:
            out = mode_n_product(out, D, m)
    return out


def frobenius_inner(A: np.ndarray, B: np.ndarray) -> float:
    if np.shape(A) != np.shape(B):
        raise ShapeMismatchError(f"{np.shape(A)} vs {np.shape(B)}")
    return float(np.vdot(A, B))
