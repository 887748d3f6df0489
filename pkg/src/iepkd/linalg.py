"""Thin SVD plus the row-wise softmax / KL divergence used by every loss."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import EPS, NumericalError, Tensor, as_tensor, log, softmax


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


def _diagnostics(m: np.ndarray) -> str:
    finite = bool(np.all(np.isfinite(m)))
    try:
        cond = float(np.linalg.cond(m)) if finite else float("nan")
    except np.linalg.LinAlgError:
        cond = float("inf")
    return f"shape={m.shape} finite={finite} fro={np.linalg.norm(m) if finite else float('nan'):.3e} cond={cond:.3e}"


def svd(m) -> SvdResult:
    """Thin SVD with ``min(a, b)`` components, singular values descending.

    Accepts a single matrix or a stack ``(..., a, b)``; the decomposition is
    applied to each trailing matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] < 1 or m.shape[-2] < 1:
        raise ValueError(f"svd needs a non-empty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("svd input is not finite: " + _diagnostics(m.reshape(-1, m.shape[-1])))
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge ({exc}); {_diagnostics(m.reshape(-1, m.shape[-1]))}") from exc
    return SvdResult(u, s, vt)


def softmax_rows(m) -> Tensor:
    return softmax(as_tensor(m), axis=-1)


def kld_rows(p, q) -> Tensor:
    """Mean over rows of ``sum p * (ln p - ln q)`` with epsilon-guarded logs."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kld_rows shape mismatch: {p.shape} vs {q.shape}")
    terms = p * (log(p + EPS) - log(q + EPS))
    rows = terms.data.size // p.shape[-1]
    return terms.sum() * (1.0 / rows)
