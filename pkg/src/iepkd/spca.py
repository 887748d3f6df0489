"""Stacked PCA: per-image first PCs, sphere-to-plane mapping, incremental PCA.

Feature maps ``(N, H, W, D)`` are reduced to one unit descriptor per image
(the first right singular vector of the ``HW x D`` matrix, sign corrected),
moved off the hypersphere onto the plane orthogonal to the center vector,
and compressed to ``D/2`` coordinates by a running PCA of that plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import svd
from .tensor import EPS, NumericalError

ANTIPODE_GUARD = 1e-9


class DegenerateInputError(ValueError):
    """A feature map or descriptor has no principal direction."""


class UninitializedStateError(RuntimeError):
    pass


def center_vector(d: int) -> np.ndarray:
    return np.full(d, 1.0 / np.sqrt(d))


def sign_correct(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` (or each row of a stack) so that ``max + min >= 0``; ties keep the sign."""
    v = np.asarray(v, dtype=np.float64)
    s = np.where(v.max(axis=-1) + v.min(axis=-1) < 0, -1.0, 1.0)
    return v * s[..., None] if v.ndim > 1 else v * s


def sign_correct_columns(m: np.ndarray) -> np.ndarray:
    return sign_correct(m.T).T


def first_pc(f: np.ndarray) -> np.ndarray:
    """Sign-corrected unit first right singular vector of ``f`` (``HW x D``).

    A stack ``(N, HW, D)`` gives an ``(N, D)`` result.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] < 2:
        raise ValueError("first_pc needs depth D >= 2")
    norms = np.sqrt((f * f).sum(axis=(-2, -1)))
    if np.any(norms == 0):
        raise DegenerateInputError("all-zero feature map has no principal direction")
    _, _, vt = svd(f)
    return sign_correct(vt[..., 0, :])


def stereographic(p: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Map unit vectors ``p`` (rows) onto the plane orthogonal to ``o``.

    ``(p + o) / cos(arccos(p.o) / 2)^2 - 2 o``, written with the half-angle
    identity ``cos(arccos(x) / 2)^2 = (1 + x) / 2``.
    """
    p = np.asarray(p, dtype=np.float64)
    x = p @ o
    if np.any(x < -1.0 + ANTIPODE_GUARD):
        raise NumericalError("stereographic projection is singular at the antipode of the center vector")
    denom = (1.0 + x) / 2.0
    return (p + o) / denom[..., None] - 2.0 * o


@dataclass
class IpcaState:
    """Running principal directions of the plane-projected descriptor space."""

    layer_index: int
    dim: int
    V: np.ndarray
    S: np.ndarray
    mu: np.ndarray
    updates_seen: int = 0
    rank: int = 0
    ema_new_weight: float = 0.9

    @classmethod
    def empty(cls, dim: int, layer_index: int = 0, ema_new_weight: float = 0.9) -> IpcaState:
        if dim % 2:
            raise ValueError(f"sensing depth must be even, got {dim}")
        k = dim // 2
        return cls(layer_index, dim, np.zeros((dim, k)), np.zeros(k), np.zeros(dim),
                   ema_new_weight=ema_new_weight)

    @property
    def components(self) -> int:
        return self.dim // 2

    @property
    def partially_ranked(self) -> bool:
        return self.rank < self.components

    def copy(self) -> IpcaState:
        return replace(self, V=self.V.copy(), S=self.S.copy(), mu=self.mu.copy())


def ipca_update(state: IpcaState, pbar: np.ndarray) -> IpcaState:
    """One incremental PCA step on a batch of plane vectors; returns a new state.

    The new batch, the previous components scaled by their singular values,
    and the mean-shift row are stacked and re-decomposed.  The mean-shift row
    is omitted on the first update, when there is no prior mean.
    """
    pbar = np.asarray(pbar, dtype=np.float64)
    n, d = pbar.shape
    if d != state.dim:
        raise ValueError(f"batch depth {d} does not match state depth {state.dim}")
    if n < 2:
        raise ValueError("ipca_update needs at least two rows")
    k = state.components
    m_c = pbar.mean(axis=0)
    blocks = [pbar - m_c, state.S[:, None] * state.V.T]
    if state.updates_seen > 0:
        blocks.append((state.mu - m_c)[None, :])
    _, s, vt = svd(np.vstack(blocks))
    s_new = np.zeros(k)
    v_new = np.zeros((d, k))
    take = min(k, s.shape[0])
    s_new[:take] = s[:take]
    v_new[:, :take] = vt[:take].T
    v_new = sign_correct_columns(v_new)
    # round-off of the centering scales with the input, not with s[0]
    scale = max(s_new[0], np.abs(pbar).max() * np.sqrt(n))
    rank = int(np.sum(s_new > scale * max(d, n) * np.finfo(float).eps))
    w = state.ema_new_weight
    mu = (1.0 - w) * state.mu + w * m_c
    return replace(state, V=v_new, S=s_new, mu=mu, updates_seen=state.updates_seen + 1,
                   rank=max(rank, state.rank))


def compress(pbar: np.ndarray, state: IpcaState) -> np.ndarray:
    """``((pbar - mu) V) diag(S)``; never mutates ``state``."""
    if state.updates_seen == 0:
        raise UninitializedStateError("IPCA state has not seen any training batch")
    return ((np.asarray(pbar) - state.mu) @ state.V) * state.S


def affinity(c: np.ndarray) -> np.ndarray:
    """Cosine-similarity matrix of the rows of ``c``."""
    c = np.asarray(c, dtype=np.float64)
    unit = c / (np.sqrt((c * c).sum(axis=1, keepdims=True)) + EPS)
    a = unit @ unit.T
    return 0.5 * (a + a.T)


@dataclass
class SpcaOutput:
    P: np.ndarray
    Pbar: np.ndarray
    C: np.ndarray
    A: np.ndarray
    state: IpcaState = field(repr=False)


def run_spca(maps: np.ndarray, state: IpcaState, training: bool) -> SpcaOutput:
    """first_pc -> stereographic -> (ipca_update) -> compress -> affinity.

    ``maps`` is ``(N, H, W, D)``.  With ``training=False`` the returned state
    is the input state object, untouched.
    """
    maps = np.asarray(maps, dtype=np.float64)
    n, d = maps.shape[0], maps.shape[-1]
    if n < 2:
        raise ValueError("run_spca needs N >= 2")
    if d % 2:
        raise ValueError(f"sensing depth must be even, got {d}")
    p = first_pc(maps.reshape(n, -1, d))
    pbar = stereographic(p, center_vector(d))
    if training:
        state = ipca_update(state, pbar)
    c = compress(pbar, state)
    return SpcaOutput(p, pbar, c, affinity(c), state)
