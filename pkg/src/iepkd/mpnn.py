"""Message passing network that predicts the next embedding stage.

Edges come from the descriptors at sensing point ``l`` (linear map + batch
norm, L2-normalized, pairwise Hadamard product); nodes are the raw
descriptors at ``l+1``.  ``I`` rounds of gated-linear-unit messages are added
onto the edges and the mean edge component is read out as the estimated
affinity at ``l+1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import kld_rows, softmax_rows
from .tensor import (Tensor, as_tensor, batch_norm_eval, batch_norm_train, concat, constant,
                     l2_normalize, mean, parameter, reshape, sigmoid)

BN_MOMENTUM = 0.9


def fan_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


@dataclass
class MpnnParams:
    """Weights of the distillation network for one adjacent sensing-point pair."""

    lm_weight: Tensor
    lm_bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    glu_weight: Tensor
    glu_bias: Tensor
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    iterations: int = 2

    TRAINABLE = ("lm_weight", "lm_bias", "bn_gamma", "bn_beta", "glu_weight", "glu_bias")

    @classmethod
    def init(cls, edge_in: int, node_dim: int, rng: np.random.Generator, iterations: int = 2) -> MpnnParams:
        """``edge_in`` is the width of C_l (also the edge width E), ``node_dim`` the width of C_{l+1}."""
        if iterations < 1:
            raise ValueError("message passing needs at least one iteration")
        e = edge_in
        return cls(
            lm_weight=parameter(fan_uniform(rng, edge_in, e)),
            lm_bias=parameter(np.zeros(e)),
            bn_gamma=parameter(np.ones(e)),
            bn_beta=parameter(np.zeros(e)),
            glu_weight=parameter(fan_uniform(rng, node_dim + 1, 2 * e)),
            glu_bias=parameter(np.zeros(2 * e)),
            bn_running_mean=np.zeros(e),
            bn_running_var=np.ones(e),
            iterations=iterations,
        )

    @property
    def edge_dim(self) -> int:
        return self.lm_weight.shape[1]

    @property
    def node_dim(self) -> int:
        return self.glu_weight.shape[0] - 1

    def trainable(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.TRAINABLE}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.trainable().items()}
        out["bn_running_mean"] = self.bn_running_mean
        out["bn_running_var"] = self.bn_running_var
        out["iterations"] = np.array([self.iterations], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> MpnnParams:
        kw = {name: parameter(arrays[name]) for name in cls.TRAINABLE}
        return cls(**kw, bn_running_mean=np.array(arrays["bn_running_mean"]),
                   bn_running_var=np.array(arrays["bn_running_var"]),
                   iterations=int(arrays["iterations"][0]))

    def frozen(self) -> MpnnParams:
        """Copy whose weights are constants (no gradient), for the student phase."""
        kw = {name: constant(getattr(self, name).data.copy()) for name in self.TRAINABLE}
        return MpnnParams(**kw, bn_running_mean=self.bn_running_mean.copy(),
                          bn_running_var=self.bn_running_var.copy(), iterations=self.iterations)


def linear_map(c: Tensor, params: MpnnParams, training: bool) -> Tensor:
    """The FC + batch-norm map applied to descriptors before edge construction."""
    z = as_tensor(c) @ params.lm_weight + params.lm_bias
    if training:
        z, mu, var = batch_norm_train(z, params.bn_gamma, params.bn_beta)
        params.bn_running_mean = BN_MOMENTUM * params.bn_running_mean + (1 - BN_MOMENTUM) * mu
        params.bn_running_var = BN_MOMENTUM * params.bn_running_var + (1 - BN_MOMENTUM) * var
        return z
    return batch_norm_eval(z, params.bn_gamma, params.bn_beta, params.bn_running_mean,
                           params.bn_running_var)


def edge_init(c_l, params: MpnnParams, training: bool) -> Tensor:
    """Initial edges ``e0[v, w] = cbar_v * cbar_w`` as an ``(N, N, E)`` tensor."""
    cbar = l2_normalize(linear_map(c_l, params, training), axis=-1)
    n, e = cbar.shape
    return reshape(cbar, (n, 1, e)) * reshape(cbar, (1, n, e))


def glu(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    z = x @ weight + bias
    half = z.shape[-1] // 2
    return z[..., :half] * sigmoid(z[..., half:])


def message(h_v, h_w, e, params: MpnnParams) -> Tensor:
    """GLU of ``[h_v - h_w, mean(e)]``; works on single vectors or broadcast stacks."""
    h_v, h_w, e = as_tensor(h_v), as_tensor(h_w), as_tensor(e)
    diff = h_v - h_w
    e_mean = mean(e, axis=-1, keepdims=True)
    if e_mean.shape[:-1] != diff.shape[:-1]:
        e_mean = e_mean + constant(np.zeros(diff.shape[:-1] + (1,)))
    return glu(concat([diff, e_mean], axis=-1), params.glu_weight, params.glu_bias)


def edge_update(e, m) -> Tensor:
    return as_tensor(e) + as_tensor(m)


def readout(e) -> Tensor:
    return mean(as_tensor(e), axis=-1)


@dataclass
class MpnnForward:
    a_tilde: Tensor
    messages: list[Tensor]
    e0: Tensor = field(repr=False)
    edges: Tensor = field(repr=False)


def mpnn_forward(c_l, c_next, params: MpnnParams, training: bool) -> MpnnForward:
    c_l, c_next = as_tensor(c_l), as_tensor(c_next)
    n = c_l.shape[0]
    if c_next.shape[0] != n:
        raise ValueError(f"descriptor sets disagree on N: {n} vs {c_next.shape[0]}")
    e0 = edge_init(c_l, params, training)
    d = c_next.shape[1]
    h_v = reshape(c_next, (n, 1, d))
    h_w = reshape(c_next, (1, n, d))
    e = e0
    messages = []
    for _ in range(params.iterations):
        m = message(h_v, h_w, e, params)
        messages.append(m)
        e = edge_update(e, m)
    return MpnnForward(readout(e), messages, e0, e)


def relation_softmax(m, axis: str = "row") -> Tensor:
    m = as_tensor(m)
    if axis == "row":
        return softmax_rows(m)
    if axis == "column":
        return softmax_rows(m.T)
    raise ValueError(f"unknown softmax axis {axis!r}")


def mpnn_loss(a_next, a_tilde, axis: str = "row") -> Tensor:
    """KL divergence between softmaxed true and estimated next-stage affinities."""
    return kld_rows(relation_softmax(a_next, axis), relation_softmax(a_tilde, axis))


@dataclass
class KnowledgeBundle:
    k_int: list[np.ndarray]
    k_alt: list[np.ndarray]
    iterations: int

    def alt(self, pair: int, round_: int) -> np.ndarray:
        return self.k_alt[pair * self.iterations + round_]


def extract_knowledge(forwards: list[MpnnForward]) -> KnowledgeBundle:
    if not forwards:
        raise ValueError("no forwards to extract knowledge from")
    k_int = [f.a_tilde.data for f in forwards]
    k_alt = [m.data for f in forwards for m in f.messages]
    return KnowledgeBundle(k_int, k_alt, len(forwards[0].messages))
