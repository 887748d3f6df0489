"""Student-side knowledge path: projection into the teacher's SPCA frame,
the two transfer losses, and the clipped gradient combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import kld_rows, svd
from .mpnn import KnowledgeBundle, MpnnParams, extract_knowledge, mpnn_forward, relation_softmax
from .nets import ConvNet, DepthAdapters, cross_entropy, forward_sensed
from .optim import SGD
from .spca import (ANTIPODE_GUARD, DegenerateInputError, IpcaState, center_vector, compress,
                   first_pc, stereographic)
from .tensor import EPS, NumericalError, Tensor, as_tensor, constant, grad, matmul, no_grad, reshape, tabs

CLIP_MODES = ("norm_cap_min", "paper_literal_max")


@dataclass
class FrozenTeacherFrame:
    """Teacher-side SPCA statistics and distillation-network weights, read-only."""

    states: list[IpcaState]
    mpnn: list[MpnnParams]
    digest: str = ""

    def __post_init__(self):
        self.mpnn = [m.frozen() for m in self.mpnn]
        self.states = [s.copy() for s in self.states]

    @property
    def depths(self) -> list[int]:
        return [s.dim for s in self.states]


def student_pc(f_s, left_vectors: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Project ``F`` (``(N, HW, D)``) on its first left singular vector and normalize.

    The left singular vectors are constants; gradient flows through ``F``
    only.  Passing ``left_vectors`` reuses a previously computed set.
    Returns the sign-corrected unit rows and the vectors used.
    """
    f_s = as_tensor(f_s)
    n, hw, d = f_s.shape
    if np.any(np.sqrt((f_s.data ** 2).sum(axis=(1, 2))) == 0):
        raise DegenerateInputError("all-zero student feature map has no principal direction")
    if left_vectors is None:
        u, _, _ = svd(f_s.data)
        left_vectors = u[:, :, 0]
    proj = reshape(matmul(constant(left_vectors.reshape(n, 1, hw)), f_s), (n, d))
    norm = (proj * proj).sum(axis=1, keepdims=True) ** 0.5
    unit = proj / (norm + EPS)
    signs = np.where(unit.data.max(axis=1) + unit.data.min(axis=1) < 0, -1.0, 1.0)
    return unit * constant(signs[:, None]), left_vectors


def stereographic_t(p: Tensor, o: np.ndarray) -> Tensor:
    """Differentiable counterpart of :func:`iepkd.spca.stereographic`."""
    x = p @ constant(o)
    if np.any(x.data < -1.0 + ANTIPODE_GUARD):
        raise NumericalError("stereographic projection is singular at the antipode of the center vector")
    denom = reshape((x + 1.0) * 0.5, (p.shape[0], 1))
    return (p + constant(o)) / denom - constant(2.0 * o)


def student_compress(p_s: Tensor, state: IpcaState, literal: bool = False) -> Tensor:
    """Compress student descriptors with the teacher's frozen IPCA state.

    By default the full teacher pipeline (plane projection, centering,
    principal directions, singular-value scaling) is applied; ``literal``
    uses the bare ``(p - mu) V`` form instead.
    """
    p_s = as_tensor(p_s)
    if literal:
        return (p_s - constant(state.mu)) @ constant(state.V)
    pbar = stereographic_t(p_s, center_vector(state.dim))
    return ((pbar - constant(state.mu)) @ constant(state.V)) * constant(state.S)


def teacher_knowledge(frame: FrozenTeacherFrame, maps: list[np.ndarray]) -> tuple[KnowledgeBundle, list[np.ndarray]]:
    """Knowledge of the teacher for one batch of its sensed maps (no gradients)."""
    cs = []
    for fmap, state in zip(maps, frame.states):
        n, d = fmap.shape[0], fmap.shape[-1]
        p = first_pc(fmap.reshape(n, -1, d))
        cs.append(compress(stereographic(p, center_vector(d)), state))
    forwards = [mpnn_forward(cs[l], cs[l + 1], frame.mpnn[l], training=False)
                for l in range(len(cs) - 1)]
    return extract_knowledge(forwards), cs


def _check_pairs(a: list, b: list, what: str):
    if len(a) != len(b):
        raise ValueError(f"{what}: {len(a)} student entries vs {len(b)} teacher entries")
    for x, y in zip(a, b):
        if tuple(x.shape) != tuple(np.shape(y)):
            raise ValueError(f"{what}: shape mismatch {x.shape} vs {np.shape(y)}")


def loss_int(k_s_int: list, k_t_int: list, axis: str = "row") -> Tensor:
    """Mean KL divergence between softmaxed student and teacher next-stage estimates."""
    k_s_int = [as_tensor(k) for k in k_s_int]
    _check_pairs(k_s_int, k_t_int, "loss_int")
    total = None
    for ks, kt in zip(k_s_int, k_t_int):
        term = kld_rows(relation_softmax(ks, axis), relation_softmax(constant(np.asarray(kt).copy()), axis))
        total = term if total is None else total + term
    return total * (1.0 / len(k_s_int))


def loss_alt(k_s_alt: list, k_t_alt: list) -> Tensor:
    """Per message tensor ``sum |S - T| / (N^2 E)``, averaged over tensors."""
    k_s_alt = [as_tensor(k) for k in k_s_alt]
    _check_pairs(k_s_alt, k_t_alt, "loss_alt")
    total = None
    for ks, kt in zip(k_s_alt, k_t_alt):
        n, _, e = ks.shape
        term = tabs(ks - constant(np.asarray(kt))).sum() * (1.0 / (n * n * e))
        total = term if total is None else total + term
    return total * (1.0 / len(k_s_alt))


@dataclass(frozen=True)
class ClipPolicy:
    mode: str = "norm_cap_min"
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.mode not in CLIP_MODES:
            raise ValueError(f"clip mode must be one of {CLIP_MODES}, got {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("clip epsilon must be positive")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_factor(target_norm: float, z_norm: float, policy: ClipPolicy) -> float:
    if policy.mode == "norm_cap_min":
        return min(1.0, target_norm / (z_norm + policy.epsilon))
    if z_norm == 0.0:
        return 0.0
    return max(1.0, target_norm / z_norm)


def clip_combine(g_target: dict, g_int: dict, g_alt: dict, policy: ClipPolicy = ClipPolicy()):
    """``g_target + clip(g_int) + clip(g_alt)`` with global-norm clipping.

    Returns the combined gradient set and a dict of pre/post-clip norms.
    """
    keys = list(dict.fromkeys([*g_target, *g_int, *g_alt]))

    def filled(gs):
        return {k: gs[k] if k in gs else None for k in keys}

    t_norm = global_norm(g_target)
    norms = {"target_norm": t_norm}
    total = {k: (g_target[k].copy() if k in g_target else None) for k in keys}
    for label, gs in (("int", g_int), ("alt", g_alt)):
        z_norm = global_norm(gs)
        factor = clip_factor(t_norm, z_norm, policy)
        norms[f"{label}_norm_pre"] = z_norm
        norms[f"{label}_norm_post"] = factor * z_norm
        for k, g in filled(gs).items():
            if g is None:
                continue
            scaled = factor * g
            total[k] = scaled if total[k] is None else total[k] + scaled
    return {k: v for k, v in total.items() if v is not None}, norms


@dataclass
class LossReport:
    step: int
    l_target: float
    l_int: float
    l_alt: float
    norms: dict = field(default_factory=dict)

    def record(self) -> dict:
        out = asdict(self)
        out.update(out.pop("norms"))
        return out

    def check_clip_contract(self, policy: ClipPolicy, tol: float = 1e-9) -> bool:
        if policy.mode != "norm_cap_min" or not self.norms:
            return True
        t = self.norms["target_norm"]
        return all(self.norms[f"{k}_norm_post"] <= t + tol for k in ("int", "alt"))


def student_knowledge(maps: list[Tensor], adapters: DepthAdapters, frame: FrozenTeacherFrame,
                      literal: bool = False, left_vectors: list | None = None):
    """Student K^int / K^alt tensors through the frozen teacher frame.

    Returns ``(k_int, k_alt, left_vectors)``; the left singular vectors can be
    passed back in to re-evaluate the same stop-gradient function.
    """
    cs, used = [], []
    for l, (fmap, state) in enumerate(zip(maps, frame.states)):
        adapted = adapters(l, fmap)
        n, d = adapted.shape[0], adapted.shape[-1]
        if d != state.dim:
            raise ValueError(f"sensing point {l}: adapted depth {d} != teacher depth {state.dim}")
        p, u = student_pc(reshape(adapted, (n, -1, d)), None if left_vectors is None else left_vectors[l])
        used.append(u)
        cs.append(student_compress(p, state, literal))
    forwards = [mpnn_forward(cs[l], cs[l + 1], frame.mpnn[l], training=False) for l in range(len(cs) - 1)]
    k_int = [f.a_tilde for f in forwards]
    k_alt = [m for f in forwards for m in f.messages]
    return k_int, k_alt, used


def student_step(step: int, images: np.ndarray, labels: np.ndarray, student: ConvNet,
                 optimizer: SGD, lr: float, *, teacher: ConvNet | None = None,
                 adapters: DepthAdapters | None = None, frame: FrozenTeacherFrame | None = None,
                 policy: ClipPolicy = ClipPolicy(), enable_int: bool = True, enable_alt: bool = True,
                 softmax_axis: str = "row", literal: bool = False) -> LossReport:
    """One optimizer step on the target loss plus the enabled knowledge losses.

    Each loss is differentiated separately; the knowledge gradients are
    clipped against the target gradient norm before the update.  With both
    knowledge losses disabled this is plain cross-entropy training.
    """
    use_knowledge = enable_int or enable_alt
    if use_knowledge and (teacher is None or adapters is None or frame is None):
        raise ValueError("knowledge transfer needs a teacher, adapters and a frozen frame")
    if use_knowledge:
        with no_grad():
            t_maps = [m.data for m in forward_sensed(teacher, images, training=False).feature_maps]
            bundle_t, _ = teacher_knowledge(frame, t_maps)

    fwd = forward_sensed(student, images, training=True)
    l_target = cross_entropy(fwd.logits, labels)
    params = dict(student.params)
    if use_knowledge:
        params.update(adapters.params)
    names = list(params)

    def grads_of(loss):
        return dict(zip(names, grad(loss, params.values())))

    g_target = grads_of(l_target)
    g_int, g_alt = {}, {}
    l_int_v = l_alt_v = 0.0
    if use_knowledge:
        k_int, k_alt, _ = student_knowledge(fwd.feature_maps, adapters, frame, literal)
        if enable_int:
            l_int = loss_int(k_int, bundle_t.k_int, softmax_axis)
            g_int, l_int_v = grads_of(l_int), l_int.item()
        if enable_alt:
            l_alt = loss_alt(k_alt, bundle_t.k_alt)
            g_alt, l_alt_v = grads_of(l_alt), l_alt.item()
    total, norms = clip_combine(g_target, g_int, g_alt, policy)
    report = LossReport(step, l_target.item(), l_int_v, l_alt_v, norms)
    for name, value in (("l_target", report.l_target), ("l_int", report.l_int), ("l_alt", report.l_alt)):
        if not math.isfinite(value):
            raise NumericalError(f"{name} is not finite at step {step}")
    optimizer.step(params, total, lr)
    return report
