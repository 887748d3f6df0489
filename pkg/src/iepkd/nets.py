"""Toy pre-activation residual CNNs with one sensing point per stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mpnn import fan_uniform
from .tensor import (Tensor, batch_norm_eval, batch_norm_train, conv2d, log_softmax, mean,
                     parameter, relu)

BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ConvNetSpec:
    widths: tuple[int, ...]
    blocks: int
    strides: tuple[int, ...] | None = None
    num_classes: int = 4
    in_channels: int = 3
    input_size: int = 16

    def __post_init__(self):
        if any(w % 2 for w in self.widths):
            raise ValueError(f"stage widths must be even, got {self.widths}")
        if self.blocks < 1:
            raise ValueError("need at least one block per stage")
        if self.strides is None:
            object.__setattr__(self, "strides", (1,) + (2,) * (len(self.widths) - 1))
        if len(self.strides) != len(self.widths):
            raise ValueError("one stride per stage")

    @property
    def sensing_points(self) -> int:
        return len(self.widths)

    def spatial(self, stage: int) -> int:
        size = self.input_size
        for s in self.strides[: stage + 1]:
            size = (size - 1) // s + 1
        return size


TEACHER_SPEC = ConvNetSpec(widths=(16, 32, 64), blocks=2)
STUDENT_SPEC = ConvNetSpec(widths=(8, 16, 32), blocks=1)


def _conv_init(rng, kh, kw, cin, cout):
    return fan_uniform(rng, kh * kw * cin, kh * kw * cout, (kh, kw, cin, cout))


class ConvNet:
    def __init__(self, spec: ConvNetSpec, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, spec: ConvNetSpec, rng: np.random.Generator) -> ConvNet:
        params: dict[str, Tensor] = {}
        buffers: dict[str, np.ndarray] = {}

        def bn(name, width):
            params[f"{name}.gamma"] = parameter(np.ones(width))
            params[f"{name}.beta"] = parameter(np.zeros(width))
            buffers[f"{name}.mean"] = np.zeros(width)
            buffers[f"{name}.var"] = np.ones(width)

        params["stem.w"] = parameter(_conv_init(rng, 3, 3, spec.in_channels, spec.widths[0]))
        cin = spec.widths[0]
        for si, width in enumerate(spec.widths):
            for bi in range(spec.blocks):
                pre = f"s{si}.b{bi}"
                if not (bi == 0 and si > 0):
                    bn(f"{pre}.bn1", cin)
                params[f"{pre}.conv1.w"] = parameter(_conv_init(rng, 3, 3, cin, width))
                bn(f"{pre}.bn2", width)
                params[f"{pre}.conv2.w"] = parameter(_conv_init(rng, 3, 3, width, width))
                stride = spec.strides[si] if bi == 0 else 1
                if cin != width or stride != 1:
                    params[f"{pre}.short.w"] = parameter(_conv_init(rng, 1, 1, cin, width))
                cin = width
            bn(f"s{si}.end", width)
        params["fc.w"] = parameter(fan_uniform(rng, cin, spec.num_classes))
        params["fc.b"] = parameter(np.zeros(spec.num_classes))
        return cls(spec, params, buffers)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> ConvNet:
        params = {k: parameter(v.data.copy()) for k, v in self.params.items()}
        return ConvNet(self.spec, params, {k: v.copy() for k, v in self.buffers.items()})


def _bn(net: ConvNet, name: str, x: Tensor, training: bool) -> Tensor:
    gamma, beta = net.params[f"{name}.gamma"], net.params[f"{name}.beta"]
    if training:
        out, mu, var = batch_norm_train(x, gamma, beta)
        net.buffers[f"{name}.mean"] = BN_MOMENTUM * net.buffers[f"{name}.mean"] + (1 - BN_MOMENTUM) * mu
        net.buffers[f"{name}.var"] = BN_MOMENTUM * net.buffers[f"{name}.var"] + (1 - BN_MOMENTUM) * var
        return out
    return batch_norm_eval(x, gamma, beta, net.buffers[f"{name}.mean"], net.buffers[f"{name}.var"])


@dataclass
class SensedForward:
    logits: Tensor
    feature_maps: list[Tensor] = field(repr=False)


def forward_sensed(net: ConvNet, images: np.ndarray, training: bool) -> SensedForward:
    """Logits plus the post-activation output of every stage, ``(N, H, W, D_l)`` each."""
    spec = net.spec
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (spec.input_size, spec.input_size, spec.in_channels):
        raise ValueError(f"expected (N, {spec.input_size}, {spec.input_size}, {spec.in_channels}) images, "
                         f"got {images.shape}")
    p = net.params
    x = conv2d(Tensor(images), p["stem.w"], padding=1)
    sensed = []
    for si in range(len(spec.widths)):
        for bi in range(spec.blocks):
            pre = f"s{si}.b{bi}"
            stride = spec.strides[si] if bi == 0 else 1
            a = x if (bi == 0 and si > 0) else relu(_bn(net, f"{pre}.bn1", x, training))
            y = conv2d(a, p[f"{pre}.conv1.w"], stride=stride, padding=1)
            y = conv2d(relu(_bn(net, f"{pre}.bn2", y, training)), p[f"{pre}.conv2.w"], padding=1)
            short = p.get(f"{pre}.short.w")
            x = y + (conv2d(a, short, stride=stride) if short is not None else x)
        x = relu(_bn(net, f"s{si}.end", x, training))
        sensed.append(x)
    pooled = mean(x, axis=(1, 2))
    logits = pooled @ p["fc.w"] + p["fc.b"]
    return SensedForward(logits, sensed)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per logit row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    picked = log_softmax(logits, axis=-1)[np.arange(labels.size), labels]
    return -mean(picked)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


class DepthAdapters:
    """Learned 1x1 convolutions mapping student sensing depths to the teacher's."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def init(cls, student_widths, teacher_widths, rng: np.random.Generator) -> DepthAdapters:
        params = {}
        for l, (ds, dt) in enumerate(zip(student_widths, teacher_widths)):
            if dt % 2:
                raise ValueError(f"adapter target depth must be even, got {dt}")
            w = np.eye(ds)[None, None] if ds == dt else _conv_init(rng, 1, 1, ds, dt)
            params[f"adapt{l}.w"] = parameter(w)
        return cls(params)

    def __call__(self, l: int, fmap: Tensor) -> Tensor:
        return conv2d(fmap, self.params[f"adapt{l}.w"])


def depth_adapter(student_map: Tensor, weight: Tensor) -> Tensor:
    return conv2d(student_map, weight)


def predict(net: ConvNet, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode logits in chunks, without building a graph."""
    from .tensor import no_grad

    out = []
    with no_grad():
        for i in range(0, images.shape[0], chunk):
            out.append(forward_sensed(net, images[i:i + chunk], training=False).logits.data)
    return np.concatenate(out)
