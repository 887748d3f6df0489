"""Flat ``key = value`` training configuration with schema validation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import get_type_hints

PHASES = ("teacher", "mpnn", "student")
DECAY = {"times_0.8": 0.8, "times_0.2": 0.2}


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "teacher"
    seed: int = 0
    work_dir: str = "runs/default"
    # data
    dataset: str = "synthetic"
    n_samples: int = 2000
    num_classes: int = 4
    data_seed: int = 0
    sample_rate: float = 1.0
    teacher_sample_rate: float = 1.0
    train_files: str = ""
    test_files: str = ""
    label_bytes: int = 1
    random_crop: bool = True
    horizontal_flip: bool = True
    # optimization
    batch_size: int = 128
    lr: float = 0.1
    mpnn_lr: float = 0.1
    lr_decay_points: tuple[float, ...] = (0.3, 0.6, 0.8)
    decay_interpretation: str = "times_0.8"
    weight_decay: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True
    iterations: int = 0
    eval_every: int = 200
    checkpoint_every: int = 0
    # architecture
    teacher_widths: tuple[int, ...] = (16, 32, 64)
    teacher_blocks: int = 2
    student_widths: tuple[int, ...] = (8, 16, 32)
    student_blocks: int = 1
    input_size: int = 16
    # knowledge
    message_iterations: int = 2
    ema_new_weight: float = 0.9
    clip_mode: str = "norm_cap_min"
    softmax_axis: str = "row"
    enable_k_int: bool = True
    enable_k_alt: bool = True
    student_compress_literal: bool = False
    # export / evaluation
    viz_samples: int = 8
    cvis_literal: bool = False
    eval_network: str = "student"

    @property
    def total_iterations(self) -> int:
        if self.iterations > 0:
            return self.iterations
        return 8000 if self.phase == "mpnn" else 6000

    @property
    def decay_factor(self) -> float:
        return DECAY[self.decay_interpretation]

    def lr_at(self, step: int) -> float:
        from .optim import step_lr

        if self.phase == "mpnn":
            return self.mpnn_lr
        return step_lr(step, self.total_iterations, self.lr, self.lr_decay_points, self.decay_factor)

    def phase_sample_rate(self) -> float:
        return self.sample_rate if self.phase == "student" else self.teacher_sample_rate

    def with_(self, **changes) -> TrainConfig:
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        checks = [
            (self.phase in PHASES, f"phase must be one of {PHASES}"),
            (self.dataset in ("synthetic", "tiny-image"), "dataset must be synthetic or tiny-image"),
            (self.n_samples >= 2 * self.num_classes, "n_samples too small for num_classes"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (0.0 < self.sample_rate <= 1.0, "sample_rate must lie in (0, 1]"),
            (0.0 < self.teacher_sample_rate <= 1.0, "teacher_sample_rate must lie in (0, 1]"),
            (self.label_bytes in (1, 2), "label_bytes must be 1 or 2"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.lr > 0 and self.mpnn_lr > 0, "learning rates must be positive"),
            (all(0 < p < 1 for p in self.lr_decay_points), "lr_decay_points must be fractions in (0, 1)"),
            (self.decay_interpretation in DECAY, f"decay_interpretation must be one of {tuple(DECAY)}"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.eval_every >= 0 and self.checkpoint_every >= 0, "eval/checkpoint intervals must be >= 0"),
            (all(w > 0 and w % 2 == 0 for w in self.teacher_widths), "teacher_widths must be positive and even"),
            (all(w > 0 and w % 2 == 0 for w in self.student_widths), "student_widths must be positive and even"),
            (len(self.teacher_widths) == len(self.student_widths) >= 2,
             "teacher and student need the same number (>= 2) of stages"),
            (self.teacher_blocks >= 1 and self.student_blocks >= 1, "blocks must be >= 1"),
            (self.input_size >= 4, "input_size must be >= 4"),
            (self.message_iterations >= 1, "message_iterations must be >= 1"),
            (0 < self.ema_new_weight <= 1, "ema_new_weight must lie in (0, 1]"),
            (self.clip_mode in ("norm_cap_min", "paper_literal_max"), "unknown clip_mode"),
            (self.softmax_axis in ("row", "column"), "softmax_axis must be row or column"),
            (self.viz_samples >= 2, "viz_samples must be >= 2"),
            (self.eval_network in ("teacher", "student"), "eval_network must be teacher or student"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_ALIASES = {"I": "message_iterations"}


def _coerce(name: str, raw: str, hint) -> object:
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint == tuple[int, ...]:
            return _ints(raw)
        if hint == tuple[float, ...]:
            return _floats(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def parse_pairs(pairs: list[tuple[str, str]], base: TrainConfig | None = None) -> TrainConfig:
    hints = get_type_hints(TrainConfig)
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for key, raw in pairs:
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, hints[key])
    cfg = replace(base or TrainConfig(), **values)
    cfg.validate()
    return cfg


def parse_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        pairs.append((key, raw))
    return parse_pairs(pairs, base)


def load_config(path: str | Path | None, overrides: list[str] = (), phase: str | None = None) -> TrainConfig:
    """Read a config file, apply ``key=value`` overrides, then force ``phase`` if given."""
    try:
        cfg = parse_text(Path(path).read_text()) if path else TrainConfig()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append(tuple(item.split("=", 1)))
    if phase is not None:
        pairs.append(("phase", phase))
    return parse_pairs(pairs, cfg)
