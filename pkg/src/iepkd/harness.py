"""Three-phase orchestration: teacher -> distillation network + IPCA -> student."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import TrainConfig, parse_text
from .data import BatchStream, DatasetHandle, gen_synthetic, load_binary_dataset, to_float
from .mpnn import MpnnParams, mpnn_forward, mpnn_loss
from .nets import ConvNet, ConvNetSpec, DepthAdapters, accuracy, forward_sensed, predict
from .optim import SGD
from .spca import IpcaState, run_spca
from .tensor import NumericalError, grad, no_grad, parameter
from .transfer import ClipPolicy, FrozenTeacherFrame, student_step

log = logging.getLogger(__name__)

FRAME_PREFIXES = ("net/teacher/", "buf/teacher/", "ipca/", "mpnn/")


class MissingCheckpointError(FileNotFoundError):
    pass


# data ----------------------------------------------------------------------

def build_data(cfg: TrainConfig) -> DatasetHandle:
    """Full (unsampled) dataset described by ``cfg``."""
    if cfg.dataset == "synthetic":
        data = gen_synthetic(cfg.n_samples, cfg.num_classes, cfg.data_seed)
    else:
        split = lambda s: [p.strip() for p in s.split(",") if p.strip()]  # noqa: E731
        data = load_binary_dataset(split(cfg.train_files), split(cfg.test_files), cfg.num_classes,
                                   cfg.label_bytes)
    data.random_crop = cfg.random_crop
    data.horizontal_flip = cfg.horizontal_flip
    return data


def phase_data(cfg: TrainConfig, data: DatasetHandle) -> DatasetHandle:
    rate = cfg.phase_sample_rate()
    return data if rate == 1.0 else data.sampled(rate, cfg.seed)


def teacher_spec(cfg: TrainConfig, num_classes: int) -> ConvNetSpec:
    return ConvNetSpec(cfg.teacher_widths, cfg.teacher_blocks, num_classes=num_classes,
                       input_size=cfg.input_size)


def student_spec(cfg: TrainConfig, num_classes: int) -> ConvNetSpec:
    return ConvNetSpec(cfg.student_widths, cfg.student_blocks, num_classes=num_classes,
                       input_size=cfg.input_size)


def _rng(cfg: TrainConfig, stream: int) -> np.random.Generator:
    # independent streams: 1 = weights, 2 = adapters, 3 = batches/augmentation
    return np.random.default_rng([cfg.seed, stream])


# section (de)serialization ---------------------------------------------------

def net_sections(prefix: str, net: ConvNet) -> dict:
    out = {f"net/{prefix}/{k}": v.data for k, v in net.params.items()}
    out.update({f"buf/{prefix}/{k}": v for k, v in net.buffers.items()})
    return out


def net_from_sections(sections: dict, prefix: str, spec: ConvNetSpec) -> ConvNet:
    net = ConvNet.init(spec, np.random.default_rng(0))
    for k in net.params:
        net.params[k] = parameter(sections[f"net/{prefix}/{k}"])
    for k in net.buffers:
        net.buffers[k] = np.array(sections[f"buf/{prefix}/{k}"])
    return net


def ipca_sections(states: list[IpcaState]) -> dict:
    out = {}
    for s in states:
        pre = f"ipca/{s.layer_index}/"
        out[pre + "header"] = np.array([s.layer_index, s.dim, s.updates_seen, s.rank], dtype=np.int64)
        out[pre + "V"] = s.V
        out[pre + "S"] = s.S
        out[pre + "mu"] = s.mu
        out[pre + "ema_new_weight"] = np.array([s.ema_new_weight])
    return out


def ipca_from_sections(sections: dict) -> list[IpcaState]:
    states = []
    l = 0
    while f"ipca/{l}/header" in sections:
        pre = f"ipca/{l}/"
        layer, dim, seen, rank = (int(v) for v in sections[pre + "header"])
        states.append(IpcaState(layer, dim, sections[pre + "V"], sections[pre + "S"], sections[pre + "mu"],
                                seen, rank, float(sections[pre + "ema_new_weight"][0])))
        l += 1
    return states


def mpnn_sections(params: list[MpnnParams]) -> dict:
    return {f"mpnn/{l}/{k}": v for l, p in enumerate(params) for k, v in p.arrays().items()}


def mpnn_from_sections(sections: dict) -> list[MpnnParams]:
    out = []
    l = 0
    while f"mpnn/{l}/lm_weight" in sections:
        pre = f"mpnn/{l}/"
        out.append(MpnnParams.from_arrays({k[len(pre):]: v for k, v in sections.items() if k.startswith(pre)}))
        l += 1
    return out


def _meta(cfg: TrainConfig, kind: str, step: int) -> dict:
    return {"meta/kind": kind, "meta/config": cfg.to_text(), "meta/config_hash": cfg.hash(),
            "meta/step": np.array([step], dtype=np.int64)}


def _rng_state(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode()


def _restore_rng(rng: np.random.Generator, blob: bytes) -> None:
    rng.bit_generator.state = json.loads(blob.decode())


def read_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    sections = checkpoint.load(path)
    if kind is not None and sections["meta/kind"].decode() != kind:
        raise checkpoint.CheckpointError(f"{path} holds a {sections['meta/kind'].decode()} checkpoint, "
                                         f"expected {kind}")
    return sections


def checkpoint_config(sections: dict) -> TrainConfig:
    return parse_text(sections["meta/config"].decode())


@dataclass
class TeacherFrame:
    teacher: ConvNet
    frame: FrozenTeacherFrame
    config: TrainConfig


def load_frame(path: str | Path) -> TeacherFrame:
    """Load a frame checkpoint and verify its digest."""
    sections = read_checkpoint(path, "frame")
    stored = sections["meta/frame_digest"].decode()
    actual = checkpoint.digest(sections, FRAME_PREFIXES)
    if stored != actual:
        raise checkpoint.CheckpointError(f"{path}: frame digest mismatch, the teacher frame was modified")
    cfg = checkpoint_config(sections)
    teacher = net_from_sections(sections, "teacher", teacher_spec(cfg, cfg.num_classes))
    frame = FrozenTeacherFrame(ipca_from_sections(sections), mpnn_from_sections(sections), digest=stored)
    return TeacherFrame(teacher, frame, cfg)


class MetricsLog:
    """Newline-delimited JSON records, one per step or evaluation."""

    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        if not append:
            path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def test_accuracy(net: ConvNet, data: DatasetHandle) -> float:
    return accuracy(predict(net, to_float(data.test_x)), data.test_y)


# network phases ---------------------------------------------------------------

def _train_network(cfg: TrainConfig, data: DatasetHandle, kind: str, net: ConvNet, *, resume: str | Path | None,
                   teacher: ConvNet | None = None, adapters: DepthAdapters | None = None,
                   frame: FrozenTeacherFrame | None = None, extra_sections: dict | None = None) -> Path:
    work = Path(cfg.work_dir)
    train = phase_data(cfg, data)
    rng = _rng(cfg, 3)
    stream = BatchStream(train, cfg.batch_size, rng, augmentation=cfg.random_crop or cfg.horizontal_flip)
    opt = SGD(cfg.momentum, cfg.weight_decay, cfg.nesterov)
    policy = ClipPolicy(cfg.clip_mode)
    knowledge = kind == "student" and (cfg.enable_k_int or cfg.enable_k_alt)
    start, best = 0, -1.0
    if resume is not None:
        sections = read_checkpoint(resume, kind)
        if sections["meta/config_hash"].decode() != cfg.hash():
            raise checkpoint.CheckpointError(f"{resume}: config hash differs from the current config, refusing to resume")
        restored = net_from_sections(sections, kind, net.spec)
        net.params, net.buffers = restored.params, restored.buffers
        if adapters is not None:
            for k in adapters.params:
                adapters.params[k] = parameter(sections[f"net/adapters/{k}"])
        opt.buffers = {k[4:]: v.copy() for k, v in sections.items() if k.startswith("opt/")}
        _restore_rng(rng, sections["rng"])
        stream.restore(json.loads(sections["stream"].decode()))
        start = int(sections["meta/step"][0])
        best = float(sections["meta/best_acc"][0])
    metrics = MetricsLog(work / f"{kind}_metrics.jsonl", append=resume is not None)
    total = cfg.total_iterations

    def sections_at(step: int) -> dict:
        out = _meta(cfg, kind, step)
        out["meta/best_acc"] = np.array([best])
        out.update(net_sections(kind, net))
        if adapters is not None and knowledge:
            out.update({f"net/adapters/{k}": v.data for k, v in adapters.params.items()})
        out.update({f"opt/{k}": v for k, v in opt.buffers.items()})
        out["rng"] = _rng_state(rng)
        out["stream"] = json.dumps(stream.state()).encode()
        out.update(extra_sections or {})
        return out

    for step in range(start, total):
        x, y = stream.next()
        report = student_step(step, x, y, net, opt, cfg.lr_at(step), teacher=teacher, adapters=adapters,
                              frame=frame, policy=policy, enable_int=knowledge and cfg.enable_k_int,
                              enable_alt=knowledge and cfg.enable_k_alt, softmax_axis=cfg.softmax_axis,
                              literal=cfg.student_compress_literal)
        if not (np.isfinite([report.l_target, report.l_int, report.l_alt]).all()
                and all(np.isfinite(p.data).all() for p in net.params.values())):
            raise NumericalError(f"{kind} training diverged at step {step}")
        if knowledge and not report.check_clip_contract(policy):
            raise NumericalError(f"clip contract violated at step {step}: {report.norms}")
        metrics.write({"phase": kind, **report.record()})
        done = step + 1
        if (cfg.eval_every and done % cfg.eval_every == 0) or done == total:
            acc = test_accuracy(net, data)
            metrics.write({"phase": kind, "step": step, "test_accuracy": acc})
            log.info("%s step %d/%d loss %.4f test acc %.4f", kind, done, total, report.l_target, acc)
            if acc > best:
                best = acc
                checkpoint.save(work / f"{kind}_best.iepk", sections_at(done))
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total:
            checkpoint.save(work / f"{kind}_step{done:06d}.iepk", sections_at(done))
    return checkpoint.save(work / f"{kind}.iepk", sections_at(total))


def train_teacher(cfg: TrainConfig, data: DatasetHandle, resume: str | Path | None = None) -> Path:
    """Target-task training of the teacher; writes ``teacher.iepk`` and ``teacher_best.iepk``."""
    cfg = cfg.with_(phase="teacher")
    net = ConvNet.init(teacher_spec(cfg, data.num_classes), _rng(cfg, 1))
    return _train_network(cfg, data, "teacher", net, resume=resume)


def train_student(cfg: TrainConfig, data: DatasetHandle, frame_ckpt: str | Path | None = None,
                  resume: str | Path | None = None) -> Path:
    """Student training with the enabled knowledge losses; writes ``student.iepk``."""
    cfg = cfg.with_(phase="student")
    s_spec = student_spec(cfg, data.num_classes)
    net = ConvNet.init(s_spec, _rng(cfg, 1))
    knowledge = cfg.enable_k_int or cfg.enable_k_alt
    if not knowledge:
        return _train_network(cfg, data, "student", net, resume=resume)
    if frame_ckpt is None:
        raise MissingCheckpointError("knowledge transfer needs a frame checkpoint")
    tf = load_frame(frame_ckpt)
    t_spec = tf.teacher.spec
    if net.parameter_count() >= tf.teacher.parameter_count():
        raise ValueError("student must have fewer parameters than the teacher")
    if t_spec.input_size != s_spec.input_size or len(t_spec.widths) != len(s_spec.widths):
        raise ValueError("student and teacher disagree on input size or sensing points")
    adapters = DepthAdapters.init(s_spec.widths, t_spec.widths, _rng(cfg, 2))
    extra = {"meta/frame_digest": tf.frame.digest}
    return _train_network(cfg, data, "student", net, resume=resume, teacher=tf.teacher, adapters=adapters,
                          frame=tf.frame, extra_sections=extra)


# distillation-network phase ----------------------------------------------------

def train_mpnn(cfg: TrainConfig, data: DatasetHandle, teacher_ckpt: str | Path) -> Path:
    """Fit IPCA states and the distillation networks on the frozen teacher; writes ``frame.iepk``."""
    cfg = cfg.with_(phase="mpnn")
    t_sections = read_checkpoint(teacher_ckpt, "teacher")
    t_cfg = checkpoint_config(t_sections)
    teacher = net_from_sections(t_sections, "teacher", teacher_spec(t_cfg, data.num_classes))
    depths = list(teacher.spec.widths)
    states = [IpcaState.empty(d, l, cfg.ema_new_weight) for l, d in enumerate(depths)]
    init_rng = _rng(cfg, 1)
    params = [MpnnParams.init(depths[l] // 2, depths[l + 1] // 2, init_rng, cfg.message_iterations)
              for l in range(len(depths) - 1)]
    flat = {f"mpnn{l}.{k}": v for l, p in enumerate(params) for k, v in p.trainable().items()}
    rng = _rng(cfg, 3)
    stream = BatchStream(phase_data(cfg, data), cfg.batch_size, rng,
                         augmentation=cfg.random_crop or cfg.horizontal_flip)
    opt = SGD(cfg.momentum, cfg.weight_decay, cfg.nesterov)
    metrics = MetricsLog(Path(cfg.work_dir) / "mpnn_metrics.jsonl")
    total = cfg.total_iterations
    for step in range(total):
        x, _ = stream.next()
        with no_grad():
            maps = [m.data for m in forward_sensed(teacher, x, training=False).feature_maps]
        outs = []
        for l, fmap in enumerate(maps):
            out = run_spca(fmap, states[l], training=True)
            states[l] = out.state
            outs.append(out)
        loss = None
        for l, p in enumerate(params):
            fwd = mpnn_forward(outs[l].C, outs[l + 1].C, p, training=True)
            term = mpnn_loss(outs[l + 1].A, fwd.a_tilde, cfg.softmax_axis)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(params))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"distillation loss diverged at step {step}")
        grads = dict(zip(flat, grad(loss, flat.values())))
        opt.step(flat, grads, cfg.lr_at(step))
        metrics.write({"phase": "mpnn", "step": step, "l_mpnn": value})
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            log.info("mpnn step %d/%d loss %.5f", step + 1, total, value)
    sections = _meta(cfg, "frame", total)
    sections.update({k: v for k, v in t_sections.items() if k.startswith(("net/teacher/", "buf/teacher/"))})
    sections.update(ipca_sections(states))
    sections.update(mpnn_sections(params))
    sections["meta/teacher_config"] = t_sections["meta/config"]
    sections["meta/frame_digest"] = checkpoint.digest(sections, FRAME_PREFIXES)
    return checkpoint.save(Path(cfg.work_dir) / "frame.iepk", sections)


# evaluation -------------------------------------------------------------------

def load_network(path: str | Path) -> ConvNet:
    sections = read_checkpoint(path)
    kind = sections["meta/kind"].decode()
    cfg = checkpoint_config(sections)
    if kind == "frame":
        t_cfg = parse_text(sections["meta/teacher_config"].decode())
        return net_from_sections(sections, "teacher", teacher_spec(t_cfg, cfg.num_classes))
    spec = teacher_spec(cfg, cfg.num_classes) if kind == "teacher" else student_spec(cfg, cfg.num_classes)
    return net_from_sections(sections, kind, spec)


def evaluate(ckpt: str | Path | ConvNet, data: DatasetHandle) -> float:
    """Top-1 test accuracy of the network stored in ``ckpt``."""
    net = ckpt if isinstance(ckpt, ConvNet) else load_network(ckpt)
    return test_accuracy(net, data)
