"""Export of affinity matrices, K^alt summaries and 3-D embedding coordinates."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetHandle, to_float
from .harness import load_frame
from .mpnn import mpnn_forward
from .nets import forward_sensed
from .spca import run_spca
from .tensor import no_grad


class UnwritableDirectoryError(OSError):
    pass


@dataclass
class VizRecord:
    layer_index: int
    A: np.ndarray
    k_alt: np.ndarray | None  # absent at the last sensing point
    c_vis: np.ndarray


def c_vis(c: np.ndarray, literal: bool = False) -> np.ndarray:
    """Top-3 compressed coordinates, normalized per row for display.

    The default divides by the root of the summed squares (unit rows).
    ``literal`` divides by the root of the plain sum where that sum is
    positive and falls back to the squared form elsewhere.
    """
    top = np.asarray(c, dtype=np.float64)[:, :3]
    squared = np.sqrt((top ** 2).sum(axis=1, keepdims=True))
    denom = squared
    if literal:
        plain = top.sum(axis=1, keepdims=True)
        denom = np.where(plain > 0, np.sqrt(np.maximum(plain, 0.0)), squared)
    return top / np.where(denom > 0, denom, 1.0)


def k_alt_summary(messages: list[np.ndarray]) -> np.ndarray:
    """Mean over message rounds and edge components, one scalar per ordered pair."""
    return np.mean([m.mean(axis=-1) for m in messages], axis=0)


def class_separation(a: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean within-class and cross-class affinity, excluding the diagonal."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within, cross = same & off, ~same
    if not within.any() or not cross.any():
        raise ValueError("need at least two classes with two or more samples each")
    return float(a[within].mean()), float(a[cross].mean())


def balanced_subset(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    """First ``n`` indices taken round-robin over classes, grouped by class."""
    per = [np.flatnonzero(labels == k) for k in range(num_classes)]
    picked, i = [], 0
    while len(picked) < n:
        if all(i >= len(p) for p in per):
            break
        picked.extend(p[i] for p in per if i < len(p) and len(picked) < n)
        i += 1
    picked = np.array(picked)
    return picked[np.argsort(labels[picked], kind="stable")]


def viz_records(frame_ckpt, images: np.ndarray, cvis_literal: bool = False) -> list[VizRecord]:
    tf = load_frame(frame_ckpt)
    with no_grad():
        maps = [m.data for m in forward_sensed(tf.teacher, to_float(images), training=False).feature_maps]
        outs = [run_spca(m, s, training=False) for m, s in zip(maps, tf.frame.states)]
        forwards = [mpnn_forward(outs[l].C, outs[l + 1].C, tf.frame.mpnn[l], training=False)
                    for l in range(len(outs) - 1)]
    records = []
    for l, out in enumerate(outs):
        k_alt = k_alt_summary([m.data for m in forwards[l].messages]) if l < len(forwards) else None
        records.append(VizRecord(l, out.A, k_alt, c_vis(out.C, cvis_literal)))
    return records


def write_matrix(path: Path, values: np.ndarray, layer: int) -> None:
    lines = [f"# n={values.shape[0]},layer={layer}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in values]
    path.write_text("\n".join(lines) + "\n")


def read_matrix(path: str | Path) -> tuple[dict, np.ndarray]:
    text = Path(path).read_text().splitlines()
    header = dict(item.split("=") for item in text[0].lstrip("# ").split(","))
    rows = [[float(v) for v in line.split(",")] for line in text[1:] if line]
    return {k: int(v) for k, v in header.items()}, np.array(rows)


def export_viz(frame_ckpt, data: DatasetHandle, out_dir: str | Path, n: int = 8,
               cvis_literal: bool = False) -> list[Path]:
    """Write ``affinity_l*.csv``, ``kalt_l*.csv`` and ``cvis_l*.csv`` for ``n`` test images."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritableDirectoryError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise UnwritableDirectoryError(f"{out_dir} is not writable")
    idx = balanced_subset(data.test_y, n, data.num_classes)
    written = []
    for rec in viz_records(frame_ckpt, data.test_x[idx], cvis_literal):
        outputs = [("affinity", rec.A), ("kalt", rec.k_alt), ("cvis", rec.c_vis)]
        for stem, values in outputs:
            if values is None:
                continue
            path = out_dir / f"{stem}_l{rec.layer_index}.csv"
            write_matrix(path, values, rec.layer_index)
            written.append(path)
    labels_path = out_dir / "labels.csv"
    labels_path.write_text("\n".join(str(int(v)) for v in data.test_y[idx]) + "\n")
    written.append(labels_path)
    return written
