"""Teacher, distillation networks and a distilled student on a tiny synthetic set.

Run:  python demos/tiny_pipeline.py [work_dir]

Takes about a minute on one CPU. The networks are far too small and briefly
trained to say anything about accuracy; the point is to see each phase, its
checkpoint and the exported visualization files.
"""

import sys
import tempfile
from pathlib import Path

from iepkd import TrainConfig, build_data, evaluate, train_mpnn, train_student, train_teacher
from iepkd.viz import class_separation, export_viz, read_matrix


def main():
    work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="iepkd-demo-"))
    cfg = TrainConfig(work_dir=str(work), n_samples=400, teacher_widths=(8, 16, 32), student_widths=(4, 8, 16),
                      teacher_blocks=1, batch_size=32, iterations=120, eval_every=40, mpnn_lr=0.02)
    data = build_data(cfg)

    teacher = train_teacher(cfg, data)
    print(f"teacher  -> {teacher}  test accuracy {evaluate(teacher, data):.3f}")

    frame = train_mpnn(cfg, data, teacher)
    print(f"frame    -> {frame}")

    plain = train_student(cfg.with_(work_dir=str(work / "plain"), enable_k_int=False, enable_k_alt=False), data)
    print(f"plain    -> test accuracy {evaluate(plain, data):.3f}")
    distilled = train_student(cfg.with_(work_dir=str(work / "iep")), data, frame)
    print(f"iep      -> test accuracy {evaluate(distilled, data):.3f}")

    files = export_viz(frame, data, work / "viz", n=16)
    print(f"viz      -> {len(files)} files in {work / 'viz'}")
    labels = [int(v) for v in (work / "viz" / "labels.csv").read_text().split()]
    _, a = read_matrix(work / "viz" / "affinity_l2.csv")
    within, cross = class_separation(a, labels)
    print(f"last-stage affinity: within-class {within:.3f}, cross-class {cross:.3f}")


if __name__ == "__main__":
    main()
