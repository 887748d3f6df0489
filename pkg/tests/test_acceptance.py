"""Acceptance criteria 1 to 10, each at its stated tolerance and runtime budget.

Every test records a one-line verdict before asserting; the lines are printed
in the terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest
from conftest import TINY_STUDENT, record_criterion, tiny_images
from scipy.linalg import subspace_angles

from iepkd import checkpoint
from iepkd.config import TrainConfig
from iepkd.harness import build_data, evaluate, train_mpnn, train_student, train_teacher
from iepkd.mpnn import MpnnParams, glu, linear_map, mpnn_forward, mpnn_loss
from iepkd.nets import ConvNet, DepthAdapters, depth_adapter, forward_sensed
from iepkd.optim import SGD
from iepkd.spca import IpcaState, affinity, center_vector, ipca_update, stereographic
from iepkd.tensor import batch_norm_train, check_gradient, conv2d, grad, parameter
from iepkd.transfer import (ClipPolicy, clip_combine, clip_factor, loss_alt, loss_int, student_knowledge,
                            teacher_knowledge)
from iepkd.viz import balanced_subset, class_separation, export_viz, read_matrix, viz_records


# criterion 1 ------------------------------------------------------------------

def plane_vectors(n, d, seed):
    """Rows orthogonal to the center vector; designed spectrum gap of 3x at d/2."""
    rng = np.random.default_rng(seed)
    o = center_vector(d)
    basis = np.linalg.qr(np.column_stack([o, rng.normal(size=(d, d - 1))]))[0][:, 1:]
    k = d // 2
    scales = np.concatenate([np.linspace(6.0, 3.0, k), np.linspace(1.0, 0.2, d - 1 - k)])
    return (rng.normal(size=(n, d - 1)) * scales) @ basis.T


def test_c1_ipca_matches_batch_pca():
    start = time.perf_counter()
    data = plane_vectors(256, 32, seed=0)
    _, s, vt = np.linalg.svd(data - data.mean(axis=0), full_matrices=False)
    gap = s[15] / s[16]
    state, rng = IpcaState.empty(32), np.random.default_rng(1)
    for _ in range(50):
        state = ipca_update(state, data[rng.choice(256, 64, replace=False)])
    worst = float(np.degrees(subspace_angles(state.V, vt[:16].T)).max())
    elapsed = time.perf_counter() - start
    ok = gap >= 2.0 and worst < 5.0 and elapsed < 10.0
    record_criterion(1, ok, f"spectral gap {gap:.2f}x, max principal angle {worst:.3f} deg, {elapsed:.2f} s")
    assert ok


# criterion 2 ------------------------------------------------------------------

def test_c2_stereographic_identities():
    start = time.perf_counter()
    d = 16
    o = center_vector(d)
    at_center = np.abs(stereographic(o, o)).max()
    rng = np.random.default_rng(2)
    q = rng.normal(size=(100, d))
    q -= np.outer(q @ o, o)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    doubled = np.abs(stereographic(q, o) - 2 * q).max()
    p = rng.normal(size=(10_000, d))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p = p[p @ o > -1 + 1e-6]
    off_plane = np.abs(stereographic(p, o) @ o).max()
    elapsed = time.perf_counter() - start
    ok = at_center <= 1e-12 and doubled <= 1e-12 and off_plane <= 1e-9 and elapsed < 1.0
    record_criterion(2, ok, f"|S(o)| {at_center:.1e}, |S(q)-2q| {doubled:.1e}, max |S(p).o| {off_plane:.1e}, "
                            f"{elapsed:.2f} s")
    assert ok


# criterion 3 ------------------------------------------------------------------

def _layer_errors():
    rng = np.random.default_rng(3)
    errors = {}
    p = MpnnParams.init(4, 5, rng)
    c = rng.normal(size=(6, 4))
    t = rng.normal(size=(6, 4))
    errors["linear map"] = check_gradient(lambda: (linear_map(c, p, True) * t).sum(),
                                          [p.lm_weight, p.lm_bias, p.bn_gamma, p.bn_beta], h=1e-4)
    x, w, b = parameter(rng.normal(size=(5, 6))), parameter(rng.normal(size=(6, 8))), parameter(rng.normal(size=8))
    errors["glu"] = check_gradient(lambda: (glu(x, w, b) ** 2).sum(), [x, w, b], h=1e-4)
    img, k = parameter(rng.normal(size=(2, 5, 5, 3))), parameter(rng.normal(size=(3, 3, 3, 4)))
    tc = rng.normal(size=(2, 3, 3, 4))
    errors["conv"] = check_gradient(lambda: (conv2d(img, k, stride=2, padding=1) * tc).sum(), [img, k], h=1e-4)
    z, g, beta = parameter(rng.normal(size=(8, 3))), parameter(rng.uniform(0.5, 2, 3)), parameter(rng.normal(size=3))
    tb = rng.normal(size=(8, 3))
    errors["batch norm"] = check_gradient(lambda: (batch_norm_train(z, g, beta)[0] * tb).sum(), [z, g, beta], h=1e-4)
    fmap, aw = parameter(rng.normal(size=(2, 3, 3, 4))), parameter(rng.normal(size=(1, 1, 4, 6)))
    ta = rng.normal(size=(2, 3, 3, 6))
    errors["adapter"] = check_gradient(lambda: (depth_adapter(fmap, aw) * ta).sum(), [fmap, aw], h=1e-4)
    return errors


def _composite_error(teacher, frame):
    x = tiny_images(6, seed=12)
    t_maps = [m.data for m in forward_sensed(teacher, x, training=False).feature_maps]
    bundle, _ = teacher_knowledge(frame, t_maps)
    student = ConvNet.init(TINY_STUDENT, np.random.default_rng(13))
    adapters = DepthAdapters.init(TINY_STUDENT.widths, teacher.spec.widths, np.random.default_rng(14))
    _, _, left = student_knowledge(forward_sensed(student, x, training=True).feature_maps, adapters, frame)

    def loss():
        maps = forward_sensed(student, x, training=True).feature_maps
        k_int, k_alt, _ = student_knowledge(maps, adapters, frame, left_vectors=left)
        return loss_int(k_int, bundle.k_int) + loss_alt(k_alt, bundle.k_alt)

    params = list(adapters.params.values()) + [student.params["s1.b0.conv2.w"], student.params["s1.end.gamma"]]
    return check_gradient(loss, params, h=1e-4, max_coords=8, seed=2)


def test_c3_gradient_suite(tiny_teacher, tiny_frame):
    start = time.perf_counter()
    errors = _layer_errors()
    composite = _composite_error(tiny_teacher, tiny_frame)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and composite < 1e-3 and elapsed < 60.0
    worst = max(errors, key=errors.get)
    record_criterion(3, ok, f"worst layer {worst} {errors[worst]:.1e}, composite {composite:.1e}, {elapsed:.1f} s")
    assert ok


# criterion 4 ------------------------------------------------------------------

def fit_mpnn_batch(steps=2000):
    """Train one distillation network on a fixed clustered batch; returns (first, last, params)."""
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 8)
    c_l = rng.normal(size=(4, 8))[labels] + 0.5 * rng.normal(size=(32, 8))
    c_n = rng.normal(size=(4, 16))[labels] + 0.5 * rng.normal(size=(32, 16))
    target = affinity(c_n)
    p = MpnnParams.init(8, 16, np.random.default_rng(1), iterations=2)
    params, opt = p.trainable(), SGD(momentum=0.9, weight_decay=5e-4)
    losses = []
    for _ in range(steps + 1):
        loss = mpnn_loss(target, mpnn_forward(c_l, c_n, p, training=True).a_tilde)
        losses.append(loss.item())
        opt.step(params, dict(zip(params, grad(loss, params.values()))), lr=0.1)
    return losses[0], losses[-1], p


def test_c4_mpnn_convergence():
    start = time.perf_counter()
    first, last, _ = fit_mpnn_batch()
    elapsed = time.perf_counter() - start
    ok = last < 0.1 * first and elapsed < 300.0
    record_criterion(4, ok, f"loss {first:.4f} -> {last:.5f} (ratio {last / first:.4f}), {elapsed:.1f} s")
    assert ok


# criterion 5 ------------------------------------------------------------------

def test_c5_clip_contract():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    policy, literal = ClipPolicy(), ClipPolicy("paper_literal_max")
    worst_excess, worst_direction, literal_ok = -np.inf, 0.0, True
    for _ in range(1000):
        shapes = {"a": (3, 4), "b": (5,)}
        g_t = {k: rng.normal(size=s) * rng.uniform(0, 3) for k, s in shapes.items()}
        g_i = {k: rng.normal(size=s) * rng.uniform(0, 10) for k, s in shapes.items()}
        g_a = {k: rng.normal(size=s) * rng.uniform(0, 10) for k, s in shapes.items()}
        total, norms = clip_combine(g_t, g_i, g_a, policy)
        worst_excess = max(worst_excess, norms["int_norm_post"] - norms["target_norm"],
                           norms["alt_norm_post"] - norms["target_norm"])
        f_i = clip_factor(norms["target_norm"], norms["int_norm_pre"], policy)
        f_a = clip_factor(norms["target_norm"], norms["alt_norm_pre"], policy)
        for k in total:
            # direction preserved: the combination is the sum of non-negatively scaled inputs
            worst_direction = max(worst_direction,
                                  np.abs(total[k] - (g_t[k] + f_i * g_i[k] + f_a * g_a[k])).max())
        t, z = norms["target_norm"], norms["int_norm_pre"]
        literal_ok &= clip_factor(t, z, literal) == max(1.0, t / z)
    elapsed = time.perf_counter() - start
    ok = worst_excess <= 1e-9 and worst_direction < 1e-12 and literal_ok and elapsed < 1.0
    record_criterion(5, ok, f"max norm excess {worst_excess:.1e}, literal factor exact {literal_ok}, {elapsed:.2f} s")
    assert ok


# criterion 6 ------------------------------------------------------------------

def test_c6_self_distillation_zero_loss(tiny_teacher, tiny_frame):
    start = time.perf_counter()
    x = tiny_images(8, seed=11)
    t_maps = [m.data for m in forward_sensed(tiny_teacher, x, training=False).feature_maps]
    bundle, _ = teacher_knowledge(tiny_frame, t_maps)
    student = tiny_teacher.copy()
    adapters = DepthAdapters.init(student.spec.widths, tiny_teacher.spec.widths, np.random.default_rng(0))
    k_int, k_alt, _ = student_knowledge(forward_sensed(student, x, training=False).feature_maps, adapters, tiny_frame)
    l_int, l_alt = loss_int(k_int, bundle.k_int).item(), loss_alt(k_alt, bundle.k_alt).item()
    elapsed = time.perf_counter() - start
    ok = l_int < 1e-8 and l_alt < 1e-8 and elapsed < 10.0
    record_criterion(6, ok, f"l_int {l_int:.1e}, l_alt {l_alt:.1e}, {elapsed:.2f} s")
    assert ok


# criteria 7 to 10: desk-scale pipeline -----------------------------------------

SEEDS = (0, 1, 2)
STUDENT_STEPS = 600


def pipeline_config(root):
    return TrainConfig(work_dir=str(root / "teacher"), batch_size=32, eval_every=0, iterations=300,
                       sample_rate=0.25, mpnn_lr=0.02)


def student_config(base, root, mode, seed):
    toggles = {"plain": (False, False), "int": (True, False), "alt": (False, True), "both": (True, True)}[mode]
    return base.with_(work_dir=str(root / f"{mode}{seed}"), seed=seed, iterations=STUDENT_STEPS,
                      enable_k_int=toggles[0], enable_k_alt=toggles[1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    base = pipeline_config(root)
    data = build_data(base)
    start = time.perf_counter()
    teacher = train_teacher(base, data)
    frame = train_mpnn(base, data, teacher)
    acc = {}
    for mode in ("plain", "both"):
        for seed in SEEDS:
            acc[mode, seed] = evaluate(train_student(student_config(base, root, mode, seed), data, frame), data)
    for mode in ("int", "alt"):
        acc[mode, 0] = evaluate(train_student(student_config(base, root, mode, 0), data, frame), data)
    return {"root": root, "base": base, "data": data, "teacher": teacher, "frame": frame, "acc": acc,
            "elapsed": time.perf_counter() - start}


@pytest.mark.slow
def test_c7_end_to_end_distillation(pipeline):
    acc = pipeline["acc"]
    plain = np.array([acc["plain", s] for s in SEEDS])
    iep = np.array([acc["both", s] for s in SEEDS])
    floor = plain.mean() - 0.005
    elapsed = pipeline["elapsed"]
    ok = bool(np.all(iep >= floor)) and elapsed < 1200.0
    record_criterion(7, ok, f"plain {plain.round(4).tolist()} mean {plain.mean():.4f}; iep {iep.round(4).tolist()} "
                            f"mean {iep.mean():.4f}; improvement {100 * (iep.mean() - plain.mean()):+.2f}%; "
                            f"{elapsed / 60:.1f} min with ablations")
    assert ok


@pytest.mark.slow
def test_c8_ablation_table(pipeline, capsys):
    acc = pipeline["acc"]
    rows = {"K_int only": acc["int", 0], "K_alt only": acc["alt", 0], "both": acc["both", 0]}
    both_wins = rows["both"] >= max(rows["K_int only"], rows["K_alt only"])
    with capsys.disabled():
        print("\nablation (seed 0, test accuracy)")
        for name, value in rows.items():
            print(f"  {name:<11} {value:.4f}")
    table = ", ".join(f"{k} {v:.4f}" for k, v in rows.items())
    record_criterion(8, len(rows) == 3, f"{table}; both >= each alone: {both_wins} (reported)")
    assert len(rows) == 3


@pytest.mark.slow
def test_c9_teacher_affinity_separates_classes(pipeline, tmp_path):
    start = time.perf_counter()
    data, frame = pipeline["data"], pipeline["frame"]
    idx = balanced_subset(data.test_y, 64, data.num_classes)
    last = viz_records(frame, data.test_x[idx])[-1]
    within, cross = class_separation(last.A, data.test_y[idx])
    written = export_viz(frame, data, tmp_path / "viz", n=8)
    exact = True
    for rec in viz_records(frame, data.test_x[balanced_subset(data.test_y, 8, data.num_classes)]):
        for stem, values in (("affinity", rec.A), ("kalt", rec.k_alt), ("cvis", rec.c_vis)):
            if values is not None:
                header, back = read_matrix(tmp_path / "viz" / f"{stem}_l{rec.layer_index}.csv")
                exact &= header == {"n": 8, "layer": rec.layer_index} and back.tobytes() == values.tobytes()
    elapsed = time.perf_counter() - start
    ok = within > cross and exact and len(written) == 9 and elapsed < 60.0
    record_criterion(9, ok, f"within {within:.4f} > cross {cross:.4f}; round-trip exact {exact}; {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_c10_determinism(pipeline):
    # criterion 4 twice
    p1, p2 = fit_mpnn_batch()[2], fit_mpnn_batch()[2]
    same_mpnn = checkpoint.dumps({f"mpnn/{k}": v for k, v in p1.arrays().items()}) == \
        checkpoint.dumps({f"mpnn/{k}": v for k, v in p2.arrays().items()})
    # criterion 7 pipeline: teacher, frame and one distilled student, rerun in the same directories
    root, base, data = pipeline["root"], pipeline["base"], pipeline["data"]
    cfg = student_config(base, root, "both", 0)
    paths = [pipeline["teacher"], pipeline["frame"], root / "both0" / "student.iepk"]
    before = [p.read_bytes() for p in paths]
    teacher = train_teacher(base, data)
    frame = train_mpnn(base, data, teacher)
    student = train_student(cfg, data, frame)
    same = [a == p.read_bytes() for a, p in zip(before, (teacher, frame, student))]
    ok = same_mpnn and all(same)
    record_criterion(10, ok, f"criterion-4 params identical {same_mpnn}; teacher/frame/student identical {same}")
    assert ok
