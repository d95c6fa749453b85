"""Acceptance criteria, one PASS/FAIL line each in the terminal summary.

The desk-scale block trains the reduced-depth backbone on a procedural corpus
(2,000 train / 500 test images) and takes tens of minutes on a single core.
"""
import time

import numpy as np
import pytest
import torch

from glfusion import psm
from glfusion.affm import FusionStack, MultiHeadSelfAttention, stable_softmax
from glfusion.core import load_image
from glfusion.dataset import AugmentationConfig, ToyGenConfig, generate_toy_dataset, read_sidecar
from glfusion.detector import Detector, DetectorConfig, load_checkpoint, save_checkpoint
from glfusion.evaluator import RobustnessSweepConfig, average_precision, evaluate, robustness_sweep, write_curves
from glfusion.trainer import TrainConfig, epoch_records, step_losses, train
from conftest import ACCEPTANCE_LINES, TINY, random_image
from oracles import greedy_nms_oracle, mha_loop, rank_walk_ap, window_means_loop

TOY_EPOCHS = 10
TOY_SEED = 1


def report(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- oracle equivalence ----------------------------------------------------------


def _window_oracle_check(rng):
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(2, 10, size=2)
        spec = psm.WindowSpec(int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1)), stride=int(rng.integers(1, 3)))
        A = rng.normal(scale=10.0, size=(h, w))
        got = psm.window_scores(A, spec)
        want = window_means_loop(A.tolist(), spec.height, spec.width, spec.stride)
        if [g[:2] for g in got] != [o[:2] for o in want]:
            return float("inf")
        worst = max(worst, max(abs(g[2] - o[2]) for g, o in zip(got, want)))
    return worst


def _nms_oracle_check(rng):
    mismatches = 0
    for _ in range(500):
        spec = psm.WindowSpec(*(int(v) for v in rng.integers(1, 4, size=2)))
        cands = []
        for _ in range(int(rng.integers(1, 30))):
            x, y = int(rng.integers(0, 9 - spec.width)), int(rng.integers(0, 9 - spec.height))
            # coarse integer scores force plenty of ties
            cands.append((x, y, float(rng.integers(0, 5)) if rng.random() < 0.5 else float(rng.normal())))
        thr = float(rng.choice([0.0, 0.1, 0.25, 0.5, 0.9]))
        n = int(rng.integers(1, 8))
        got = [(p.window_x, p.window_y, p.score) for p in psm.nms([psm.PatchProposal(x, y, spec, s) for x, y, s in cands], thr, n)]
        want = [(c[0], c[1], c[4]) for c in greedy_nms_oracle([(x, y, spec.width, spec.height, s) for x, y, s in cands], thr, n)]
        mismatches += got != want
    return mismatches


def _mha_oracle_check(rng):
    worst = 0.0
    for i in range(100):
        torch.manual_seed(i)
        layer = MultiHeadSelfAttention(128, 4).double()
        p = {n: t.detach().numpy() for n, t in (
            ("wq", layer.q_proj.weight), ("bq", layer.q_proj.bias), ("wk", layer.k_proj.weight), ("bk", layer.k_proj.bias),
            ("wv", layer.v_proj.weight), ("bv", layer.v_proj.bias), ("wo", layer.out_proj.weight), ("bo", layer.out_proj.bias))}
        x = rng.normal(scale=float(rng.uniform(0.1, 3.0)), size=(7, 128))
        got = layer(torch.from_numpy(x)).detach().numpy()
        worst = max(worst, float(np.abs(got - mha_loop(x, **p, num_heads=4)).max()))
    return worst


def _ap_oracle_check(rng):
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        s = rng.integers(0, 20, n) / 20.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(average_precision(s, y) - rank_walk_ap(s.tolist(), y.tolist())))
    return worst


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    w = _window_oracle_check(rng)
    m = _nms_oracle_check(rng)
    a = _mha_oracle_check(rng)
    p = _ap_oracle_check(rng)
    dt = time.perf_counter() - t0
    ok = w <= 1e-9 and m == 0 and a <= 1e-6 and p <= 1e-12 and dt < 120
    report(
        "oracle equivalence",
        ok,
        f"window max err {w:.2e} (<=1e-9), nms mismatches {m}/500, mha max err {a:.2e} (<=1e-6), "
        f"ap max err {p:.2e} (<=1e-12), {dt:.1f}s (<120s)",
    )


# -- gradient checks ---------------------------------------------------------------


def _gradcheck_draw(seed, per_tensor=32, h=1e-4):
    torch.manual_seed(seed)
    stack = FusionStack().double()
    x = torch.randn(1, 7, 128, dtype=torch.float64)
    f = lambda: torch.sigmoid(stack(x))[0]  # noqa: E731
    params = list(stack.parameters())
    grads = torch.autograd.grad(f(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gf = p.view(-1), g.view(-1)
            for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num, ana = (fp - fm) / (2 * h), gf[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        # one random direction through every parameter at once
        dirs = [torch.randn_like(p) for p in params]
        ana = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        for p, d in zip(params, dirs):
            p.add_(h * d)
        fp = f().item()
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        fm = f().item()
        for p, d in zip(params, dirs):
            p.add_(h * d)
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def test_gradient_checks():
    t0 = time.perf_counter()
    worst = max(_gradcheck_draw(seed) for seed in range(10))
    dt = time.perf_counter() - t0
    report("gradient checks", worst <= 1e-3 and dt < 120, f"max relative error {worst:.2e} over 10 draws (<=1e-3), {dt:.1f}s")


# -- invariant suite -------------------------------------------------------------------


def test_invariant_suite(tmp_path):
    rng = np.random.default_rng(7)
    failures = []

    logits = torch.from_numpy(rng.normal(scale=50.0, size=(200, 7)))
    logits[0] = 1e4
    sm_err = float((stable_softmax(logits).sum(-1) - 1).abs().max())
    if sm_err > 1e-6:
        failures.append(f"softmax row error {sm_err:.1e}")

    def sel(A):
        return [(p.window_x, p.window_y) for p in psm.propose(A[None], (448, 448), psm.DEFAULT_SPECS, 0.25)]

    for _ in range(300):
        A = rng.normal(size=(7, 7))
        if sel(A * rng.uniform(0.01, 100)) != sel(A) or sel(A + rng.uniform(-100, 100)) != sel(A):
            failures.append("PSM selection changed under scale/shift")
            break

    iou_worst = 0.0
    for _ in range(300):
        A = rng.normal(size=(7, 7))
        for spec in psm.DEFAULT_SPECS:
            kept = psm.nms([psm.PatchProposal(x, y, spec, s) for x, y, s in psm.window_scores(A, spec)], 0.25, spec.n_select)
            for i in range(len(kept)):
                for j in range(i + 1, len(kept)):
                    iou_worst = max(iou_worst, psm.rect_iou(kept[i].window_rect, kept[j].window_rect))
    if iou_worst > 0.25:
        failures.append(f"NMS IoU {iou_worst:.3f} > 0.25")

    oob = 0
    for _ in range(500):
        size = (int(rng.integers(16, 2000)), int(rng.integers(16, 2000)))
        for p in psm.propose(rng.random((4, 7, 7)), size, psm.DEFAULT_SPECS, 0.25):
            x, y, w, h = p.crop_rect
            oob += not (0 <= x and 0 <= y and w > 0 and h > 0 and x + w <= size[0] and y + h <= size[1])
    if oob:
        failures.append(f"{oob} crop rects out of bounds")

    model = Detector(DetectorConfig(backbone=TINY, seed=11)).eval()
    back = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt")).eval()
    imgs = [random_image(100 + i, (int(rng.integers(64, 600)), int(rng.integers(64, 600)))) for i in range(10)]
    a, pa = model.predict(imgs)
    b, pb = back.predict(imgs)
    ck_err = float(np.abs(a - b).max())
    same_rects = [[p.crop_rect for p in x] for x in pa] == [[p.crop_rect for p in x] for x in pb]
    if ck_err > 1e-6 or not same_rects:
        failures.append(f"checkpoint round trip err {ck_err:.1e}, rects equal {same_rects}")

    report(
        "invariant suite",
        not failures,
        "; ".join(failures) if failures else
        f"softmax err {sm_err:.1e}, selection scale/shift invariant, max NMS IoU {iou_worst:.3f}, "
        f"crops in bounds, checkpoint max diff {ck_err:.1e}",
    )


# -- bookkeeping -------------------------------------------------------------------------


def test_bookkeeping(tmp_path):
    m = generate_toy_dataset(ToyGenConfig(n_real=32, n_fake=32, seed=5, checker_cell=4), tmp_path / "toy")
    _, log1 = train(Detector(DetectorConfig(backbone=TINY)), m, TrainConfig(batch_size=64, epochs=1))
    cfg = TrainConfig(batch_size=16, epochs=2, seed=3, augmentation=AugmentationConfig(apply_fraction=0.5), workers=1)
    _, a = train(Detector(DetectorConfig(backbone=TINY)), m, cfg)
    _, b = train(Detector(DetectorConfig(backbone=TINY)), m, cfg)
    steps = len(step_losses(log1))
    same = step_losses(a) == step_losses(b)
    report("bookkeeping", steps == 1 and same, f"{steps} step for 64 samples at batch 64; fixed-seed trajectories identical: {same}")


# -- desk-scale end-to-end -----------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    train_m = generate_toy_dataset(ToyGenConfig(n_real=1000, n_fake=1000, seed=TOY_SEED), root / "train")
    test_m = generate_toy_dataset(ToyGenConfig(n_real=250, n_fake=250, seed=TOY_SEED + 1), root / "test")
    t_gen = time.perf_counter() - t0
    model = Detector(DetectorConfig(backbone=TINY, seed=0))
    t0 = time.perf_counter()
    model, records = train(model, train_m, TrainConfig(epochs=TOY_EPOCHS, seed=0), out_dir=root / "run")
    t_train = time.perf_counter() - t0
    model.eval()
    t0 = time.perf_counter()
    rep = evaluate(model, test_m, out_dir=root / "eval")
    t_eval = time.perf_counter() - t0
    return dict(model=model, records=records, report=rep, test=test_m, root=root, t_gen=t_gen, t_train=t_train, t_eval=t_eval)


@pytest.mark.slow
def test_desk_scale_end_to_end(toy_run):
    acc = epoch_records(toy_run["records"])[-1].train_accuracy
    ap = toy_run["report"].global_ap
    total = toy_run["t_gen"] + toy_run["t_train"] + toy_run["t_eval"]
    report(
        "desk-scale end-to-end",
        ap >= 0.95 and acc >= 0.95,
        f"test global AP {ap:.4f} (>=0.95), final train accuracy {acc:.4f} (>=0.95), {TOY_EPOCHS} epochs, "
        f"{total / 60:.1f} min (gen {toy_run['t_gen']:.0f}s, train {toy_run['t_train']:.0f}s, eval {toy_run['t_eval']:.0f}s)",
    )


def _hits(rects, art):
    x, y, w, h = art
    return any(not (r[0] + r[2] <= x or x + w <= r[0] or r[1] + r[3] <= y or y + h <= r[1]) for r in rects)


@pytest.mark.slow
def test_psm_localization(toy_run):
    model = toy_run["model"]
    sidecar = read_sidecar(toy_run["test"].parent / "artifacts.jsonl")
    paths = sorted(sidecar)
    _, props = model.predict([load_image(p) for p in paths])
    hit = np.mean([_hits([q.crop_rect for q in pr], sidecar[p]) for p, pr in zip(paths, props)])
    # the 224 px crops cover a whole 224 px toy image, so also show the small scale alone
    small = np.mean([_hits([q.crop_rect for q in pr if q.spec.patch_px < 224], sidecar[p]) for p, pr in zip(paths, props)])
    report("PSM localization", hit >= 0.60, f"{hit:.1%} of {len(paths)} fakes hit (>=60%); 112 px crops alone {small:.1%}")


@pytest.mark.slow
def test_robustness_harness(toy_run):
    model, test_m = toy_run["model"], toy_run["test"]
    base = toy_run["report"].global_ap
    t0 = time.perf_counter()
    curves = robustness_sweep(model, test_m, RobustnessSweepConfig())
    dt = time.perf_counter() - t0
    paths = write_curves(curves, toy_run["root"] / "curves")
    blur, jpeg = dict(curves["blur"]), dict(curves["jpeg"])
    ok = (
        blur[0.0] == base
        and abs(jpeg[100] - base) <= 0.05
        and dt <= 600
        and len(paths) == 2
        and len(curves["blur"]) == 4
        and len(curves["jpeg"]) == 5
        and blur[3.0] >= 0.5
    )
    report(
        "robustness harness",
        ok,
        f"sigma0 {blur[0.0]:.4f} vs base {base:.4f} (exact), q100 {jpeg[100]:.4f} (|d|<=0.05), sigma3 {blur[3.0]:.4f} (>=0.5), "
        f"sweep {dt:.0f}s (<=600s); blur {[round(v, 3) for _, v in curves['blur']]}, jpeg {[round(v, 3) for _, v in curves['jpeg']]}",
    )
