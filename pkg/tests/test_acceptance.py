"""Acceptance criteria, one test each.

Every test appends a ``PASS``/``FAIL`` line to the summary printed at the end
of the pytest run, then asserts.
"""
import json
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from helpers import fd_gradients, gradcheck_problem, relative_error

from matembed.cli import main as cli_main
from matembed.descriptor import color_histogram, quantize_color
from matembed.encoder import EncoderConfig, batch_forward_backward, init_params
from matembed.errors import EmptyMask
from matembed.loss import info_nce, info_nce_grads
from matembed.maskcrop import Rect, largest_inscribed_rectangle
from matembed.retrieval import build_index, evaluate, rank, train_and_evaluate
from matembed.subspace import KdTree, thin
from matembed.synthdata import SynthConfig, generate, view_subset
from matembed.trainer import TrainConfig, apply_split, load_checkpoint, save_checkpoint, split_by_object, train

SEEDS = (0, 1, 2)


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1. gradient exactness ---------------------------------------------------

def _fd_loss_grads(mat, part, t, h=1e-3):
    out = []
    for arr in (mat, part):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = info_nce(mat, part, t)
            arr[idx] = old - h
            down = info_nce(mat, part, t)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    out.append((info_nce(mat, part, t + h) - info_nce(mat, part, t - h)) / (2 * h))
    return out


def test_c1_gradient_exactness():
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    for seed in range(5):
        cfg, params, views, desc = gradcheck_problem(seed)
        _, analytic = batch_forward_backward(params, views, desc, cfg.n_heads)
        numeric = fd_gradients(params, views, desc, cfg.n_heads)
        for name in analytic:
            err = relative_error(analytic[name], numeric[name])
            if err > worst:
                worst, worst_name = err, name
        r = np.random.default_rng(seed)
        mat = r.normal(size=(4, 8))
        part = r.normal(size=(4, 8))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        part /= np.linalg.norm(part, axis=1, keepdims=True)
        t = float(r.uniform(0.5, 2.5))
        for name, a, n in zip(("d_mat", "d_part", "d_t"), info_nce_grads(mat, part, t), _fd_loss_grads(mat, part, t)):
            err = relative_error(a, n)
            if err > worst:
                worst, worst_name = err, f"info_nce {name}"
    elapsed = time.perf_counter() - start
    record(1, "gradient exactness", worst <= 1e-4 and elapsed < 30,
           f"max relative error {worst:.2e} ({worst_name or 'all zero'}) over 5 seeds, {elapsed:.1f} s")


# --- 2. loss calibration -----------------------------------------------------

def test_c2_loss_calibration():
    # t = 0 gives unit scale, so the logits of random 32-d unit vectors are
    # near zero and the loss sits at ln B
    losses = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        mat, part = r.normal(size=(64, 32)), r.normal(size=(64, 32))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        part /= np.linalg.norm(part, axis=1, keepdims=True)
        losses.append(info_nce(mat, part, 0.0))
    mean = float(np.mean(losses))
    rel = abs(mean - math.log(64)) / math.log(64)
    record(2, "loss calibration", rel <= 0.05, f"mean loss {mean:.4f} vs ln 64 = {math.log(64):.4f} ({100 * rel:.2f}% off)")


# --- 3 and 4. learning vs baselines, ablation trend --------------------------

GRID = dict(n_materials=64, n_env=3, n_shapes=2, d_in=32)
_runs = {}


def _dataset(seed, tmp_root):
    if seed not in _runs:
        manifest = generate(SynthConfig(seed=seed, **GRID), tmp_root / f"grid{seed}")
        apply_split(manifest, split_by_object(manifest, 0.25, seed))
        _runs[seed] = {"manifest": manifest}
    return _runs[seed]


def _full_grid(seed, tmp_root):
    run = _dataset(seed, tmp_root)
    if "full" not in run:
        _, row = train_and_evaluate(EncoderConfig(), TrainConfig(seed=seed), run["manifest"])
        run["full"] = row.top1
    return run


@pytest.fixture(scope="module")
def grid_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.mark.slow
def test_c3_learning_beats_raw_cosine(grid_root):
    start = time.perf_counter()
    trained, best_base = [], []
    for seed in SEEDS:
        run = _full_grid(seed, grid_root)
        trained.append(run["full"])
        best_base.append(max(evaluate("v1", run["manifest"]).top1, evaluate("v2", run["manifest"]).top1))
    elapsed = time.perf_counter() - start
    t_mean, b_mean = float(np.mean(trained)), float(np.mean(best_base))
    ok = t_mean >= 80.0 and t_mean >= 2 * b_mean and elapsed < 300
    record(3, "learning beats raw cosine", ok,
           f"trained Top-1 {t_mean:.2f}% vs best baseline {b_mean:.2f}% "
           f"(per seed {', '.join(f'{a:.1f}/{b:.1f}' for a, b in zip(trained, best_base))}), {elapsed:.0f} s")


@pytest.mark.slow
def test_c4_ablation_trend(grid_root):
    full, single = [], []
    for seed in SEEDS:
        run = _full_grid(seed, grid_root)
        cfg = run["manifest"].config
        rows = view_subset(cfg.n_env, cfg.n_shapes, 1, 1)
        _, row = train_and_evaluate(EncoderConfig(), TrainConfig(seed=seed), run["manifest"], rows)
        full.append(run["full"])
        single.append(row.top1)
    f_mean, s_mean = float(np.mean(full)), float(np.mean(single))
    record(4, "ablation trend", f_mean >= s_mean,
           f"full grid Top-1 {f_mean:.2f}% vs single cell {s_mean:.2f}% over {len(SEEDS)} seeds")


# --- 5. inscribed rectangle --------------------------------------------------

def _brute_force_rect(mask):
    """Every-rectangle search via prefix sums, largest area first."""
    rows, cols = mask.shape
    filled = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    filled[1:, 1:] = mask.cumsum(0).cumsum(1)
    shapes = sorted(((h * w, h, w) for h in range(1, rows + 1) for w in range(1, cols + 1)), reverse=True)
    best_key, best, best_area = None, None, 0
    for area, h, w in shapes:
        if area < best_area:
            break
        sums = filled[h:, w:] - filled[:-h, w:] - filled[h:, :-w] + filled[:-h, :-w]
        ys, xs = np.nonzero(sums == area)
        if len(ys):
            best_area = area
            # nonzero is row-major, so the first hit is top-most then left-most
            key = (ys[0], xs[0], -w)
            if best_key is None or key < best_key:
                best_key, best = key, Rect(int(xs[0]), int(ys[0]), w, h)
    return best


def _random_mask(r):
    h, w = r.integers(1, 33, size=2)
    kind = r.integers(3)
    if kind == 0:
        mask = r.random((h, w)) < r.uniform(0.3, 0.95)
    elif kind == 1:
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(r.integers(1, 5)):
            y0, x0 = r.integers(0, h), r.integers(0, w)
            mask[y0:y0 + r.integers(1, h + 1), x0:x0 + r.integers(1, w + 1)] = True
    else:
        yy, xx = np.mgrid[:h, :w]
        mask = (yy - h / 2) ** 2 / max(h / 2, 1) ** 2 + (xx - w / 2) ** 2 / max(w / 2, 1) ** 2 <= 1
        mask &= r.random((h, w)) < 0.97
    if not mask.any():
        mask[r.integers(h), r.integers(w)] = True
    return mask


def test_c5_inscribed_rectangle():
    r = np.random.default_rng(2024)
    masks = [_random_mask(r) for _ in range(200)]
    start = time.perf_counter()
    found = [largest_inscribed_rectangle(m) for m in masks]
    elapsed = time.perf_counter() - start
    bad = 0
    for mask, rect in zip(masks, found):
        valid = mask[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w].all() and rect.w > 0 and rect.h > 0
        if not valid or rect != _brute_force_rect(mask):
            bad += 1
    l_shape = np.array([[1, 1, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
    fixtures = (largest_inscribed_rectangle(l_shape) == Rect(0, 0, 2, 3)
                and largest_inscribed_rectangle(np.ones((7, 5), dtype=bool)) == Rect(0, 0, 5, 7))
    try:
        largest_inscribed_rectangle(np.zeros((4, 4), dtype=bool))
        fixtures = False
    except EmptyMask:
        pass
    record(5, "inscribed rectangle", bad == 0 and fixtures and elapsed < 5,
           f"{200 - bad}/200 random masks match brute force, fixtures {'ok' if fixtures else 'wrong'}, {elapsed:.2f} s")


# --- 6. retrieval exactness --------------------------------------------------

def test_c6_retrieval_exactness():
    r = np.random.default_rng(6)
    m = r.normal(size=(500, 16))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    m[400:450] = m[:50]
    ids = [f"mat{int(i):04d}" for i in r.permutation(500)]
    index = build_index(zip(ids, m))
    queries = r.normal(size=(90, 16))
    queries = np.concatenate([queries / np.linalg.norm(queries, axis=1, keepdims=True), m[:10]])
    mismatches = 0
    for q in queries:
        scores = [float((row * q).sum()) for row in m]
        oracle = sorted(zip(scores, ids), key=lambda p: (-p[0], p[1]))
        got = rank(index, q, 500)
        if [(mid, s) for s, mid in oracle] != got:
            mismatches += 1
    record(6, "retrieval exactness", mismatches == 0,
           f"{len(queries) - mismatches}/{len(queries)} full rankings identical to the linear scan (N=500, 50 duplicated rows)")


# --- 7. KD-tree exactness ----------------------------------------------------

def test_c7_kdtree_exactness():
    r = np.random.default_rng(7)
    mismatches = 0
    for dim in (2, 8, 32):
        points = r.normal(size=(1000, dim))
        points[900:950] = points[:50]
        ids = [int(i) for i in r.permutation(1000)]
        tree = KdTree(ids, points)
        queries = np.concatenate([r.normal(size=(90, dim)), points[:10]])
        for q in queries:
            d2 = ((points - q) ** 2).sum(axis=1)
            best = d2.min()
            oracle = (min(i for i, d in zip(ids, d2) if d == best), float(np.sqrt(best)))
            got = tree.nearest(q)
            radius = oracle[1]
            if got != oracle or not tree.contains(q, radius) or (radius > 0 and tree.contains(q, np.nextafter(radius, 0))):
                mismatches += 1
    thin_ok = True
    for seed in range(5):
        pts = np.random.default_rng(seed).uniform(-1, 1, size=(50, 2))
        kept = thin(pts, 0.5)
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(axis=2))
        sub = d[np.ix_(kept, kept)]
        thin_ok &= bool((sub[~np.eye(len(kept), dtype=bool)] > 0.5).all() and (d[:, kept].min(axis=1) <= 0.5).all())
    record(7, "KD-tree exactness", mismatches == 0 and thin_ok,
           f"{300 - mismatches}/300 queries match linear scan over D in (2, 8, 32); thin postconditions "
           f"{'hold' if thin_ok else 'violated'}")


# --- 8. determinism ----------------------------------------------------------

def test_c8_determinism(small_manifest, tmp_path):
    cfg = EncoderConfig(d_in=small_manifest.config.d_in, d_model=32, d_emb=16, n_heads=4, n_blocks=2,
                        n_views=small_manifest.n_views)
    tc = TrainConfig(steps=40, batch_size=8, learning_rate=1e-3, seed=8)
    for name in ("a", "b"):
        state, _ = train(tc, small_manifest, init_params(cfg, 8), cfg.n_heads)
        save_checkpoint(state, tmp_path / f"{name}.mcpt")
    twice = (tmp_path / "a.mcpt").read_bytes() == (tmp_path / "b.mcpt").read_bytes()
    half, _ = train(tc, small_manifest, init_params(cfg, 8), cfg.n_heads, stop_at=17)
    save_checkpoint(half, tmp_path / "half.mcpt")
    resumed, _ = train(tc, small_manifest, None, cfg.n_heads, state=load_checkpoint(tmp_path / "half.mcpt", tc))
    save_checkpoint(resumed, tmp_path / "resumed.mcpt")
    resume = (tmp_path / "resumed.mcpt").read_bytes() == (tmp_path / "a.mcpt").read_bytes()
    record(8, "determinism", twice and resume,
           f"repeat run bit-identical: {twice}; resume at step 17 of 40 bit-identical: {resume}")


# --- 9. histogram contract ---------------------------------------------------

def test_c9_histogram_contract():
    r = np.random.default_rng(9)
    worst = 0.0
    for _ in range(200):
        h, w = r.integers(1, 40, size=2)
        image = r.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        mask = r.random((h, w)) < r.uniform(0.05, 1.0)
        mask[r.integers(h), r.integers(w)] = True
        worst = max(worst, abs(float(color_histogram(image, mask).sum()) - 1.0))
    uniform_ok = True
    for rgb in [(255, 0, 0), (0, 0, 0), (17, 130, 250), (255, 255, 255)]:
        image = np.empty((6, 7, 3), dtype=np.uint8)
        image[:] = rgb
        mask = r.random((6, 7)) < 0.5
        mask[0, 0] = True
        hist = color_histogram(image, mask)
        b = 100 * (rgb[0] * 10 // 256) + 10 * (rgb[1] * 10 // 256) + rgb[2] * 10 // 256
        uniform_ok &= bool(quantize_color(*rgb) == b and hist[b] == 1.0 and hist.sum() == 1.0)
    record(9, "histogram contract", worst <= 1e-6 and uniform_ok,
           f"max |sum - 1| = {worst:.1e} over 200 masks; uniform fixtures {'exact' if uniform_ok else 'wrong'}")


# --- 10. end-to-end smoke ----------------------------------------------------

def test_c10_end_to_end(tmp_path):
    config = {
        "synth": {"n_materials": 16, "n_objects": 24, "parts_per_object": 3, "n_env": 2, "n_shapes": 2, "d_in": 16,
                  "d_lat": 8},
        "model": {"d_model": 16, "d_emb": 8, "n_heads": 2, "n_blocks": 1},
        "train": {"batch_size": 8, "learning_rate": 0.001},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    data, split = tmp_path / "data", tmp_path / "split"
    common = ["--manifest", str(data / "manifest.json"), "--split", str(split / "split.json")]
    codes = [
        cli_main(["gen", "--config", str(cfg_path), "--seed", "0", "--out", str(data)]),
        cli_main(["split", "--manifest", str(data / "manifest.json"), "--seed", "0", "--out", str(split)]),
        cli_main(["train", *common, "--config", str(cfg_path), "--seed", "0", "--steps", "20",
                  "--out", str(tmp_path / "model")]),
        cli_main(["eval", *common, "--checkpoint", str(tmp_path / "model" / "checkpoint.mcpt"),
                  "--out", str(tmp_path / "eval")]),
        cli_main(["report", str(tmp_path / "eval" / "metrics.csv"), "--out", str(tmp_path / "report")]),
    ]
    report = tmp_path / "report" / "report.md"
    lines = report.read_text().splitlines() if report.exists() else []
    methods = [line.split("|")[1].strip() for line in lines[2:]]
    layout = bool(lines) and lines[0].startswith("| Method | Main Evaluation T-1 [%] | Main Evaluation T-5 [%]")
    ok = codes == [0] * 5 and methods == ["matclip", "v1", "v2"] and layout
    record(10, "end-to-end smoke", ok, f"exit codes {codes}; report rows {methods}")
