"""Acceptance gate: one test per criterion, each at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary (see
conftest.py).  The end-to-end criteria train real models and take minutes.
"""

import itertools
import time

import numpy as np
import pytest

from hmic import bundle, core, evaluation, patching, pipeline, stain
from hmic import patch_filter as pf
from hmic import synthetic as syn
from hmic import tensor_nn as nn


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# ---------------------------------------------------------------------------
# 1. Gradient suite
# ---------------------------------------------------------------------------

def _layer_case(kind, rng):
    """One small random network of a single layer type, float64."""
    if kind == "conv":
        cin, cout = rng.integers(1, 4), rng.integers(1, 4)
        layers = [{"type": "conv", "name": "c", "in_channels": int(cin), "out_channels": int(cout),
                   "kernel": 3, "padding": 1, "stride": 1,
                   "activation": str(rng.choice(["identity", "sigmoid"]))}]
        x = rng.normal(size=(2, int(rng.integers(3, 6)), int(rng.integers(3, 6)), int(cin)))
    elif kind == "dense":
        fin, fout = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        layers = [{"type": "flatten", "name": "f"},
                  {"type": "dense", "name": "d", "in_features": fin, "out_features": fout,
                   "activation": str(rng.choice(["identity", "sigmoid"]))}]
        x = rng.normal(size=(3, 1, 1, fin))
    elif kind == "maxpool":
        w = int(rng.integers(2, 4))
        layers = [{"type": "maxpool", "name": "p", "window": w}]
        x = rng.permutation(np.linspace(-1, 1, 2 * (2 * w) * (2 * w) * 2)).reshape(2, 2 * w, 2 * w, 2)
    else:  # dropout in inference mode
        layers = [{"type": "dropout", "name": "o", "rate": float(rng.uniform(0.1, 0.7))}]
        x = rng.normal(size=(2, 3, 3, 2))
    params = {k: v.astype(np.float64) for k, v in nn.init_params(layers, rng).items()}
    return layers, params, x


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for kind in ("conv", "dense", "maxpool", "dropout"):
        errs = []
        for _ in range(20):
            layers, params, x = _layer_case(kind, rng)
            out, _ = nn.forward(layers, params, x)
            proj = rng.normal(size=out.shape)

            def loss_x(v):
                return float((nn.forward(layers, params, v)[0] * proj).sum())

            _, caches = nn.forward(layers, params, x)
            grads, gx = nn.backward(layers, params, caches, proj, input_grad=True)
            errs.append(rel_err(gx, nn.finite_difference_gradient(loss_x, x, 1e-6)))
            for name, p in params.items():
                def loss_p(v, name=name):
                    q = dict(params)
                    q[name] = v
                    return float((nn.forward(layers, q, x)[0] * proj).sum())
                errs.append(rel_err(grads[name], nn.finite_difference_gradient(loss_p, p, 1e-6)))
        worst[kind] = max(errs)
    errs = []
    for _ in range(20):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        logits = rng.normal(scale=2.0, size=(n, c))
        labels = rng.integers(0, c, n)
        _, _, g = nn.softmax_cross_entropy(logits, labels)
        num = nn.finite_difference_gradient(
            lambda z: nn.softmax_cross_entropy(z, labels)[0], logits, 1e-6)
        errs.append(rel_err(g, num))
    worst["softmax_ce"] = max(errs)
    elapsed = time.perf_counter() - start
    print(f"max relative error per op: {worst}; {elapsed:.1f} s")
    assert all(v < 1e-3 for v in worst.values()), worst
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. Architecture trace
# ---------------------------------------------------------------------------

def test_criterion_2_architecture_trace():
    chain = {}
    for level, n in (("parent", 3), ("child", 4)):
        m = bundle.build_architecture(level)
        shapes = m.shapes()
        named = {l["name"]: s for l, s in zip(m.layers, shapes)}
        assert m.input_shape == (1000, 1000, 3)
        assert [named[k][:2] for k in ("conv1", "pool1", "conv2", "pool2", "conv3", "pool3")] == \
            [(1000, 1000), (200, 200), (200, 200), (40, 40), (40, 40), (5, 5)]
        assert [l["window"] for l in m.layers if l["type"] == "maxpool"] == [5, 5, 8]
        assert named["pool3"] == (5, 5, 64)
        assert named["flatten"] == (1600,)
        assert named["fc1"] == (128,)
        assert named["head"] == (n,)
        chain[level] = [s for s in shapes]
    print(f"parent chain: {chain['parent']}")


# ---------------------------------------------------------------------------
# 3. k-means suite
# ---------------------------------------------------------------------------

def exhaustive_best(points):
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=len(pts) - 1):
        a = np.array((0,) + mask, bool)
        if not a.any():
            continue
        best = min(best, sum(((g - g.mean(axis=0)) ** 2).sum() for g in (pts[a], pts[~a])))
    return best


def test_criterion_3_kmeans_suite():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, d = int(rng.integers(4, 60)), int(rng.integers(1, 6))
        pts = rng.normal(size=(n, d)) + rng.integers(0, 2, (n, 1)) * rng.uniform(0, 4)
        st = pf.kmeans2(pts, seed=int(rng.integers(1 << 30)))
        assert np.all(np.diff(st.xi_history) <= 0)
        # the objective is non-increasing in every restart too
        for child in pf.restart_seeds(0, 10):
            run = pf._lloyd(pts, np.random.default_rng(child))
            assert np.all(np.diff(run.xi_history) <= 0)

    # every 1-D multiset of 2..8 points over the grid {0..4} with two distinct values
    n_sets, exhaustive_gap = 0, 0.0
    for n in range(2, 9):
        for combo in itertools.combinations_with_replacement(range(5), n):
            if len(set(combo)) < 2:
                continue
            pts = np.array(combo, float)[:, None]
            st = pf.kmeans2(pts, seed=0)
            restarts = [pf._lloyd(pts, np.random.default_rng(c)).xi for c in pf.restart_seeds(0, 10)]
            assert abs(st.xi - min(restarts)) <= 1e-9
            d = (pts - st.centroids.T) ** 2
            assert np.all(d[np.arange(n), st.assignments] <= d.min(axis=1))
            for j in (0, 1):
                members = st.assignments == j
                if members.any():
                    assert st.centroids[j, 0] == pts[members].mean()
            exhaustive_gap = max(exhaustive_gap, st.xi - exhaustive_best(pts))
            n_sets += 1
    st = pf.kmeans2(np.array([0.0, 1.0, 9.0, 10.0]))
    assert st.xi == 1.0 == exhaustive_best([0, 1, 9, 10])
    print(f"{n_sets} 1-D datasets checked; largest gap to exhaustive optimum {exhaustive_gap:.3g}")


# ---------------------------------------------------------------------------
# 4. Color balance
# ---------------------------------------------------------------------------

def test_criterion_4_color_balance():
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        img = rng.random((16, 16, 3)).astype(dtype)
        out = stain.color_balance(img, stain.ColorBalanceParams())
        assert out.dtype == img.dtype and out.tobytes() == img.tobytes()
    out = stain.color_balance(np.array([[[0.1, 0.2, 0.3]]]), stain.ColorBalanceParams(alpha=2.0))
    assert out[0, 0].tolist() == [0.2, 0.4, 0.6]
    out = stain.color_balance(np.full((1, 1, 3), 0.5), stain.ColorBalanceParams(gamma=2.0))
    assert out[0, 0].tolist() == [0.25, 0.25, 0.25]


# ---------------------------------------------------------------------------
# 5. Stain suite
# ---------------------------------------------------------------------------

def test_criterion_5_stain_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    angles, self_mae, swap_mae = [], [], []
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        ch, ce = syn.tissue_concentrations(64, "EE", None, r)
        img = syn.render_od(syn.slide_stains(r, 8), ch, ce)
        prof, hist = stain.estimate_stain_profile(img, seed=seed, return_history=True)
        assert np.all(np.diff(hist) <= 0)
        self_mae.append(np.abs(stain.normalize_stain(img, prof, prof) - img).mean())

        s = rng.uniform(0.1, 1.0, 3)
        s /= np.linalg.norm(s)
        c = rng.uniform(0.2, 1.5, (64, 64))
        single = np.exp(-c[..., None] * s)
        p1 = stain.estimate_stain_profile(single, seed=seed)
        C = stain.solve_concentrations(p1.stain_matrix, stain.tissue_od(single))
        angles.append(stain.angular_distance_deg(p1.stain_matrix[:, np.argmax(C.sum(axis=1))], s))

        ch, ce = syn.tissue_concentrations(64, "Celiac", "IIIa", r)
        A = syn.render_od(syn.slide_stains(r, 10), ch, ce)
        B = syn.render_od(syn.slide_stains(r, 10), ch, ce)
        pa, pb = stain.estimate_stain_profile(A, seed=seed), stain.estimate_stain_profile(B, seed=seed)
        swap_mae.append(np.abs(stain.normalize_stain(A, pa, pb) - B).mean())
    elapsed = time.perf_counter() - start
    print(f"single-stain angle max {max(angles):.2f} deg; self MAE max {max(self_mae):.4f}; "
          f"swap MAE max {max(swap_mae):.4f}; {elapsed:.1f} s")
    assert max(angles) < 5.0
    assert max(self_mae) < 0.02
    assert max(swap_mae) < 0.05
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 6. Aggregation oracle
# ---------------------------------------------------------------------------

def test_criterion_6_aggregation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, c = int(rng.integers(1, 40)), int(rng.choice([3, 4]))
        probs = rng.dirichlet(np.ones(c), size=n)
        totals = [0.0] * c
        for p in probs:
            for k in range(c):
                totals[k] += float(p[k])
        best = max(range(c), key=lambda k: (totals[k], -k))  # first maximum
        got = core.classify_slide(list(probs))
        assert got.label == best
        scale = float(rng.uniform(0.01, 100.0))
        assert core.classify_slide(list(probs * scale)).label == got.label


# ---------------------------------------------------------------------------
# 7. Metrics oracle
# ---------------------------------------------------------------------------

def test_criterion_7_metrics_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        truth = rng.integers(0, k, n).tolist()
        pred = rng.integers(0, k, n).tolist()
        rep = evaluation.metrics(evaluation.confusion_matrix(truth, pred, range(k)), n_bootstrap=0)
        correct = sum(t == p for t, p in zip(truth, pred))
        assert rep.accuracy == correct / n
        for c, cm in zip(range(k), rep.per_class):
            tp = sum(t == c and p == c for t, p in zip(truth, pred))
            fp = sum(t != c and p == c for t, p in zip(truth, pred))
            fn = sum(t == c and p != c for t, p in zip(truth, pred))
            assert cm.precision == (tp / (tp + fp) if tp + fp else None)
            assert cm.recall == (tp / (tp + fn) if tp + fn else None)
            assert cm.f1 == (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None)
        assert rep.micro_precision == rep.micro_recall == rep.accuracy


# ---------------------------------------------------------------------------
# 8. Filter end to end
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_filter_end_to_end():
    start = time.perf_counter()
    records, patches, blank, _ = syn.generate_synthetic_dataset(syn.filter_spec(seed=0))
    assert len(patches) == 1800
    model, hist = pf.train_autoencoder(patches, epochs=5, seed=0)
    mask, state, decision = pf.filter_patches(model, patches, seed=0)
    agreement = float(np.mean(mask == ~blank))
    elapsed = time.perf_counter() - start
    print(f"blank share {blank.mean():.3f}; agreement {agreement:.4f}; "
          f"AE loss {hist['initial_loss']:.4f} -> {hist['loss'][-1]:.4f}; {elapsed:.0f} s")
    assert agreement >= 0.99
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 9. Hierarchical end to end
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_hierarchical_end_to_end():
    start = time.perf_counter()
    spec = syn.SyntheticSpec(seed=0)
    assert sum(spec.n_slides.values()) == 20 and sum(spec.n_celiac.values()) == 40
    records, patches, _, _ = syn.generate_synthetic_dataset(spec)
    cfg = core.TrainConfig(epochs=10, seed=0)
    parent, _ = pipeline.train_model("parent", records, patches, cfg,
                                     pipeline.preprocess_spec("color_balance", 10.0), 128)
    target = pipeline.reference_profile(records, patches)
    child, _ = pipeline.train_model("child", records, patches, cfg,
                                    pipeline.preprocess_spec("stain_normalize", target=target), 128)
    flat, _ = pipeline.train_model("flat-cnn", records, patches, cfg,
                                   pipeline.preprocess_spec("none"), 128)
    res = pipeline.evaluate_hierarchy(parent, child, records, patches, "test", n_bootstrap=0)
    base = pipeline.evaluate_flat(flat, records, patches, "test", n_bootstrap=0)
    elapsed = time.perf_counter() - start
    print(f"parent patch acc {res['parent_patch'].accuracy:.4f}; "
          f"child patch acc {res['child_patch'].accuracy:.4f}; "
          f"slide hierarchical acc {res['hier_slide_accuracy']:.4f}; "
          f"macro F1 hierarchical {res['hier_patch_macro_f1']:.4f} vs flat "
          f"{base['flat_patch_macro_f1']:.4f}; {elapsed:.0f} s")
    assert res["parent_patch"].accuracy >= 0.95
    assert res["child_patch"].accuracy >= 0.95
    assert res["hier_slide_accuracy"] == 1.0
    assert res["hier_patch_macro_f1"] > base["flat_patch_macro_f1"]
    assert elapsed < 1800


# ---------------------------------------------------------------------------
# 10. Grad-CAM
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_gradcam_planted_quadrant():
    x, y, _ = syn.planted_quadrant_patches(240, seed=0)
    xt, yt, qt = syn.planted_quadrant_patches(100, seed=1)
    model = bundle.build_architecture("parent", input_size=128, class_names=["plain", "planted"])
    core.fit(model, x, y, core.TrainConfig(epochs=8, seed=0))
    idx = np.flatnonzero(yt == 1)[:50]
    assert len(idx) == 50
    hits = 0
    for i in idx:
        cam = core.grad_cam(model, xt[i], 1)
        assert cam.shape == (128, 128, 1)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        r, c = np.unravel_index(np.argmax(cam[..., 0]), cam.shape[:2])
        hits += int((r // 64) * 2 + (c // 64) == qt[i])
    print(f"argmax in planted quadrant: {hits}/50")
    assert hits >= 45


# ---------------------------------------------------------------------------
# 11. Serialization
# ---------------------------------------------------------------------------

def test_criterion_11_serialization(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random((4, 128, 128, 3)).astype(np.float32)
    for level in ("parent", "child", "flat_cnn", "flat_mlp"):
        m = bundle.build_architecture(level, input_size=128, seed=1)
        m.train_config["input_norm"] = core.input_stats(x)
        blob = bundle.to_bytes(m)
        path = bundle.save_model(m, tmp_path / f"{level}.hmic")
        back = bundle.load_model(path)
        assert path.read_bytes() == blob == bundle.to_bytes(back)
        assert np.array_equal(core.predict_proba(m, x), core.predict_proba(back, x))
    ae = pf.build_autoencoder(seed=2)
    back = pf.AutoencoderModel(bundle.from_bytes(bundle.to_bytes(ae.bundle)))
    assert np.array_equal(pf.encode_batch(x, ae), pf.encode_batch(x, back))

    records = [
        patching.PatchRecord("s1", "s1_0_0", 0, 0, "s1/0_0.png", "Celiac", "IIIb", "useful", "test"),
        patching.PatchRecord("s1", "s1_0_1", 0, 1, "s1/0_1.png", "Celiac", "IIIb", "not_useful"),
        patching.PatchRecord("s2", "s2_3_4", 3, 4, "s2/3_4.png", "Normal", None, None, "train"),
        patching.PatchRecord("s é", "s é_0_0", 0, 0, "s é/0_0.png"),
    ]
    path = patching.write_manifest(records, tmp_path / "m.jsonl")
    assert patching.read_manifest(path) == records
