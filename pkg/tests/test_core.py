import numpy as np
import pytest

from hmic import bundle, core
from hmic import tensor_nn as nn
from hmic.errors import (ArgumentError, ConfigurationError, DataError, DimensionError,
                         EmptySlideError)
from hmic.patching import PatchRecord


def tiny(level="parent", seed=0):
    return bundle.build_architecture(level, input_size=16, pools=(2, 2, 2), seed=seed)


def naive_forward(model, x):
    """Straight-line forward pass for one patch: loops over kernel offsets, reshape pooling."""
    a = np.asarray(x, dtype=np.float64)
    for spec in model.layers:
        kind = spec["type"]
        if kind == "conv":
            K = model.weights[spec["name"] + ".kernels"].astype(np.float64)
            b = model.weights[spec["name"] + ".bias"].astype(np.float64)
            h, w, _ = a.shape
            pad = np.zeros((h + 2, w + 2, a.shape[2]))
            pad[1:-1, 1:-1] = a
            out = np.zeros((h, w, K.shape[0]))
            for o in range(K.shape[0]):
                acc = np.full((h, w), b[o])
                for i in range(K.shape[1]):
                    for dy in range(3):
                        for dx in range(3):
                            acc += K[o, i, dy, dx] * pad[dy:dy + h, dx:dx + w, i]
                out[:, :, o] = acc
            a = np.maximum(out, 0) if spec["activation"] == "relu" else out
        elif kind == "maxpool":
            p = spec["window"]
            h, w, c = a.shape
            a = a.reshape(h // p, p, w // p, p, c).max(axis=(1, 3))
        elif kind == "flatten":
            a = a.reshape(-1)
        elif kind == "dense":
            W = model.weights[spec["name"] + ".weights"].astype(np.float64)
            z = W @ a + model.weights[spec["name"] + ".bias"]
            if spec["activation"] == "relu":
                a = np.maximum(z, 0)
            else:
                e = np.exp(z - z.max())
                a = e / e.sum()
    return a


def make_records(labels, split="train"):
    out = []
    for i, (p, c) in enumerate(labels):
        out.append(PatchRecord(f"s{i // 2}", f"p{i}", 0, i, f"x/{i}.png", p, c, None, split))
    return out


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    n = 60
    labels = np.arange(n) % 3
    x = rng.random((n, 16, 16, 3)).astype(np.float32) * 0.2
    for c in range(3):
        x[labels == c, :, :, c] += 0.7  # class = brightest channel
    recs = make_records([(["Normal", "EE", "Celiac"][l], "I" if l == 2 else None)
                         for l in labels])
    return recs, x, labels


class TestPatchAndSlide:
    def test_patch_labels(self):
        assert core.PatchPrediction.from_probs([0.2, 0.7, 0.1]).label == 1
        assert core.PatchPrediction.from_probs([0.4, 0.4, 0.2]).label == 0

    def test_classify_patch_matches_naive(self):
        m = tiny()
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.random((16, 16, 3)).astype(np.float32)
            pred = core.classify_patch(m, x)
            ref = naive_forward(m, x)
            assert np.max(np.abs(pred.probs - ref)) < 1e-5
            assert pred.label == int(np.argmax(pred.probs))
            assert abs(pred.probs.sum() - 1) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            core.classify_patch(tiny(), np.zeros((8, 8, 3)))

    def test_slide_worked_example(self):
        sp = core.classify_slide([[0.8, 0.1, 0.1], [0.4, 0.5, 0.1]], "s")
        assert sp.label == 0
        np.testing.assert_allclose(sp.aggregate, [0.6, 0.3, 0.1])
        assert sp.n_patches == 2

    def test_single_patch_slide(self):
        p = core.PatchPrediction.from_probs([0.1, 0.3, 0.6])
        assert core.classify_slide([p]).label == p.label

    def test_empty_slide(self):
        with pytest.raises(EmptySlideError):
            core.classify_slide([])

    def test_workers_do_not_change_output(self):
        m = tiny()
        x = np.random.default_rng(1).random((70, 16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(core.predict_proba(m, x, batch_size=8, workers=1),
                                      core.predict_proba(m, x, batch_size=8, workers=4))


class TestRecords:
    def test_child_uses_only_celiac(self):
        recs = make_records([("Normal", None), ("Celiac", "I"), ("Celiac", "IIIa"),
                             ("Celiac", "IIIb"), ("Celiac", "IIIc"), ("EE", None)])
        idx, lab = core.select_records(recs, "child")
        assert idx.tolist() == [1, 2, 3, 4] and lab.tolist() == [0, 1, 2, 3]

    def test_empty_class_named(self):
        recs = make_records([("Normal", None), ("EE", None)])
        with pytest.raises(DataError, match="Celiac"):
            core.select_records(recs, "parent")
        with pytest.raises(DataError, match="'I'"):
            core.select_records(recs, "child")

    def test_filtered_and_test_patches_skipped(self):
        recs = make_records([("Normal", None), ("EE", None), ("Celiac", "I"), ("Normal", None)])
        recs[3].cluster = "not_useful"
        recs.append(PatchRecord("t", "t0", 0, 0, "t/0.png", "EE", None, None, "test"))
        idx, _ = core.select_records(recs, "parent")
        assert idx.tolist() == [0, 1, 2]

    def test_flat_labels(self):
        recs = make_records([("Normal", None), ("EE", None), ("Celiac", "I"), ("Celiac", "IIIa"),
                             ("Celiac", "IIIb"), ("Celiac", "IIIc")])
        _, lab = core.select_records(recs, "flat")
        assert lab.tolist() == list(range(6))


class TestTraining:
    def test_initial_loss_near_uniform(self, data):
        recs, x, _ = data
        _, hist = core.train_level(tiny(), recs, x, core.TrainConfig(epochs=0))
        assert abs(hist["initial_loss"] - np.log(3)) < 0.05

    def test_learns_and_is_deterministic(self, data):
        recs, x, labels = data
        cfg = core.TrainConfig(epochs=15, seed=2, batch_size=8, alpha=3e-3)
        m1, h1 = core.train_level(tiny(seed=1), recs, x, cfg)
        m2, h2 = core.train_level(tiny(seed=1), recs, x, cfg)
        assert h1["loss"] == h2["loss"]
        assert bundle.to_bytes(m1) == bundle.to_bytes(m2)
        assert h1["loss"][-1] < h1["initial_loss"]
        acc = (core.predict_proba(m1, x).argmax(1) == labels).mean()
        assert acc > 0.9

    def test_early_stop(self, data):
        recs, x, _ = data
        cfg = core.TrainConfig(epochs=50, early_stop=True, patience=1, min_rel_improvement=0.5,
                               batch_size=16)
        _, hist = core.train_level(tiny(), recs, x, cfg)
        assert hist.get("stopped_early") and len(hist["loss"]) < 50

    def test_train_config_recorded(self, data):
        recs, x, _ = data
        m, _ = core.train_level(tiny(), recs, x, core.TrainConfig(epochs=1, seed=5))
        assert m.train_config["train"]["seed"] == 5
        assert m.train_config["train"]["alpha"] == 1e-3
        assert m.train_config["train"]["beta2"] == 0.999

    def test_input_standardization_stored_and_applied(self, data):
        recs, x, _ = data
        m, _ = core.train_level(tiny(), recs, x, core.TrainConfig(epochs=0))
        norm = m.train_config["input_norm"]
        np.testing.assert_allclose(norm["mean"], x.astype(np.float64).mean(axis=(0, 1, 2)), rtol=1e-6)
        np.testing.assert_allclose(norm["std"], x.astype(np.float64).std(axis=(0, 1, 2)), rtol=1e-6)
        z = (x[:1].astype(np.float64) - norm["mean"]) / norm["std"]
        np.testing.assert_allclose(core.predict_proba(m, x[:1])[0], naive_forward(m, z[0]),
                                   rtol=1e-4, atol=1e-6)
        back = bundle.from_bytes(bundle.to_bytes(m))
        assert back.train_config["input_norm"] == norm

    def test_constant_channel_std_floor(self):
        stats = core.input_stats(np.full((2, 4, 4, 3), 0.5))
        assert stats["std"] == [1e-3] * 3

    def test_child_without_celiac(self, data):
        recs = make_records([("Normal", None), ("EE", None)])
        with pytest.raises(DataError, match="class"):
            core.train_level(tiny("child"), recs, np.zeros((2, 16, 16, 3)), core.TrainConfig())


class TestHierarchy:
    def models(self):
        parent, child = tiny("parent"), tiny("child")
        for m in (parent, child):
            m.train_config["preprocess"] = {"mode": "none"}
        return parent, child

    def force(self, model, cls):
        model.weights["head.bias"][:] = -50
        model.weights["head.bias"][cls] = 50

    def test_normal_never_calls_child(self):
        parent, _ = self.models()
        self.force(parent, 0)
        res = core.hierarchical_predict(parent, None, np.zeros((3, 16, 16, 3)), "s")
        assert res.class_name == "Normal" and res.child is None

    def test_celiac_routes_to_child(self):
        parent, child = self.models()
        self.force(parent, 2)
        self.force(child, 2)
        res = core.hierarchical_predict(parent, child, np.zeros((3, 16, 16, 3)), "s")
        assert (res.class_name, res.child.class_name) == ("Celiac", "IIIb")
        assert res.to_dict()["child"]["class_name"] == "IIIb"

    def test_missing_child(self):
        parent, _ = self.models()
        self.force(parent, 2)
        with pytest.raises(ConfigurationError):
            core.hierarchical_predict(parent, None, np.zeros((1, 16, 16, 3)))

    def test_patch_gating(self):
        parent, child = self.models()
        self.force(parent, 2)
        self.force(child, 3)
        assert core.hierarchical_patch_labels(parent, child, np.zeros((2, 16, 16, 3))) == \
            ["Celiac/IIIc"] * 2

    def test_preprocessing_resizes(self):
        parent, _ = self.models()
        parent.train_config["preprocess"] = {"mode": "color_balance", "percent": 0}
        x = np.random.default_rng(0).random((2, 32, 32, 3))
        assert core.prepare_for_model(parent, x).shape == (2, 16, 16, 3)


class TestGradCam:
    @pytest.mark.filterwarnings("ignore:degenerate Grad-CAM")
    def test_shape_and_range(self):
        m = tiny()
        heats = [core.grad_cam(m, np.random.default_rng(s).random((16, 16, 3)), c)
                 for s in range(3) for c in range(3)]
        assert any(h.max() == 1.0 for h in heats)
        for heat in heats:
            assert heat.shape == (16, 16, 1)
            assert heat.min() >= 0 and heat.max() <= 1

    def test_full_size_heatmap(self):
        m = bundle.build_architecture("parent")
        heat, raw = core.grad_cam(m, np.random.default_rng(0).random((1000, 1000, 3)), 0,
                                  return_raw=True)
        assert heat.shape == (1000, 1000, 1) and raw.shape == (5, 5)

    def test_feature_layer_is_last_pool(self):
        m = tiny()
        assert m.layers[core.feature_layer_index(m)]["name"] == "pool3"

    def test_degenerate_map_warns(self):
        m = tiny()
        for k in m.weights:
            m.weights[k][:] = 0
        with pytest.warns(UserWarning, match="degenerate"):
            heat = core.grad_cam(m, np.ones((16, 16, 3)), 0)
        assert not heat.any()

    def test_bad_class(self):
        with pytest.raises(ArgumentError):
            core.grad_cam(tiny(), np.zeros((16, 16, 3)), 3)

    def test_weights_from_gradient_oracle(self):
        # Channel weights must equal finite-difference derivatives of the logit.
        m = tiny()
        x = np.random.default_rng(3).random((1, 16, 16, 3))
        params = {k: v.astype(np.float64) for k, v in m.weights.items()}
        k = core.feature_layer_index(m)
        logits, caches = nn.forward(m.layers, params, x)
        feat = caches[k + 1]["x"]

        def logit_from(f):
            out = f
            for spec in m.layers[k + 1:]:
                out, _ = nn.forward([spec], params, out)
            return float(out[0, 1])

        num = nn.finite_difference_gradient(logit_from, feat.copy())
        g_out = np.zeros_like(logits)
        g_out[0, 1] = 1
        _, g = nn.backward(m.layers, params, caches, g_out, stop_at=k)
        np.testing.assert_allclose(g, num, atol=1e-6)

    def test_bilinear_constant(self):
        np.testing.assert_allclose(core.bilinear_resize(np.full((3, 3), 2.0), 12, 9), 2.0)

    def test_bilinear_matches_pil(self):
        from PIL import Image
        m = np.random.default_rng(0).random((4, 4)).astype(np.float32)
        ref = np.asarray(Image.fromarray(m, mode="F").resize((16, 16), Image.BILINEAR))
        np.testing.assert_allclose(core.bilinear_resize(m, 16, 16), ref, atol=1e-5)
