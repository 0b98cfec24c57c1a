import numpy as np
import pytest

from hmic import patching, pipeline, stain
from hmic import synthetic as syn
from hmic.errors import ArgumentError, DataError


def small_spec(**kw):
    base = dict(n_slides={"Normal": 1, "EE": 1}, n_celiac={"I": 1, "IIIa": 1, "IIIb": 1, "IIIc": 1},
                slide_size=256, tile=128)
    base.update(kw)
    return syn.SyntheticSpec(**base)


class TestSpec:
    def test_single_slide_no_blanks(self):
        spec = syn.SyntheticSpec(n_slides={"EE": 1}, n_celiac={}, slide_size=256)
        recs, patches, blank, slides = syn.generate_synthetic_dataset(spec)
        assert len(slides) == 1 and len(recs) == 4
        assert not blank.any()
        assert all(r.label_parent == "EE" for r in recs)

    def test_all_blank_rejected(self):
        with pytest.raises(ArgumentError):
            small_spec(blank_fraction=1.0).validate()

    @pytest.mark.parametrize("kw", [{"slide_size": 200}, {"n_slides": {"Cat": 1}},
                                    {"n_celiac": {"IV": 1}}, {"blank_fraction": -0.1},
                                    {"n_slides": {}, "n_celiac": {}}])
    def test_invalid(self, kw):
        with pytest.raises(ArgumentError):
            small_spec(**kw).validate()

    def test_blank_fraction_per_slide(self):
        recs, _, blank, slides = syn.generate_synthetic_dataset(small_spec(blank_fraction=0.5))
        for s in slides:
            assert s.blank.sum() == 2

    def test_filter_spec_size(self):
        spec = syn.filter_spec()
        n = (sum(spec.n_slides.values()) + sum(spec.n_celiac.values())) * spec.tiles_per_slide
        assert n == 1800


class TestDeterminism:
    def test_same_seed_same_pixels(self):
        a = syn.generate_synthetic_dataset(small_spec(seed=3))[1]
        b = syn.generate_synthetic_dataset(small_spec(seed=3))[1]
        assert a.tobytes() == b.tobytes()

    def test_seed_matters(self):
        a = syn.generate_synthetic_dataset(small_spec(seed=3))[1]
        b = syn.generate_synthetic_dataset(small_spec(seed=4))[1]
        assert not np.array_equal(a, b)

    def test_patches_quantized_like_png(self, tmp_path):
        recs, patches, _, _ = syn.generate_synthetic_dataset(small_spec(), tmp_path, True)
        back = patching.load_patches(patching.read_manifest(tmp_path / "patches" / "manifest.jsonl"),
                                     tmp_path / "patches")
        assert np.array_equal(back, patches)


class TestTextures:
    def test_child_density_monotone(self):
        freqs = [syn.texture_params("Celiac", g)[2] for g in ("I", "IIIa", "IIIb", "IIIc")]
        assert freqs == sorted(freqs) and len(set(freqs)) == 4

    def test_child_orientation_signature(self):
        # gradient energy along x vs y follows the grade's fibre angle
        rng = np.random.default_rng(0)
        ratio = {}
        for g in ("I", "IIIb"):
            ch, _ = syn.tissue_concentrations(128, "Celiac", g, rng, noise=0)
            ratio[g] = np.abs(np.diff(ch, axis=1)).mean() / np.abs(np.diff(ch, axis=0)).mean()
        assert ratio["I"] > 3 and ratio["IIIb"] < 1 / 3

    def test_parent_hue_margin(self):
        # Celiac tissue is hematoxylin-heavy relative to Normal and EE
        h = {p: syn.texture_params(p, "I")[0] / syn.texture_params(p, "I")[1]
             for p in ("Normal", "EE", "Celiac")}
        assert h["Celiac"] > 2 * max(h["Normal"], h["EE"])

    def test_planted_quadrants(self):
        x, y, q = syn.planted_quadrant_patches(8, seed=0)
        assert y.tolist() == [0, 1] * 4
        assert np.all(q[y == 0] == -1) and np.all((q[y == 1] >= 0) & (q[y == 1] <= 3))


class TestPipelineHelpers:
    def test_slide_groups_skip_not_useful(self):
        recs, *_ = syn.generate_synthetic_dataset(small_spec())
        recs[0].cluster = "not_useful"
        groups = pipeline.slide_groups(recs)
        assert list(groups) == sorted(groups)
        assert 0 not in groups[recs[0].slide_id]
        assert sum(len(v) for v in groups.values()) == len(recs) - 1

    def test_reference_profile_deterministic(self):
        recs, patches, _, _ = syn.generate_synthetic_dataset(small_spec())
        a = pipeline.reference_profile(recs, patches)
        b = pipeline.reference_profile(recs, patches)
        assert np.array_equal(a.stain_matrix, b.stain_matrix)
        first = min((i for i, r in enumerate(recs) if r.label_parent == "Celiac" and r.split == "train"),
                    key=lambda i: (recs[i].slide_id, recs[i].row, recs[i].col))
        direct = stain.estimate_stain_profile(patches[first])
        assert np.array_equal(a.stain_matrix, direct.stain_matrix)

    def test_reference_profile_without_celiac(self):
        recs, patches, _, _ = syn.generate_synthetic_dataset(small_spec(n_celiac={}))
        with pytest.raises(DataError, match="Celiac"):
            pipeline.reference_profile(recs, patches)

    def test_preprocess_spec(self):
        assert pipeline.preprocess_spec("none") == {"mode": "none"}
        assert pipeline.preprocess_spec("color_balance", 25)["percent"] == 25.0
        with pytest.raises(ArgumentError):
            pipeline.preprocess_spec("stain_normalize")
        with pytest.raises(ArgumentError):
            pipeline.preprocess_spec("sepia")

    def test_unknown_level(self):
        recs, patches, _, _ = syn.generate_synthetic_dataset(small_spec())
        from hmic import core
        with pytest.raises(ArgumentError):
            pipeline.train_model("grandchild", recs, patches, core.TrainConfig(epochs=0),
                                 {"mode": "none"}, 128)
