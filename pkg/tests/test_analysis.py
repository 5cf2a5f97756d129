"""Explanation artifacts: local/global analyses, heatmaps, rendering."""
import numpy as np
import pytest

from protolab.analysis import (
    AnalysisArtifact,
    global_analysis,
    heatmap_to_bbox,
    local_analysis,
    prototype_heatmap,
    rects_overlap,
    render_global,
    render_local,
)
from protolab.errors import ConfigurationError
from protolab.model import (
    class_scores_batch,
    encoder_forward,
    greedy_match_batch,
    init_model,
    pipnet_forward,
    similarity_scores,
)

from conftest import tiny16_config, tiny_dataset


def _pipnet(seed=0):
    return init_model(tiny16_config("pipnet"), seed=seed)


def _protovit(seed=0):
    return init_model(tiny16_config("protovit"), seed=seed)


class TestRectsOverlap:
    @pytest.mark.parametrize(
        "a, b, expected",
        [
            ((0, 0, 8, 8), (4, 4, 12, 12), True),
            ((0, 0, 8, 8), (8, 0, 16, 8), False),  # half-open: edge touch is no overlap
            ((0, 0, 8, 8), (0, 8, 8, 16), False),
            ((0, 0, 8, 8), (7, 7, 8, 8), True),
            ((0, 0, 16, 16), (4, 4, 8, 8), True),  # containment
        ],
    )
    def test_half_open_rectangle_semantics(self, a, b, expected):
        assert rects_overlap(a, b) is expected
        assert rects_overlap(b, a) is expected


class TestLocalAnalysis:
    def test_contribution_sum_plus_bias_equals_class_score(self):
        ds = tiny_dataset(3, seed=1)
        for model in (_pipnet(), _protovit()):
            for sample in ds.samples[:3]:
                art = local_analysis(model, sample, k=3)
                total = art.meta["contribution_sum"] + art.meta["bias"]
                assert total == pytest.approx(art.meta["class_score"], abs=1e-5)

    def test_predicted_class_matches_model_prediction(self):
        ds = tiny_dataset(3, seed=1)
        model = _pipnet()
        for sample in ds.samples:
            art = local_analysis(model, sample, k=2)
            scores = class_scores_batch(sample.pixels[None], model)[0]
            assert art.meta["predicted_class"] == int(np.argmax(scores))

    def test_orderings_are_sorted_and_k_limited(self):
        ds = tiny_dataset(2, seed=1)
        model = _pipnet()
        art = local_analysis(model, ds.samples[0], k=3)
        assert {i["ordering"] for i in art.items} == {"contribution", "activation"}
        for group in art.items:
            entries = group["entries"]
            assert len(entries) == 3
            scores = [e["score"] for e in entries]
            assert scores == sorted(scores, reverse=True)
            assert [e["rank"] for e in entries] == [0, 1, 2]

    def test_contribution_equals_activation_times_head_weight(self):
        ds = tiny_dataset(2, seed=1)
        model = _pipnet()
        art = local_analysis(model, ds.samples[0], k=4)
        contrib = next(i for i in art.items if i["ordering"] == "contribution")
        for e in contrib["entries"]:
            assert e["score"] == pytest.approx(e["activation"] * e["head_weight"], abs=1e-9)

    def test_pipnet_patch_is_the_argmax_patch(self):
        ds = tiny_dataset(2, seed=1)
        model = _pipnet()
        sample = ds.samples[0]
        art = local_analysis(model, sample, k=4)
        _, cache = pipnet_forward(sample.pixels[None], model)
        for group in art.items:
            for e in group["entries"]:
                assert e["patches"] == [int(cache["amax"][0, e["prototype"]])]

    def test_protovit_patches_are_the_greedy_assignment(self):
        ds = tiny_dataset(2, seed=1)
        model = _protovit()
        sample = ds.samples[0]
        art = local_analysis(model, sample, k=3)
        z, _ = encoder_forward(sample.pixels[None], model.encoder)
        assign, _ = greedy_match_batch(z, model.bank)
        for group in art.items:
            for e in group["entries"]:
                assert e["patches"] == [int(j) for j in assign[0, e["prototype"]]]

    def test_pixel_boxes_lie_inside_the_image(self):
        ds = tiny_dataset(2, seed=1)
        for model in (_pipnet(), _protovit()):
            art = local_analysis(model, ds.samples[0], k=3)
            for group in art.items:
                for e in group["entries"]:
                    for y0, x0, y1, x1 in e["pixel_boxes"]:
                        assert 0 <= y0 < y1 <= 16 and 0 <= x0 < x1 <= 16

    def test_rejects_cbm(self):
        ds = tiny_dataset(1, seed=1)
        model = init_model(tiny16_config("cbm"), seed=0)
        with pytest.raises(ConfigurationError, match="no local analysis"):
            local_analysis(model, ds.samples[0])


class TestGlobalAnalysis:
    def test_pipnet_entries_match_per_patch_distributions(self):
        ds = tiny_dataset(3, seed=2)
        model = _pipnet()
        art = global_analysis(model, ds, k=4)
        _, cache = pipnet_forward(ds.images(), model)
        s = cache["s"]
        for e in art.items:
            i, b, (j,) = e["prototype"], e["sample_index"], e["patches"]
            assert e["score"] == pytest.approx(float(s[b, j, i]))
        d_p = model.head.weights.shape[0]
        assert len(art.items) == d_p * 4

    def test_pipnet_rank_zero_is_the_global_maximum(self):
        ds = tiny_dataset(3, seed=2)
        model = _pipnet()
        art = global_analysis(model, ds, k=2)
        _, cache = pipnet_forward(ds.images(), model)
        s = cache["s"]
        for e in art.items:
            if e["rank"] == 0:
                assert e["score"] == pytest.approx(float(s[:, :, e["prototype"]].max()))

    def test_protovit_entries_rank_samples_by_summed_similarity(self):
        ds = tiny_dataset(3, seed=2)
        model = _protovit()
        art = global_analysis(model, ds, k=3)
        z, _ = encoder_forward(ds.images(), model.encoder)
        assign, cos = greedy_match_batch(z, model.bank)
        scores = similarity_scores(cos, assign)
        for e in art.items:
            assert e["score"] == pytest.approx(float(scores[e["sample_index"], e["prototype"]]))
            if e["rank"] == 0:
                assert e["score"] == pytest.approx(float(scores[:, e["prototype"]].max()))

    def test_every_pixel_box_comes_from_a_dataset_sample(self):
        ds = tiny_dataset(3, seed=2)
        model = _pipnet()
        art = global_analysis(model, ds, k=2)
        for e in art.items:
            assert 0 <= e["sample_index"] < len(ds)
            assert ds.samples[e["sample_index"]].sample_id == e["sample_id"]

    def test_rejects_cbm(self):
        ds = tiny_dataset(1, seed=2)
        model = init_model(tiny16_config("cbm"), seed=0)
        with pytest.raises(ConfigurationError, match="no global analysis"):
            global_analysis(model, ds)


class TestHeatmaps:
    def test_pipnet_heatmap_is_the_channel_share_on_the_grid(self):
        ds = tiny_dataset(1, seed=3)
        model = _pipnet()
        heat = prototype_heatmap(model, ds.samples[0], proto=0)
        assert heat.shape == (2, 2)
        from protolab.model import pipnet_pool

        z, _ = encoder_forward(ds.samples[0].pixels[None], model.encoder)
        s, _, _ = pipnet_pool(z)
        assert np.allclose(heat.ravel(), s[0, :, 0])

    def test_protovit_heatmap_is_max_token_cosine(self):
        ds = tiny_dataset(1, seed=3)
        model = _protovit()
        heat = prototype_heatmap(model, ds.samples[0], proto=1)
        assert heat.shape == (2, 2)
        assert np.all(heat <= 1.0 + 1e-9) and np.all(heat >= -1.0 - 1e-9)

    def test_bbox_covers_thresholded_cells(self):
        heat = np.array([[0.1, 0.9], [0.2, 0.95]])
        box = heatmap_to_bbox(heat, patch_h=8, patch_w=8, threshold=0.5)
        assert box == (0, 8, 16, 16)

    def test_bbox_of_uniform_heat_is_the_full_grid(self):
        heat = np.ones((2, 3))
        assert heatmap_to_bbox(heat, 4, 4) == (0, 0, 8, 12)

    def test_bbox_single_peak_is_one_patch(self):
        heat = np.zeros((3, 3))
        heat[1, 2] = 1.0
        assert heatmap_to_bbox(heat, 5, 5, threshold=0.5) == (5, 10, 10, 15)

    def test_bbox_requires_a_grid(self):
        with pytest.raises(ConfigurationError, match="2-d"):
            heatmap_to_bbox(np.zeros(4), 4, 4)

    def test_bbox_handles_all_negative_heat(self):
        heat = np.full((2, 2), -1.0)
        heat[0, 1] = -0.5
        assert heatmap_to_bbox(heat, 4, 4) == (0, 4, 4, 8)


class TestArtifactSerialization:
    def test_artifact_round_trips_through_json(self):
        ds = tiny_dataset(2, seed=4)
        model = _pipnet()
        art = global_analysis(model, ds, k=2)
        clone = AnalysisArtifact.from_json(art.to_json())
        assert clone.kind == art.kind
        assert clone.items == art.items
        assert clone.meta == art.meta

    def test_rendering_writes_png_files(self, tmp_path):
        ds = tiny_dataset(2, seed=4)
        model = _pipnet()
        g = global_analysis(model, ds, k=2)
        l = local_analysis(model, ds.samples[0], k=2)
        gpath = tmp_path / "global.png"
        lpath = tmp_path / "local.png"
        render_global(g, ds, str(gpath))
        render_local(l, ds.samples[0], str(lpath))
        assert gpath.stat().st_size > 0
        assert lpath.stat().st_size > 0
        assert gpath.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_render_functions_check_artifact_kind(self, tmp_path):
        ds = tiny_dataset(2, seed=4)
        model = _pipnet()
        g = global_analysis(model, ds, k=2)
        l = local_analysis(model, ds.samples[0], k=2)
        with pytest.raises(ConfigurationError, match="expected a global"):
            render_global(l, ds, str(tmp_path / "x.png"))
        with pytest.raises(ConfigurationError, match="expected a local"):
            render_local(g, ds.samples[0], str(tmp_path / "y.png"))

    def test_rerendering_does_not_change_the_artifact(self, tmp_path):
        ds = tiny_dataset(2, seed=4)
        model = _pipnet()
        art = local_analysis(model, ds.samples[0], k=2)
        before = art.to_json()
        render_local(art, ds.samples[0], str(tmp_path / "a.png"))
        render_local(art, ds.samples[0], str(tmp_path / "b.png"))
        assert art.to_json() == before
