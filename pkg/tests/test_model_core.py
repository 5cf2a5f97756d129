"""Forward-pass building blocks: patches, encoder, matching, heads."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_cosine, brute_greedy, brute_similarity
from protolab.backend import greedy_assign, greedy_assign_numpy
from protolab.errors import (
    ConfigurationError,
    DomainError,
    InvariantViolation,
    MatchInfeasibleError,
)
from protolab.model import (
    ClassHead,
    EncoderDescriptor,
    ModelConfig,
    MatchAssignment,
    PrototypeBank,
    classify,
    copy_model,
    cosine_table,
    encoder_forward,
    extract_patches,
    greedy_match_batch,
    group_of,
    init_model,
    model_arrays,
    models_equal,
    pipnet_forward,
    pipnet_pool,
    predict_batch,
    protovit_forward,
    set_array,
    sigmoid,
    softmax_rows,
)

from conftest import tiny_config, tiny_images


def random_bank(rng, d_p, t, d):
    tokens = rng.normal(size=(d_p, t, d))
    tokens /= np.linalg.norm(tokens, axis=-1, keepdims=True)
    return PrototypeBank(
        prototypes=tokens,
        token_count=t,
        class_assignment=np.array([i % 2 for i in range(d_p)], dtype=np.int64),
    )


class TestExtractPatches:
    def test_matches_manual_slicing(self):
        desc = EncoderDescriptor(channels=3, height=8, width=8, patch_h=4, patch_w=4, d_hidden=5, d_out=6)
        x = tiny_images(2, seed=5)
        got = extract_patches(x, desc)
        assert got.shape == (2, 4, 48)
        for b in range(2):
            k = 0
            for gy in range(2):
                for gx in range(2):
                    block = x[b, :, gy * 4 : gy * 4 + 4, gx * 4 : gx * 4 + 4]
                    assert np.array_equal(got[b, k], block.reshape(-1))
                    k += 1

    def test_row_major_patch_order(self):
        desc = EncoderDescriptor(channels=1, height=8, width=8, patch_h=4, patch_w=4, d_hidden=5, d_out=6)
        x = np.zeros((1, 1, 8, 8))
        x[0, 0, 0:4, 4:8] = 1.0  # second patch in row-major order
        got = extract_patches(x, desc)
        assert got[0, 1].sum() == 16.0
        assert got[0, 0].sum() == 0.0

    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigurationError):
            EncoderDescriptor(channels=3, height=10, width=10, patch_h=4, patch_w=4, d_hidden=5, d_out=6)


class TestEncoderForward:
    def test_output_shape_and_dtype(self, tiny_protovit):
        x = tiny_images(3)
        z, cache = encoder_forward(x, tiny_protovit.encoder)
        assert z.shape == (3, 4, 6)
        assert z.dtype == np.float64

    def test_mean_context_feeds_every_patch(self, tiny_protovit):
        """Perturbing one patch's pixels changes the latent of every patch."""
        x = tiny_images(1)
        z0, _ = encoder_forward(x, tiny_protovit.encoder)
        x2 = x.copy()
        x2[0, :, 0:4, 0:4] += 0.5  # top-left patch only
        z1, _ = encoder_forward(x2, tiny_protovit.encoder)
        # every patch latent moves, not only patch 0
        deltas = np.abs(z1 - z0).max(axis=-1)[0]
        assert (deltas > 0).all()

    def test_rejects_wrong_image_shape(self, tiny_protovit):
        bad = np.zeros((2, 3, 10, 10))
        with pytest.raises(ConfigurationError):
            encoder_forward(bad, tiny_protovit.encoder)

    def test_deterministic(self, tiny_protovit):
        x = tiny_images(2)
        z0, _ = encoder_forward(x, tiny_protovit.encoder)
        z1, _ = encoder_forward(x, tiny_protovit.encoder)
        assert np.array_equal(z0, z1)


class TestCosineTable:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(2, 5, 4))
        bank = random_bank(rng, 3, 2, 4)
        table = cosine_table(z, bank)
        assert table.shape == (2, 3, 2, 5)
        for b in range(2):
            for i in range(3):
                expect = brute_cosine(bank.prototypes[i], z[b])
                assert np.allclose(table[b, i], expect, atol=1e-12)

    def test_bounded_by_one(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(4, 6, 5))
        bank = random_bank(rng, 4, 3, 5)
        table = cosine_table(z, bank)
        assert (np.abs(table) <= 1 + 1e-12).all()

    def test_zero_norm_patch_rejected(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(1, 4, 3))
        z[0, 2] = 0.0
        bank = random_bank(rng, 2, 2, 3)
        with pytest.raises(DomainError):
            cosine_table(z, bank)


class TestGreedyMatching:
    @given(st.integers(0, 10_000))
    @settings(max_examples=120, deadline=None)
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(1, 4))
        n = int(rng.integers(t, 7))
        d = int(rng.integers(2, 5))
        z = rng.normal(size=(1, n, d))
        bank = random_bank(rng, int(rng.integers(1, 4)), t, d)
        assign, cos = greedy_match_batch(z, bank)
        for i in range(bank.prototypes.shape[0]):
            expect = brute_greedy(cos[0, i])
            assert np.array_equal(assign[0, i], expect)

    def test_duplicate_cosines_tie_break(self):
        # all-equal similarities: token 0 takes patch 0, token 1 takes patch 1
        cos = np.zeros((1, 1, 2, 3))
        assign = greedy_assign(cos)
        assert assign.shape == (1, 1, 2)
        assert list(assign[0, 0]) == [0, 1]

    def test_numpy_and_fast_backend_agree(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            t = int(rng.integers(1, 4))
            n = int(rng.integers(t, 8))
            cos = rng.normal(size=(2, 3, t, n))
            a = greedy_assign(cos)
            b = greedy_assign_numpy(cos)
            assert np.array_equal(a, b)

    def test_injective_assignment(self):
        rng = np.random.default_rng(0)
        cos = rng.normal(size=(1, 5, 3, 6))
        assign = greedy_assign(cos)
        for r in range(5):
            assert len(set(assign[0, r].tolist())) == 3

    def test_too_few_patches_rejected(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(1, 2, 4))
        bank = random_bank(rng, 2, 3, 4)  # 3 tokens, 2 patches
        with pytest.raises(MatchInfeasibleError):
            greedy_match_batch(z, bank)


class TestSimilarity:
    def test_similarity_is_sum_of_matched_cosines(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(1, 5, 4))
        bank = random_bank(rng, 3, 2, 4)
        assign, cos = greedy_match_batch(z, bank)
        from protolab.model import similarity_scores

        scores = similarity_scores(cos, assign)
        for i in range(3):
            expect = brute_similarity(cos[0, i], assign[0, i])
            assert scores[0, i] == pytest.approx(expect, abs=1e-12)

    def test_bounded_by_token_count(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(4, 6, 5))
        bank = random_bank(rng, 4, 3, 5)
        assign, cos = greedy_match_batch(z, bank)
        from protolab.model import similarity_scores

        scores = similarity_scores(cos, assign)
        assert (scores <= 3 + 1e-9).all()
        assert (scores >= -3 - 1e-9).all()


class TestHeads:
    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(3)
        s = softmax_rows(rng.normal(size=(6, 5)))
        assert np.allclose(s.sum(axis=-1), 1.0)
        assert (s > 0).all()

    def test_greedy_variant_head_softmax(self, tiny_protovit):
        x = tiny_images(2)
        probs, _ = protovit_forward(x, tiny_protovit)
        assert probs.shape == (2, 2)
        assert np.allclose(probs.sum(axis=-1), 1.0)

    def test_greedy_head_init_own_class_positive(self, tiny_protovit):
        w = tiny_protovit.head.weights
        assign = tiny_protovit.bank.class_assignment
        for i, cls in enumerate(assign):
            assert w[i, cls] == 1.0
            other = 1 - cls
            assert w[i, other] == -0.5

    def test_pooled_variant_probabilities_in_unit_interval(self, tiny_pipnet):
        x = tiny_images(3)
        pooled, cache = pipnet_forward(x, tiny_pipnet)
        assert pooled.shape == (3, 4)
        assert (pooled >= 0).all() and (pooled <= 1 + 1e-12).all()
        s = cache["s"]
        assert np.allclose(s.sum(axis=-1), 1.0)

    def test_pooled_head_rejects_negative_weights(self, tiny_pipnet):
        head = ClassHead(weights=np.array([[-0.1, 0.2]] * 4))
        with pytest.raises(InvariantViolation):
            classify(np.ones((1, 4)), head, "pipnet")

    def test_pooled_head_rejects_bias(self, tiny_pipnet):
        head = ClassHead(weights=np.ones((4, 2)), bias=np.zeros(2))
        with pytest.raises(InvariantViolation):
            classify(np.ones((1, 4)), head, "pipnet")

    def test_maxpool_takes_per_channel_maximum(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(2, 5, 4))
        s, pooled, amax = pipnet_pool(z)
        for b in range(2):
            for j in range(4):
                assert pooled[b, j] == pytest.approx(s[b, :, j].max(), abs=1e-15)
                assert s[b, amax[b, j], j] == pytest.approx(pooled[b, j], abs=1e-15)

    def test_sigmoid_is_stable_at_extremes(self):
        v = sigmoid(np.array([-1e4, 0.0, 1e4]))
        assert v[0] == pytest.approx(0.0, abs=1e-12)
        assert v[1] == pytest.approx(0.5)
        assert v[2] == pytest.approx(1.0, abs=1e-12)


class TestConceptBaseline:
    def test_forward_produces_probabilities(self, tiny_cbm):
        x = tiny_images(2)
        from protolab.model import LatentMap, cbm_forward

        z, _ = encoder_forward(x, tiny_cbm.encoder)
        concepts, scores = cbm_forward(LatentMap(patches=z[0]), tiny_cbm.concept, tiny_cbm.head)
        assert scores.shape == (2,)
        assert (concepts >= 0).all() and (concepts <= 1).all()

    def test_concepts_are_input_local(self, tiny_cbm):
        """Concept activations depend only on the input itself."""
        x = tiny_images(4)
        from protolab.model import LatentMap, cbm_forward

        z_all, _ = encoder_forward(x, tiny_cbm.encoder)
        z_one, _ = encoder_forward(x[2:3], tiny_cbm.encoder)
        c_all, _ = cbm_forward(LatentMap(patches=z_all[2]), tiny_cbm.concept, tiny_cbm.head)
        c_one, _ = cbm_forward(LatentMap(patches=z_one[0]), tiny_cbm.concept, tiny_cbm.head)
        assert np.allclose(c_all, c_one, atol=1e-12)

    def test_batch_scores_match_single(self, tiny_cbm):
        from protolab.model import class_scores_batch

        x = tiny_images(3)
        batch = class_scores_batch(x, tiny_cbm)
        assert batch.shape == (3, 2)
        one = class_scores_batch(x[1:2], tiny_cbm)
        assert np.allclose(batch[1], one[0], atol=1e-12)


class TestModelPlumbing:
    def test_groups_cover_every_array(self, tiny_protovit, tiny_pipnet, tiny_cbm):
        for m in (tiny_protovit, tiny_pipnet, tiny_cbm):
            for name in model_arrays(m):
                assert group_of(name) is not None

    def test_copy_is_deep_and_equal(self, tiny_pipnet):
        c = copy_model(tiny_pipnet)
        assert models_equal(c, tiny_pipnet)
        c.head.weights[0, 0] += 1.0
        assert not models_equal(c, tiny_pipnet)

    def test_set_array_roundtrip(self, tiny_protovit):
        arrays = model_arrays(tiny_protovit)
        name = "encoder.W1"
        new = arrays[name] * 2.0
        set_array(tiny_protovit, name, new)
        assert np.array_equal(model_arrays(tiny_protovit)[name], new)

    def test_init_is_seed_deterministic(self):
        cfg = tiny_config("pipnet")
        a = init_model(cfg, seed=7)
        b = init_model(cfg, seed=7)
        c = init_model(cfg, seed=8)
        assert models_equal(a, b)
        assert not models_equal(a, c)

    def test_unknown_variant_rejected(self):
        cfg = tiny_config("protovit")
        bad = ModelConfig(**{**cfg.__dict__, "variant": "mystery"})
        with pytest.raises(ConfigurationError):
            init_model(bad, seed=0)

    def test_prediction_tie_breaks_to_lowest_class(self, tiny_pipnet):
        # force identical class scores with equal head columns
        tiny_pipnet.head.weights[:] = 1.0
        x = tiny_images(3)
        preds = predict_batch(x, tiny_pipnet)
        assert (preds == 0).all()
