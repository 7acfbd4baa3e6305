"""Prompt templates, the latent completion oracle and dataset completion."""

import dataclasses

import numpy as np
import pytest

from mmfedsim.completion import (
    LatentOracleProvider,
    NullProvider,
    OracleConfig,
    build_i2t_text,
    build_t2i_prompt,
    complete_dataset,
    decoder_map,
    nearest_prototype_label,
    oracle_image_to_text,
    oracle_text_to_image,
)
from mmfedsim.datagen import (
    DatasetSpec,
    apply_missing,
    class_prototypes,
    gen_dataset,
    placeholder_text,
    render_map,
)


class TestPromptTemplates:
    def test_t2i_bird_example(self):
        got = build_t2i_prompt("common yellowthroat", "bird", "original text")
        assert got == "A photo of common yellowthroat, a kind of bird, original text."

    def test_t2i_flower_example(self):
        got = build_t2i_prompt("bird of paradise", "flower", "original text")
        assert got == "A photo of bird of paradise, a kind of flower, original text."

    def test_t2i_empty_description(self):
        assert build_t2i_prompt("X", "Y", "") == "A photo of X, a kind of Y, ."

    def test_i2t_bird_row(self):
        got = build_i2t_text(
            "bird", "black", "yellow",
            "yellow and black bird perched on a cattails plant in a marsh", "bird",
        )
        assert got == (
            "A bird with black wings and yellow belly. "
            "yellow and black bird perched on a cattails plant in a marsh"
        )

    def test_i2t_flower_row(self):
        got = build_i2t_text(
            "flower", "yellow", "yellow",
            "yellow flower with water droplets on it in a garden", "flower",
        )
        assert got == (
            "A flower with yellow petals and yellow pistil. "
            "yellow flower with water droplets on it in a garden"
        )

    def test_i2t_empty_caption_keeps_template(self):
        assert build_i2t_text("a", "b", "c", "", "bird") == "A a with b wings and c belly. "

    def test_i2t_unknown_domain_errors(self):
        with pytest.raises(ValueError, match="unknown domain"):
            build_i2t_text("a", "b", "c", "d", "tree")


@pytest.fixture
def masked_pair():
    spec = DatasetSpec(dataset_seed=31)
    train, _ = gen_dataset(spec, 40, 5)
    masked = apply_missing(train, 1.0, 0.5, seed=7)
    no_img = next(r for r in masked if not r.image_present)
    no_txt = next(r for r in masked if not r.text_present)
    return spec, no_img, no_txt


class TestOracleOps:
    def test_decoder_inverts_render_map(self):
        spec = DatasetSpec(dataset_seed=31)
        ident = decoder_map(spec) @ render_map(spec)
        np.testing.assert_allclose(ident, np.eye(spec.latent_dim), atol=1e-10)

    def test_noise_free_t2i_matches_class_render(self):
        spec = DatasetSpec(
            dataset_seed=17, token_dropout_prob=0.0, intra_class_sigma=0.0,
            image_noise_sigma=0.0,
        )
        train, _ = gen_dataset(spec, 30, 5)
        masked = apply_missing(train, 1.0, 1.0, seed=1)  # all lose image
        cfg = OracleConfig(gen_image_sigma=0.0)
        w = render_map(spec)
        protos = class_prototypes(spec)
        # bound: ||W (u_bin - z_c)|| <= ||W||_2 * sqrt(d) * half_bin_width
        spectral = np.linalg.norm(w, ord=2)
        bound = spectral * np.sqrt(spec.latent_dim) * spec.bin_width / 2.0
        for r in masked[:10]:
            img = oracle_text_to_image(r, spec, cfg, seed=3)
            clean = w @ protos[r.label]
            assert np.linalg.norm(img - clean) <= bound + 1e-12

    def test_t2i_placeholder_only_text_decodes_to_zero_latent(self, masked_pair):
        spec, no_img, _ = masked_pair
        rec = dataclasses.replace(no_img, text=placeholder_text(spec))
        img = oracle_text_to_image(rec, spec, OracleConfig(gen_image_sigma=0.0), seed=5)
        np.testing.assert_allclose(img, render_map(spec) @ np.zeros(spec.latent_dim))

    def test_t2i_deterministic_given_seed(self, masked_pair):
        spec, no_img, _ = masked_pair
        cfg = OracleConfig(gen_image_sigma=0.5)
        a = oracle_text_to_image(no_img, spec, cfg, seed=9)
        b = oracle_text_to_image(no_img, spec, cfg, seed=9)
        np.testing.assert_array_equal(a, b)
        c = oracle_text_to_image(no_img, spec, cfg, seed=10)
        assert not np.array_equal(a, c)

    def test_t2i_errors_when_image_present(self, masked_pair):
        spec, _, no_txt = masked_pair
        with pytest.raises(ValueError, match="already present"):
            oracle_text_to_image(no_txt, spec, OracleConfig(), seed=0)

    def test_i2t_noise_free_roundtrip(self):
        spec = DatasetSpec(
            dataset_seed=17, token_dropout_prob=0.0, intra_class_sigma=0.0,
            image_noise_sigma=0.0,
        )
        train, _ = gen_dataset(spec, 30, 5)
        expected = {r.label: r.text.copy() for r in train}
        masked = apply_missing(train, 1.0, 0.0, seed=1)  # all lose text
        cfg = OracleConfig(token_error_prob=0.0)
        for r in masked[:10]:
            tokens = oracle_image_to_text(r, spec, cfg, seed=2)
            np.testing.assert_array_equal(tokens, expected[r.label])

    def test_i2t_full_corruption_stays_in_dimension(self, masked_pair):
        spec, _, no_txt = masked_pair
        cfg = OracleConfig(token_error_prob=1.0)
        tokens = oracle_image_to_text(no_txt, spec, cfg, seed=11)
        dims = np.asarray(tokens) // spec.bins_per_dim
        np.testing.assert_array_equal(dims, np.arange(spec.latent_dim))

    def test_i2t_deterministic_given_seed(self, masked_pair):
        spec, _, no_txt = masked_pair
        cfg = OracleConfig(token_error_prob=0.5)
        a = oracle_image_to_text(no_txt, spec, cfg, seed=4)
        b = oracle_image_to_text(no_txt, spec, cfg, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_i2t_errors_when_text_present(self, masked_pair):
        spec, no_img, _ = masked_pair
        with pytest.raises(ValueError, match="already present"):
            oracle_image_to_text(no_img, spec, OracleConfig(), seed=0)


class TestCompleteDataset:
    def test_counts_and_flags(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 1000, 5)
        masked = apply_missing(train, 0.3, 0.5, seed=2)
        provider = LatentOracleProvider(OracleConfig(), seed=6)
        done = complete_dataset(masked, provider, spec)
        assert len(done) == 1000
        assert all(r.complete for r in done)
        synthetic = sum(int(r.image_synthetic) + int(r.text_synthetic) for r in done)
        assert synthetic == 300

    def test_idempotent_on_complete_input(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 25, 5)
        provider = LatentOracleProvider(OracleConfig(), seed=6)
        done = complete_dataset(train, provider, spec)
        assert done == train

    def test_labels_preserved(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 60, 5)
        masked = apply_missing(train, 0.5, 0.5, seed=2)
        done = complete_dataset(masked, LatentOracleProvider(OracleConfig(), seed=1), spec)
        assert [r.label for r in done] == [r.label for r in masked]

    def test_provider_never_sees_missing_modality(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 20, 5)
        masked = apply_missing(train, 1.0, 0.5, seed=2)

        class SpyProvider(NullProvider):
            def complete_image(self, record, spec):
                assert record.image is None
                return super().complete_image(record, spec)

            def complete_text(self, record, spec):
                assert record.text is None
                return super().complete_text(record, spec)

        complete_dataset(masked, SpyProvider(), spec)

    def test_null_provider_produces_placeholder_content(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 20, 5)
        masked = apply_missing(train, 1.0, 0.0, seed=2)  # all lose text
        done = complete_dataset(masked, NullProvider(), spec)
        assert all(r.text_synthetic and r.text_present for r in done)
        for r in done:
            np.testing.assert_array_equal(r.text, placeholder_text(spec))

    def test_nearest_prototype_recovery_at_low_noise(self):
        spec = DatasetSpec(dataset_seed=34)
        train, _ = gen_dataset(spec, 400, 5)
        masked = apply_missing(train, 1.0, 0.5, seed=3)
        provider = LatentOracleProvider(OracleConfig(gen_image_sigma=0.1), seed=8)
        done = complete_dataset(masked, provider, spec)
        dec = decoder_map(spec)
        synth = [r for r in done if r.image_synthetic]
        hits = sum(nearest_prototype_label(spec, dec @ r.image) == r.label for r in synth)
        assert hits / len(synth) >= 0.9

    def test_no_label_prompt_variant_runs(self):
        spec = DatasetSpec(dataset_seed=33)
        train, _ = gen_dataset(spec, 10, 5)
        masked = apply_missing(train, 1.0, 0.5, seed=2)
        provider = LatentOracleProvider(OracleConfig(), seed=6, use_label_prompts=False)
        done = complete_dataset(masked, provider, spec)
        assert all(r.complete for r in done)
