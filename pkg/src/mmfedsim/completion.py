"""Missing-modality completion.

A :class:`CompletionProvider` turns a one-modality record into the missing
image or token sequence. The shipped providers are a latent-space oracle
that inverts the dataset's render map (standing in for a real generative
service) and a null provider that just returns dummy placeholders.

Prompt strings are built and logged even though the oracle consumes
structured records: the templates are the wire format a real image
generator / captioning client would receive, so they are kept byte-exact
and covered by tests.
"""

from __future__ import annotations

import abc
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .datagen import (
    DatasetSpec,
    MultiModalRecord,
    class_prototypes,
    describe_tokens,
    placeholder_image,
    placeholder_text,
    render_map,
)
from .seeding import rng_for

logger = logging.getLogger(__name__)

_STREAM_GEN_IMAGE = "oracle-gen-image"
_STREAM_GEN_TEXT = "oracle-gen-text"

_decoder_cache: dict[tuple, np.ndarray] = {}


def decoder_map(spec: DatasetSpec) -> np.ndarray:
    """Pseudo-inverse of the dataset render map; decoder_map @ render_map
    is the identity on the latent space up to numerical tolerance."""
    key = (spec.dataset_seed, spec.grid_side, spec.latent_dim)
    if key not in _decoder_cache:
        _decoder_cache[key] = np.linalg.pinv(render_map(spec))
    return _decoder_cache[key]


def build_t2i_prompt(fine_label: str, class_label: str, description: str) -> str:
    """Coarse-to-fine prompt for image generation from text."""
    return f"A photo of {fine_label}, a kind of {class_label}, {description}."


def build_i2t_text(answer1: str, answer2: str, answer3: str, caption: str, domain: str) -> str:
    """Synthetic text assembled from three attribute answers plus a caption."""
    if domain == "bird":
        return f"A {answer1} with {answer2} wings and {answer3} belly. {caption}"
    if domain == "flower":
        return f"A {answer1} with {answer2} petals and {answer3} pistil. {caption}"
    raise ValueError(f"unknown domain {domain!r} (expected 'bird' or 'flower')")


@dataclass
class OracleConfig:
    """Fidelity knobs for the synthetic completion oracle."""

    gen_image_sigma: float = 0.5
    token_error_prob: float = 0.05
    prompt_domain: str = "bird"

    def __post_init__(self):
        if self.gen_image_sigma < 0:
            raise ValueError("gen_image_sigma must be non-negative")
        if not 0.0 <= self.token_error_prob <= 1.0:
            raise ValueError("token_error_prob must be in [0, 1]")
        if self.prompt_domain not in ("bird", "flower"):
            raise ValueError("prompt_domain must be 'bird' or 'flower'")


class CompletionProvider(abc.ABC):
    """Cross-modal generation interface.

    Implementations must never read the modality they are asked to produce
    (callers strip it from the record view); reading the label metadata is
    allowed.
    """

    @abc.abstractmethod
    def complete_image(self, record: MultiModalRecord, spec: DatasetSpec) -> np.ndarray:
        """Generate the missing image from the record's text."""

    @abc.abstractmethod
    def complete_text(self, record: MultiModalRecord, spec: DatasetSpec) -> np.ndarray:
        """Generate the missing token sequence from the record's image."""


def oracle_text_to_image(
    record: MultiModalRecord,
    spec: DatasetSpec,
    oracle_cfg: OracleConfig,
    seed: int,
) -> np.ndarray:
    """Decode the tokens to a bin-center latent and re-render it.

    Placeholder tokens decode to 0 in their dimension. Deterministic given
    (seed, record id).
    """
    if record.image is not None:
        raise ValueError(f"record {record.id}: image already present")
    if record.text is None:
        raise ValueError(f"record {record.id}: no text to complete from")
    latent = spec.latent_from_tokens(record.text)
    image = render_map(spec) @ latent
    if oracle_cfg.gen_image_sigma > 0:
        rng = rng_for(seed, _STREAM_GEN_IMAGE, record.id)
        image = image + oracle_cfg.gen_image_sigma * rng.standard_normal(spec.image_size)
    return image


def oracle_image_to_text(
    record: MultiModalRecord,
    spec: DatasetSpec,
    oracle_cfg: OracleConfig,
    seed: int,
) -> np.ndarray:
    """Invert the render map and quantize the recovered latent into tokens.

    Each token is independently replaced by a uniformly random token of the
    same attribute dimension with probability token_error_prob.
    """
    if record.text is not None:
        raise ValueError(f"record {record.id}: text already present")
    if record.image is None:
        raise ValueError(f"record {record.id}: no image to complete from")
    latent = decoder_map(spec) @ record.image
    tokens = spec.tokens_from_latent(latent)
    if oracle_cfg.token_error_prob > 0:
        rng = rng_for(seed, _STREAM_GEN_TEXT, record.id)
        corrupt = rng.random(spec.latent_dim) < oracle_cfg.token_error_prob
        random_bins = rng.integers(spec.bins_per_dim, size=spec.latent_dim)
        dims = np.arange(spec.latent_dim, dtype=np.int64)
        tokens = np.where(corrupt, dims * spec.bins_per_dim + random_bins, tokens)
    return tokens.astype(np.int64)


class LatentOracleProvider(CompletionProvider):
    """Synthetic stand-in for a pre-trained cross-modal generator.

    Holds only immutable decoded matrices, so concurrent read-only use over
    distinct records is safe. When ``use_label_prompts`` is False the logged
    prompts carry generic slot fillers instead of label names (the
    leakage-sensitivity variant); the generated content is label-free either
    way, it only ever reads the present modality.
    """

    def __init__(self, oracle_cfg: OracleConfig, seed: int, use_label_prompts: bool = True):
        self.cfg = oracle_cfg
        self.seed = seed
        self.use_label_prompts = use_label_prompts

    def _prompt_labels(self, record: MultiModalRecord, spec: DatasetSpec) -> tuple[str, str]:
        if self.use_label_prompts:
            return spec.fine_labels[record.label], spec.class_names[record.label]
        return "unknown", "unknown"

    def complete_image(self, record, spec):
        fine, coarse = self._prompt_labels(record, spec)
        prompt = build_t2i_prompt(fine, coarse, record.description)
        logger.debug("t2i prompt for record %d: %s", record.id, prompt)
        return oracle_text_to_image(record, spec, self.cfg, self.seed)

    def complete_text(self, record, spec):
        tokens = oracle_image_to_text(record, spec, self.cfg, self.seed)
        fine, _ = self._prompt_labels(record, spec)
        text = build_i2t_text(
            fine, "decoded", "decoded", describe_tokens(spec, tokens), self.cfg.prompt_domain
        )
        logger.debug("i2t text for record %d: %s", record.id, text)
        return tokens


class NullProvider(CompletionProvider):
    """Returns dummy placeholders instead of informative content; used by
    the no-completion ablation."""

    def complete_image(self, record, spec):
        return placeholder_image(spec, record.id)

    def complete_text(self, record, spec):
        return placeholder_text(spec)


def complete_dataset(
    records: list[MultiModalRecord],
    provider: CompletionProvider,
    spec: DatasetSpec,
) -> list[MultiModalRecord]:
    """Fill every missing modality via the provider.

    Newly filled slots are flagged synthetic; already-complete records pass
    through untouched, so the call is idempotent. The provider only ever
    sees a record view with the missing slot stripped.
    """
    out = []
    for r in records:
        if r.complete:
            out.append(r)
            continue
        if not r.image_present:
            view = dataclasses.replace(r, image=None)
            image = provider.complete_image(view, spec)
            out.append(
                dataclasses.replace(r, image=image, image_present=True, image_synthetic=True)
            )
        else:
            view = dataclasses.replace(r, text=None)
            tokens = provider.complete_text(view, spec)
            out.append(
                dataclasses.replace(r, text=tokens, text_present=True, text_synthetic=True)
            )
    return out


def nearest_prototype_label(spec: DatasetSpec, latent: np.ndarray) -> int:
    """Nearest class prototype in latent space; the reference classifier
    used to score completion fidelity."""
    protos = class_prototypes(spec)
    return int(np.argmin(np.linalg.norm(protos - latent, axis=1)))
