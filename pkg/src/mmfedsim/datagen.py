"""Synthetic paired image/text classification data.

Every record is born from a class prototype in a shared latent space: the
image is a fixed random linear render of the latent onto a pixel grid, and
the text is the latent quantized into per-dimension attribute tokens. That
shared structure is what makes cross-modal completion well-posed, and it
gives tests an exact handle on what each modality "should" say.

Also provides the client partitioners (balanced random and whole-class
shards), the exact-count modality masking used to simulate incomplete
pairs, and dummy placeholders for single-modality evaluation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

# Latent coordinates are quantized over this symmetric range; values are on
# a standard-normal scale so clipping is rare.
TOKEN_RANGE = 3.0

# Stream labels under a dataset seed.
_STREAM_PROTO = "class-prototypes"
_STREAM_RENDER = "render-map"
_STREAM_RECORDS = "record-stream"
_STREAM_PLACEHOLDER = "image-placeholder"


@dataclass
class DatasetSpec:
    """Shape and noise knobs for one synthetic dataset.

    The vocabulary has one token per (latent dimension, bin) pair, one
    reserved token per class name, and a final placeholder token.
    """

    num_classes: int = 10
    latent_dim: int = 8
    grid_side: int = 8
    bins_per_dim: int = 5
    intra_class_sigma: float = 0.3
    image_noise_sigma: float = 0.1
    token_dropout_prob: float = 0.1
    dataset_seed: int = 0
    class_names: list[str] = field(default_factory=list)
    fine_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.grid_side < 1:
            raise ValueError("grid_side must be positive")
        if self.bins_per_dim < 1:
            raise ValueError("bins_per_dim must be positive")
        for name in ("intra_class_sigma", "image_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.token_dropout_prob <= 1.0:
            raise ValueError("token_dropout_prob must be in [0, 1]")
        if not self.class_names:
            self.class_names = [f"class-{c}" for c in range(self.num_classes)]
        if not self.fine_labels:
            self.fine_labels = [f"fine-{c}" for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have one entry per class")
        if len(self.fine_labels) != self.num_classes:
            raise ValueError("fine_labels must have one entry per class")

    @property
    def image_size(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def vocab_size(self) -> int:
        return self.latent_dim * self.bins_per_dim + self.num_classes + 1

    @property
    def placeholder_token(self) -> int:
        return self.vocab_size - 1

    def class_token(self, label: int) -> int:
        return self.latent_dim * self.bins_per_dim + label

    @property
    def bin_width(self) -> float:
        return 2.0 * TOKEN_RANGE / self.bins_per_dim

    def bin_index(self, value: float | np.ndarray) -> np.ndarray:
        """Quantize latent coordinates into [0, bins_per_dim) with clamping."""
        idx = np.floor((np.asarray(value) + TOKEN_RANGE) / self.bin_width)
        return np.clip(idx, 0, self.bins_per_dim - 1).astype(np.int64)

    def bin_center(self, bin_idx: np.ndarray) -> np.ndarray:
        return -TOKEN_RANGE + (np.asarray(bin_idx, dtype=np.float64) + 0.5) * self.bin_width

    def tokens_from_latent(self, latent: np.ndarray) -> np.ndarray:
        """One attribute token per latent dimension: dim j maps to token
        j * bins_per_dim + bin(latent[j])."""
        dims = np.arange(self.latent_dim, dtype=np.int64)
        return dims * self.bins_per_dim + self.bin_index(latent)

    def latent_from_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Bin-center decode; placeholder tokens decode to 0.0."""
        tokens = np.asarray(tokens, dtype=np.int64)
        dims = np.arange(self.latent_dim, dtype=np.int64)
        bins = tokens - dims * self.bins_per_dim
        latent = self.bin_center(bins)
        latent[tokens == self.placeholder_token] = 0.0
        return latent


@dataclass
class MultiModalRecord:
    """One image/text/label triple with per-modality presence and
    provenance flags."""

    id: int
    label: int
    image: np.ndarray | None
    text: np.ndarray | None
    image_present: bool
    text_present: bool
    image_synthetic: bool = False
    text_synthetic: bool = False
    description: str = ""

    def __post_init__(self):
        if not (self.image_present or self.text_present):
            raise ValueError(f"record {self.id}: at least one modality must be present")
        if self.image_synthetic and not self.image_present:
            raise ValueError(f"record {self.id}: synthetic image implies image_present")
        if self.text_synthetic and not self.text_present:
            raise ValueError(f"record {self.id}: synthetic text implies text_present")
        if self.label < 0:
            raise ValueError(f"record {self.id}: label out of range")

    @property
    def complete(self) -> bool:
        return self.image_present and self.text_present


@dataclass
class ClientPartition:
    client_id: int
    record_ids: list[int]


_proto_cache: dict[tuple, np.ndarray] = {}
_render_cache: dict[tuple, np.ndarray] = {}


def class_prototypes(spec: DatasetSpec) -> np.ndarray:
    """Per-class latent prototypes, (C, latent_dim); pure function of the
    dataset seed."""
    key = (spec.dataset_seed, spec.num_classes, spec.latent_dim)
    if key not in _proto_cache:
        rng = rng_for(spec.dataset_seed, _STREAM_PROTO)
        _proto_cache[key] = rng.standard_normal((spec.num_classes, spec.latent_dim))
    return _proto_cache[key]


def render_map(spec: DatasetSpec) -> np.ndarray:
    """Latent-to-pixel linear map, (grid_side^2, latent_dim); pure function
    of the dataset seed. Scaled so pixel values stay O(1)."""
    key = (spec.dataset_seed, spec.grid_side, spec.latent_dim)
    if key not in _render_cache:
        rng = rng_for(spec.dataset_seed, _STREAM_RENDER)
        w = rng.standard_normal((spec.image_size, spec.latent_dim))
        _render_cache[key] = w / np.sqrt(spec.latent_dim)
    return _render_cache[key]


def describe_tokens(spec: DatasetSpec, tokens: np.ndarray) -> str:
    """Human-readable attribute summary, e.g. "a0=b2 a1=? a2=b4"."""
    parts = []
    for j, tok in enumerate(np.asarray(tokens, dtype=np.int64)):
        if tok == spec.placeholder_token:
            parts.append(f"a{j}=?")
        else:
            parts.append(f"a{j}=b{tok - j * spec.bins_per_dim}")
    return " ".join(parts)


def render_record(
    spec: DatasetSpec,
    record_id: int,
    label: int,
    latent: np.ndarray,
    rng: np.random.Generator,
) -> MultiModalRecord:
    """Render one complete record from an instance latent using the shared
    image/text generation path."""
    w_img = render_map(spec)
    image = w_img @ latent
    if spec.image_noise_sigma > 0:
        image = image + spec.image_noise_sigma * rng.standard_normal(spec.image_size)
    tokens = spec.tokens_from_latent(latent)
    if spec.token_dropout_prob > 0:
        drop = rng.random(spec.latent_dim) < spec.token_dropout_prob
        tokens = np.where(drop, spec.placeholder_token, tokens)
    return MultiModalRecord(
        id=record_id,
        label=int(label),
        image=image,
        text=tokens.astype(np.int64),
        image_present=True,
        text_present=True,
        description=describe_tokens(spec, tokens),
    )


def gen_dataset(
    spec: DatasetSpec, n_train: int, n_test: int
) -> tuple[list[MultiModalRecord], list[MultiModalRecord]]:
    """Sample complete train and test records.

    Deterministic given (spec, n_train, n_test): the same call twice yields
    bitwise-identical records.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    protos = class_prototypes(spec)
    rng = rng_for(spec.dataset_seed, _STREAM_RECORDS)

    def draw(record_id: int) -> MultiModalRecord:
        label = int(rng.integers(spec.num_classes))
        latent = protos[label]
        if spec.intra_class_sigma > 0:
            latent = latent + spec.intra_class_sigma * rng.standard_normal(spec.latent_dim)
        return render_record(spec, record_id, label, latent, rng)

    train = [draw(i) for i in range(n_train)]
    test = [draw(n_train + i) for i in range(n_test)]
    return train, test


def partition_iid(
    records: list[MultiModalRecord], num_clients: int, seed: int
) -> list[ClientPartition]:
    """Random balanced split; client sizes differ by at most one."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    rng = rng_for(seed, "iid-partition")
    order = rng.permutation(len(records))
    splits = np.array_split(order, num_clients)
    return [
        ClientPartition(client_id=i, record_ids=[int(records[j].id) for j in chunk])
        for i, chunk in enumerate(splits)
    ]


def partition_noniid(
    records: list[MultiModalRecord], num_clients: int, seed: int
) -> list[ClientPartition]:
    """Whole-class shards dealt to clients.

    The records are grouped into one shard per class; shards are shuffled
    and dealt round-robin, so when C is divisible by the client count each
    client holds exactly C / num_clients whole classes, and otherwise the
    remainder shards go one per client in deal order.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    labels = sorted({r.label for r in records})
    shards = {c: [int(r.id) for r in records if r.label == c] for c in labels}
    rng = rng_for(seed, "noniid-shards")
    order = [labels[i] for i in rng.permutation(len(labels))]
    parts = [ClientPartition(client_id=i, record_ids=[]) for i in range(num_clients)]
    for pos, c in enumerate(order):
        parts[pos % num_clients].record_ids.extend(shards[c])
    return parts


def apply_missing(
    records: list[MultiModalRecord], beta: float, image_ratio: float, seed: int
) -> list[MultiModalRecord]:
    """Make exactly round(beta * n) records incomplete.

    Of the incomplete ones, round(image_ratio * k) lose their image and the
    rest lose their text. Selection is uniform without replacement. The
    masked modality's data is removed, not blanked in place; inputs are
    never mutated.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    if not 0.0 <= image_ratio <= 1.0:
        raise ValueError("image_ratio must be in [0, 1]")
    for r in records:
        if not r.complete:
            raise ValueError(f"record {r.id} is already incomplete")
    n = len(records)
    k = int(round(beta * n))
    k_img = int(round(image_ratio * k))
    rng = rng_for(seed, "missing-mask")
    order = rng.permutation(n)
    out = list(records)
    for pos in order[:k_img]:
        out[pos] = dataclasses.replace(
            records[pos], image=None, image_present=False, image_synthetic=False
        )
    for pos in order[k_img:k]:
        out[pos] = dataclasses.replace(
            records[pos], text=None, text_present=False, text_synthetic=False
        )
    return out


def placeholder_text(spec: DatasetSpec) -> np.ndarray:
    """The fixed dummy token sequence standing in for absent text."""
    return np.full(spec.latent_dim, spec.placeholder_token, dtype=np.int64)


def placeholder_image(spec: DatasetSpec, record_id: int) -> np.ndarray:
    """Unit-variance noise grid, deterministic per record id."""
    rng = rng_for(record_id, _STREAM_PLACEHOLDER)
    return rng.standard_normal(spec.image_size)


def make_placeholder(
    record: MultiModalRecord, missing_modality: str, spec: DatasetSpec
) -> MultiModalRecord:
    """Fill an absent modality slot with dummy data.

    The presence flag stays False so downstream consumers can still tell a
    placeholder from real or synthetic content.
    """
    if missing_modality == "text":
        if record.text_present or record.text is not None:
            raise ValueError(f"record {record.id}: text already present")
        return dataclasses.replace(record, text=placeholder_text(spec))
    if missing_modality == "image":
        if record.image_present or record.image is not None:
            raise ValueError(f"record {record.id}: image already present")
        return dataclasses.replace(record, image=placeholder_image(spec, record.id))
    raise ValueError(f"unknown modality {missing_modality!r}")


# -- audit serialization -------------------------------------------------------

# One JSON object per line: id, label, presence/provenance flags, raw image
# floats and token ids (null when absent), and the description string.


def save_records(records: list[MultiModalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "label": r.label,
                "image_present": r.image_present,
                "text_present": r.text_present,
                "image_synthetic": r.image_synthetic,
                "text_synthetic": r.text_synthetic,
                "image": None if r.image is None else [float(x) for x in r.image],
                "text": None if r.text is None else [int(t) for t in r.text],
                "description": r.description,
            }
            fh.write(json.dumps(obj) + "\n")


def load_records(path: str | Path) -> list[MultiModalRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            records.append(
                MultiModalRecord(
                    id=obj["id"],
                    label=obj["label"],
                    image=None if obj["image"] is None else np.array(obj["image"]),
                    text=None if obj["text"] is None else np.array(obj["text"], dtype=np.int64),
                    image_present=obj["image_present"],
                    text_present=obj["text_present"],
                    image_synthetic=obj["image_synthetic"],
                    text_synthetic=obj["text_synthetic"],
                    description=obj["description"],
                )
            )
    return records
