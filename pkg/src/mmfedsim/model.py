"""Encoders, fusion model and the trainable parameter set.

Three embeddings live in one latent space:

* image-specific: frozen two-layer image encoder -> shared projection head
* text-specific: frozen token-embedding/pooling encoder -> shared head
* joint: patch + token streams fused by bidirectional cross-modal
  attention, one self-attention layer, mean pooling, an adapter, and the
  same shared head.

The frozen encoders are a pure function of a global model seed: identical
on every client, never transmitted, never updated. Everything in
:class:`JointModuleParams` and :class:`ClassifierParams` is trainable and
is exactly what travels between clients and the server, as one flat
float64 vector in the canonical order given by the dataclass field order
(see ``flatten_params``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import DatasetSpec, MultiModalRecord
from .seeding import rng_for


@dataclass
class ModelConfig:
    """Dimensions of the trainable fusion model."""

    d_enc: int = 32
    d_com: int = 16
    d_latent: int = 32
    self_heads: int = 2
    cross_heads: int = 1
    patch_side: int = 4
    mask_placeholder_attention: bool = False

    def __post_init__(self):
        for name in ("d_enc", "d_com", "d_latent", "self_heads", "cross_heads", "patch_side"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_com % self.self_heads != 0:
            raise ValueError("d_com must be divisible by self_heads")
        if self.d_com % self.cross_heads != 0:
            raise ValueError("d_com must be divisible by cross_heads")
        if self.d_latent < 2:
            raise ValueError("d_latent must be at least 2")

    def validate_spec(self, spec: DatasetSpec) -> None:
        if spec.grid_side % self.patch_side != 0:
            raise ValueError("grid_side must be divisible by patch_side")

    def num_patches(self, spec: DatasetSpec) -> int:
        return (spec.grid_side // self.patch_side) ** 2


# ---------------------------------------------------------------------------
# frozen encoders
# ---------------------------------------------------------------------------


class FrozenEncoders:
    """Modality-specific encoders with fixed random weights.

    Pure numpy; no gradients ever flow through these. Both encoders map to
    d_enc. The text path mean-pools per-token embeddings, so it is
    invariant to token order by construction.
    """

    def __init__(self, spec: DatasetSpec, cfg: ModelConfig, model_seed: int):
        cfg.validate_spec(spec)
        self.spec = spec
        self.cfg = cfg
        self.model_seed = model_seed
        rng = rng_for(model_seed, "frozen-encoders")
        d_in, d_enc = spec.image_size, cfg.d_enc
        self.img_w1 = rng.standard_normal((d_in, d_enc)) / np.sqrt(d_in)
        self.img_b1 = np.zeros(d_enc)
        self.img_w2 = rng.standard_normal((d_enc, d_enc)) / np.sqrt(d_enc)
        self.img_b2 = np.zeros(d_enc)
        self.txt_embed = rng.standard_normal((spec.vocab_size, d_enc))
        self.txt_w = rng.standard_normal((d_enc, d_enc)) / np.sqrt(d_enc)
        self.txt_b = np.zeros(d_enc)

    def encode_image(self, images: np.ndarray) -> np.ndarray:
        """(B, grid_side^2) -> (B, d_enc)."""
        h = np.tanh(images @ self.img_w1 + self.img_b1)
        return h @ self.img_w2 + self.img_b2

    def encode_text(self, tokens: np.ndarray) -> np.ndarray:
        """(B, latent_dim) int tokens -> (B, d_enc)."""
        pooled = self.txt_embed[tokens].mean(axis=1)
        return np.tanh(pooled @ self.txt_w + self.txt_b)


# ---------------------------------------------------------------------------
# trainable parameters
# ---------------------------------------------------------------------------


@dataclass
class JointModuleParams:
    """Trainable fusion-module weights. Field order is the canonical
    flatten order."""

    patch_w: np.ndarray
    patch_b: np.ndarray
    tok_embed: np.ndarray
    pos_img: np.ndarray
    pos_txt: np.ndarray
    i2t_wq: np.ndarray
    i2t_wk: np.ndarray
    i2t_wv: np.ndarray
    t2i_wq: np.ndarray
    t2i_wk: np.ndarray
    t2i_wv: np.ndarray
    self_wq: np.ndarray
    self_wk: np.ndarray
    self_wv: np.ndarray
    self_wo: np.ndarray
    adapter_w: np.ndarray
    adapter_b: np.ndarray
    shared_w1: np.ndarray
    shared_b1: np.ndarray
    shared_w2: np.ndarray
    shared_b2: np.ndarray


@dataclass
class ClassifierParams:
    """Two affine layers d_latent -> d_latent // 2 -> num_classes."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class EmbeddingTriple:
    """Image-specific, text-specific and joint embeddings for one batch,
    all (B, d_latent) in the same latent space."""

    x_img: Tensor
    x_txt: Tensor
    x_joint: Tensor


def param_shapes(spec: DatasetSpec, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list: joint-module fields then classifier
    fields, in dataclass field order."""
    cfg.validate_spec(spec)
    n_patch = cfg.num_patches(spec)
    ps2 = cfg.patch_side**2
    dc, de, dl = cfg.d_com, cfg.d_enc, cfg.d_latent
    shapes = [
        ("patch_w", (ps2, dc)),
        ("patch_b", (dc,)),
        ("tok_embed", (spec.vocab_size, dc)),
        ("pos_img", (n_patch, dc)),
        ("pos_txt", (spec.latent_dim, dc)),
        ("i2t_wq", (dc, dc)),
        ("i2t_wk", (dc, dc)),
        ("i2t_wv", (dc, dc)),
        ("t2i_wq", (dc, dc)),
        ("t2i_wk", (dc, dc)),
        ("t2i_wv", (dc, dc)),
        ("self_wq", (dc, dc)),
        ("self_wk", (dc, dc)),
        ("self_wv", (dc, dc)),
        ("self_wo", (dc, dc)),
        ("adapter_w", (dc, de)),
        ("adapter_b", (de,)),
        ("shared_w1", (de, de)),
        ("shared_b1", (de,)),
        ("shared_w2", (de, dl)),
        ("shared_b2", (dl,)),
        ("cls.w1", (dl, dl // 2)),
        ("cls.b1", (dl // 2,)),
        ("cls.w2", (dl // 2, spec.num_classes)),
        ("cls.b2", (spec.num_classes,)),
    ]
    return shapes


def num_params(spec: DatasetSpec, cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(spec, cfg))


def init_params(
    spec: DatasetSpec, cfg: ModelConfig, model_seed: int
) -> tuple[JointModuleParams, ClassifierParams]:
    """Seeded initialization: weights ~ N(0, 1/fan_in), positional
    embeddings small, biases zero."""
    rng = rng_for(model_seed, "trainable-init")
    values: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec, cfg):
        short = name.split(".")[-1]
        if short.startswith("b") or short.endswith(("_b", "_b1", "_b2")):
            values[name] = np.zeros(shape)
        elif short.startswith("pos"):
            values[name] = 0.02 * rng.standard_normal(shape)
        elif short == "tok_embed":
            values[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
        else:
            values[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    joint = JointModuleParams(
        **{f.name: values[f.name] for f in dataclasses.fields(JointModuleParams)}
    )
    classifier = ClassifierParams(
        **{f.name: values[f"cls.{f.name}"] for f in dataclasses.fields(ClassifierParams)}
    )
    return joint, classifier


def as_tensors(params, requires_grad: bool = False) -> SimpleNamespace:
    """Wrap a parameter dataclass as a namespace of autodiff tensors."""
    ns = SimpleNamespace()
    for f in dataclasses.fields(params):
        setattr(ns, f.name, Tensor(getattr(params, f.name), requires_grad=requires_grad))
    return ns


def _tensorized(params):
    return params if isinstance(params, SimpleNamespace) else as_tensors(params)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def shared_head(x: Tensor, joint) -> Tensor:
    """Two-layer projection d_enc -> d_latent shared by all three paths."""
    j = _tensorized(joint)
    h = ad.tanh(ad.matmul(x, j.shared_w1) + j.shared_b1)
    return ad.matmul(h, j.shared_w2) + j.shared_b2


def encode_image_specific(images: np.ndarray, frozen: FrozenEncoders, joint) -> Tensor:
    """Frozen image encoding projected into the latent space; gradients
    reach only the shared head."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if images.shape[1] != frozen.spec.image_size:
        raise ValueError(
            f"image size {images.shape[1]} != expected {frozen.spec.image_size}"
        )
    return shared_head(Tensor(frozen.encode_image(images)), joint)


def encode_text_specific(tokens: np.ndarray, frozen: FrozenEncoders, joint) -> Tensor:
    """Frozen text encoding projected into the latent space."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != frozen.spec.latent_dim:
        raise ValueError(
            f"token count {tokens.shape[1]} != expected {frozen.spec.latent_dim}"
        )
    return shared_head(Tensor(frozen.encode_text(tokens)), joint)


@dataclass
class AttentionWeights:
    """Projection weights for one attention block, each d_com x d_com."""

    wq: np.ndarray | Tensor
    wk: np.ndarray | Tensor
    wv: np.ndarray | Tensor


def _heads_fold(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    dh = d // heads
    t = ad.reshape(t, (b, n, heads, dh))
    t = ad.transpose(t, (0, 2, 1, 3))
    return ad.reshape(t, (b * heads, n, dh))


def _heads_unfold(t: Tensor, heads: int, batch: int) -> Tensor:
    bh, n, dh = t.shape
    t = ad.reshape(t, (batch, heads, n, dh))
    t = ad.transpose(t, (0, 2, 1, 3))
    return ad.reshape(t, (batch, n, heads * dh))


def _multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return ad.attention(q, k, v)
    batch = q.shape[0]
    out = ad.attention(_heads_fold(q, heads), _heads_fold(k, heads), _heads_fold(v, heads))
    return _heads_unfold(out, heads, batch)


def cross_modal_attention(query_seq, kv_seq, weights: AttentionWeights, heads: int = 1) -> Tensor:
    """One direction of cross-modal fusion.

    Row i of the output mixes the value-projected kv sequence with weights
    softmax(Q K^T / sqrt(d)), Q from the query stream and K, V from the
    other modality's stream. Accepts (n, d) single sequences or (B, n, d)
    batches.
    """
    q_in = query_seq if isinstance(query_seq, Tensor) else Tensor(query_seq)
    kv_in = kv_seq if isinstance(kv_seq, Tensor) else Tensor(kv_seq)
    single = q_in.data.ndim == 2
    if single:
        q_in = ad.reshape(q_in, (1,) + q_in.shape)
        kv_in = ad.reshape(kv_in, (1,) + kv_in.shape)
    if kv_in.data.shape[1] == 0:
        raise ValueError("cross_modal_attention: empty key/value sequence")
    wq, wk, wv = (w if isinstance(w, Tensor) else Tensor(w) for w in
                  (weights.wq, weights.wk, weights.wv))
    out = _multihead_attention(
        ad.matmul(q_in, wq), ad.matmul(kv_in, wk), ad.matmul(kv_in, wv), heads
    )
    return ad.reshape(out, out.shape[1:]) if single else out


def _softmax_last(t: Tensor) -> Tensor:
    shift = Tensor(t.data.max(axis=-1, keepdims=True))
    e = ad.exp(t - shift)
    return e / ad.tensor_sum(e, axis=-1, keepdims=True)


def _masked_self_attention(x: Tensor, joint, heads: int, kv_mask: np.ndarray) -> Tensor:
    """Composite self-attention that excludes masked positions as keys and
    values. kv_mask is (B, n) with 1 = attend, 0 = skip."""
    j = _tensorized(joint)
    b, n, d = x.shape
    dh = d // heads
    q = _heads_fold(ad.matmul(x, j.self_wq), heads)
    k = _heads_fold(ad.matmul(x, j.self_wk), heads)
    v = _heads_fold(ad.matmul(x, j.self_wv), heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    bias = np.repeat((1.0 - kv_mask) * -1e30, heads, axis=0)[:, None, :]
    p = _softmax_last(scores + Tensor(bias))
    out = _heads_unfold(ad.matmul(p, v), heads, b)
    return ad.matmul(out, j.self_wo)


def encode_joint(
    images: np.ndarray,
    tokens: np.ndarray,
    frozen: FrozenEncoders,
    joint,
    kv_mask: np.ndarray | None = None,
) -> Tensor:
    """Fused joint embedding of an image/token batch.

    Patch and token streams are embedded into d_com with positional
    embeddings, fused by the two cross-modal attention blocks, sequence
    concatenated, self-attended, mean pooled, adapted to d_enc and pushed
    through the shared head. When the placeholder-masking variant is on,
    kv_mask marks real positions; placeholder tokens are then ignored as
    keys/values in self-attention and excluded from the pooled mean.
    """
    spec, cfg = frozen.spec, frozen.cfg
    j = _tensorized(joint)
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    patches = extract_patches(images, spec.grid_side, cfg.patch_side)

    i_com = ad.matmul(Tensor(patches), j.patch_w) + j.patch_b + j.pos_img
    t_com = ad.embedding(j.tok_embed, tokens) + j.pos_txt

    x_i2t = _multihead_attention(
        ad.matmul(i_com, j.i2t_wq),
        ad.matmul(t_com, j.i2t_wk),
        ad.matmul(t_com, j.i2t_wv),
        cfg.cross_heads,
    )
    x_t2i = _multihead_attention(
        ad.matmul(t_com, j.t2i_wq),
        ad.matmul(i_com, j.t2i_wk),
        ad.matmul(i_com, j.t2i_wv),
        cfg.cross_heads,
    )
    seq = ad.concat([x_i2t, x_t2i], axis=1)

    if kv_mask is None:
        q = ad.matmul(seq, j.self_wq)
        k = ad.matmul(seq, j.self_wk)
        v = ad.matmul(seq, j.self_wv)
        fused = ad.matmul(_multihead_attention(q, k, v, cfg.self_heads), j.self_wo)
        pooled = ad.mean(fused, axis=1)
    else:
        fused = _masked_self_attention(seq, j, cfg.self_heads, kv_mask)
        weights = kv_mask / kv_mask.sum(axis=1, keepdims=True)
        pooled = ad.tensor_sum(fused * Tensor(weights[:, :, None]), axis=1)

    adapted = ad.matmul(pooled, j.adapter_w) + j.adapter_b
    return shared_head(adapted, j)


def classify(embedding, classifier) -> Tensor:
    """Two affine layers onto class logits."""
    c = _tensorized(classifier)
    emb = embedding if isinstance(embedding, Tensor) else Tensor(np.atleast_2d(embedding))
    h = ad.matmul(emb, c.w1) + c.b1
    return ad.matmul(h, c.w2) + c.b2


def extract_patches(images: np.ndarray, grid_side: int, patch_side: int) -> np.ndarray:
    """(B, grid_side^2) -> (B, n_patches, patch_side^2), non-overlapping,
    row-major patch order."""
    b = images.shape[0]
    n = grid_side // patch_side
    x = images.reshape(b, n, patch_side, n, patch_side)
    x = x.transpose(0, 1, 3, 2, 4)
    return x.reshape(b, n * n, patch_side * patch_side)


def batch_arrays(records: list[MultiModalRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack record slots into (images, tokens, labels); every slot must be
    populated (real, synthetic or placeholder)."""
    for r in records:
        if r.image is None or r.text is None:
            raise ValueError(
                f"record {r.id} has an empty modality slot; fill it via completion "
                "or make_placeholder first"
            )
    images = np.stack([r.image for r in records])
    tokens = np.stack([r.text for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, tokens, labels


def presence_mask(records: list[MultiModalRecord], frozen: FrozenEncoders) -> np.ndarray:
    """(B, n_patches + latent_dim) mask: 1 where the position belongs to a
    present modality, 0 where it is placeholder content."""
    spec, cfg = frozen.spec, frozen.cfg
    n_patch = cfg.num_patches(spec)
    mask = np.ones((len(records), n_patch + spec.latent_dim))
    for i, r in enumerate(records):
        if not r.image_present:
            mask[i, :n_patch] = 0.0
        if not r.text_present:
            mask[i, n_patch:] = 0.0
    return mask


def forward_batch(
    records: list[MultiModalRecord],
    frozen: FrozenEncoders,
    joint,
    classifier,
) -> tuple[EmbeddingTriple, Tensor]:
    """All three embeddings plus logits (from the joint embedding) for a
    batch of slot-complete records."""
    images, tokens, _ = batch_arrays(records)
    kv_mask = None
    if frozen.cfg.mask_placeholder_attention:
        kv_mask = presence_mask(records, frozen)
    triple = EmbeddingTriple(
        x_img=encode_image_specific(images, frozen, joint),
        x_txt=encode_text_specific(tokens, frozen, joint),
        x_joint=encode_joint(images, tokens, frozen, joint, kv_mask=kv_mask),
    )
    return triple, classify(triple.x_joint, classifier)


# ---------------------------------------------------------------------------
# flat parameter vector and its file format
# ---------------------------------------------------------------------------


def flatten_params(joint: JointModuleParams, classifier: ClassifierParams) -> np.ndarray:
    """Concatenate all trainable arrays, raveled C-order, in canonical
    field order (joint module fields then classifier fields)."""
    parts = [np.asarray(getattr(joint, f.name), dtype=np.float64).ravel()
             for f in dataclasses.fields(JointModuleParams)]
    parts += [np.asarray(getattr(classifier, f.name), dtype=np.float64).ravel()
              for f in dataclasses.fields(ClassifierParams)]
    return np.concatenate(parts)


def load_params(
    flat: np.ndarray, spec: DatasetSpec, cfg: ModelConfig
) -> tuple[JointModuleParams, ClassifierParams]:
    """Inverse of flatten_params; errors on length mismatch."""
    flat = np.asarray(flat, dtype=np.float64)
    expected = num_params(spec, cfg)
    if flat.shape != (expected,):
        raise ValueError(f"flat parameter length {flat.shape} != expected ({expected},)")
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in param_shapes(spec, cfg):
        size = int(np.prod(shape))
        values[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    joint = JointModuleParams(
        **{f.name: values[f.name] for f in dataclasses.fields(JointModuleParams)}
    )
    classifier = ClassifierParams(
        **{f.name: values[f"cls.{f.name}"] for f in dataclasses.fields(ClassifierParams)}
    )
    return joint, classifier


_PARAM_MAGIC = b"MMFPARAM"
_PARAM_VERSION = 1


def save_flat_params(path: str | Path, flat: np.ndarray, config_hash: str = "") -> None:
    """Binary layout: 8-byte magic, uint32 version, uint32 hash length,
    hash utf-8, uint64 element count, float64 little-endian data."""
    flat = np.ascontiguousarray(np.asarray(flat, dtype="<f8"))
    h = config_hash.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(struct.pack("<II", _PARAM_VERSION, len(h)))
        fh.write(h)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_flat_params(path: str | Path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _PARAM_MAGIC:
            raise ValueError(f"{path}: not a parameter file")
        version, hash_len = struct.unpack("<II", fh.read(8))
        if version != _PARAM_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        config_hash = fh.read(hash_len).decode("utf-8")
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
    if data.size != count:
        raise ValueError(f"{path}: truncated parameter file")
    return data, config_hash


def config_fingerprint(*configs) -> str:
    """Short stable hash over the repr of the given config dataclasses."""
    blob = "|".join(repr(dataclasses.asdict(c)) for c in configs)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
