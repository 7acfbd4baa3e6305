"""Training objectives for the fusion model.

Three parts, combined by :func:`total_loss`:

* supervised cross-entropy on the joint embedding's logits,
* a contrastive matching loss that pulls each sample's joint embedding
  toward its own modality-specific embeddings and away from every other
  sample's embeddings (temperature-scaled cosine similarities),
* a representation-aligned margin loss that pulls the joint embedding
  toward whichever modality-specific embedding currently classifies
  better, gated per sample without gradient.

All losses return autodiff tensors; call ``.item()`` for the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EmbeddingTriple, _tensorized

# Added under the squared distance before sqrt: keeps the backward pass
# finite when a closed-gate distance is exactly zero, while leaving any
# normal-magnitude distance bit-exact (1e-300 is far below one ulp).
_DIST_EPS = 1e-300


@dataclass
class LossConfig:
    """Scales and temperature for the combined objective."""

    tau: float = 0.1
    mcm_scale: float = 0.01
    ram_scale: float = 0.5
    ram_stop_gradient: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.mcm_scale < 0:
            raise ValueError("mcm_scale must be non-negative")
        if self.ram_scale < 0:
            raise ValueError("ram_scale must be non-negative")


@dataclass
class LossBreakdown:
    sup: float
    mcm: float
    ram: float
    total: float


def scaled_sim(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    """exp(cosine(a, b) / tau); errors on zero-norm input."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.exp((a @ b) / (na * nb) / tau))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))


def _normalize_rows(x: Tensor) -> Tensor:
    sq = ad.tensor_sum(x * x, axis=1, keepdims=True)
    return x / ad.sqrt(sq)


def _check_nonzero_rows(*mats: Tensor) -> None:
    for m in mats:
        if np.any(np.linalg.norm(m.data, axis=1) == 0.0):
            raise ValueError("zero-norm embedding row; cosine similarity undefined")


def _sim_matrix(an: Tensor, bn: Tensor, tau: float) -> Tensor:
    """exp(cos/tau) for every row pair of two row-normalized matrices."""
    return ad.exp(ad.matmul(an, ad.transpose(bn, (1, 0))) * (1.0 / tau))


def mcm_loss(triples: EmbeddingTriple, tau: float = 0.1) -> Tensor:
    """Contrastive matching loss over a batch of embedding triples.

    For sample i the positive terms are sim(text_i, joint_i) and
    sim(image_i, joint_i); the denominator for modality M sums, over all
    j != i, sim(M_i, M_j) + sim(M_i, joint_j) + sim(joint_i, joint_j).
    Positives are excluded from the denominators, so the log argument can
    exceed 1 and the loss can go negative; no clamping is applied.
    """
    x_img, x_txt, x_joint = (
        _as_tensor(triples.x_img),
        _as_tensor(triples.x_txt),
        _as_tensor(triples.x_joint),
    )
    batch = x_img.shape[0]
    if batch < 2:
        raise ValueError("mcm_loss requires batch size >= 2")
    _check_nonzero_rows(x_img, x_txt, x_joint)

    img_n = _normalize_rows(x_img)
    txt_n = _normalize_rows(x_txt)
    joint_n = _normalize_rows(x_joint)

    s_tt = _sim_matrix(txt_n, txt_n, tau)
    s_ii = _sim_matrix(img_n, img_n, tau)
    s_tj = _sim_matrix(txt_n, joint_n, tau)
    s_ij = _sim_matrix(img_n, joint_n, tau)
    s_jj = _sim_matrix(joint_n, joint_n, tau)

    eye = Tensor(np.eye(batch))
    off = Tensor(1.0 - np.eye(batch))

    omega_txt = ad.tensor_sum((s_tt + s_tj + s_jj) * off, axis=1)
    omega_img = ad.tensor_sum((s_ii + s_ij + s_jj) * off, axis=1)
    pos_txt = ad.tensor_sum(s_tj * eye, axis=1)
    pos_img = ad.tensor_sum(s_ij * eye, axis=1)

    ratio = pos_txt / omega_txt + pos_img / omega_img
    return -ad.mean(ad.log(ratio))


def _logits_np(x: np.ndarray, classifier) -> np.ndarray:
    c = _tensorized(classifier)
    h = x @ c.w1.data + c.b1.data
    return h @ c.w2.data + c.b2.data


def _ce_rows_np(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty label batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def ram_loss(
    triples: EmbeddingTriple,
    labels: np.ndarray,
    classifier,
    stop_gradient_modal: bool = False,
) -> Tensor:
    """Margin alignment toward the better-classifying modality embedding.

    Per sample and per modality: the L2 distance between the joint and the
    modality-specific embedding counts whenever that modality's
    cross-entropy is strictly below the joint embedding's cross-entropy;
    ties contribute zero. The gates are computed without gradient; the
    distance is differentiable through both embeddings unless
    ``stop_gradient_modal`` detaches the modality side.
    """
    x_img, x_txt, x_joint = (
        _as_tensor(triples.x_img),
        _as_tensor(triples.x_txt),
        _as_tensor(triples.x_joint),
    )
    c = _tensorized(classifier)
    labels = _check_labels(labels, c.b2.data.shape[0])

    ce_joint = _ce_rows_np(_logits_np(x_joint.data, c), labels)
    ce_img = _ce_rows_np(_logits_np(x_img.data, c), labels)
    ce_txt = _ce_rows_np(_logits_np(x_txt.data, c), labels)
    gate_img = Tensor((ce_img < ce_joint).astype(np.float64))
    gate_txt = Tensor((ce_txt < ce_joint).astype(np.float64))

    if stop_gradient_modal:
        x_img, x_txt = x_img.detach(), x_txt.detach()

    diff_img = x_joint - x_img
    diff_txt = x_joint - x_txt
    dist_img = ad.sqrt(ad.tensor_sum(diff_img * diff_img, axis=1) + _DIST_EPS)
    dist_txt = ad.sqrt(ad.tensor_sum(diff_txt * diff_txt, axis=1) + _DIST_EPS)
    return ad.mean(gate_img * dist_img + gate_txt * dist_txt)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy, numerically shifted by the detached
    row max (value and gradient are exact either way)."""
    labels = _check_labels(labels, logits.shape[1])
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.tensor_sum(ad.exp(z), axis=1, keepdims=True))
    onehot = Tensor(np.eye(logits.shape[1])[labels])
    picked = ad.tensor_sum(z * onehot, axis=1, keepdims=True)
    return ad.mean(lse - picked)


def sup_loss(x_joint, labels: np.ndarray, classifier) -> Tensor:
    """Mean cross-entropy of the joint embedding's logits."""
    from .model import classify

    logits = classify(_as_tensor(x_joint), classifier)
    return cross_entropy_mean(logits, labels)


def total_loss_graph(
    triples: EmbeddingTriple,
    labels: np.ndarray,
    classifier,
    cfg: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Differentiable total objective plus its per-term breakdown.

    total = sup + mcm_scale * mcm + ram_scale * ram, with no hidden
    reweighting. Terms whose scale is zero are skipped entirely and
    reported as 0.0 in the breakdown.
    """
    batch = _as_tensor(triples.x_joint).shape[0]
    if batch < 2:
        raise ValueError("total_loss requires batch size >= 2")
    sup_t = sup_loss(triples.x_joint, labels, classifier)
    total_t = sup_t
    mcm_val = 0.0
    ram_val = 0.0
    if cfg.mcm_scale != 0.0:
        mcm_t = mcm_loss(triples, cfg.tau)
        total_t = total_t + cfg.mcm_scale * mcm_t
        mcm_val = mcm_t.item()
    if cfg.ram_scale != 0.0:
        ram_t = ram_loss(triples, labels, classifier, cfg.ram_stop_gradient)
        total_t = total_t + cfg.ram_scale * ram_t
        ram_val = ram_t.item()
    sup_val = sup_t.item()
    breakdown = LossBreakdown(
        sup=sup_val,
        mcm=mcm_val,
        ram=ram_val,
        total=sup_val + cfg.mcm_scale * mcm_val + cfg.ram_scale * ram_val,
    )
    return total_t, breakdown


def total_loss(
    triples: EmbeddingTriple,
    labels: np.ndarray,
    classifier,
    cfg: LossConfig,
) -> LossBreakdown:
    """Value-only variant of :func:`total_loss_graph`."""
    _, breakdown = total_loss_graph(triples, labels, classifier, cfg)
    return breakdown
