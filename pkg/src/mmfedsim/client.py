"""Client-side lifecycle: completion preprocessing, local training and
single- or dual-modality evaluation.

A client owns its (post-completion) records, a local copy of the trainable
parameters and a persistent AdamW state; the frozen encoders are shared,
read-only. Each round the client loads the broadcast global vector, runs a
few epochs of shuffled mini-batch training on the combined objective and
uploads the new flat vector. Everything is deterministic given
(round_seed, client_id).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .completion import CompletionProvider, complete_dataset
from .datagen import DatasetSpec, MultiModalRecord, make_placeholder
from .losses import LossBreakdown, LossConfig, total_loss_graph
from .model import (
    ClassifierParams,
    FrozenEncoders,
    JointModuleParams,
    ModelConfig,
    as_tensors,
    batch_arrays,
    classify,
    encode_joint,
    flatten_params,
    forward_batch,
    load_params,
    presence_mask,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_BATCH = 256


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    """Local optimization knobs (desk-scale defaults; the full-scale
    protocol values — 10 epochs, batch 64, lr 2e-4 — remain selectable)."""

    local_epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    scheduler: str = "warmup_cosine"
    warmup_rounds: int = 10

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.scheduler not in ("none", "warmup_cosine"):
            raise ValueError("scheduler must be 'none' or 'warmup_cosine'")
        if self.warmup_rounds < 1:
            raise ValueError("warmup_rounds must be >= 1")


def round_lr(cfg: TrainConfig, round_index: int, total_rounds: int) -> float:
    """Round-level learning rate: linear warm-up then cosine annealing.
    Constant within a round."""
    if cfg.scheduler == "none":
        return cfg.learning_rate
    warm = min(cfg.warmup_rounds, total_rounds)
    if round_index < warm:
        return cfg.learning_rate * (round_index + 1) / warm
    span = max(total_rounds - warm, 1)
    progress = (round_index - warm) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def create(joint: JointModuleParams, classifier: ClassifierParams) -> "AdamWState":
        m, v = {}, {}
        for key, arr in _named_arrays(joint, classifier):
            m[key] = np.zeros_like(arr)
            v[key] = np.zeros_like(arr)
        return AdamWState(m=m, v=v)


def _named_arrays(joint: JointModuleParams, classifier: ClassifierParams):
    for f in dataclasses.fields(JointModuleParams):
        yield f"joint.{f.name}", getattr(joint, f.name)
    for f in dataclasses.fields(ClassifierParams):
        yield f"cls.{f.name}", getattr(classifier, f.name)


def adamw_step(
    joint: JointModuleParams,
    classifier: ClassifierParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place on the dataclasses."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for key, arr in _named_arrays(joint, classifier):
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(arr)
        m = state.m[key] = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
        v = state.v[key] = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + weight_decay * arr
        obj, name = (joint, key[6:]) if key.startswith("joint.") else (classifier, key[4:])
        setattr(obj, name, arr - lr * update)


@dataclass
class ClientState:
    """One client's data, parameters and optimizer state. The frozen
    encoders are referenced, never owned or modified."""

    client_id: int
    records: list[MultiModalRecord]
    frozen: FrozenEncoders
    loss_cfg: LossConfig
    joint: JointModuleParams
    classifier: ClassifierParams
    opt: AdamWState = field(init=False)
    preprocessed: bool = False

    def __post_init__(self):
        self.opt = AdamWState.create(self.joint, self.classifier)

    @property
    def spec(self) -> DatasetSpec:
        return self.frozen.spec

    @property
    def model_cfg(self) -> ModelConfig:
        return self.frozen.cfg


@dataclass
class ClientUpdate:
    """What a client uploads after local training."""

    flat_params: np.ndarray
    num_samples: int
    losses: LossBreakdown
    client_id: int
    round_index: int


def local_preprocess(
    state: ClientState, provider: CompletionProvider, spec: DatasetSpec
) -> ClientState:
    """Complete every local record once, before the first round."""
    if not state.preprocessed:
        state.records = complete_dataset(state.records, provider, spec)
        state.preprocessed = True
    return state


def _collect_grads(joint_t, cls_t) -> dict[str, np.ndarray]:
    grads = {}
    for f in dataclasses.fields(JointModuleParams):
        grads[f"joint.{f.name}"] = getattr(joint_t, f.name).grad
    for f in dataclasses.fields(ClassifierParams):
        grads[f"cls.{f.name}"] = getattr(cls_t, f.name).grad
    return grads


def local_train(
    state: ClientState,
    global_flat_params: np.ndarray,
    cfg: TrainConfig,
    round_seed: int,
    round_index: int = 0,
    lr: float | None = None,
) -> ClientUpdate:
    """Load the broadcast parameters, train locally, return the update.

    Mini-batches are reshuffled per epoch; terminal batches smaller than 2
    are dropped (the contrastive term needs at least one negative). Local
    records are never mutated. The returned breakdown is the sample-
    weighted mean over all trained batches.
    """
    if lr is None:
        lr = cfg.learning_rate
    joint, classifier = load_params(global_flat_params, state.spec, state.model_cfg)
    state.joint, state.classifier = joint, classifier
    rng = np.random.default_rng(
        np.random.SeedSequence([round_seed & (2**64 - 1), state.client_id])
    )
    records = state.records
    term_sums = np.zeros(4)
    n_samples_seen = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(records), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [records[i] for i in idx]
            labels = np.array([r.label for r in batch], dtype=np.int64)
            joint_t = as_tensors(joint, requires_grad=True)
            cls_t = as_tensors(classifier, requires_grad=True)
            triple, _ = forward_batch(batch, state.frozen, joint_t, cls_t)
            total_t, br = total_loss_graph(triple, labels, cls_t, state.loss_cfg)
            if not np.isfinite(br.total):
                raise NumericalError(
                    f"client {state.client_id}: non-finite loss {br} "
                    f"(round {round_index})"
                )
            total_t.backward()
            adamw_step(
                joint, classifier, _collect_grads(joint_t, cls_t), state.opt, lr,
                cfg.weight_decay,
            )
            term_sums += len(batch) * np.array([br.sup, br.mcm, br.ram, br.total])
            n_samples_seen += len(batch)
    if n_samples_seen == 0:
        raise ValueError(f"client {state.client_id}: no trainable batch (need >= 2 records)")
    means = term_sums / n_samples_seen
    return ClientUpdate(
        flat_params=flatten_params(joint, classifier),
        num_samples=len(records),
        losses=LossBreakdown(*means),
        client_id=state.client_id,
        round_index=round_index,
    )


def _prepare_eval_records(
    records: list[MultiModalRecord], mode: str, spec: DatasetSpec
) -> list[MultiModalRecord]:
    if mode == "complete":
        return records
    if mode == "image_only":
        stripped = [
            dataclasses.replace(r, text=None, text_present=False, text_synthetic=False)
            for r in records
        ]
        return [make_placeholder(r, "text", spec) for r in stripped]
    if mode == "text_only":
        stripped = [
            dataclasses.replace(r, image=None, image_present=False, image_synthetic=False)
            for r in records
        ]
        return [make_placeholder(r, "image", spec) for r in stripped]
    raise ValueError(f"unknown evaluation mode {mode!r}")


def evaluate(
    flat_params: np.ndarray,
    test_records: list[MultiModalRecord],
    mode: str,
    frozen: FrozenEncoders,
) -> float:
    """Top-1 accuracy of the joint-embedding classifier.

    For image_only / text_only the other modality is stripped and replaced
    by its placeholder before the forward pass.
    """
    if not test_records:
        raise ValueError("empty test set")
    joint, classifier = load_params(flat_params, frozen.spec, frozen.cfg)
    prepared = _prepare_eval_records(test_records, mode, frozen.spec)
    correct = 0
    for start in range(0, len(prepared), EVAL_BATCH):
        chunk = prepared[start : start + EVAL_BATCH]
        images, tokens, labels = batch_arrays(chunk)
        kv_mask = presence_mask(chunk, frozen) if frozen.cfg.mask_placeholder_attention else None
        emb = encode_joint(images, tokens, frozen, joint, kv_mask=kv_mask)
        logits = classify(emb, classifier)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return correct / len(prepared)
