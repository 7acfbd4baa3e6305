"""Server-side protocol.

Each aggregation round: sample a subset of clients, broadcast the global
vector, collect their locally trained vectors, elicit each uploaded
model's representations on a fixed probe set, score pairwise
representation similarity with linear CKA, softmax the per-client
similarity sums into aggregation weights, and average the uploads.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .client import ClientState, ClientUpdate, TrainConfig, evaluate, local_train, round_lr
from .datagen import DatasetSpec, MultiModalRecord, class_prototypes, render_record
from .model import FrozenEncoders, batch_arrays, classify, encode_joint, load_params
from .seeding import derive_seed, rng_for

CKA_DEGENERATE_EPS = 1e-12


@dataclass
class ProbeSet:
    """One complete record per class, fixed for the whole experiment."""

    records: list[MultiModalRecord]
    probe_seed: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SimilarityGraph:
    """Pairwise CKA scores, per-client importance sums and softmax
    aggregation weights over the K participants."""

    scores: np.ndarray
    importance: np.ndarray
    gamma: np.ndarray


@dataclass
class RoundLog:
    round_index: int
    sampled_clients: list[int]
    gamma: np.ndarray
    scores: np.ndarray
    accuracy: dict[str, float]
    mean_losses: dict[str, float]
    client_losses: dict[int, dict[str, float]]
    wall_time: float


def generate_probe(spec: DatasetSpec, probe_seed: int) -> ProbeSet:
    """One record per class, rendered from the exact class prototype
    through the standard generation path."""
    protos = class_prototypes(spec)
    rng = rng_for(probe_seed, "probe-render")
    records = [
        render_record(spec, record_id=c, label=c, latent=protos[c], rng=rng)
        for c in range(spec.num_classes)
    ]
    return ProbeSet(records=records, probe_seed=probe_seed)


def model_representations(
    flat_params: np.ndarray,
    probe: ProbeSet,
    frozen: FrozenEncoders,
    output: str = "joint",
) -> np.ndarray:
    """Row i is the model's representation of probe record i: the joint
    embedding by default, or the class logits when output='logits'."""
    joint, classifier = load_params(flat_params, frozen.spec, frozen.cfg)
    images, tokens, _ = batch_arrays(probe.records)
    emb = encode_joint(images, tokens, frozen, joint)
    if output == "joint":
        return emb.data.copy()
    if output == "logits":
        return classify(emb, classifier).data.copy()
    raise ValueError(f"unknown representation output {output!r}")


def _centered_hsic(x: np.ndarray, y: np.ndarray) -> float:
    """tr(X X^T H Y Y^T H) computed as ||Xc^T Yc||_F^2 with Xc = H X.

    The centering matrix is H = I - 11^T/m. The constant (m-1)^2 factors
    of the covariance estimator cancel in the CKA ratio and are omitted.
    """
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = xc.T @ yc
    return float(np.sum(cross * cross))


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation
    matrices with matching row counts.

    Returns 0.0 when either self-similarity term is degenerate (constant
    rows), guarding the division.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("cka expects 2-D matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError("cka requires matching row counts")
    if x.shape[0] < 2:
        raise ValueError("cka requires at least 2 rows")
    sxx = _centered_hsic(x, x)
    syy = _centered_hsic(y, y)
    if sxx < CKA_DEGENERATE_EPS or syy < CKA_DEGENERATE_EPS:
        return 0.0
    return _centered_hsic(x, y) / math.sqrt(sxx * syy)


def _softmax(values: np.ndarray) -> np.ndarray:
    z = np.exp(values - values.max())
    return z / z.sum()


def build_graph(representations: list[np.ndarray]) -> SimilarityGraph:
    """Pairwise CKA graph over the participants.

    Importance of client i is the sum of its similarities to the other
    participants (self-similarity excluded); the aggregation weights are
    the softmax of the importance vector.
    """
    k = len(representations)
    if k < 1:
        raise ValueError("build_graph requires at least one representation")
    scores = np.empty((k, k))
    for i in range(k):
        scores[i, i] = cka(representations[i], representations[i])
        for j in range(i + 1, k):
            s = cka(representations[i], representations[j])
            scores[i, j] = s
            scores[j, i] = s
    importance = scores.sum(axis=1) - np.diag(scores)
    return SimilarityGraph(scores=scores, importance=importance, gamma=_softmax(importance))


def uniform_gamma(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def aggregate(updates: list[ClientUpdate], gamma: np.ndarray) -> np.ndarray:
    """Convex combination of the uploaded flat vectors.

    Summation order is the list order of ``updates`` (ascending sampled
    client order in a round); exactly-zero weights are skipped, which makes
    one-hot weights return that client's vector bit-for-bit.
    """
    if len(updates) == 0:
        raise ValueError("aggregate requires at least one update")
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (len(updates),):
        raise ValueError("gamma length must match number of updates")
    if not math.isclose(float(gamma.sum()), 1.0, abs_tol=1e-9):
        raise ValueError("gamma must sum to 1")
    length = updates[0].flat_params.shape[0]
    for u in updates:
        if u.flat_params.shape != (length,):
            raise ValueError(
                f"client {u.client_id}: flat length {u.flat_params.shape} != ({length},)"
            )
    out = np.zeros(length)
    for u, g in zip(updates, gamma):
        if g == 0.0:
            continue
        out += g * u.flat_params
    return out


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Equal-weight average; identical code path as aggregate with uniform
    weights, so the two agree bitwise."""
    return aggregate(updates, uniform_gamma(len(updates)))


def sample_clients(num_clients: int, ratio: float, round_seed: int) -> list[int]:
    """ceil(ratio * N) distinct client ids, uniform without replacement,
    deterministic per round seed. Returned sorted."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    k = min(num_clients, max(1, math.ceil(ratio * num_clients - 1e-9)))
    rng = rng_for(round_seed, "client-sample")
    ids = rng.choice(num_clients, size=k, replace=False)
    return sorted(int(i) for i in ids)


@dataclass
class RoundContext:
    """Everything run_round needs besides the global vector."""

    clients: dict[int, ClientState]
    test_records: list[MultiModalRecord]
    frozen: FrozenEncoders
    train_cfg: TrainConfig
    total_rounds: int
    master_seed: int
    sample_ratio: float = 0.7
    uniform_aggregation: bool = False
    representation_output: str = "joint"
    probe: ProbeSet | None = None
    eval_modes: tuple[str, ...] = ("complete", "image_only", "text_only")


def run_round(
    ctx: RoundContext, global_flat: np.ndarray, round_index: int
) -> tuple[np.ndarray, RoundLog]:
    """One full communication round.

    Sample, broadcast, locally train every sampled client, score the
    uploads on the probe set, aggregate, and evaluate the new global model
    on the held-out test set. Any client failure aborts the round; there is
    no partial aggregation.
    """
    t0 = time.perf_counter()
    round_seed = derive_seed(ctx.master_seed, "round", round_index)
    sampled = sample_clients(len(ctx.clients), ctx.sample_ratio, round_seed)
    lr = round_lr(ctx.train_cfg, round_index, ctx.total_rounds)
    updates = [
        local_train(
            ctx.clients[cid], global_flat, ctx.train_cfg, round_seed,
            round_index=round_index, lr=lr,
        )
        for cid in sampled
    ]
    if ctx.uniform_aggregation:
        k = len(updates)
        graph = SimilarityGraph(
            scores=np.ones((k, k)), importance=np.full(k, float(k - 1)),
            gamma=uniform_gamma(k),
        )
    else:
        if ctx.probe is None:
            raise ValueError("run_round needs a probe set unless aggregation is uniform")
        reps = [
            model_representations(u.flat_params, ctx.probe, ctx.frozen,
                                  ctx.representation_output)
            for u in updates
        ]
        graph = build_graph(reps)
    new_global = aggregate(updates, graph.gamma)
    accuracy = {
        mode: evaluate(new_global, ctx.test_records, mode, ctx.frozen)
        for mode in ctx.eval_modes
    }
    mean_losses = {
        name: float(np.mean([getattr(u.losses, name) for u in updates]))
        for name in ("sup", "mcm", "ram", "total")
    }
    client_losses = {
        u.client_id: {
            name: float(getattr(u.losses, name)) for name in ("sup", "mcm", "ram", "total")
        }
        for u in updates
    }
    log = RoundLog(
        round_index=round_index,
        sampled_clients=sampled,
        gamma=graph.gamma,
        scores=graph.scores,
        accuracy=accuracy,
        mean_losses=mean_losses,
        client_losses=client_losses,
        wall_time=time.perf_counter() - t0,
    )
    return new_global, log
