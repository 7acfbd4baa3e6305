"""Experiment orchestration: config parsing, the end-to-end runner,
metrics persistence, plots and the ablation suite.

A single master seed derives every stream in the run (dataset, partition,
masking, completion, model init, probe, per-round seeds) via
:mod:`mmfedsim.seeding`, so equal configs produce identical metrics files.
Metrics are line-delimited JSON, one object per round; wall-clock timings
go to a separate file so the metrics stream stays deterministic.

Ablations are pure config transforms over the one code path: the loss
scales drop to zero, the completion provider becomes the null provider, or
aggregation weights become uniform.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .backend import active_backend
from .client import ClientState, TrainConfig, local_preprocess
from .completion import LatentOracleProvider, NullProvider, OracleConfig
from .datagen import DatasetSpec, apply_missing, gen_dataset, partition_iid, partition_noniid
from .losses import LossConfig
from .model import (
    FrozenEncoders,
    ModelConfig,
    flatten_params,
    init_params,
    save_flat_params,
)
from .seeding import derive_seed
from .server import RoundContext, generate_probe, run_round
from .harness_errors import ConfigError

logger = logging.getLogger(__name__)

ABLATIONS = ("none", "wo_mcm", "wo_ram", "wo_completion", "wo_cka")
OUT_ROOT_ENV = "MMFEDSIM_OUT_ROOT"

METRICS_FILENAME = "metrics.jsonl"
TIMING_FILENAME = "timing.jsonl"
PARAMS_FILENAME = "final_params.bin"
MANIFEST_FILENAME = "manifest.json"


def dataset_fingerprint(records) -> str:
    """Stable hash over record ids, labels and raw modality payloads."""
    h = hashlib.sha256()
    for r in records:
        h.update(str((r.id, r.label, r.image_present, r.text_present)).encode())
        if r.image is not None:
            h.update(np.ascontiguousarray(r.image, dtype="<f8").tobytes())
        if r.text is not None:
            h.update(np.ascontiguousarray(r.text, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def partition_fingerprint(parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str((p.client_id, tuple(p.record_ids))).encode())
    return h.hexdigest()[:16]


@dataclass
class ExperimentConfig:
    """Top-level experiment description; every nested config validates its
    own fields on construction."""

    n_clients: int = 10
    rounds: int = 30
    beta: float = 0.3
    rho: float = 0.5
    partition: str = "noniid"
    ablation: str = "none"
    sample_ratio: float = 0.7
    master_seed: int = 7
    n_train: int = 2000
    n_test: int = 400
    out_dir: str = "runs/experiment"
    regenerate_probe_each_round: bool = False
    representation_output: str = "joint"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.partition not in ("iid", "noniid"):
            raise ValueError("partition must be 'iid' or 'noniid'")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ValueError("sample_ratio must be in (0, 1]")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.representation_output not in ("joint", "logits"):
            raise ValueError("representation_output must be 'joint' or 'logits'")


_NESTED = {
    "dataset": DatasetSpec,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "oracle": OracleConfig,
}


def _build_dataclass(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in {context}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from an optional YAML file plus override
    values (CLI flags win over file values). Unknown or out-of-range keys
    raise :class:`ConfigError` naming the offender."""
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        data = loaded
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            kwargs[key] = _build_dataclass(_NESTED[key], value, key)
        else:
            kwargs[key] = value
    return _build_dataclass(ExperimentConfig, kwargs, "config")


def apply_ablation(cfg: ExperimentConfig) -> ExperimentConfig:
    """Resolve the ablation switch into concrete config values."""
    out = copy.deepcopy(cfg)
    if cfg.ablation == "wo_mcm":
        out.loss.mcm_scale = 0.0
    elif cfg.ablation == "wo_ram":
        out.loss.ram_scale = 0.0
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of everything that determines the run's outputs (the
    output directory is excluded)."""
    payload = dataclasses.asdict(apply_ablation(cfg))
    payload.pop("out_dir", None)
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def resolve_out_dir(out_dir: str | Path) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(out_dir)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@dataclass
class RunResult:
    metrics_path: Path
    params_path: Path
    final_accuracy: dict[str, float]
    config_hash: str


def _round_payload(log) -> dict:
    return {
        "round": log.round_index,
        "sampled_clients": log.sampled_clients,
        "accuracy": log.accuracy,
        "mean_losses": log.mean_losses,
        "client_losses": {str(cid): v for cid, v in log.client_losses.items()},
        "gamma": [float(g) for g in log.gamma],
        "scores": [[float(s) for s in row] for row in log.scores],
    }


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run the full federated experiment described by ``cfg``.

    Writes one metrics line per round plus the final flat parameter vector
    into the output directory and returns their paths.
    """
    resolved = apply_ablation(cfg)
    chash = config_hash(cfg)
    out_dir = resolve_out_dir(resolved.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = resolved.master_seed

    spec = copy.deepcopy(resolved.dataset)
    spec.dataset_seed = derive_seed(master, "dataset")
    if resolved.partition == "noniid" and resolved.n_clients > spec.num_classes:
        raise ConfigError("noniid partition requires n_clients <= num_classes")

    train_records, test_records = gen_dataset(spec, resolved.n_train, resolved.n_test)
    by_id = {r.id: r for r in train_records}
    if resolved.partition == "iid":
        parts = partition_iid(train_records, resolved.n_clients, derive_seed(master, "partition"))
    else:
        parts = partition_noniid(
            train_records, resolved.n_clients, derive_seed(master, "partition")
        )

    manifest = {
        "config_hash": chash,
        "ablation": resolved.ablation,
        "master_seed": master,
        "dataset_hash": dataset_fingerprint(train_records),
        "partition_hash": partition_fingerprint(parts),
        "kernel_backend": active_backend(),
    }
    with open(out_dir / MANIFEST_FILENAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    model_seed = derive_seed(master, "model")
    frozen = FrozenEncoders(spec, resolved.model, model_seed)
    joint0, cls0 = init_params(spec, resolved.model, model_seed)
    global_flat = flatten_params(joint0, cls0)

    if resolved.ablation == "wo_completion":
        provider = NullProvider()
    else:
        provider = LatentOracleProvider(resolved.oracle, seed=derive_seed(master, "completion"))

    clients: dict[int, ClientState] = {}
    for part in parts:
        local = [by_id[rid] for rid in part.record_ids]
        masked = apply_missing(
            local, resolved.beta, resolved.rho, derive_seed(master, "missing", part.client_id)
        )
        init_j, init_c = init_params(spec, resolved.model, model_seed)
        state = ClientState(
            client_id=part.client_id,
            records=masked,
            frozen=frozen,
            loss_cfg=resolved.loss,
            joint=init_j,
            classifier=init_c,
        )
        local_preprocess(state, provider, spec)
        clients[part.client_id] = state

    probe = None
    if not resolved.regenerate_probe_each_round or resolved.ablation == "wo_cka":
        probe = generate_probe(spec, derive_seed(master, "probe"))

    ctx = RoundContext(
        clients=clients,
        test_records=test_records,
        frozen=frozen,
        train_cfg=resolved.train,
        total_rounds=resolved.rounds,
        master_seed=master,
        sample_ratio=resolved.sample_ratio,
        uniform_aggregation=resolved.ablation == "wo_cka",
        representation_output=resolved.representation_output,
        probe=probe,
    )

    metrics_path = out_dir / METRICS_FILENAME
    timing_path = out_dir / TIMING_FILENAME
    final_accuracy: dict[str, float] = {}
    t_start = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8") as mfh, open(
        timing_path, "w", encoding="utf-8"
    ) as tfh:
        for round_index in range(resolved.rounds):
            if resolved.regenerate_probe_each_round and not ctx.uniform_aggregation:
                ctx.probe = generate_probe(spec, derive_seed(master, "probe", round_index))
            global_flat, log = run_round(ctx, global_flat, round_index)
            mfh.write(json.dumps(_round_payload(log)) + "\n")
            mfh.flush()
            tfh.write(
                json.dumps({"round": log.round_index, "seconds": round(log.wall_time, 4)})
                + "\n"
            )
            final_accuracy = log.accuracy
            logger.info(
                "round %d/%d acc=%.3f loss=%.4f",
                round_index + 1,
                resolved.rounds,
                log.accuracy.get("complete", float("nan")),
                log.mean_losses["total"],
            )
    logger.info("experiment finished in %.1fs", time.perf_counter() - t_start)

    params_path = out_dir / PARAMS_FILENAME
    save_flat_params(params_path, global_flat, chash)
    return RunResult(
        metrics_path=metrics_path,
        params_path=params_path,
        final_accuracy=final_accuracy,
        config_hash=chash,
    )


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics file; malformed lines raise with their line number."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed metrics line {lineno}: {exc}") from exc
    return rows


def emit_plots(metrics_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Static figures from a metrics file: accuracy per evaluation mode
    over rounds, and the aggregation-weight heatmap (rounds x K)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics(metrics_path)
    if not rows:
        raise ValueError(f"{metrics_path}: no metrics rows to plot")
    out = resolve_out_dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rounds = [r["round"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mode in rows[0]["accuracy"]:
        ax.plot(rounds, [r["accuracy"][mode] for r in rows], marker="o", label=mode)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    acc_path = out / "accuracy_vs_round.png"
    fig.savefig(acc_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(acc_path)

    gamma = np.array([r["gamma"] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    im = ax.imshow(gamma, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("participant slot")
    ax.set_ylabel("round")
    fig.colorbar(im, ax=ax, label="aggregation weight")
    gamma_path = out / "gamma_heatmap.png"
    fig.savefig(gamma_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(gamma_path)
    return written


def run_ablation_suite(
    base_cfg: ExperimentConfig, seeds: list[int], out_dir: str | Path
) -> Path:
    """Run every ablation for every seed and tabulate final accuracies.

    Writes one CSV row per (ablation, seed) plus one mean row per ablation.
    """
    if not seeds:
        raise ConfigError("ablation suite needs at least one seed")
    out = resolve_out_dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for ablation in ABLATIONS:
        for seed in seeds:
            cfg = copy.deepcopy(base_cfg)
            cfg.ablation = ablation
            cfg.master_seed = seed
            cfg.out_dir = str(Path(out_dir) / ablation / f"seed_{seed}")
            result = run_experiment(cfg)
            rows.append(
                {
                    "ablation": ablation,
                    "seed": str(seed),
                    "acc_complete": result.final_accuracy.get("complete", float("nan")),
                    "acc_image_only": result.final_accuracy.get("image_only", float("nan")),
                    "acc_text_only": result.final_accuracy.get("text_only", float("nan")),
                }
            )
        cell = [r for r in rows if r["ablation"] == ablation and r["seed"] != "mean"]
        rows.append(
            {
                "ablation": ablation,
                "seed": "mean",
                "acc_complete": float(np.mean([r["acc_complete"] for r in cell])),
                "acc_image_only": float(np.mean([r["acc_image_only"] for r in cell])),
                "acc_text_only": float(np.mean([r["acc_text_only"] for r in cell])),
            }
        )
    summary_path = out / "ablation_summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["ablation", "seed", "acc_complete", "acc_image_only", "acc_text_only"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return summary_path
