#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Covers the two levels that matter: the raw kernels (batched attention
forward/backward, embedding-gradient scatter-add) and one full client
training call, which is where the kernels actually live. Run after
installing the package:

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --iterations 500 --batch 64
"""

import argparse
import time

import numpy as np

from mmfedsim import backend
from mmfedsim.client import ClientState, TrainConfig, local_train
from mmfedsim.datagen import DatasetSpec, gen_dataset
from mmfedsim.losses import LossConfig
from mmfedsim.model import FrozenEncoders, ModelConfig, flatten_params, init_params


def time_call(fn, iterations, warmup=5):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(iterations):
        fn()
    return (time.perf_counter() - t0) / iterations * 1e3  # ms per call


def bench_kernels(names, iterations, batch):
    rng = np.random.default_rng(0)
    shapes = [
        ("cross-attn", (batch, 4, 16), (batch, 8, 16)),
        ("self-attn 2 heads", (batch * 2, 12, 8), (batch * 2, 12, 8)),
        ("wide", (batch, 32, 64), (batch, 48, 64)),
    ]
    print(f"\n== attention kernels ({iterations} iterations) ==")
    header = f"{'case':<20}" + "".join(f"{n + ' fwd':>14}{n + ' bwd':>14}" for n in names)
    print(header)
    for label, q_shape, kv_shape in shapes:
        q = rng.standard_normal(q_shape)
        k = rng.standard_normal(kv_shape)
        v = rng.standard_normal(kv_shape)
        dout = rng.standard_normal(q_shape)
        row = f"{label:<20}"
        for name in names:
            kern = backend.get_kernels(name)
            _, p = kern.attn_forward(q, k, v)
            fwd = time_call(lambda: kern.attn_forward(q, k, v), iterations)
            bwd = time_call(lambda: kern.attn_backward(q, k, v, p, dout), iterations)
            row += f"{fwd:>12.4f}ms{bwd:>12.4f}ms"
        print(row)

    print(f"\n== embedding scatter-add ({iterations} iterations) ==")
    ids = rng.integers(0, 91, size=batch * 8).astype(np.int64)
    grads = rng.standard_normal((batch * 8, 16))
    for name in names:
        kern = backend.get_kernels(name)
        acc = np.zeros((91, 16))
        ms = time_call(lambda: kern.scatter_add_rows(acc, ids, grads), iterations)
        print(f"{name:<8} {ms:.4f} ms per call")


def bench_local_train(names, batch):
    spec = DatasetSpec(dataset_seed=1)
    cfg = ModelConfig()
    frozen = FrozenEncoders(spec, cfg, model_seed=2)
    train, _ = gen_dataset(spec, 200, 10)
    flat = flatten_params(*init_params(spec, cfg, model_seed=2))
    train_cfg = TrainConfig(local_epochs=1, batch_size=batch, scheduler="none")

    print("\n== one client training epoch (200 records) ==")
    results = {}
    for name in names:
        backend.set_backend(name)

        def run():
            state = ClientState(
                client_id=0, records=train, frozen=frozen, loss_cfg=LossConfig(),
                joint=init_params(spec, cfg, model_seed=2)[0],
                classifier=init_params(spec, cfg, model_seed=2)[1],
            )
            return local_train(state, flat, train_cfg, round_seed=3)

        run()  # warm caches / JIT
        t0 = time.perf_counter()
        reps = 3
        for _ in range(reps):
            update = run()
        ms = (time.perf_counter() - t0) / reps * 1e3
        results[name] = (ms, update)
        print(f"{name:<8} {ms:8.1f} ms per epoch   (final loss {update.losses.total:.4f})")
    if len(names) == 2:
        a, b = names
        print(f"speedup {b}->{a}: {results[b][0] / results[a][0]:.2f}x")
        drift = np.max(
            np.abs(results[a][1].flat_params - results[b][1].flat_params)
        )
        print(f"max |param drift| between backends after one epoch: {drift:.3e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=200)
    parser.add_argument("--batch", type=int, default=16)
    args = parser.parse_args()

    names = ["numba", "numpy"] if backend.NUMBA_AVAILABLE else ["numpy"]
    if len(names) == 1:
        print("numba unavailable; benchmarking the numpy fallback only")
    original = backend.active_backend()
    try:
        bench_kernels(names, args.iterations, args.batch)
        bench_local_train(names, args.batch)
    finally:
        backend.set_backend(original)


if __name__ == "__main__":
    main()
