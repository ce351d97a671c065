"""Compiled kernels vs the numpy fallback, per kernel and per training step.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json]
"""

import argparse
import json
import statistics
import time

import numpy as np

from lpa import kernels
from lpa.config import get_preset
from lpa.model import build_model
from lpa.training import TrainConfig, synthetic_corpus, ByteTokenizer, train


def _median_ms(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(64, 128, 128)).astype(dtype)
    x = rng.normal(size=(2048, 64)).astype(dtype)
    gain = np.ones(64, dtype)
    bias = np.zeros(64, dtype)
    g = rng.normal(size=x.shape).astype(dtype)
    blob = rng.integers(0, 256, size=1 << 16, dtype=np.uint8).tobytes()

    def cases(impl):
        probs = kernels.causal_softmax_forward(scores, impl=impl)
        _, mean, rstd = kernels.layer_norm_forward(x, gain, bias, 1e-5, impl=impl)
        _, rscale = kernels.rms_norm_forward(x, gain, 1e-5, impl=impl)
        return {
            "softmax_fwd [64,128,128]": lambda: kernels.causal_softmax_forward(scores, impl=impl),
            "softmax_bwd [64,128,128]": lambda: kernels.causal_softmax_backward(probs, scores, impl=impl),
            "layer_norm_fwd [2048,64]": lambda: kernels.layer_norm_forward(x, gain, bias, 1e-5, impl=impl),
            "layer_norm_bwd [2048,64]": lambda: kernels.layer_norm_backward(g, x, gain, mean, rstd, impl=impl),
            "rms_norm_fwd [2048,64]": lambda: kernels.rms_norm_forward(x, gain, 1e-5, impl=impl),
            "rms_norm_bwd [2048,64]": lambda: kernels.rms_norm_backward(g, x, gain, rscale, impl=impl),
            "fnv1a64 64KiB": lambda: kernels.fnv1a64(blob, impl=impl),
        }

    return cases


def train_step_ms(backend, preset, steps):
    corpus = ByteTokenizer().tokenize(synthetic_corpus(200_000, 0))
    cfg = TrainConfig(total_steps=steps)
    with kernels.use_backend(backend):
        model = build_model(get_preset(preset), 0)
        _, records = train(model, corpus, cfg)
    return statistics.median(r.wall_ms_per_step for r in records[1:])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    backends = kernels.available_backends()
    rows = []
    for dtype in (np.float32, np.float64):
        make = kernel_cases(dtype)
        per_backend = {b: make(kernels.load_backend(b)) for b in backends}
        for name in per_backend[backends[0]]:
            row = {"kernel": name, "dtype": np.dtype(dtype).name}
            for b in backends:
                row[b] = _median_ms(per_backend[b][name], args.repeats)
            rows.append(row)
    for preset in ("desk", "desk-setting2"):
        row = {"kernel": f"train step {preset}", "dtype": "float32"}
        for b in backends:
            row[b] = train_step_ms(b, preset, args.steps)
        rows.append(row)

    if args.json:
        for row in rows:
            print(json.dumps(row))
        return
    header = f"{'kernel':<28}{'dtype':>9}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for row in rows:
        line = f"{row['kernel']:<28}{row['dtype']:>9}" + "".join(f"{row[b]:>12.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
