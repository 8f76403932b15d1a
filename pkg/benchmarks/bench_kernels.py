"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--train-epochs 3]

Prints per-kernel timings for both backends, checks that they agree, and
(optionally) times a few training epochs end to end under each backend in a
subprocess so the backend switch happens at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gnmr import _kernels_py
from gnmr.graph import MultiBehaviorGraph
from gnmr.interactions import SynthSpec, synth_generate

try:
    from gnmr import _kernels
except ImportError:
    _kernels = None


def workloads(seed: int = 0):
    x = synth_generate(SynthSpec(2000, 1500, 3), seed)
    g = MultiBehaviorGraph.build(x)
    adj = g.adj[2]
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(x.n_items, 16))
    grad = rng.normal(size=(len(adj.user_indices), 16))
    scores = rng.normal(size=(2000, 100)).round(2)  # rounding forces ties
    ids = np.stack([rng.permutation(1500)[:100] for _ in range(2000)])
    pos = np.zeros(2000, dtype=np.int64)
    return {
        "segment_sum": (adj.user_indptr, adj.user_indices, feats),
        "scatter_add_rows": (adj.user_indices, grad, x.n_items),
        "rank_of_positive": (scores, ids, pos),
    }


def bench(repeat: int) -> None:
    cases = workloads()
    print(f"{'kernel':<18} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}  agree")
    for name, args in cases.items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<18} {t_py:10.3f} {'-':>10} {'-':>8}  (extension not built)")
            continue
        cy = getattr(_kernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat)) * 1e3
        a, b = py(*args), cy(*args)
        ok = np.array_equal(a, b) if a.dtype.kind == "i" else np.allclose(a, b, rtol=0, atol=1e-12)
        print(f"{name:<18} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:8.1f}x  {ok}")


_TRAIN = """
import time
from gnmr import kernels
from gnmr.interactions import SynthSpec, synth_generate, leave_one_out_split
from gnmr.model import GNMR, HyperParams
from gnmr.training import TrainConfig, train
x = synth_generate(SynthSpec(200, 150, 3), 0)
split = leave_one_out_split(x, 0)
model = GNMR.create(HyperParams(3), 200, 150, 2, 0)
t = time.perf_counter()
train(split, model, TrainConfig(epochs={epochs}))
print(kernels.BACKEND, (time.perf_counter() - t) / {epochs})
"""


def bench_training(epochs: int) -> None:
    for pure in ("0", "1"):
        env = dict(os.environ, GNMR_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", _TRAIN.format(epochs=epochs)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"training epoch ({out[0]} backend): {float(out[1]) * 1e3:.1f} ms")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--train-epochs", type=int, default=3, help="0 skips the end-to-end timing")
    args = p.parse_args()
    bench(args.repeat)
    if args.train_epochs:
        bench_training(args.train_epochs)


if __name__ == "__main__":
    main()
