"""Time the compiled kernels against the numpy/pure-Python fallback.

Run with ``python benchmarks/bench_kernels.py``. The last section times one
full mask-training step so the kernel share of a real step is visible; most
of that step is BLAS matrix multiplication, which neither backend touches.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from headmask import kernels
from headmask.maskgate import sample_gumbel, soft_mask, harden
from headmask.tasks import get_task
from headmask.trainer import Corpus
from headmask.transformer import ModelConfig, ModelWeights, forward
from headmask import gradcore as gc


def _best(fn, number: int, repeat: int = 5) -> float:
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_cases(rng):
    scores = rng.normal(size=(16 * 4, 50, 50))
    probs = kernels.causal_softmax_forward(scores)
    grad = rng.normal(size=scores.shape)
    a = [int(x) for x in rng.integers(0, 16, 24)]
    b = [int(x) for x in rng.integers(0, 16, 24)]
    bits = (rng.random(1600) < 0.5).astype(np.uint8)
    packed = kernels.pack_bits(bits)
    return {
        "causal_softmax_forward (64x50x50)": (lambda: kernels.causal_softmax_forward(scores), 50),
        "causal_softmax_backward (64x50x50)": (lambda: kernels.causal_softmax_backward(probs, grad), 50),
        "edit_distance (24 vs 24 tokens)": (lambda: kernels.edit_distance(a, b), 2000),
        "pack_bits (40x40 mask)": (lambda: kernels.pack_bits(bits), 5000),
        "unpack_bits (40x40 mask)": (lambda: kernels.unpack_bits(packed, 1600), 5000),
    }


def mask_step(model, corpus, rng):
    n, h = model.config.mask_shape
    soft = soft_mask(np.full((n, h), 4.0), sample_gumbel(rng, n, h), 1.0)
    hard = gc.Tensor(harden(soft).astype(np.float64), requires_grad=True)
    tokens, targets, lmask, positions = corpus.batch(0, 16)
    loss = gc.cross_entropy(forward(model, tokens, hard, positions), targets, lmask)
    gc.backward(loss)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    model = ModelWeights.init(ModelConfig(d_model=64))
    corpus = Corpus([get_task("COPY")], 0, with_instruction=False)

    results: dict[str, dict[str, float]] = {}
    for name in backends:
        kernels.use_backend(name)
        for label, (fn, number) in cases.items():
            results.setdefault(label, {})[name] = _best(fn, number, args.repeat)
        results.setdefault("full mask-training step (batch 16)", {})[name] = _best(
            lambda: mask_step(model, corpus, rng), 3, args.repeat)
    kernels.use_backend(backends[0])

    header = f"{'case':42s}" + "".join(f"{b:>14s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for label, row in results.items():
        line = f"{label:42s}" + "".join(f"{row[b] * 1e6:12.1f}us" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:9.2f}x"
        print(line)
    if len(backends) == 1:
        print("compiled kernels not built; only the fallback was timed")


if __name__ == "__main__":
    main()
