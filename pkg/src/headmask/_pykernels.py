"""Pure-Python/numpy versions of the compiled kernels.

Used when the extension is not built, and as the reference the compiled
versions are benchmarked and tested against.
"""

import numpy as np


def _causal(l: int, k: int) -> np.ndarray:
    return np.tri(l, k, dtype=bool)


def causal_softmax_forward(scores: np.ndarray) -> np.ndarray:
    _, l, k = scores.shape
    visible = _causal(l, k)
    masked = np.where(visible, scores, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _, l, k = probs.shape
    g = np.where(_causal(l, k), grad_out, 0.0)
    dot = (probs * g).sum(axis=-1, keepdims=True)
    return probs * (g - dot)


def edit_distance(hyp, ref) -> int:
    a = [int(t) for t in hyp]
    b = [int(t) for t in ref]
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def pack_bits(bits) -> bytes:
    flat = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_bits(payload: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    return np.unpackbits(raw, count=count, bitorder="little")
