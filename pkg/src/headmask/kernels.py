"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

The backend is chosen once at import. ``use_backend`` switches it at runtime,
which the tests and the benchmark use to compare the two.
"""

from __future__ import annotations

from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels


def available_backends() -> list[str]:
    return ["cython", "python"] if _ckernels is not None else ["python"]


def backend() -> str:
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name: str) -> None:
    global _active
    if name == "python":
        _active = _pykernels
    elif name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def causal_softmax_forward(scores):
    return _active.causal_softmax_forward(scores)


def causal_softmax_backward(probs, grad_out):
    return _active.causal_softmax_backward(probs, grad_out)


def edit_distance(hyp, ref) -> int:
    return _active.edit_distance(hyp, ref)


def pack_bits(bits) -> bytes:
    return _active.pack_bits(bits)


def unpack_bits(payload: bytes, count: int):
    return _active.unpack_bits(payload, count)
