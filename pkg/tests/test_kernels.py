import importlib
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headmask import _pykernels, kernels

HAS_C = "cython" in kernels.available_backends()
needs_c = pytest.mark.skipif(not HAS_C, reason="compiled kernels not built")


def _scores(rng, b=3, t=7):
    return rng.normal(size=(b, t, t)) * 3


@needs_c
def test_softmax_backends_agree():
    from headmask import _ckernels
    rng = np.random.default_rng(0)
    for t in (1, 2, 7, 33):
        s = _scores(rng, 4, t)
        p_c = _ckernels.causal_softmax_forward(np.ascontiguousarray(s))
        p_py = _pykernels.causal_softmax_forward(s)
        np.testing.assert_allclose(p_c, p_py, rtol=0, atol=1e-14)
        g = rng.normal(size=s.shape)
        np.testing.assert_allclose(_ckernels.causal_softmax_backward(p_c, g),
                                   _pykernels.causal_softmax_backward(p_py, g), rtol=0, atol=1e-13)


@pytest.mark.parametrize("name", kernels.available_backends())
def test_softmax_rows_are_causal_distributions(name):
    kernels.use_backend(name)
    try:
        p = kernels.causal_softmax_forward(_scores(np.random.default_rng(1), 2, 9))
    finally:
        kernels.use_backend(kernels.available_backends()[0])
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-14)
    assert np.all(np.triu(p, 1) == 0)


@needs_c
@settings(max_examples=200, deadline=None)
@given(a=st.lists(st.integers(0, 5), max_size=30), b=st.lists(st.integers(0, 5), max_size=30))
def test_edit_distance_backends_agree(a, b):
    from headmask import _ckernels
    assert _ckernels.edit_distance(a, b) == _pykernels.edit_distance(a, b)


@needs_c
@settings(max_examples=200, deadline=None)
@given(bits=st.lists(st.integers(0, 1), max_size=300))
def test_bit_packing_backends_agree(bits):
    from headmask import _ckernels
    arr = np.array(bits, dtype=np.uint8)
    packed = _ckernels.pack_bits(arr)
    assert packed == _pykernels.pack_bits(arr)
    np.testing.assert_array_equal(_ckernels.unpack_bits(packed, len(bits)),
                                  _pykernels.unpack_bits(packed, len(bits)))


def test_bit_order_is_lsb_first():
    assert _pykernels.pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 1], dtype=np.uint8)) == b"\x01\x02"


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_fallback_selected_when_extension_missing(monkeypatch):
    import headmask
    monkeypatch.setitem(sys.modules, "headmask._ckernels", None)
    monkeypatch.delattr(headmask, "_ckernels", raising=False)
    try:
        mod = importlib.reload(kernels)
        assert mod.backend() == "python"
        assert mod.available_backends() == ["python"]
        with pytest.raises(RuntimeError):
            mod.use_backend("cython")
        assert mod.edit_distance([1, 2, 3], [1, 3]) == 1
    finally:
        monkeypatch.undo()
        importlib.reload(kernels)
    assert kernels.backend() == ("cython" if HAS_C else "python")
