"""Binary mask / logits / checkpoint files and newline-delimited reports.

Mask file layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"AHAM"
    4       1     version (1)
    5       1     kind    (0 = binary mask, 1 = float64 logits)
    6       2     n_layers  (u16)
    8       2     n_heads   (u16)
    10      ...   payload

Kind 0 payload is ceil(n*h/8) bytes: bits in layer-major, head-minor order,
least-significant bit first within a byte, unused high bits of the last byte
zero. Kind 1 payload is n*h float64 values in the same order.

Checkpoint layout::

    b"AHCKPT" | version u8 | n_layers, n_heads, d_model, d_ffn, vocab_size,
    max_seq_len as u32 | seed as u64 | tensor count u32 |
    per tensor in canonical order: element count u64, float64 values
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .maskgate import MaskLogits
from .transformer import ModelConfig, ModelWeights, param_shapes

MASK_MAGIC = b"AHAM"
MASK_VERSION = 1
KIND_MASK = 0
KIND_LOGITS = 1
_MASK_HEADER = struct.Struct("<4sBBHH")

CKPT_MAGIC = b"AHCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<6sB6IQI")

REPORT_FORMAT = "headmask-eval-report"
REPORT_FIELDS = ("task", "mask_source", "accuracy", "token_error_rate", "ifr", "sub_metrics",
                 "active_head_count", "n_examples")


class ArtifactError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(ArtifactError):
    pass


class BadVersionError(ArtifactError):
    pass


class TruncatedFileError(ArtifactError):
    pass


class PadBitsError(ArtifactError):
    pass


class KindMismatchError(ArtifactError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# masks and logits
# ---------------------------------------------------------------------------

def encode_mask(mask) -> bytes:
    bits = np.asarray(mask)
    if bits.ndim != 2:
        raise ValueError("head mask must be two-dimensional")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("head mask values must be 0 or 1")
    n, h = bits.shape
    if n > 0xFFFF or h > 0xFFFF:
        raise ValueError("mask dimensions must fit in 16 bits")
    return _MASK_HEADER.pack(MASK_MAGIC, MASK_VERSION, KIND_MASK, n, h) + kernels.pack_bits(bits.ravel())


def encode_logits(logits) -> bytes:
    vals = logits.values if isinstance(logits, MaskLogits) else np.asarray(logits, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError("mask logits must be two-dimensional")
    n, h = vals.shape
    if n > 0xFFFF or h > 0xFFFF:
        raise ValueError("mask dimensions must fit in 16 bits")
    return _MASK_HEADER.pack(MASK_MAGIC, MASK_VERSION, KIND_LOGITS, n, h) + vals.astype("<f8").tobytes()


def _read_header(blob: bytes, expected_kind: int, source: str) -> tuple[int, int, bytes]:
    if len(blob) < _MASK_HEADER.size:
        if not MASK_MAGIC.startswith(blob[:4]):
            raise BadMagicError(f"{source}: not a mask file (bad magic)")
        raise TruncatedFileError(f"{source}: header truncated ({len(blob)} bytes)")
    magic, version, kind, n, h = _MASK_HEADER.unpack_from(blob)
    if magic != MASK_MAGIC:
        raise BadMagicError(f"{source}: not a mask file (magic {magic!r})")
    if version != MASK_VERSION:
        raise BadVersionError(f"{source}: unsupported version {version}")
    if kind != expected_kind:
        names = {KIND_MASK: "binary mask", KIND_LOGITS: "logits"}
        raise KindMismatchError(f"{source}: file holds {names.get(kind, f'kind {kind}')}, "
                                f"expected {names[expected_kind]}")
    return n, h, blob[_MASK_HEADER.size:]


def decode_mask(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    n, h, payload = _read_header(blob, KIND_MASK, source)
    count = n * h
    need = (count + 7) // 8
    if len(payload) < need:
        raise TruncatedFileError(f"{source}: payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ArtifactError(f"{source}: {len(payload) - need} trailing bytes after payload")
    if count % 8 and payload[-1] >> (count % 8):
        raise PadBitsError(f"{source}: nonzero pad bits in final byte")
    return kernels.unpack_bits(payload, count).astype(bool).reshape(n, h)


def decode_logits(blob: bytes, source: str = "<bytes>") -> MaskLogits:
    n, h, payload = _read_header(blob, KIND_LOGITS, source)
    need = 8 * n * h
    if len(payload) < need:
        raise TruncatedFileError(f"{source}: payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise ArtifactError(f"{source}: {len(payload) - need} trailing bytes after payload")
    vals = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, h)
    return MaskLogits(vals)


def save_mask(path, mask) -> None:
    atomic_write(path, encode_mask(mask))


def load_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes(), str(path))


def save_logits(path, logits) -> None:
    atomic_write(path, encode_logits(logits))


def load_logits(path) -> MaskLogits:
    return decode_logits(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(model: ModelWeights) -> bytes:
    c = model.config
    arrays = model.arrays()
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, c.n_layers, c.n_heads_per_layer, c.d_model,
                               c.d_ffn, c.vocab_size, c.max_seq_len, c.seed, len(arrays))]
    for name in param_shapes(c):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> ModelWeights:
    if blob[:6] != CKPT_MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (magic {blob[:6]!r})")
    if len(blob) < _CKPT_HEADER.size:
        raise TruncatedFileError(f"{source}: checkpoint header truncated")
    (_, version, n_layers, n_heads, d_model, d_ffn, vocab, max_len, seed,
     count) = _CKPT_HEADER.unpack_from(blob)
    if version != CKPT_VERSION:
        raise BadVersionError(f"{source}: unsupported checkpoint version {version}")
    cfg = ModelConfig(n_layers=n_layers, n_heads_per_layer=n_heads, d_model=d_model, d_ffn=d_ffn,
                      vocab_size=vocab, max_seq_len=max_len, seed=seed)
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise ArtifactError(f"{source}: {count} tensors, expected {len(shapes)}")
    off = _CKPT_HEADER.size
    arrays = {}
    for name, shape in shapes.items():
        if off + 8 > len(blob):
            raise TruncatedFileError(f"{source}: truncated before {name}")
        (size,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if size != math.prod(shape):
            raise ArtifactError(f"{source}: {name} has {size} values, expected {math.prod(shape)}")
        end = off + 8 * size
        if end > len(blob):
            raise TruncatedFileError(f"{source}: truncated inside {name}")
        arrays[name] = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(blob):
        raise ArtifactError(f"{source}: {len(blob) - off} trailing bytes")
    return ModelWeights.from_arrays(cfg, arrays)


def save_checkpoint(path, model: ModelWeights) -> None:
    atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path) -> ModelWeights:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# newline-delimited records
# ---------------------------------------------------------------------------

def _round6(v):
    if isinstance(v, bool) or v is None or isinstance(v, (int, np.integer)):
        return int(v) if isinstance(v, np.integer) else v
    if isinstance(v, (float, np.floating)):
        return float(f"{float(v):.6g}")
    if isinstance(v, dict):
        return {k: _round6(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round6(x) for x in v]
    return v


def dump_records(records: Iterable[dict], header: dict | None = None) -> str:
    lines = [] if header is None else [json.dumps(header, sort_keys=False)]
    lines += [json.dumps(_round6(r), sort_keys=False) for r in records]
    return "".join(line + "\n" for line in lines)


def write_report(path, reports: Iterable) -> None:
    """Header line, then one JSON object per report; floats at 6 significant digits."""
    header = {"format": REPORT_FORMAT, "version": 1, "fields": list(REPORT_FIELDS)}
    recs = [r.record() if hasattr(r, "record") else dict(r) for r in reports]
    try:
        atomic_write(path, dump_records(recs, header).encode())
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ArtifactError(f"{path}: empty report (missing header)")
    header = json.loads(lines[0])
    if header.get("format") != REPORT_FORMAT:
        raise ArtifactError(f"{path}: not an evaluation report")
    return [json.loads(line) for line in lines[1:] if line.strip()]


def write_records(path, records: Iterable) -> None:
    """Newline-delimited JSON, one record per line (training logs, corpora)."""
    recs = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in records]
    atomic_write(path, dump_records(recs).encode())


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def similarity_csv(sim) -> str:
    """``task,<name_1>,...,<name_k>`` header, then one row per task."""
    rows = ["task," + ",".join(sim.task_names)]
    for name, row in zip(sim.task_names, sim.values):
        rows.append(name + "," + ",".join(f"{v:.6g}" for v in row))
    return "\n".join(rows) + "\n"


def sweep_csv(curve) -> str:
    """``q,active_count,metric,sample_output`` rows in ascending q."""
    rows = ["q,active_count,metric,sample_output"]
    samples = curve.sample_outputs or [""] * len(curve.q_values)
    for q, c, m, s in zip(curve.q_values, curve.active_counts, curve.metric_values, samples):
        rows.append(f"{q:g},{c},{m:.6g},\"{s}\"")
    return "\n".join(rows) + "\n"


def write_text(path, text: str) -> None:
    atomic_write(path, text.encode())
