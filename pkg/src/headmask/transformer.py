"""Toy pre-LN decoder-only transformer whose attention heads can be masked.

Each layer's multi-head attention is the sum of per-head outputs
``Y_j @ W_O[j]`` scaled by that head's mask value. A mask of all ones is the
ordinary model; a fully zeroed layer leaves only the residual and FFN paths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads_per_layer: int = 4
    d_model: int = 128
    d_ffn: int | None = None
    vocab_size: int = 64
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        if self.d_model % self.n_heads_per_layer:
            raise ValueError("d_model must be divisible by n_heads_per_layer")
        for name in ("n_layers", "n_heads_per_layer", "d_model", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads_per_layer

    @property
    def n_heads_total(self) -> int:
        return self.n_layers * self.n_heads_per_layer

    @property
    def mask_shape(self) -> tuple[int, int]:
        return (self.n_layers, self.n_heads_per_layer)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid_positions(n_pos: int, d: int, rms: float = 0.02) -> np.ndarray:
    """Sine/cosine table scaled to the embedding init size.

    Used only as the starting point of the learned position table: a shift
    by k positions is then a fixed rotation, which lets relative position
    rules form quickly.
    """
    pos = np.arange(n_pos)[:, None]
    freq = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    table = np.zeros((n_pos, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table * rms * math.sqrt(2.0)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in canonical (checkpoint) order."""
    d, h, dh, f = cfg.d_model, cfg.n_heads_per_layer, cfg.d_head, cfg.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (h, d, dh), p + "attn.wk": (h, d, dh),
            p + "attn.wv": (h, d, dh), p + "attn.wo": (h, dh, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelWeights":
        rng = np.random.default_rng(cfg.seed)
        params = {}
        resid_scale = 0.02 / math.sqrt(2 * cfg.n_layers)
        for name, shape in param_shapes(cfg).items():
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
                arr = np.zeros(shape)
            elif name.endswith("attn.wo") or name.endswith("ffn.w2"):
                arr = rng.normal(0.0, resid_scale, size=shape)
            elif name == "pos_emb":
                arr = sinusoid_positions(*shape) + rng.normal(0.0, 0.02, size=shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            params[name] = Tensor(arr)
        return cls(cfg, params)

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelWeights":
        shapes = param_shapes(cfg)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:5]}")
        params = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {arr.shape}")
            params[name] = Tensor(arr)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "ModelWeights":
        return ModelWeights.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()})

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())


# ---------------------------------------------------------------------------
# mask handling
# ---------------------------------------------------------------------------

def _mask_tensor(mask, cfg: ModelConfig) -> Tensor | None:
    """Normalise None / bool array / real array / Tensor to an n x h Tensor."""
    if mask is None:
        return None
    t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    if t.shape != cfg.mask_shape:
        raise ValueError(f"mask shape {t.shape} does not match model {cfg.mask_shape}")
    return t


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(model: ModelWeights, x: Tensor, name: str) -> Tensor:
    """Project (..., l, d) through every head's (d, d_head) matrix -> (..., h, l, d_head)."""
    cfg = model.config
    h, dh = cfg.n_heads_per_layer, cfg.d_head
    w = gc.reshape(gc.swapaxes(model[name], 0, 1), (cfg.d_model, h * dh))
    y = gc.matmul(x, w)
    y = gc.reshape(y, y.shape[:-1] + (h, dh))
    return gc.swapaxes(y, -2, -3)


def _head_outputs(model: ModelWeights, x: Tensor, layer: int) -> Tensor:
    """Per-head attention outputs Y, shape (..., h, l, d_head)."""
    cfg = model.config
    p = f"layers.{layer}.attn."
    l = x.shape[-2]
    if l > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence length {l} exceeds {cfg.max_seq_len}")
    q = _split_heads(model, x, p + "wq")
    k = _split_heads(model, x, p + "wk")
    v = _split_heads(model, x, p + "wv")
    scores = gc.mul(gc.matmul(q, gc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.d_head))
    probs = gc.causal_softmax(scores)
    return gc.matmul(probs, v)


def attention_head(model: ModelWeights, x: Tensor, layer: int, head: int) -> Tensor:
    """Single head's causal attention output Y^(layer, head), shape (l, d_head)."""
    x = gc.as_tensor(x)
    y = _head_outputs(model, x, layer)
    return gc.index(y, (Ellipsis, head, slice(None), slice(None)))


def masked_mha(model: ModelWeights, x, layer: int, mask_row=None) -> Tensor:
    """Sum over heads of ``m_j * Y_j @ W_O[j]``.

    Every head's ``Y_j`` is computed and scaled by its mask value, then all
    heads go through one stacked output projection, which is the per-head sum.
    ``mask_row`` is a length-h sequence (binary or real) or a Tensor; ``None``
    means every head is active.
    """
    x = gc.as_tensor(x)
    cfg = model.config
    h, dh = cfg.n_heads_per_layer, cfg.d_head
    y = _head_outputs(model, x, layer)
    if mask_row is not None:
        m = mask_row if isinstance(mask_row, Tensor) else Tensor(np.asarray(mask_row, dtype=np.float64))
        if m.shape != (h,):
            raise ValueError(f"mask row must have length {h}")
        y = gc.mul(y, gc.reshape(m, (h, 1, 1)))
    y = gc.swapaxes(y, -2, -3)
    y = gc.reshape(y, y.shape[:-2] + (h * dh,))
    wo = gc.reshape(model[f"layers.{layer}.attn.wo"], (h * dh, cfg.d_model))
    return gc.matmul(y, wo)


def ffn(model: ModelWeights, x: Tensor, layer: int) -> Tensor:
    p = f"layers.{layer}."
    h = gc.layernorm(x, model[p + "ln2.gain"], model[p + "ln2.bias"])
    h = gc.gelu(gc.add(gc.matmul(h, model[p + "ffn.w1"]), model[p + "ffn.b1"]))
    return gc.add(gc.matmul(h, model[p + "ffn.w2"]), model[p + "ffn.b2"])


def block(model: ModelWeights, x: Tensor, layer: int, mask_row=None) -> Tensor:
    p = f"layers.{layer}."
    a = masked_mha(model, gc.layernorm(x, model[p + "ln1.gain"], model[p + "ln1.bias"]), layer, mask_row)
    x = gc.add(x, a)
    return gc.add(x, ffn(model, x, layer))


def embed(model: ModelWeights, tokens: np.ndarray, positions=None) -> Tensor:
    """Token plus position embeddings.

    ``positions`` gives the position id of each of the ``l`` tokens, either
    one row shared by the batch or one row per sequence. The default is
    ``0 .. l-1``.
    """
    cfg = model.config
    l = tokens.shape[-1]
    if l == 0:
        raise ValueError("empty token sequence")
    pos = np.arange(l) if positions is None else np.asarray(positions, dtype=np.int64)
    if pos.shape != (l,) and pos.shape != tokens.shape:
        raise ValueError(f"position ids of shape {pos.shape} do not fit tokens of shape {tokens.shape}")
    if pos.min() < 0:
        raise ValueError("position ids must be nonnegative")
    if pos.max() >= cfg.max_seq_len:
        raise SequenceTooLongError(f"position {int(pos.max())} is beyond max_seq_len {cfg.max_seq_len}")
    return gc.add(gc.embedding(model["tok_emb"], tokens), gc.embedding(model["pos_emb"], pos))


def forward(model: ModelWeights, tokens, mask=None, positions=None) -> Tensor:
    """Logits for every position, shape (..., l, vocab).

    ``tokens`` is (l,) or (batch, l). ``mask`` is None (all heads), a binary
    head mask, real-valued soft mask, or a Tensor carrying gradients.
    ``positions`` optionally overrides the position ids (see ``embed``).
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError("token id out of vocabulary")
    m = _mask_tensor(mask, cfg)
    x = embed(model, tokens, positions)
    for i in range(cfg.n_layers):
        row = None if m is None else gc.index(m, i)
        x = block(model, x, i, row)
    x = gc.layernorm(x, model["ln_f.gain"], model["ln_f.bias"])
    return gc.matmul(x, gc.swapaxes(model["tok_emb"], 0, 1))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def greedy_decode_batch(model: ModelWeights, mask, prompts: list[list[int]], max_new: int,
                        stop_token: int, pad_token: int = 0, positions=None) -> list[list[int]]:
    """Greedy decoding of several prompts at once.

    Prompts are right-padded; causal attention keeps padding invisible to the
    real positions. Ties in argmax go to the lowest token id. A generated stop
    token ends that prompt's continuation and is kept as its last element.
    ``positions``, if given, lists the position id of every sequence index,
    as one row for all prompts or one row per prompt. Its length also bounds
    how far a sequence can grow.
    """
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompt must be non-empty")
    cfg = model.config
    pos = np.arange(cfg.max_seq_len) if positions is None else np.asarray(positions, dtype=np.int64)
    pos = np.broadcast_to(pos, (len(prompts), pos.shape[-1]))
    seqs = [list(map(int, p)) for p in prompts]
    outs: list[list[int]] = [[] for _ in prompts]
    active = list(range(len(prompts)))
    with gc.no_grad():
        for _ in range(max_new):
            active = [i for i in active if len(seqs[i]) < pos.shape[1]]
            if not active:
                break
            width = max(len(seqs[i]) for i in active)
            batch = np.full((len(active), width), pad_token, dtype=np.int64)
            for r, i in enumerate(active):
                batch[r, :len(seqs[i])] = seqs[i]
            logits = forward(model, batch, mask, pos[active, :width]).data
            still = []
            for r, i in enumerate(active):
                tok = int(np.argmax(logits[r, len(seqs[i]) - 1]))
                seqs[i].append(tok)
                outs[i].append(tok)
                if tok != stop_token:
                    still.append(i)
            active = still
            if not active:
                break
    return outs


def greedy_decode(model: ModelWeights, mask, prompt_tokens, max_new: int, stop_token: int,
                  positions=None) -> list[int]:
    return greedy_decode_batch(model, mask, [list(prompt_tokens)], max_new, stop_token, positions=positions)[0]
