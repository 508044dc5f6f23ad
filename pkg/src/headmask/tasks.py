"""Synthetic sequence tasks, prompt layout, metrics and evaluation.

Sequence layout (token ids)::

    BOS  input...  [INSTR]  SEP  target...  EOS

The instruction token is dropped in the instruction-free setting. BOS plays
the part of a fixed prompt template and stays. The remaining tokens keep the
positions they have in the instructed layout, leaving a one-slot gap where
the instruction was (see ``position_ids``). Loss is only taken on
``target + EOS``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .analysis import random_mask
from .maskgate import MaskLogits, infer_mask, quantile_mask
from .transformer import ModelWeights, greedy_decode_batch

N_SYMBOLS = 16
DIGIT0 = 16          # digits 0..9 -> 16..25
CLASS0, CLASS1 = 26, 27
SEP = 28             # prompt / response boundary
EOS = 29
PAD = 30
BAR = 31             # composite-field separator "|"
INSTR_BASE = 32     # one instruction token per task, then BOS
INPUT_LENGTH_RANGE = (8, 24)
INSTRUCTION_LENGTH = 1

SINGLE_TASKS = ("COPY", "REV", "SHIFT", "MAJ", "COUNT")
COMPOSITE_TASKS = ("COPY|MAJ", "MAJ|COPY")
ALL_TASKS = SINGLE_TASKS + COMPOSITE_TASKS
BOS = INSTR_BASE + len(ALL_TASKS)
VOCAB_USED = BOS + 1

MASK_SOURCES = ("instruction", "none", "random", "trained", "quantile", "intersection")


class ConfigurationError(ValueError):
    """A required mask artifact or parameter is missing."""


def token_name(t: int) -> str:
    if t < N_SYMBOLS:
        return f"s{t}"
    if DIGIT0 <= t < DIGIT0 + 10:
        return str(t - DIGIT0)
    named = {CLASS0: "C0", CLASS1: "C1", SEP: "<sep>", EOS: "<eos>", PAD: "<pad>", BAR: "|", BOS: "<bos>"}
    if t in named:
        return named[t]
    if INSTR_BASE <= t < BOS:
        return f"<{ALL_TASKS[t - INSTR_BASE]}>"
    return f"<{t}>"


def render(tokens: Sequence[int]) -> str:
    return " ".join(token_name(t) for t in tokens)


# ---------------------------------------------------------------------------
# target functions
# ---------------------------------------------------------------------------

def _copy(x):
    return list(x)


def _rev(x):
    return list(reversed(x))


def _shift(x):
    return [(t + 1) % N_SYMBOLS for t in x]


def _maj(x):
    high = sum(1 for t in x if t >= N_SYMBOLS // 2)
    return [CLASS1 if high > len(x) - high else CLASS0]


def _count(x):
    return [DIGIT0 + int(c) for c in str(sum(1 for t in x if t == 0))]


_SINGLE_FNS: dict[str, Callable[[list[int]], list[int]]] = {
    "COPY": _copy, "REV": _rev, "SHIFT": _shift, "MAJ": _maj, "COUNT": _count,
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    instruction_token: int
    input_length_range: tuple[int, int] = INPUT_LENGTH_RANGE
    alphabet: tuple[int, ...] = tuple(range(N_SYMBOLS))

    @property
    def parts(self) -> tuple[str, ...]:
        return tuple(self.name.split("|"))

    @property
    def is_composite(self) -> bool:
        return len(self.parts) == 2

    @property
    def is_classification(self) -> bool:
        return self.name in ("MAJ", "COUNT")

    def target_fn(self, x: Sequence[int]) -> list[int]:
        x = list(x)
        if self.is_composite:
            a, b = self.parts
            return _SINGLE_FNS[a](x) + [BAR] + _SINGLE_FNS[b](x)
        return _SINGLE_FNS[self.name](x)

    @property
    def max_target_len(self) -> int:
        hi = self.input_length_range[1]
        longest = {"COPY": hi, "REV": hi, "SHIFT": hi, "MAJ": 1, "COUNT": len(str(hi))}
        return sum(longest[p] for p in self.parts) + (1 if self.is_composite else 0)


TASKS: dict[str, TaskSpec] = {name: TaskSpec(name, INSTR_BASE + i) for i, name in enumerate(ALL_TASKS)}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigurationError(f"unknown task {name!r}; choose from {', '.join(ALL_TASKS)}") from None


@dataclass
class Example:
    task_name: str
    input_tokens: list[int]
    instruction_tokens: list[int]
    target_tokens: list[int]

    def prompt(self, with_instruction: bool) -> list[int]:
        instr = self.instruction_tokens if with_instruction else []
        return [BOS] + self.input_tokens + instr + [SEP]

    def sequence(self, with_instruction: bool) -> list[int]:
        return self.prompt(with_instruction) + self.target_tokens + [EOS]

    @property
    def instruction_index(self) -> int:
        """Index of the first instruction token in the instructed sequence."""
        return 1 + len(self.input_tokens)


def position_ids(example: Example, with_instruction: bool, length: int) -> np.ndarray:
    """Position id of each of the first ``length`` sequence indices.

    Dropping the instruction removes its tokens but not their slots: every
    token after them keeps the id it has in the instructed layout. With
    learned absolute positions this keeps the ablation about the missing
    instruction rather than about every later token moving one slot.
    """
    ids = np.arange(length, dtype=np.int64)
    if not with_instruction:
        ids[example.instruction_index:] += len(example.instruction_tokens)
    return ids


def generate_example(spec: TaskSpec, rng: np.random.Generator) -> Example:
    lo, hi = spec.input_length_range
    length = int(rng.integers(lo, hi + 1))
    x = [int(t) for t in rng.choice(np.asarray(spec.alphabet), size=length)]
    return Example(spec.name, x, [spec.instruction_token], spec.target_fn(x))


def stream_rng(seed: int, index: int, split: str) -> np.random.Generator:
    """Generator for one chunk of a data stream; train uses even, eval odd streams."""
    offset = {"train": 0, "eval": 1}[split]
    return np.random.default_rng([seed, 2 * index + offset])


def eval_examples(spec: TaskSpec, n: int, seed: int) -> list[Example]:
    rng = stream_rng(seed, 0, "eval")
    return [generate_example(spec, rng) for _ in range(n)]


def make_batch(examples: Sequence[Example], with_instruction: bool | Sequence[bool]):
    """Right-padded (tokens, next-token targets, loss mask, position ids) arrays."""
    if isinstance(with_instruction, bool):
        with_instruction = [with_instruction] * len(examples)
    seqs = [ex.sequence(w) for ex, w in zip(examples, with_instruction)]
    prompt_lens = [len(ex.prompt(w)) for ex, w in zip(examples, with_instruction)]
    width = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), width), PAD, dtype=np.int64)
    targets = np.full((len(seqs), width), PAD, dtype=np.int64)
    loss_mask = np.zeros((len(seqs), width), dtype=bool)
    for r, (s, p) in enumerate(zip(seqs, prompt_lens)):
        n = len(s) - 1
        tokens[r, :n] = s[:-1]
        targets[r, :n] = s[1:]
        # position p-1 is SEP, which predicts the first response token
        loss_mask[r, p - 1:n] = True
    positions = np.stack([position_ids(ex, w, width) for ex, w in zip(examples, with_instruction)])
    return tokens, targets, loss_mask, positions


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(preds: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> float:
    if len(preds) != len(targets):
        raise ValueError("prediction and target counts differ")
    if not preds:
        return 0.0
    return sum(list(p) == list(t) for p, t in zip(preds, targets)) / len(preds)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    return kernels.edit_distance(list(hyp), list(ref))


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def corpus_ter(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Total edits over total reference tokens, as WER is usually pooled."""
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("reference must be non-empty")
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / total


def split_composite(output: Sequence[int], separator: int = BAR) -> tuple[list[int], list[int]] | None:
    """The two fields of a composite answer, or None when it does not parse."""
    out = list(output)
    if out.count(separator) != 1:
        return None
    i = out.index(separator)
    left, right = out[:i], out[i + 1:]
    if not left or not right:
        return None
    return left, right


def ifr(outputs: Sequence[Sequence[int]], separator_token: int = BAR) -> float:
    if not outputs:
        return 0.0
    return sum(split_composite(o, separator_token) is not None for o in outputs) / len(outputs)


def strip_stop(tokens: Sequence[int], stop: int = EOS) -> list[int]:
    out = list(tokens)
    if out and out[-1] == stop:
        out.pop()
    return out


def output_stage(output: Sequence[int], spec: TaskSpec, target: Sequence[int]) -> str:
    """Coarse quality bucket of a decode: empty, garbage, task-shaped, correct."""
    out = list(output)
    if list(target) == out:
        return "correct"
    if not out:
        return "empty"
    if _task_shaped(out, spec, len(target)):
        return "task-shaped"
    return "garbage"


def _field_shaped(tokens: list[int], task: str, length: int | None) -> bool:
    if task in ("COPY", "REV", "SHIFT"):
        return all(t < N_SYMBOLS for t in tokens) and (length is None or len(tokens) == length)
    if task == "MAJ":
        return len(tokens) == 1 and tokens[0] in (CLASS0, CLASS1)
    return 1 <= len(tokens) <= 2 and all(DIGIT0 <= t < DIGIT0 + 10 for t in tokens)


def _task_shaped(out: list[int], spec: TaskSpec, target_len: int) -> bool:
    if spec.is_composite:
        fields = split_composite(out)
        if fields is None:
            return False
        return all(_field_shaped(f, p, None) for f, p in zip(fields, spec.parts))
    return _field_shaped(out, spec.name, target_len)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    mask_source: str
    accuracy: float
    token_error_rate: float
    ifr: float | None = None
    sub_metrics: dict[str, float] = field(default_factory=dict)
    active_head_count: int = 0
    n_examples: int = 0
    outputs: list[list[int]] = field(default_factory=list, repr=False, compare=False)
    targets: list[list[int]] = field(default_factory=list, repr=False, compare=False)

    def record(self) -> dict:
        """Serialisable fields (decodes are kept in memory only)."""
        return {
            "task": self.task,
            "mask_source": self.mask_source,
            "accuracy": self.accuracy,
            "token_error_rate": self.token_error_rate,
            "ifr": self.ifr,
            "sub_metrics": dict(self.sub_metrics),
            "active_head_count": self.active_head_count,
            "n_examples": self.n_examples,
        }


def resolve_mask(model: ModelWeights, mask_source: str, *, logits: MaskLogits | None = None,
                 mask=None, cardinality: int | None = None, q: float | None = None,
                 seed: int = 0) -> tuple[np.ndarray | None, bool]:
    """(head mask or None, include instruction) for an evaluation row."""
    cfg = model.config
    if mask_source == "instruction":
        return None, True
    if mask_source == "none":
        return None, False
    if mask_source == "random":
        if cardinality is None:
            if logits is None:
                raise ConfigurationError("random mask needs a cardinality or trained logits")
            cardinality = int(infer_mask(logits).sum())
        return random_mask(cfg.n_layers, cfg.n_heads_per_layer, cardinality,
                                np.random.default_rng([seed, 7919])), False
    if mask_source == "trained":
        if mask is not None:
            return np.asarray(mask, dtype=bool), False
        if logits is None:
            raise ConfigurationError("trained mask source needs mask logits")
        return infer_mask(logits), False
    if mask_source == "quantile":
        if logits is None or q is None:
            raise ConfigurationError("quantile mask source needs logits and q")
        return quantile_mask(logits, q), False
    if mask_source == "intersection":
        if mask is None:
            raise ConfigurationError("intersection mask source needs a mask")
        return np.asarray(mask, dtype=bool), False
    raise ConfigurationError(f"unknown mask source {mask_source!r}")


def score(spec: TaskSpec, outputs: list[list[int]], targets: list[list[int]], mask_source: str,
          active: int) -> EvalReport:
    report = EvalReport(
        task=spec.name, mask_source=mask_source,
        accuracy=accuracy(outputs, targets),
        token_error_rate=corpus_ter(outputs, targets),
        active_head_count=active, n_examples=len(outputs),
        outputs=outputs, targets=targets,
    )
    if spec.is_composite:
        report.ifr = ifr(outputs)
        parsed = [(split_composite(o), split_composite(t)) for o, t in zip(outputs, targets)]
        following = [(o, t) for o, t in parsed if o is not None]
        for k, part in enumerate(spec.parts):
            key_acc, key_ter = f"{part}.accuracy", f"{part}.token_error_rate"
            if following:
                report.sub_metrics[key_acc] = accuracy([o[k] for o, _ in following], [t[k] for _, t in following])
                report.sub_metrics[key_ter] = corpus_ter([o[k] for o, _ in following], [t[k] for _, t in following])
            else:
                report.sub_metrics[key_acc] = 0.0
                report.sub_metrics[key_ter] = 1.0
    return report


def decode_examples(model: ModelWeights, examples: Sequence[Example], mask, with_instruction: bool,
                    spec: TaskSpec) -> list[list[int]]:
    prompts = [ex.prompt(with_instruction) for ex in examples]
    room = model.config.max_seq_len - (0 if with_instruction else INSTRUCTION_LENGTH)
    positions = np.stack([position_ids(ex, with_instruction, room) for ex in examples])
    raw = greedy_decode_batch(model, mask, prompts, spec.max_target_len + 2, EOS, pad_token=PAD,
                              positions=positions)
    return [strip_stop(o) for o in raw]


def run_eval(model: ModelWeights, mask_source: str, spec: TaskSpec, n_examples: int, seed: int, *,
             logits: MaskLogits | None = None, mask=None, cardinality: int | None = None,
             q: float | None = None, mask_seed: int = 0) -> EvalReport:
    """Greedy-decode ``n_examples`` held-out examples under one evaluation row.

    Every row with the same ``seed`` sees the same examples, so rows are
    directly comparable.
    """
    head_mask, with_instr = resolve_mask(model, mask_source, logits=logits, mask=mask,
                                         cardinality=cardinality, q=q, seed=mask_seed)
    examples = eval_examples(spec, n_examples, seed)
    outputs = decode_examples(model, examples, head_mask, with_instr, spec)
    active = model.config.n_heads_total if head_mask is None else int(np.sum(head_mask))
    label = mask_source if q is None else f"quantile {q:g}"
    return score(spec, outputs, [ex.target_tokens for ex in examples], label, active)
