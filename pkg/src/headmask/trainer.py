"""Backbone pretraining and head-mask training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .maskgate import MaskLogits, harden, sample_gumbel, soft_mask, ste_grad
from .tasks import (ConfigurationError, TaskSpec, generate_example, get_task, make_batch,
                    run_eval, stream_rng)
from .transformer import ModelConfig, ModelWeights, forward

log = logging.getLogger(__name__)


class BackboneUnconvergedError(RuntimeError):
    """Pretraining ended without meeting the instructed accuracy targets."""

    def __init__(self, message: str, weights: ModelWeights | None = None, scores: dict | None = None):
        super().__init__(message)
        self.weights = weights
        self.scores = scores or {}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, record: "TrainRecord"):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass
class MaskTrainConfig:
    tau_start: float = 4.0
    tau_end: float = 0.5
    tau_anneal_steps: int = 3000
    lr_warmup_start: float = 1e-6
    lr_peak: float = 1e-2
    lr_min: float = 1e-4
    warmup_steps: int = 3000
    total_steps: int = 20000
    lambda_penalty: float = 0.0
    batch_size: int = 16
    seed: int = 0
    init_mean: float = 4.0
    init_std: float = 0.02
    optimizer: str = "adam"
    log_every: int = 1

    def __post_init__(self):
        if self.tau_end > self.tau_start:
            raise ValueError("tau_end must not exceed tau_start")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if min(self.tau_end, self.lr_warmup_start, self.lr_peak, self.lr_min) <= 0:
            raise ValueError("temperatures and learning rates must be positive")
        if self.lambda_penalty < 0:
            raise ValueError("lambda_penalty must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def temperature_at(step: int, cfg: MaskTrainConfig) -> float:
    if step >= cfg.tau_anneal_steps:
        return cfg.tau_end
    frac = step / cfg.tau_anneal_steps
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


def warmup_cosine(step: int, start: float, peak: float, minimum: float, warmup: int, total: int) -> float:
    """Linear warmup ``start -> peak``, then cosine decay to ``minimum`` at ``total``."""
    if step < warmup:
        return start + (peak - start) * step / warmup
    if step >= total:
        return minimum
    span = total - warmup
    if span == 0:
        return minimum
    progress = (step - warmup) / span
    return minimum + 0.5 * (peak - minimum) * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, cfg: MaskTrainConfig) -> float:
    return warmup_cosine(step, cfg.lr_warmup_start, cfg.lr_peak, cfg.lr_min, cfg.warmup_steps,
                         cfg.total_steps)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, shapes: Sequence[tuple[int, ...]], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float) -> None:
        """In-place update of ``params``; ``None`` gradients are treated as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p -= lr * self.weight_decay * p


class SGD:
    def __init__(self, shapes=None):
        pass

    def step(self, params, grads, lr):
        for p, g in zip(params, grads):
            if g is not None:
                p -= lr * g


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    """Endless batches of generated examples.

    Batch ``k`` is drawn from its own training stream, so a run's data
    depends only on ``seed`` and never on held-out (odd) streams.
    """

    tasks: list[TaskSpec]
    seed: int
    with_instruction: bool

    def examples(self, index: int, size: int):
        rng = stream_rng(self.seed, index, "train")
        picks = rng.integers(0, len(self.tasks), size=size) if len(self.tasks) > 1 else np.zeros(size, int)
        return [generate_example(self.tasks[int(i)], rng) for i in picks]

    def batch(self, index: int, size: int):
        return make_batch(self.examples(index, size), self.with_instruction)



# ---------------------------------------------------------------------------
# mask training
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    step: int
    loss_ce: float
    penalty: float
    active_head_count: int
    tau: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


def mask_objective(logits: Tensor, targets, loss_masks, hard_mask: Tensor, lam: float):
    """Cross entropy on response tokens plus ``lam`` times the active-head count.

    Returns ``(loss, ce_value, penalty_value)``; the penalty is taken on the
    hard mask, so its gradient reaches the logits through the same graft.
    """
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    ce = gc.cross_entropy(logits, targets, loss_masks)
    if lam == 0:
        return ce, float(ce.data), 0.0
    pen = gc.mul(gc.sum_all(hard_mask), lam)
    return gc.add(ce, pen), float(ce.data), float(pen.data)


def train_mask(model: ModelWeights, corpus: Corpus, cfg: MaskTrainConfig,
               on_record: Callable[[TrainRecord], None] | None = None,
               init: MaskLogits | None = None) -> tuple[MaskLogits, list[TrainRecord]]:
    """Fit mask logits on a frozen backbone.

    One Gumbel draw per step is shared by the whole batch. Backbone weights
    never receive gradients and are left untouched.
    """
    model.set_trainable(False)
    n, h = model.config.mask_shape
    logits = init.values.copy() if init is not None else \
        MaskLogits.initial(n, h, cfg.seed, cfg.init_mean, cfg.init_std).values
    noise_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam([logits.shape]) if cfg.optimizer == "adam" else SGD()
    records: list[TrainRecord] = []

    for step in range(cfg.total_steps):
        tau = temperature_at(step, cfg)
        lr = lr_at(step, cfg)
        soft = soft_mask(logits, sample_gumbel(noise_rng, n, h), tau)
        hard = Tensor(harden(soft).astype(np.float64), requires_grad=True)
        tokens, targets, lmask, positions = corpus.batch(step, cfg.batch_size)
        try:
            out = forward(model, tokens, hard, positions)
            loss, ce, pen = mask_objective(out, targets, lmask, hard, cfg.lambda_penalty)
        except gc.NonFiniteError as exc:
            rec = TrainRecord(step, math.nan, math.nan, int(hard.data.sum()), tau, lr)
            raise NonFiniteLossError(f"non-finite values at step {step}: {exc}", rec) from exc
        rec = TrainRecord(step, ce, pen, int(hard.data.sum()), tau, lr)
        if not math.isfinite(ce + pen):
            raise NonFiniteLossError(f"non-finite loss at step {step}", rec)
        gc.backward(loss)
        grad_hard = hard.grad if hard.grad is not None else np.zeros_like(logits)
        opt.step([logits], [ste_grad(grad_hard, soft, tau)], lr)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return MaskLogits(logits, rng_seed=cfg.seed), records


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr_peak: float = 3e-3
    lr_start: float = 1e-5
    lr_min: float = 1e-4
    warmup_steps: int = 200
    weight_decay: float = 0.0
    head_dropout: float = 0.0
    stop_at_targets: bool = True
    seed: int = 0
    tasks: list[str] = field(default_factory=lambda: ["COPY", "REV", "SHIFT", "MAJ", "COUNT",
                                                      "COPY|MAJ", "MAJ|COPY"])
    eval_every: int = 500
    eval_examples: int = 100
    targets: dict[str, float] = field(default_factory=lambda: {"COPY": 0.99})
    log_every: int = 50


@dataclass
class PretrainRecord:
    step: int
    loss: float
    lr: float
    accuracy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_instructed(model: ModelWeights, names: Sequence[str], n: int, seed: int) -> dict[str, float]:
    return {name: run_eval(model, "instruction", get_task(name), n, seed).accuracy for name in names}


def pretrain_backbone(model_cfg: ModelConfig, cfg: PretrainConfig,
                      on_record: Callable[[PretrainRecord], None] | None = None
                      ) -> tuple[ModelWeights, list[PretrainRecord]]:
    """Train every backbone weight on the instructed task mixture.

    Stops early once all held-out instructed accuracy targets are met; raises
    ``BackboneUnconvergedError`` if they are still unmet after ``cfg.steps``.
    """
    if not cfg.tasks:
        raise ConfigurationError("pretraining needs at least one task")
    if not 0 <= cfg.head_dropout < 1:
        raise ConfigurationError("head_dropout must be in [0, 1)")
    specs = [get_task(t) for t in cfg.tasks]
    for name in cfg.targets:
        get_task(name)
    model = ModelWeights.init(model_cfg)
    model.set_trainable(True)
    names = list(model.params)
    params = [model[k] for k in names]
    opt = Adam([p.shape for p in params], weight_decay=cfg.weight_decay)
    corpus = Corpus(specs, cfg.seed, with_instruction=True)
    drop_rng = np.random.default_rng([cfg.seed, 2])
    records: list[PretrainRecord] = []
    scores: dict[str, float] = {}
    n, h = model_cfg.mask_shape

    for step in range(cfg.steps):
        lr = warmup_cosine(step, cfg.lr_start, cfg.lr_peak, cfg.lr_min, cfg.warmup_steps, cfg.steps)
        tokens, targets, lmask, positions = corpus.batch(step, cfg.batch_size)
        mask = None
        if cfg.head_dropout > 0:
            mask = (drop_rng.random((n, h)) >= cfg.head_dropout).astype(np.float64)
        loss = gc.cross_entropy(forward(model, tokens, mask, positions), targets, lmask)
        if not math.isfinite(float(loss.data)):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        for p in params:
            p.grad = None
        gc.backward(loss)
        opt.step([p.data for p in params], [p.grad for p in params], lr)

        done = step == cfg.steps - 1
        if (step + 1) % cfg.eval_every == 0 or done:
            model.set_trainable(False)
            scores = evaluate_instructed(model, list(cfg.targets), cfg.eval_examples, cfg.seed)
            model.set_trainable(True)
            rec = PretrainRecord(step, float(loss.data), lr, dict(scores))
            records.append(rec)
            if on_record:
                on_record(rec)
            log.info("pretrain step %d loss %.4f acc %s", step, float(loss.data), scores)
            if cfg.stop_at_targets and all(scores[k] >= v for k, v in cfg.targets.items()):
                break
        elif step % cfg.log_every == 0:
            rec = PretrainRecord(step, float(loss.data), lr)
            records.append(rec)
            if on_record:
                on_record(rec)

    model.set_trainable(False)
    if not all(scores.get(k, 0.0) >= v for k, v in cfg.targets.items()):
        raise BackboneUnconvergedError(
            f"backbone unconverged: held-out instructed accuracy {scores} below targets {cfg.targets}",
            weights=model, scores=scores)
    return model, records
