"""Desk-scale experiment pipeline: one backbone, many masks, cached on disk.

``DeskExperiment`` pretrains the toy backbone once, trains every mask the
claim reproductions need and evaluates the rows they compare. Each artifact
is written to the cache directory as soon as it exists, so an interrupted
run resumes where it stopped and a finished run is read back in seconds.
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts as io
from .analysis import diff_ratio, intersect, jaccard, random_mask
from .maskgate import MaskLogits, infer_mask, quantile_mask
from .tasks import (COMPOSITE_TASKS, SINGLE_TASKS, decode_examples, eval_examples, get_task, output_stage,
                    render, score)
from .trainer import (BackboneUnconvergedError, Corpus, MaskTrainConfig, PretrainConfig, pretrain_backbone,
                      train_mask)
from .transformer import ModelConfig, ModelWeights

log = logging.getLogger(__name__)


def _default_mask_cfg() -> MaskTrainConfig:
    return MaskTrainConfig(total_steps=600, warmup_steps=150, tau_anneal_steps=150, lr_peak=0.1,
                           batch_size=16, log_every=50)


@dataclass
class DeskConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_model=64, seed=0))
    pretrain: PretrainConfig = field(
        default_factory=lambda: PretrainConfig(steps=6000, eval_every=1000, stop_at_targets=False))
    mask: MaskTrainConfig = field(default_factory=_default_mask_cfg)
    seeds: tuple[int, ...] = (42, 43, 44)
    lambdas: tuple[float, ...] = (0.0, 1e-5, 1e-4)
    lambda_tasks: tuple[str, ...] = ("MAJ",)
    rome_task: str = "MAJ"
    sweep_task: str = "COPY"
    q_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    eval_n: int = 200
    eval_seed: int = 1
    n_random: int = 20

    def fingerprint(self) -> str:
        """Stable text identifying every setting that shapes the artifacts."""
        body = {"model": self.model.to_dict(), "pretrain": asdict(self.pretrain), "mask": asdict(self.mask),
                "eval_n": self.eval_n, "eval_seed": self.eval_seed}
        return json.dumps(body, sort_keys=True)


def _median(xs) -> float:
    return float(statistics.median(xs))


class DeskExperiment:
    def __init__(self, cache_dir, cfg: DeskConfig | None = None):
        self.cfg = cfg or DeskConfig()
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        stamp = self.dir / "fingerprint.json"
        fp = self.cfg.fingerprint()
        if stamp.exists() and stamp.read_text() != fp:
            raise ValueError(f"cache {self.dir} was built with different settings; use a fresh directory")
        io.write_text(stamp, fp)
        self._model: ModelWeights | None = None
        self.pretrain_scores: dict[str, float] = {}
        self.backbone_converged = True

    # -- artifacts -----------------------------------------------------------

    @property
    def model(self) -> ModelWeights:
        if self._model is None:
            self._model = self._load_or_pretrain()
        return self._model

    def _load_or_pretrain(self) -> ModelWeights:
        ckpt = self.dir / "backbone.ckpt"
        info = self.dir / "backbone.json"
        if ckpt.exists() and info.exists():
            meta = json.loads(info.read_text())
            self.pretrain_scores, self.backbone_converged = meta["scores"], meta["converged"]
            return io.load_checkpoint(ckpt)
        log.info("pretraining backbone")
        try:
            model, records = pretrain_backbone(self.cfg.model, self.cfg.pretrain)
            scores = records[-1].accuracy
            converged = True
        except BackboneUnconvergedError as exc:
            model, scores, converged = exc.weights, exc.scores, False
            records = []
        io.save_checkpoint(ckpt, model)
        io.write_records(self.dir / "pretrain_log.jsonl", records)
        io.write_text(info, json.dumps({"scores": scores, "converged": converged}) + "\n")
        self.pretrain_scores, self.backbone_converged = scores, converged
        return model

    def _stem(self, task: str, lam: float, seed: int) -> Path:
        return self.dir / "masks" / f"{task.replace('|', '+')}_lam{lam:g}_seed{seed}"

    def logits(self, task: str, lam: float, seed: int) -> MaskLogits:
        stem = self._stem(task, lam, seed)
        path = stem.parent / (stem.name + ".logits")
        if path.exists():
            return io.load_logits(path)
        mcfg = MaskTrainConfig(**{**asdict(self.cfg.mask), "seed": seed, "lambda_penalty": lam})
        log.info("training mask %s lam=%g seed=%d", task, lam, seed)
        logits, records = train_mask(self.model, Corpus([get_task(task)], seed, with_instruction=False), mcfg)
        io.write_records(stem.parent / (stem.name + ".log.jsonl"), records)
        io.save_logits(path, logits)
        return logits

    def mask(self, task: str, lam: float, seed: int) -> np.ndarray:
        return infer_mask(self.logits(task, lam, seed))

    # -- evaluation rows -------------------------------------------------------

    def _row(self, key: str, task: str, head_mask, with_instruction: bool, label: str,
             keep_outputs: bool = False) -> dict:
        path = self.dir / "evals" / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text())
        spec = get_task(task)
        examples = eval_examples(spec, self.cfg.eval_n, self.cfg.eval_seed)
        outputs = decode_examples(self.model, examples, head_mask, with_instruction, spec)
        active = self.cfg.model.n_heads_total if head_mask is None else int(np.sum(head_mask))
        rep = score(spec, outputs, [ex.target_tokens for ex in examples], label, active)
        row = rep.record()
        if keep_outputs:
            row["stages"] = [output_stage(o, spec, ex.target_tokens) for o, ex in zip(outputs, examples)]
            row["sample"] = render(outputs[0])
        io.write_text(path, json.dumps(row) + "\n")
        return row

    def instructed(self, task: str) -> dict:
        return self._row(f"{task}_instruction", task, None, True, "instruction")

    def bare(self, task: str) -> dict:
        return self._row(f"{task}_none", task, None, False, "none")

    def trained(self, task: str, lam: float, seed: int) -> dict:
        return self._row(f"{task}_trained_lam{lam:g}_seed{seed}", task, self.mask(task, lam, seed), False,
                         "trained")

    def random_rows(self, task: str, cardinality: int) -> list[dict]:
        cfg = self.cfg.model
        rows = []
        for k in range(self.cfg.n_random):
            m = random_mask(cfg.n_layers, cfg.n_heads_per_layer, cardinality, np.random.default_rng([k, 7919]))
            rows.append(self._row(f"{task}_random_c{cardinality}_k{k}", task, m, False, "random"))
        return rows

    def quantile_row(self, task: str, seed: int, q: float) -> dict:
        m = quantile_mask(self.logits(task, 0.0, seed), q)
        return self._row(f"{task}_quantile{q:g}_seed{seed}", task, m, False, f"quantile {q:g}", keep_outputs=True)

    def intersection_row(self, task: str, lam: float) -> dict:
        m = intersect([self.mask(task, lam, s) for s in self.cfg.seeds])
        return self._row(f"{task}_intersection_lam{lam:g}", task, m, False, "intersection")

    def trained_cardinality(self, task: str) -> int:
        return int(round(_median([self.mask(task, 0.0, s).sum() for s in self.cfg.seeds])))

    # -- claim summaries ---------------------------------------------------------

    def instruction_free_table(self) -> list[dict]:
        """Per single task: instructed, bare, trained (median) and random (median) accuracy."""
        table = []
        for task in SINGLE_TASKS:
            trained = [self.trained(task, 0.0, s)["accuracy"] for s in self.cfg.seeds]
            card = self.trained_cardinality(task)
            rand = [r["accuracy"] for r in self.random_rows(task, card)]
            table.append({"task": task, "instructed": self.instructed(task)["accuracy"],
                          "none": self.bare(task)["accuracy"], "trained": _median(trained),
                          "trained_per_seed": trained, "random": _median(rand), "random_max": max(rand),
                          "cardinality": card})
        return table

    def composite_table(self) -> list[dict]:
        table = []
        for task in COMPOSITE_TASKS:
            rows = [self.trained(task, 0.0, s) for s in self.cfg.seeds]
            table.append({"task": task, "trained_ifr": _median([r["ifr"] for r in rows]),
                          "none_ifr": self.bare(task)["ifr"], "instructed_ifr": self.instructed(task)["ifr"],
                          "trained_accuracy": _median([r["accuracy"] for r in rows])})
        return table

    def lambda_table(self) -> list[dict]:
        table = []
        for task in self.cfg.lambda_tasks:
            for lam in self.cfg.lambdas:
                counts = [int(self.mask(task, lam, s).sum()) for s in self.cfg.seeds]
                accs = [self.trained(task, lam, s)["accuracy"] for s in self.cfg.seeds]
                table.append({"task": task, "lambda": lam, "median_heads": _median(counts), "heads": counts,
                              "median_accuracy": _median(accs)})
        return table

    def jaccard_table(self) -> dict:
        pairs = {"COPY~REV": [], "COPY~MAJ": []}
        for s in self.cfg.seeds:
            copy = self.mask("COPY", 0.0, s)
            pairs["COPY~REV"].append(jaccard(copy, self.mask("REV", 0.0, s)))
            pairs["COPY~MAJ"].append(jaccard(copy, self.mask("MAJ", 0.0, s)))
        return {k: {"per_seed": v, "median": _median(v)} for k, v in pairs.items()}

    def sweep_table(self) -> list[dict]:
        """Quantile sweep on the sweep task, medians over seeds, plus modal output stage."""
        task = self.cfg.sweep_task
        out = []
        for q in self.cfg.q_grid:
            rows = [self.quantile_row(task, s, q) for s in self.cfg.seeds]
            stages = [st for r in rows for st in r["stages"]]
            modal = max(sorted(set(stages)), key=stages.count)
            out.append({"q": q, "ter": _median([r["token_error_rate"] for r in rows]),
                        "active": rows[0]["active_head_count"], "modal_stage": modal,
                        "stage_counts": {k: stages.count(k) for k in sorted(set(stages))},
                        "samples": [r["sample"] for r in rows]})
        return out

    def rome_table(self) -> dict:
        task, seeds = self.cfg.rome_task, self.cfg.seeds
        masks = [self.mask(task, 0.0, s) for s in seeds]
        accs = [self.trained(task, 0.0, s)["accuracy"] for s in seeds]
        both = intersect(masks)
        ratios = [diff_ratio(masks[i], masks[j]) for i in range(len(masks)) for j in range(len(masks)) if i != j]
        inter = self.intersection_row(task, 0.0) if both.any() else {"accuracy": 0.0}
        return {"task": task, "accuracies": accs, "heads": [int(m.sum()) for m in masks],
                "diff_ratios": ratios, "intersection_heads": int(both.sum()),
                "intersection_accuracy": inter["accuracy"]}
