"""Command-line driver for offline head-mask experiments.

Every command reads one JSON config file plus flags and writes into the
config's output directory. A ``manifest.json`` there lists each produced
file and the command line that produced it.

Config keys (all optional except ``output_dir``)::

    output_dir    artifact directory (created if missing)
    model         ModelConfig fields
    pretrain      PretrainConfig fields
    mask_train    MaskTrainConfig fields (seed and lambda_penalty come from flags)
    tasks         task roster for analysis commands
    seeds         mask-training seeds, e.g. [42, 43, 44]
    lambdas       penalty values for sweeps, e.g. [0, 1e-5, 1e-4]
    q_grid        activation fractions for the quantile sweep
    eval          {"n_examples": int, "seed": int, "n_random": int}

Exit codes: 0 success, 3 configuration error, 4 missing artifact,
5 backbone unconverged, 6 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import artifacts as io
from .analysis import UndefinedSimilarityError, diff_ratio, intersect, similarity_matrix, sweep_quantiles
from .gradcore import NonFiniteError
from .maskgate import infer_mask
from .tasks import (ALL_TASKS, MASK_SOURCES, ConfigurationError, eval_examples, get_task, output_stage,
                    position_ids, render, run_eval)
from .trainer import (BackboneUnconvergedError, Corpus, MaskTrainConfig, NonFiniteLossError, PretrainConfig,
                      pretrain_backbone, train_mask)
from .transformer import ModelConfig

log = logging.getLogger("headmask")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_UNCONVERGED = 5
EXIT_NUMERIC = 6


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    output_dir: Path
    model: ModelConfig
    pretrain: PretrainConfig
    mask_train: dict
    tasks: list[str]
    seeds: list[int]
    lambdas: list[float]
    q_grid: list[float]
    eval_n: int = 200
    eval_seed: int = 1
    n_random: int = 20
    source: Path | None = field(default=None, compare=False)

    def mask_config(self, seed: int, lam: float) -> MaskTrainConfig:
        return MaskTrainConfig(**{**self.mask_train, "seed": seed, "lambda_penalty": lam})


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigurationError(f"unknown key(s) in '{section}': {', '.join(extra)}; "
                                 f"allowed: {', '.join(sorted(known))}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid '{section}' section: {exc}") from None


TOP_KEYS = {"output_dir", "model", "pretrain", "mask_train", "tasks", "seeds", "lambdas", "q_grid", "eval"}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    extra = sorted(set(raw) - TOP_KEYS)
    if extra:
        raise ConfigurationError(f"unknown top-level key(s) {', '.join(extra)}; allowed: {', '.join(sorted(TOP_KEYS))}")
    if "output_dir" not in raw:
        raise ConfigurationError("config needs 'output_dir'")
    out = Path(raw["output_dir"])
    if not out.is_absolute():
        out = path.parent / out

    model = _build(ModelConfig, raw.get("model", {}), "model")
    pre_raw = dict(raw.get("pretrain", {}))
    pretrain = _build(PretrainConfig, pre_raw, "pretrain")
    for t in pretrain.tasks:
        get_task(t)
    mask_raw = dict(raw.get("mask_train", {}))
    for k in ("seed", "lambda_penalty"):
        if k in mask_raw:
            raise ConfigurationError(f"'mask_train.{k}' is given per run with a flag, not in the config")
    _build(MaskTrainConfig, mask_raw, "mask_train")

    tasks = list(raw.get("tasks", ALL_TASKS))
    for t in tasks:
        get_task(t)
    ev = dict(raw.get("eval", {}))
    extra = sorted(set(ev) - {"n_examples", "seed", "n_random"})
    if extra:
        raise ConfigurationError(f"unknown key(s) in 'eval': {', '.join(extra)}")
    seeds = [int(s) for s in raw.get("seeds", [42, 43, 44])]
    lambdas = [float(x) for x in raw.get("lambdas", [0.0, 1e-5, 1e-4])]
    if any(x < 0 for x in lambdas):
        raise ConfigurationError("lambdas must be nonnegative")
    q_grid = [float(q) for q in raw.get("q_grid", [round(0.1 * k, 1) for k in range(1, 11)])]
    if any(not 0 < q <= 1 for q in q_grid) or q_grid != sorted(q_grid):
        raise ConfigurationError("q_grid must be ascending values in (0, 1]")
    return ExperimentConfig(out, model, pretrain, mask_raw, tasks, seeds, lambdas, q_grid,
                            int(ev.get("n_examples", 200)), int(ev.get("seed", 1)), int(ev.get("n_random", 20)),
                            source=path)


# ---------------------------------------------------------------------------
# artifact paths and manifest
# ---------------------------------------------------------------------------

def _lam_tag(lam: float) -> str:
    return "0" if lam == 0 else f"{lam:g}"


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "backbone.ckpt"


def mask_stem(cfg: ExperimentConfig, task: str, lam: float, seed: int) -> Path:
    safe = task.replace("|", "+")
    return cfg.output_dir / "masks" / f"{safe}_lam{_lam_tag(lam)}_seed{seed}"


def _suffixed(stem: Path, suffix: str) -> Path:
    # stems may contain dots (e.g. "lam0.5"), so Path.with_suffix would clip them
    return stem.parent / (stem.name + suffix)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; {hint}")
    return path


class Manifest:
    def __init__(self, cfg: ExperimentConfig, argv: list[str]):
        self.path = cfg.output_dir / "manifest.json"
        self.root = cfg.output_dir
        self.command = "headmask " + " ".join(shlex.quote(a) for a in argv)
        self.entries: dict[str, str] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text()).get("files", {})

    def add(self, path: Path) -> None:
        self.entries[str(path.relative_to(self.root))] = self.command

    def save(self) -> None:
        body = {"format": "headmask-manifest", "files": dict(sorted(self.entries.items()))}
        io.write_text(self.path, json.dumps(body, indent=2) + "\n")


def _load_backbone(cfg: ExperimentConfig):
    return io.load_checkpoint(_require(checkpoint_path(cfg), "run 'headmask pretrain' first"))


def _load_logits(cfg, task, lam, seed):
    stem = mask_stem(cfg, task, lam, seed)
    path = _suffixed(stem, ".logits")
    hint = f"run 'headmask train-mask --task {task} --lam {lam:g} --seed {seed}' first"
    return io.load_logits(_require(path, hint))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, args, manifest: Manifest) -> int:
    ckpt = checkpoint_path(cfg)
    log_path = cfg.output_dir / "pretrain_log.jsonl"
    try:
        model, records = pretrain_backbone(cfg.model, cfg.pretrain)
    except BackboneUnconvergedError as exc:
        if exc.weights is not None:
            partial = cfg.output_dir / "backbone.unconverged.ckpt"
            io.save_checkpoint(partial, exc.weights)
            manifest.add(partial)
        raise
    io.save_checkpoint(ckpt, model)
    io.write_records(log_path, records)
    manifest.add(ckpt)
    manifest.add(log_path)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_train_mask(cfg: ExperimentConfig, args, manifest: Manifest) -> int:
    spec = get_task(args.task)
    model = _load_backbone(cfg)
    mcfg = cfg.mask_config(args.seed, args.lam)
    stem = mask_stem(cfg, spec.name, args.lam, args.seed)
    try:
        logits, records = train_mask(model, Corpus([spec], args.seed, with_instruction=False), mcfg)
    except NonFiniteLossError as exc:
        io.write_records(_suffixed(stem, ".log.jsonl"), [exc.record])
        raise
    mask = infer_mask(logits)
    outputs = {".mask": lambda p: io.save_mask(p, mask), ".logits": lambda p: io.save_logits(p, logits),
               ".log.jsonl": lambda p: io.write_records(p, records)}
    for suffix, write in outputs.items():
        p = _suffixed(stem, suffix)
        write(p)
        manifest.add(p)
    print(f"{spec.name} lam={args.lam:g} seed={args.seed}: {int(mask.sum())} active heads -> {stem}.mask")
    return EXIT_OK


def _eval_rows(cfg, model, spec, source, args) -> list:
    n, seed = cfg.eval_n, cfg.eval_seed
    if source in ("instruction", "none"):
        return [run_eval(model, source, spec, n, seed)]
    if source == "trained":
        return [run_eval(model, "trained", spec, n, seed, logits=_load_logits(cfg, spec.name, args.lam, s))
                for s in args.seeds]
    if source == "random":
        if args.cardinality is not None:
            card = args.cardinality
        else:
            card = int(infer_mask(_load_logits(cfg, spec.name, args.lam, args.seeds[0])).sum())
        return [run_eval(model, "random", spec, n, seed, cardinality=card, mask_seed=k)
                for k in range(cfg.n_random)]
    if source == "quantile":
        if args.q is None:
            raise ConfigurationError("--mask-source quantile needs --q")
        logits = _load_logits(cfg, spec.name, args.lam, args.seeds[0])
        return [run_eval(model, "quantile", spec, n, seed, logits=logits, q=args.q)]
    if source == "intersection":
        masks = [infer_mask(_load_logits(cfg, spec.name, args.lam, s)) for s in args.seeds]
        return [run_eval(model, "intersection", spec, n, seed, mask=intersect(masks))]
    raise ConfigurationError(f"unknown mask source {source!r}")


def cmd_eval(cfg: ExperimentConfig, args, manifest: Manifest) -> int:
    spec = get_task(args.task)
    model = _load_backbone(cfg)
    args.seeds = args.seeds or cfg.seeds
    reports = _eval_rows(cfg, model, spec, args.mask_source, args)
    name = f"eval_{spec.name.replace('|', '+')}_{args.mask_source}"
    if args.mask_source not in ("instruction", "none"):
        name += f"_lam{_lam_tag(args.lam)}"
    if args.mask_source == "quantile":
        name += f"_q{args.q:g}"
    path = cfg.output_dir / "reports" / f"{name}.jsonl"
    io.write_report(path, reports)
    manifest.add(path)
    for r in reports:
        extra = f" ifr={r.ifr:.3f}" if r.ifr is not None else ""
        print(f"{r.task} {r.mask_source}: acc={r.accuracy:.3f} ter={r.token_error_rate:.3f}{extra} "
              f"heads={r.active_head_count}")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, args, manifest: Manifest) -> int:
    adir = cfg.output_dir / "analysis"
    seeds = args.seeds or cfg.seeds
    lam = args.lam
    what = args.analysis
    if what == "jaccard":
        rows = []
        for seed in seeds:
            masks = {t: infer_mask(_load_logits(cfg, t, lam, seed)) for t in cfg.tasks}
            sim = similarity_matrix(masks)
            path = adir / f"jaccard_lam{_lam_tag(lam)}_seed{seed}.csv"
            io.write_text(path, io.similarity_csv(sim))
            manifest.add(path)
            rows.append(path)
        print("\n".join(str(p) for p in rows))
    elif what == "sweep":
        spec = get_task(_need_task(args))
        model = _load_backbone(cfg)
        logits = _load_logits(cfg, spec.name, lam, seeds[0])
        q_grid = args.q_grid or cfg.q_grid
        examples = eval_examples(spec, cfg.eval_n, cfg.eval_seed)

        def evaluate(mask):
            rep = run_eval(model, "trained", spec, cfg.eval_n, cfg.eval_seed, mask=mask)
            first = rep.outputs[0]
            stage = output_stage(first, spec, examples[0].target_tokens)
            return rep.token_error_rate, f"[{stage}] {render(first)}"

        curve = sweep_quantiles(logits, q_grid, evaluate)
        path = adir / f"sweep_{spec.name.replace('|', '+')}_lam{_lam_tag(lam)}_seed{seeds[0]}.csv"
        io.write_text(path, io.sweep_csv(curve))
        manifest.add(path)
        print(path)
    elif what == "intersect":
        spec = get_task(_need_task(args))
        masks = [infer_mask(_load_logits(cfg, spec.name, lam, s)) for s in seeds]
        both = intersect(masks)
        stem = adir / f"intersect_{spec.name.replace('|', '+')}_lam{_lam_tag(lam)}"
        io.save_mask(_suffixed(stem, ".mask"), both)
        counts = {"seeds": seeds, "popcounts": [int(m.sum()) for m in masks], "intersection": int(both.sum())}
        io.write_text(_suffixed(stem, ".json"), json.dumps(counts) + "\n")
        manifest.add(_suffixed(stem, ".mask"))
        manifest.add(_suffixed(stem, ".json"))
        print(f"intersection of {len(masks)} masks: {int(both.sum())} active heads")
    elif what == "diffratio":
        spec = get_task(_need_task(args))
        masks = [infer_mask(_load_logits(cfg, spec.name, lam, s)) for s in seeds]
        lines = ["reference_seed,seed,diff_ratio"]
        for s, m in zip(seeds, masks):
            lines.append(f"{seeds[0]},{s},{diff_ratio(m, masks[0]):.6g}")
        path = adir / f"diffratio_{spec.name.replace('|', '+')}_lam{_lam_tag(lam)}.csv"
        io.write_text(path, "\n".join(lines) + "\n")
        manifest.add(path)
        print(path)
    return EXIT_OK


def _need_task(args) -> str:
    if not args.task:
        raise ConfigurationError(f"'analyze {args.analysis}' needs --task")
    return args.task


def cmd_export_corpus(cfg: ExperimentConfig, args, manifest: Manifest) -> int:
    spec = get_task(args.task)
    if args.split == "eval":
        examples = eval_examples(spec, args.n, cfg.eval_seed)
    else:
        examples = Corpus([spec], args.seed, with_instruction=False).examples(0, args.n)
    instructed = not args.no_instruction
    recs = []
    for ex in examples:
        prompt = ex.prompt(instructed)
        recs.append({"task": ex.task_name, "input": ex.input_tokens, "instruction": ex.instruction_tokens,
                     "prompt": prompt, "positions": position_ids(ex, instructed, len(prompt)).tolist(),
                     "target": ex.target_tokens})
    path = cfg.output_dir / "corpus" / f"{spec.name.replace('|', '+')}_{args.split}.jsonl"
    io.write_records(path, recs)
    manifest.add(path)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="headmask", description="Head-mask experiments on a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")

    sp = sub.add_parser("pretrain", help="pretrain the backbone on instructed tasks")
    common(sp)

    sp = sub.add_parser("train-mask", help="train a head mask for one task without instructions")
    common(sp)
    sp.add_argument("--task", required=True, choices=ALL_TASKS)
    sp.add_argument("--lam", type=float, default=0.0, help="sparsity penalty weight")
    sp.add_argument("--seed", type=int, required=True)

    sp = sub.add_parser("eval", help="evaluate one task under one mask source")
    common(sp)
    sp.add_argument("--task", required=True, choices=ALL_TASKS)
    sp.add_argument("--mask-source", required=True, choices=MASK_SOURCES)
    sp.add_argument("--lam", type=float, default=0.0)
    sp.add_argument("--seeds", type=int, nargs="+", help="mask seeds (default: config seeds)")
    sp.add_argument("--q", type=float, help="activation fraction for quantile masks")
    sp.add_argument("--cardinality", type=int, help="head count for random masks")

    sp = sub.add_parser("analyze", help="compare trained masks")
    sp.add_argument("analysis", choices=("jaccard", "sweep", "intersect", "diffratio"))
    common(sp)
    sp.add_argument("--task", choices=ALL_TASKS)
    sp.add_argument("--lam", type=float, default=0.0)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--q-grid", type=float, nargs="+")

    sp = sub.add_parser("export-corpus", help="write generated examples as JSON lines")
    common(sp)
    sp.add_argument("--task", required=True, choices=ALL_TASKS)
    sp.add_argument("--split", choices=("train", "eval"), default="eval")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0, help="training stream seed")
    sp.add_argument("--no-instruction", action="store_true")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "train-mask": cmd_train_mask, "eval": cmd_eval,
            "analyze": cmd_analyze, "export-corpus": cmd_export_corpus}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = None
    try:
        cfg = load_config(args.config)
        manifest = Manifest(cfg, argv)
        return COMMANDS[args.command](cfg, args, manifest)
    except (ConfigurationError, UndefinedSimilarityError) as exc:
        print(f"headmask: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, io.ArtifactError) as exc:
        print(f"headmask: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except BackboneUnconvergedError as exc:
        print(f"headmask: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except (NonFiniteLossError, NonFiniteError, FloatingPointError) as exc:
        print(f"headmask: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"headmask: {exc}", file=sys.stderr)
        return EXIT_OTHER
    finally:
        if manifest is not None and manifest.entries:
            manifest.save()


if __name__ == "__main__":
    sys.exit(main())
