"""Command-line interface for the full experiment lifecycle.

Exit codes: 0 success, 1 usage error, 2 format/validation error,
3 divergence. All status messages go to standard error; anything meant for
machines (eval scores) goes to standard out.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import (LoRAAdapter, as_overrides, init_adapter, load_adapter,
                      param_count, save_adapter)
from .continual import (RegConfig, TaskRecord, accumulate_importance)
from .data import (ParallelCorpus, SyntheticTaskSpec, Vocab, build_vocab,
                   write_task)
from .errors import ConfigError, DivergenceError, FormatError, LoranmtError
from .experiments import (MODE_LABELS, ForgettingConfig, RankSweepConfig,
                          forgetting_run, rank_sweep)
from .model import Model, ModelConfig, TargetSelector, build_model
from .mole import AdapterMixture, MixtureComponent, calibrate, compose
from .train import (RunHistory, TrainConfig, corpus_bleu, token_accuracy,
                    train)

CONFIG_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class ExperimentManifest:
    """Hash-pinned record of everything a command produced or consumed.

    Loading re-verifies that each referenced file still exists and still has
    the recorded digest, so any later step can trust the artifact set.
    """

    artifacts: dict[str, str] = field(default_factory=dict)  # label -> path
    hashes: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, label: str, path, base_dir: Path) -> None:
        path = Path(path)
        self.artifacts[label] = str(path.relative_to(base_dir))
        self.hashes[label] = _sha256(path)

    def save(self, path) -> None:
        payload = {"version": CONFIG_VERSION, "artifacts": self.artifacts,
                   "hashes": self.hashes, "seeds": self.seeds,
                   "config": self.config}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True),
                              "utf-8")

    @classmethod
    def load(cls, path, verify: bool = True) -> "ExperimentManifest":
        path = Path(path)
        raw = json.loads(path.read_text("utf-8"))
        manifest = cls(artifacts=raw.get("artifacts", {}),
                       hashes=raw.get("hashes", {}),
                       seeds=raw.get("seeds", {}),
                       config=raw.get("config", {}))
        if verify:
            for label, rel in manifest.artifacts.items():
                target = path.parent / rel
                if not target.exists():
                    raise FormatError(f"manifest references missing file "
                                      f"{rel!r}", offset=0)
                digest = _sha256(target)
                if digest != manifest.hashes.get(label):
                    raise FormatError(
                        f"hash mismatch for {rel!r}: manifest has "
                        f"{manifest.hashes.get(label)}, file has {digest}",
                        offset=0)
        return manifest


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: {err}", offset=err.pos) from err


def _load_splits(task_dir, splits=("train", "valid")) -> dict[str, ParallelCorpus]:
    return {s: ParallelCorpus.load(task_dir, s) for s in splits}


def _reg_from_file(path) -> RegConfig:
    raw = _load_json(path)
    raw.pop("version", None)
    return RegConfig(**raw)


# ----------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    spec = SyntheticTaskSpec.from_json(args.spec)
    write_task(spec, args.out)
    _log(f"synth: wrote {spec.name!r} ({spec.kind}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    raw.pop("version", None)
    task_dir = raw["task_dir"]
    model_section = dict(raw.get("model", {}))
    train_section = dict(raw.get("train", {}))
    for flag in ("lr", "batch_size", "max_epochs", "seed"):
        value = getattr(args, flag)
        if value is not None:
            train_section[flag] = value

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(task_dir)
    vocab = build_vocab([splits["train"], splits["valid"]],
                        max_size=raw.get("max_vocab", 32000))
    mcfg = ModelConfig(vocab_size=len(vocab), **model_section)
    tcfg = TrainConfig(**train_section)
    model = build_model(mcfg)
    _log(f"train: {model.count_params()} params, vocab {len(vocab)}, "
         f"{len(splits['train'])} train pairs")
    history = train(model, None, splits["train"], splits["valid"], vocab,
                    tcfg, acc_tasks={"valid": splits["valid"]})

    vocab.save(out / "vocab.json")
    model.save(out / "base.ckpt")
    history.save(out / "history.ndjson")
    effective = {"version": CONFIG_VERSION, "task_dir": str(task_dir),
                 "max_vocab": raw.get("max_vocab", 32000),
                 "model": dataclasses.asdict(mcfg),
                 "train": dataclasses.asdict(tcfg)}
    (out / "effective_config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True), "utf-8")
    manifest = ExperimentManifest(seeds={"train": tcfg.seed},
                                  config=effective)
    for label, name in (("checkpoint", "base.ckpt"), ("vocab", "vocab.json"),
                        ("history", "history.ndjson"),
                        ("effective_config", "effective_config.json")):
        manifest.add(label, out / name, out)
    manifest.save(out / "manifest.json")
    _log(f"train: final val_loss {history.last()['val_loss']:.4f}, "
         f"wrote {out}")
    return 0


def cmd_lora_train(args) -> int:
    model = Model.load(args.base)
    vocab = Vocab.load(args.vocab)
    splits = _load_splits(args.task_dir)
    reg = _reg_from_file(args.reg) if args.reg else None
    history_records = [TaskRecord.load(d) for d in (args.history or [])]
    tcfg = TrainConfig(scope="adapter-only", lr=args.lr,
                       batch_size=args.batch_size, max_epochs=args.max_epochs,
                       patience=args.patience, seed=args.seed,
                       warmup_steps=args.warmup_steps, reg=reg)
    adapter = init_adapter(model, TargetSelector(args.targets), r=args.rank,
                           seed=args.seed, task_name=args.task_name)
    _log(f"lora-train: rank {args.rank}, {param_count(adapter)} adapter "
         f"params over {len(adapter.entries)} targets")
    run = train(model, adapter, splits["train"], splits["valid"], vocab, tcfg,
                history=history_records or None,
                acc_tasks={"valid": splits["valid"]})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_adapter(adapter, out / "adapter.lora", dtype=args.store_dtype)
    run.save(out / "history.ndjson")
    effective = {"version": CONFIG_VERSION, "base": str(args.base),
                 "task_dir": str(args.task_dir), "targets": args.targets,
                 "rank": args.rank, "task_name": args.task_name,
                 "store_dtype": args.store_dtype,
                 "reg": dataclasses.asdict(reg) if reg else None,
                 "history": list(args.history or []),
                 "train": {k: v for k, v in dataclasses.asdict(tcfg).items()
                           if k != "reg"}}
    (out / "effective_config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True), "utf-8")
    manifest = ExperimentManifest(seeds={"adapter": args.seed},
                                  config=effective)
    manifest.add("adapter", out / "adapter.lora", out)
    manifest.add("history", out / "history.ndjson", out)

    if args.importance_m:
        importance = accumulate_importance(model, adapter, splits["train"],
                                           vocab, M=args.importance_m)
        if args.normalize_importance:
            importance = importance.normalized()
        metric = token_accuracy(model, splits["valid"], vocab,
                                overrides=as_overrides(model, adapter))
        record = TaskRecord(args.task_name, adapter.clone(), importance,
                            corpus_ref=str(args.task_dir),
                            metric_at_freeze=metric)
        record.save(out / "record")
        manifest.add("record_manifest", out / "record" / "manifest.json", out)
        _log(f"lora-train: task record frozen at metric {metric:.4f}")
    manifest.save(out / "manifest.json")
    _log(f"lora-train: wrote {out}")
    return 0


def cmd_importance(args) -> int:
    model = Model.load(args.base)
    adapter = load_adapter(args.adapter)
    vocab = Vocab.load(args.vocab)
    corpus = ParallelCorpus.load(args.corpus, args.split)
    importance = accumulate_importance(model, adapter, corpus, vocab,
                                       M=args.m, mode=args.mode)
    if args.normalize:
        importance = importance.normalized()
    importance.save(args.out)
    _log(f"importance: {args.mode} over M={args.m} examples -> {args.out}")
    return 0


def cmd_rank_sweep(args) -> int:
    cfg = RankSweepConfig.from_json(args.config)
    if args.ranks:
        cfg = dataclasses.replace(
            cfg, ranks=tuple(int(r) for r in args.ranks.split(",")))
    if args.seeds:
        cfg = dataclasses.replace(
            cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    result = rank_sweep(cfg, args.out)
    summary = result["summary"]
    _log(f"rank-sweep: base {summary['base_acc']:.4f}, "
         f"full-ft {summary['full_ft_mean_acc']:.4f}, "
         f"top rank recovered {summary['top_rank_recovered_fraction']:.2%}")
    return 0


def cmd_calibrate(args) -> int:
    model = Model.load(args.base)
    vocab = Vocab.load(args.vocab)
    adapters = {Path(p).stem: load_adapter(p) for p in args.adapters}
    val_sets = {Path(d).name: ParallelCorpus.load(d, args.split)
                for d in args.domains}
    grid = [float(g) for g in args.grid.split(",")]

    def metric(m, weights, corpus):
        return token_accuracy(m, corpus, vocab, overrides=weights or None)

    report = calibrate(model, adapters, val_sets, grid, metric)
    mixture = AdapterMixture(
        [MixtureComponent(aid, alpha=1.0, lam=report.lambdas[aid])
         for aid in sorted(adapters)],
        base_hash=model.content_hash())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixture.save(out / "mixture.json")
    (out / "calibration_report.json").write_text(report.to_json(), "utf-8")
    _log(f"calibrate: lambdas {report.lambdas} -> {out}")
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.base)
    vocab = Vocab.load(args.vocab)
    corpus = ParallelCorpus.load(args.corpus, args.split)
    weights = None
    mixture_hash = None
    if args.mixture:
        if not args.adapters:
            raise ConfigError("--mixture requires --adapters")
        adapters = {Path(p).stem: load_adapter(p) for p in args.adapters}
        mixture = AdapterMixture.load(args.mixture,
                                      base_hash=model.content_hash())
        weights = compose(model, mixture, adapters) or None
        mixture_hash = mixture.content_hash()
    if args.metric == "acc":
        score = token_accuracy(model, corpus, vocab, overrides=weights)
    else:
        score = corpus_bleu(model, corpus, vocab, overrides=weights)
    print(json.dumps({"metric": args.metric, "score": score,
                      "split": args.split, "corpus": str(args.corpus),
                      "mixture_hash": mixture_hash}, sort_keys=True))
    return 0


def cmd_forgetting_run(args) -> int:
    cfg = ForgettingConfig.from_json(args.config)
    if args.grid:
        raw = _load_json(args.grid)
        cfg = dataclasses.replace(
            cfg,
            lambda_grid=tuple(float(x) for x in raw["lambda"]),
            gamma_grid=tuple(float(x) for x in raw["gamma"]))
    if args.seeds:
        cfg = dataclasses.replace(
            cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    alias = {"grad": "gradient"}
    modes = tuple(alias.get(m.strip(), m.strip())
                  for m in args.modes.split(","))
    result = forgetting_run(cfg, args.out, modes=modes)
    for mode, row in result["selected"].items():
        _log(f"forgetting-run: {mode:8s} lambda={row['lambda_reg']:g} "
             f"gamma={row['gamma']:g} old {row['old_acc']:.4f} "
             f"new {row['new_acc']:.4f} H {row['h']:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_state_from_paths, create_app

    state = build_state_from_paths(args.base, args.vocab, args.adapters)
    app = create_app(state)
    _log(f"serve: base {state.base_hash[:12]}..., "
         f"{len(state.adapters)} adapters, http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------- arg parsing

class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract here reserves 2 for
    # format/validation problems, so usage maps to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loranmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task directory")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain a base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lora-train", help="fine-tune an adapter on a task")
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task-dir", dest="task_dir", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task-name", dest="task_name", default="task")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=8)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reg", help="RegConfig JSON file")
    p.add_argument("--history", action="append",
                   help="task record directory, repeatable")
    p.add_argument("--importance-m", dest="importance_m", type=int,
                   help="freeze a task record using M importance examples")
    p.add_argument("--normalize-importance", dest="normalize_importance",
                   action="store_true")
    p.add_argument("--store-dtype", dest="store_dtype", default="binary16",
                   choices=("binary16", "binary32"))
    p.set_defaults(func=cmd_lora_train)

    p = sub.add_parser("importance", help="accumulate gradient importance")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("-M", dest="m", type=int, required=True)
    p.add_argument("--mode", default="abs", choices=("abs", "signed"))
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("rank-sweep", help="rank vs quality protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranks", help="comma list overriding the config")
    p.add_argument("--seeds", help="comma list overriding the config")
    p.set_defaults(func=cmd_rank_sweep)

    p = sub.add_parser("calibrate", help="per-adapter lambda calibration")
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--domains", nargs="+", required=True,
                   help="task directories, one per domain")
    p.add_argument("--grid", required=True, help="comma list of lambdas")
    p.add_argument("--split", default="valid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="score a corpus under an optional mixture")
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", default="acc", choices=("acc", "bleu"))
    p.add_argument("--mixture")
    p.add_argument("--adapters", nargs="*")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forgetting-run", help="two-task forgetting protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="none,l2,grad")
    p.add_argument("--grid", help="JSON file with lambda/gamma lists")
    p.add_argument("--seeds", help="comma list overriding the config")
    p.set_defaults(func=cmd_forgetting_run)

    p = sub.add_parser("serve", help="start the translation service")
    p.add_argument("--base", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--adapters", required=True,
                   help="directory of .lora files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except DivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 3
    except (LoranmtError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
