"""Protocol engines: the rank sweep, the two-task forgetting benchmark, and
the toy two-style setup.

Each engine is deterministic given its config, writes every table it produces
(CSV with a header row, NDJSON histories) plus the effective config next to
the outputs, and returns the same data as plain dicts for in-process callers.
Default sizes are pilot-tuned to single-core desk scale.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import LoRAAdapter, as_overrides, init_adapter, param_count
from .continual import (RegConfig, TaskRecord, accumulate_importance,
                        grid_search_reg, harmonic_mean)
from .data import (ParallelCorpus, SyntheticTaskSpec, Vocab, build_vocab,
                   gen_synthetic)
from .errors import ConfigError
from .model import Model, ModelConfig, TargetSelector, build_model
from .train import RunHistory, TrainConfig, token_accuracy, train

CONFIG_VERSION = 1


def clone_model(m: Model) -> Model:
    """Independent model with identical parameter bytes."""
    c = build_model(m.cfg)
    for name, p in m.params.items():
        c.params[name].data[...] = p.data
    return c


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k])
                             for k in columns})


def _write_config(out_dir: Path, cfg) -> None:
    payload = {"version": CONFIG_VERSION, **asdict(cfg)}
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), "utf-8")


def _tuples(raw: dict, *keys) -> dict:
    for key in keys:
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    return raw


def _quiet_init(m: Model, targets: str, r: int, seed: int,
                task_name: str) -> LoRAAdapter:
    # ranks at min(p, q) are intentional here; the full-rank warning is for
    # interactive misuse, not for sweep upper ends
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return init_adapter(m, TargetSelector(targets), r=r, seed=seed,
                            task_name=task_name)


# ----------------------------------------------------------------- rank sweep

@dataclass
class RankSweepConfig:
    """Domain-adaptation sweep: pretrain on copy, adapt to a cipher domain
    with full fine-tuning and with adapters of increasing rank."""

    vocab_size: int = 200
    train_size: int = 5000
    valid_size: int = 400
    test_size: int = 400
    len_range: tuple[int, int] = (3, 10)
    ranks: tuple[int, ...] = (1, 4, 16, 64)
    seeds: tuple[int, ...] = (0, 1, 2)
    targets: str = "*.attn.q|*.attn.v|out_proj"
    cipher_seed: int = 1
    layers: int = 1
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 16
    batch_size: int = 64
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 6
    full_lr: float = 1e-3
    lora_lr: float = 1e-2
    # the top rank needs the longest convergence tail; short budgets leave it
    # a hair under the saturated mid ranks and break the trend
    adapt_epochs: int = 16
    patience: int = 6
    warmup_steps: int = 100

    def __post_init__(self):
        if not self.ranks or not self.seeds:
            raise ConfigError("ranks and seeds must be non-empty")
        if any(r < 1 for r in self.ranks):
            raise ConfigError(f"ranks must be >= 1, got {self.ranks}")

    @classmethod
    def from_json(cls, path) -> "RankSweepConfig":
        raw = json.loads(Path(path).read_text("utf-8"))
        raw.pop("version", None)
        return cls(**_tuples(raw, "len_range", "ranks", "seeds"))


def _sweep_corpora(cfg: RankSweepConfig):
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size,
             "test": cfg.test_size}
    copy_s = gen_synthetic(SyntheticTaskSpec(
        kind="copy", vocab_size=cfg.vocab_size, len_range=cfg.len_range,
        sizes=sizes, seed=0, name="pretrain"))
    domain_s = gen_synthetic(SyntheticTaskSpec(
        kind="cipher-language", vocab_size=cfg.vocab_size,
        len_range=cfg.len_range, sizes=sizes, seed=100,
        cipher_seed=cfg.cipher_seed, name="domain"))
    vocab = build_vocab(list(copy_s.values()) + list(domain_s.values()),
                        max_size=cfg.vocab_size)
    return copy_s, domain_s, vocab


def rank_sweep(cfg: RankSweepConfig, out_dir) -> dict:
    """Run the sweep; emits rank_sweep.csv, summary.json, config.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(out_dir, cfg)

    copy_s, domain_s, vocab = _sweep_corpora(cfg)
    mcfg = ModelConfig(layers=cfg.layers, heads=cfg.heads, d_model=cfg.d_model,
                       d_ff=cfg.d_ff, vocab_size=len(vocab),
                       max_len=cfg.max_len, seed=0)
    base = build_model(mcfg)
    train(base, None, copy_s["train"], copy_s["valid"], vocab,
          TrainConfig(lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                      max_epochs=cfg.pretrain_epochs, patience=cfg.patience,
                      seed=0, warmup_steps=cfg.warmup_steps))
    base_metric = token_accuracy(base, domain_s["valid"], vocab)

    rows: list[dict] = [{"variant": "base", "rank": None, "seed": None,
                         "params": base.count_params(),
                         "val_acc": base_metric}]
    for seed in cfg.seeds:
        ft = clone_model(base)
        train(ft, None, domain_s["train"], domain_s["valid"], vocab,
              TrainConfig(lr=cfg.full_lr, batch_size=cfg.batch_size,
                          max_epochs=cfg.adapt_epochs, patience=cfg.patience,
                          seed=seed, warmup_steps=cfg.warmup_steps))
        rows.append({"variant": "full-ft", "rank": None, "seed": seed,
                     "params": ft.count_params(),
                     "val_acc": token_accuracy(ft, domain_s["valid"], vocab)})
    for rank in cfg.ranks:
        for seed in cfg.seeds:
            adapter = _quiet_init(base, cfg.targets, rank, seed, f"r{rank}")
            train(base, adapter, domain_s["train"], domain_s["valid"], vocab,
                  TrainConfig(scope="adapter-only", lr=cfg.lora_lr,
                              batch_size=cfg.batch_size,
                              max_epochs=cfg.adapt_epochs,
                              patience=cfg.patience, seed=seed,
                              warmup_steps=cfg.warmup_steps))
            acc = token_accuracy(base, domain_s["valid"], vocab,
                                 overrides=as_overrides(base, adapter))
            rows.append({"variant": "lora", "rank": rank, "seed": seed,
                         "params": param_count(adapter), "val_acc": acc})

    ft_mean = float(np.mean([r["val_acc"] for r in rows
                             if r["variant"] == "full-ft"]))
    rank_means = {rank: float(np.mean([r["val_acc"] for r in rows
                                       if r["variant"] == "lora"
                                       and r["rank"] == rank]))
                  for rank in cfg.ranks}
    means = [rank_means[r] for r in cfg.ranks]
    improvement = ft_mean - base_metric
    recovered = ((means[-1] - base_metric) / improvement
                 if improvement > 0 else float("nan"))
    summary = {
        "base_acc": base_metric,
        "full_ft_mean_acc": ft_mean,
        "rank_mean_acc": {str(r): rank_means[r] for r in cfg.ranks},
        "non_decreasing": all(b >= a for a, b in zip(means, means[1:])),
        "top_rank_recovered_fraction": recovered,
    }
    _write_csv(out_dir / "rank_sweep.csv", rows,
               ["variant", "rank", "seed", "params", "val_acc"])
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), "utf-8")
    return {"rows": rows, "summary": summary}


# ----------------------------------------------------------- forgetting bench

@dataclass
class ForgettingConfig:
    """Two-task continual benchmark: cipher A then cipher B on disjoint
    alphabet halves, one shared adapter, three regularization modes."""

    vocab_size: int = 60
    train_size: int = 800
    valid_size: int = 150
    test_size: int = 150
    pretrain_size: int = 2000
    len_range: tuple[int, int] = (3, 8)
    token_split: int = 30
    cipher_seed_a: int = 11
    cipher_seed_b: int = 22
    seeds: tuple[int, ...] = (0, 1, 2)
    rank: int = 16
    # importance must separate the tasks elementwise, and only the vocab-side
    # projection rows split cleanly by cipher half; adapting dense shared
    # factors too lets the unused-row penalty miss where interference happens
    targets: str = "out_proj"
    layers: int = 1
    heads: int = 4
    d_model: int = 48
    d_ff: int = 96
    max_len: int = 12
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 5
    pretrain_batch_size: int = 64
    adapt_lr: float = 1e-2
    batch_size: int = 32
    # task A must be trained to wide margins, otherwise stale rows that task B
    # leaves free can inject spurious logits on old inputs and the comparison
    # between penalties turns on noise instead of retention
    a_epochs: int = 14
    a_patience: int = 6
    b_epochs: int = 20
    b_patience: int = 10
    warmup_steps: int = 50
    importance_m: int = 800
    lambda_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    gamma_grid: tuple[float, ...] = (1.0, 2.0)

    def __post_init__(self):
        if not (0 < self.token_split < self.vocab_size):
            raise ConfigError(
                f"token_split must split the vocab, got {self.token_split}")
        if not self.seeds or not self.lambda_grid or not self.gamma_grid:
            raise ConfigError("seeds and grids must be non-empty")

    @classmethod
    def from_json(cls, path) -> "ForgettingConfig":
        raw = json.loads(Path(path).read_text("utf-8"))
        raw.pop("version", None)
        return cls(**_tuples(raw, "len_range", "seeds", "lambda_grid",
                             "gamma_grid"))


def _forgetting_corpora(cfg: ForgettingConfig):
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size,
             "test": cfg.test_size}
    copy_s = gen_synthetic(SyntheticTaskSpec(
        kind="copy", vocab_size=cfg.vocab_size, len_range=cfg.len_range,
        sizes={"train": cfg.pretrain_size, "valid": 200, "test": 200},
        seed=0, name="pretrain"))
    a_s = gen_synthetic(SyntheticTaskSpec(
        kind="cipher-language", vocab_size=cfg.vocab_size,
        len_range=cfg.len_range, sizes=sizes, seed=100,
        cipher_seed=cfg.cipher_seed_a, token_range=(0, cfg.token_split),
        name="task_a"))
    b_s = gen_synthetic(SyntheticTaskSpec(
        kind="cipher-language", vocab_size=cfg.vocab_size,
        len_range=cfg.len_range, sizes=sizes, seed=200,
        cipher_seed=cfg.cipher_seed_b,
        token_range=(cfg.token_split, cfg.vocab_size), name="task_b"))
    vocab = build_vocab(
        list(copy_s.values()) + list(a_s.values()) + list(b_s.values()),
        max_size=cfg.vocab_size)
    return copy_s, a_s, b_s, vocab


MODE_LABELS = ("none", "l2", "gradient")


def forgetting_run(cfg: ForgettingConfig, out_dir,
                   modes: tuple[str, ...] = MODE_LABELS) -> dict:
    """Run the benchmark; emits forgetting_table.csv, selection.json, one
    NDJSON history per (mode, grid cell, seed), and per-seed task records."""
    for mode in modes:
        if mode not in MODE_LABELS:
            raise ConfigError(f"unknown mode {mode!r}, expected {MODE_LABELS}")
    if not modes:
        raise ConfigError("modes must be non-empty")
    out_dir = Path(out_dir)
    hist_dir = out_dir / "history"
    hist_dir.mkdir(parents=True, exist_ok=True)
    _write_config(out_dir, cfg)

    copy_s, a_s, b_s, vocab = _forgetting_corpora(cfg)
    mcfg = ModelConfig(layers=cfg.layers, heads=cfg.heads, d_model=cfg.d_model,
                       d_ff=cfg.d_ff, vocab_size=len(vocab),
                       max_len=cfg.max_len, seed=0)
    base = build_model(mcfg)
    train(base, None, copy_s["train"], copy_s["valid"], vocab,
          TrainConfig(lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch_size,
                      max_epochs=cfg.pretrain_epochs, patience=cfg.a_patience,
                      seed=0, warmup_steps=cfg.warmup_steps))

    # task A once per seed; every grid cell continues from the same snapshot
    adapters: dict[int, LoRAAdapter] = {}
    records: dict[int, TaskRecord] = {}
    for seed in cfg.seeds:
        adapter = _quiet_init(base, cfg.targets, cfg.rank, seed, "continual")
        train(base, adapter, a_s["train"], a_s["valid"], vocab,
              TrainConfig(scope="adapter-only", lr=cfg.adapt_lr,
                          batch_size=cfg.batch_size, max_epochs=cfg.a_epochs,
                          patience=cfg.a_patience, seed=seed,
                          warmup_steps=cfg.warmup_steps))
        acc_a = token_accuracy(base, a_s["valid"], vocab,
                               overrides=as_overrides(base, adapter))
        importance = accumulate_importance(
            base, adapter, a_s["train"], vocab, M=cfg.importance_m).normalized()
        record = TaskRecord("task_a", adapter.clone(), importance,
                            corpus_ref="task_a", metric_at_freeze=acc_a)
        record.save(out_dir / "records" / f"seed{seed}")
        adapters[seed] = adapter
        records[seed] = record

    details: dict[tuple, dict] = {}

    def make_run_cell(mode: str):
        def run_cell(lam: float, gamma: float) -> tuple[float, float]:
            olds, news = [], []
            for seed in cfg.seeds:
                trial = adapters[seed].clone()
                reg = RegConfig(lambda_reg=lam, gamma=gamma, mode=mode)
                history = train(
                    base, trial, b_s["train"], b_s["valid"], vocab,
                    TrainConfig(scope="adapter-only", lr=cfg.adapt_lr,
                                batch_size=cfg.batch_size,
                                max_epochs=cfg.b_epochs,
                                patience=cfg.b_patience, seed=seed,
                                warmup_steps=cfg.warmup_steps, reg=reg),
                    history=[records[seed]])
                history.save(hist_dir /
                             f"{mode}_lam{lam:g}_gam{gamma:g}_seed{seed}.ndjson")
                ov = as_overrides(base, trial)
                olds.append(token_accuracy(base, a_s["valid"], vocab,
                                           overrides=ov))
                news.append(token_accuracy(base, b_s["valid"], vocab,
                                           overrides=ov))
            details[(mode, lam, gamma)] = {
                "old_per_seed": olds, "new_per_seed": news}
            return float(np.mean(olds)), float(np.mean(news))
        return run_cell

    grids = {"none": ((0.0,), (2.0,)),
             "l2": (cfg.lambda_grid, (2.0,)),
             "gradient": (cfg.lambda_grid, cfg.gamma_grid)}
    table: list[dict] = []
    selected: dict[str, dict] = {}
    for mode in (m for m in MODE_LABELS if m in modes):
        lam_grid, gam_grid = grids[mode]
        chosen, cells = grid_search_reg(make_run_cell(mode), lam_grid,
                                        gam_grid, mode=mode)
        for cell in cells:
            table.append({"mode": mode, **cell.row()})
        pick = next(c for c in cells
                    if c.lambda_reg == chosen.lambda_reg
                    and c.gamma == chosen.gamma)
        selected[mode] = {"lambda_reg": chosen.lambda_reg,
                          "gamma": chosen.gamma,
                          "old_acc": pick.s_old, "new_acc": pick.s_new,
                          "h": pick.h}

    summary = {
        "old_acc": {m: selected[m]["old_acc"] for m in selected},
        "new_acc": {m: selected[m]["new_acc"] for m in selected},
    }
    if all(m in selected for m in MODE_LABELS):
        summary.update({
            "ordering_ok": (selected["gradient"]["old_acc"]
                            >= selected["l2"]["old_acc"]
                            >= selected["none"]["old_acc"]),
            "gradient_minus_none_old": (selected["gradient"]["old_acc"]
                                        - selected["none"]["old_acc"]),
            "none_minus_gradient_new": (selected["none"]["new_acc"]
                                        - selected["gradient"]["new_acc"]),
            "h_selected": selected["gradient"]["h"],
            "h_control": selected["none"]["h"],
        })
    _write_csv(out_dir / "forgetting_table.csv", table,
               ["mode", "lambda_reg", "gamma", "s_old", "s_new", "h",
                "failed"])
    (out_dir / "selection.json").write_text(
        json.dumps({"selected": selected, "summary": summary},
                   indent=2, sort_keys=True), "utf-8")
    return {"table": table, "selected": selected, "summary": summary,
            "details": details}


# ------------------------------------------------------------ two-style setup

@dataclass
class StyleSetupConfig:
    """Copy-pretrained base plus one adapter per style marker, sharing
    sources, for mixture steering demos and sweeps."""

    vocab_size: int = 30
    train_size: int = 600
    valid_size: int = 80
    test_size: int = 80
    len_range: tuple[int, int] = (3, 7)
    marker_a: str = "<sty-a>"
    marker_b: str = "<sty-b>"
    rank: int = 4
    targets: str = "*.attn.v|out_proj"
    layers: int = 1
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_len: int = 12
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 5
    adapt_lr: float = 1e-2
    adapt_epochs: int = 6
    batch_size: int = 32
    patience: int = 3
    warmup_steps: int = 50

    @classmethod
    def from_json(cls, path) -> "StyleSetupConfig":
        raw = json.loads(Path(path).read_text("utf-8"))
        raw.pop("version", None)
        return cls(**_tuples(raw, "len_range"))


def style_setup(cfg: StyleSetupConfig, out_dir=None) -> dict:
    """Train the two-style toy stack; returns model, vocab, corpora, and the
    per-style adapters; optionally saves base + adapters to out_dir."""
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size,
             "test": cfg.test_size}
    shared = dict(vocab_size=cfg.vocab_size, len_range=cfg.len_range,
                  sizes=sizes, seed=0)
    copy_s = gen_synthetic(SyntheticTaskSpec(kind="copy", name="plain",
                                             **shared))
    # same seed and sizes: both style corpora share identical sources
    a_s = gen_synthetic(SyntheticTaskSpec(
        kind="style-suffix", style_marker=cfg.marker_a, name="style_a",
        **shared))
    b_s = gen_synthetic(SyntheticTaskSpec(
        kind="style-suffix", style_marker=cfg.marker_b, name="style_b",
        **shared))
    vocab = build_vocab(
        list(copy_s.values()) + list(a_s.values()) + list(b_s.values()),
        max_size=cfg.vocab_size + 2)  # plus the two markers
    mcfg = ModelConfig(layers=cfg.layers, heads=cfg.heads, d_model=cfg.d_model,
                       d_ff=cfg.d_ff, vocab_size=len(vocab),
                       max_len=cfg.max_len, seed=0)
    base = build_model(mcfg)
    train(base, None, copy_s["train"], copy_s["valid"], vocab,
          TrainConfig(lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                      max_epochs=cfg.pretrain_epochs, patience=cfg.patience,
                      seed=0, warmup_steps=cfg.warmup_steps))
    adapters: dict[str, LoRAAdapter] = {}
    corpora = {"plain": copy_s, "style_a": a_s, "style_b": b_s}
    for style, splits in (("style_a", a_s), ("style_b", b_s)):
        adapter = _quiet_init(base, cfg.targets, cfg.rank, 0, style)
        train(base, adapter, splits["train"], splits["valid"], vocab,
              TrainConfig(scope="adapter-only", lr=cfg.adapt_lr,
                          batch_size=cfg.batch_size,
                          max_epochs=cfg.adapt_epochs, patience=cfg.patience,
                          seed=0, warmup_steps=cfg.warmup_steps))
        adapters[style] = adapter
    if out_dir is not None:
        from .adapter import save_adapter
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(out_dir, cfg)
        base.save(out_dir / "base.ckpt")
        vocab.save(out_dir / "vocab.json")
        for style, adapter in adapters.items():
            save_adapter(adapter, out_dir / f"{style}.lora")
    return {"model": base, "vocab": vocab, "adapters": adapters,
            "corpora": corpora, "config": cfg}
