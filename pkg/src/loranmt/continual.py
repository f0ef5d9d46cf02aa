"""Importance-weighted drift penalties for sequential adapter training.

After finishing task n we freeze the adapter factors (X_n, Y_n) and record a
per-element importance G built from gradient magnitudes on that task's data.
While training task n+1, the loss gains a penalty

    lambda_reg * sum_n sum_ij [ G_X,n * |X - X_n|^gamma + G_Y,n * |Y - Y_n|^gamma ]

so parameters that mattered to old tasks resist drifting. With G == 1 the
penalty is plain L2 (gamma = 2) or L1 (gamma = 1); those are kept as
baselines under the `l2` and `none` modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binio
from .adapter import LoRAAdapter, as_overrides, load_adapter, save_adapter
from .data import ParallelCorpus, Vocab, batch_iter
from .errors import CompatibilityError, ConfigError, DivergenceError
from .model import Model
from .tensor import Tensor, abs_pow, sum_all

IMPORTANCE_MAGIC = b"LORAGRAD"
MODES = ("gradient", "l2", "none")


@dataclass
class RegConfig:
    lambda_reg: float = 0.0
    gamma: float = 2.0
    mode: str = "gradient"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_reg < 0 or not math.isfinite(self.lambda_reg):
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.gamma <= 0 or not math.isfinite(self.gamma):
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.mode == "l2" and self.gamma != 2.0:
            raise ConfigError("l2 mode requires gamma = 2")
        if self.mode == "none" and self.lambda_reg != 0.0:
            raise ConfigError("none mode requires lambda_reg = 0")


@dataclass
class GradientImportance:
    entries: dict[str, tuple[Tensor, Tensor]]  # name -> (G_X [p,r], G_Y [q,r])
    dataset_size: int
    mode: str = "abs"  # abs: mean of |grad|; signed: plain mean of grad

    def __post_init__(self):
        if self.mode not in ("abs", "signed"):
            raise ConfigError(f"importance mode must be abs|signed, got {self.mode!r}")
        for name, (gx, gy) in self.entries.items():
            for g in (gx, gy):
                if not np.all(np.isfinite(g.data)):
                    raise ConfigError(f"non-finite importance for {name}")
                if self.mode == "abs" and np.any(g.data < 0):
                    raise ConfigError(f"negative importance for {name}")

    def normalized(self) -> "GradientImportance":
        """Copy rescaled to unit global mean.

        Raw importance shrinks with convergence (gradients vanish), which
        would silently rescale lambda_reg between runs; unit-mean importance
        keeps lambda_reg grids comparable across modes and tasks while
        preserving every relative weight. All-zero importance is returned
        unchanged.
        """
        total = 0.0
        count = 0
        for gx, gy in self.entries.values():
            total += float(np.sum(np.abs(gx.data))) + float(np.sum(np.abs(gy.data)))
            count += gx.data.size + gy.data.size
        mean = total / max(count, 1)
        if mean == 0.0:
            return GradientImportance(dict(self.entries), self.dataset_size,
                                      self.mode)
        entries = {name: (Tensor((gx.data / mean).astype(np.float32)),
                          Tensor((gy.data / mean).astype(np.float32)))
                   for name, (gx, gy) in self.entries.items()}
        return GradientImportance(entries, self.dataset_size, self.mode)

    def save(self, path) -> str:
        meta = {"kind": "gradient-importance", "dataset_size": self.dataset_size,
                "mode": self.mode,
                "targets": list(self.entries)}
        arrays = {}
        for name, (gx, gy) in self.entries.items():
            arrays[f"{name}.X"] = gx.data
            arrays[f"{name}.Y"] = gy.data
        return binio.write_record(path, IMPORTANCE_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> "GradientImportance":
        meta, arrays = binio.read_record(path, IMPORTANCE_MAGIC)
        entries = {name: (Tensor(arrays[f"{name}.X"]), Tensor(arrays[f"{name}.Y"]))
                   for name in meta["targets"]}
        return cls(entries, dataset_size=meta["dataset_size"], mode=meta["mode"])


@dataclass
class TaskRecord:
    """Everything retained from a finished task: the frozen factors plus
    their importance. No training data is kept."""

    task_name: str
    adapter: LoRAAdapter
    importance: GradientImportance
    corpus_ref: str | None = None
    metric_at_freeze: float | None = None

    def __post_init__(self):
        if set(self.importance.entries) != set(self.adapter.entries):
            raise CompatibilityError(
                "importance targets do not match adapter targets")
        for name, (x, y) in self.adapter.entries.items():
            gx, gy = self.importance.entries[name]
            if gx.shape != x.shape or gy.shape != y.shape:
                raise CompatibilityError(
                    f"importance shape mismatch for {name}: "
                    f"{gx.shape}/{gy.shape} vs {x.shape}/{y.shape}")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_adapter(self.adapter, directory / "adapter.lora", dtype="binary32")
        self.importance.save(directory / "importance.grad")
        manifest = {
            "task_name": self.task_name,
            "dataset_size": self.importance.dataset_size,
            "importance_mode": self.importance.mode,
            "metric_at_freeze": self.metric_at_freeze,
            "corpus_ref": self.corpus_ref,
            "base_hash": self.adapter.base_hash,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True), "utf-8")

    @classmethod
    def load(cls, directory) -> "TaskRecord":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text("utf-8"))
        return cls(
            task_name=manifest["task_name"],
            adapter=load_adapter(directory / "adapter.lora"),
            importance=GradientImportance.load(directory / "importance.grad"),
            corpus_ref=manifest.get("corpus_ref"),
            metric_at_freeze=manifest.get("metric_at_freeze"))


def accumulate_importance(m: Model, a: LoRAAdapter, corpus: ParallelCorpus,
                          vocab: Vocab, M: int, mode: str = "abs"
                          ) -> GradientImportance:
    """Per-element mean of per-example gradient magnitudes over the first M
    corpus pairs (in corpus order, so the result is deterministic).

    The absolute value is taken per example before averaging: a converged
    adapter has near-zero mean signed gradient, which would erase the signal.
    The signed mean stays available as mode="signed".
    """
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    if M > len(corpus):
        raise ConfigError(f"M = {M} exceeds corpus size {len(corpus)}")
    if mode not in ("abs", "signed"):
        raise ConfigError(f"importance mode must be abs|signed, got {mode!r}")
    overrides = as_overrides(m, a)
    acc = {name: (np.zeros(x.shape, np.float64), np.zeros(y.shape, np.float64))
           for name, (x, y) in a.entries.items()}
    subset = ParallelCorpus(corpus.pairs[:M], name=corpus.name,
                            split=corpus.split)
    for batch in batch_iter(subset, vocab, batch_size=1,
                            max_len=m.cfg.max_len):
        for x, y in a.entries.values():
            x.zero_grad()
            y.zero_grad()
        loss = m.loss(batch.src, batch.tgt, overrides=overrides)
        loss.backward()
        for name, (x, y) in a.entries.items():
            gx = x.grad if x.grad is not None else np.zeros(x.shape)
            gy = y.grad if y.grad is not None else np.zeros(y.shape)
            if mode == "abs":
                acc[name][0][...] += np.abs(gx)
                acc[name][1][...] += np.abs(gy)
            else:
                acc[name][0][...] += gx
                acc[name][1][...] += gy
    for x, y in a.entries.values():
        x.zero_grad()
        y.zero_grad()
    for p in m.params.values():
        p.zero_grad()
    entries = {name: (Tensor((ax / M).astype(np.float32)),
                      Tensor((ay / M).astype(np.float32)))
               for name, (ax, ay) in acc.items()}
    return GradientImportance(entries, dataset_size=M, mode=mode)


def pair_penalty(x: Tensor, y: Tensor,
                 snaps: Sequence[tuple[Tensor, Tensor, Tensor | None, Tensor | None]],
                 lambda_reg: float, gamma: float) -> Tensor:
    """Penalty for one factor pair against its history snapshots.

    Each snapshot is (x_n, y_n, g_x, g_y); None importance means unit weight
    (the plain L1/L2 reductions). Differentiable in x and y; the subgradient
    at a zero difference is 0.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    total: Tensor | None = None
    for xn, yn, gx, gy in snaps:
        if xn.shape != x.shape or yn.shape != y.shape:
            raise CompatibilityError(
                f"snapshot shapes {xn.shape}/{yn.shape} do not match "
                f"factors {x.shape}/{y.shape}")
        for cur, snap, imp in ((x, xn, gx), (y, yn, gy)):
            powed = abs_pow(cur - snap, gamma)
            if imp is not None:
                if imp.shape != cur.shape:
                    raise CompatibilityError(
                        f"importance shape {imp.shape} does not match {cur.shape}")
                powed = imp * powed
            term = sum_all(powed)
            total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(1, x.dtype))
    return total * lambda_reg


def reg_penalty(a: LoRAAdapter, history: Sequence[TaskRecord],
                cfg: RegConfig) -> Tensor:
    """Full regularizer: pair penalties summed over targets and past tasks."""
    some = next(iter(a.entries.values()), None)
    dtype = some[0].dtype if some else np.float32
    if cfg.mode == "none" or cfg.lambda_reg == 0.0 or not history:
        return Tensor(np.zeros(1, dtype))
    total: Tensor | None = None
    for record in history:
        for name, (x, y) in a.entries.items():
            if name not in record.adapter.entries:
                raise CompatibilityError(
                    f"task record {record.task_name!r} lacks target {name!r}")
            xn, yn = record.adapter.entries[name]
            if cfg.mode == "gradient":
                gx, gy = record.importance.entries[name]
            else:
                gx = gy = None
            term = pair_penalty(x, y, [(xn, yn, gx, gy)],
                                lambda_reg=1.0, gamma=cfg.gamma)
            total = term if total is None else total + term
    return total * cfg.lambda_reg


def regularized_step_loss(task_loss: Tensor, penalty: Tensor) -> Tensor:
    """L' = task loss + penalty, both on the same tape."""
    return task_loss + penalty


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ConfigError("harmonic mean expects non-negative metrics")
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


@dataclass
class GridCell:
    lambda_reg: float
    gamma: float
    s_old: float = float("nan")
    s_new: float = float("nan")
    h: float = float("nan")
    failed: bool = False

    def row(self) -> dict:
        return {"lambda_reg": self.lambda_reg, "gamma": self.gamma,
                "s_old": self.s_old, "s_new": self.s_new, "h": self.h,
                "failed": self.failed}


RunCell = Callable[[float, float], tuple[float, float]]


def grid_search_reg(run_cell: RunCell, lambda_grid: Sequence[float],
                    gamma_grid: Sequence[float], mode: str = "gradient"
                    ) -> tuple[RegConfig, list[GridCell]]:
    """Exhaustive (lambda_reg, gamma) search maximizing the stability /
    plasticity harmonic mean H = 2*s_old*s_new / (s_old + s_new).

    run_cell executes one adaptation and returns (old-task metric, new-task
    metric); a run that diverges or returns non-finite values marks its cell
    failed and drops out of the argmax. Ties prefer larger lambda_reg
    (stability first), then earlier gamma_grid order.
    """
    if not lambda_grid or not gamma_grid:
        raise ConfigError("grid_search_reg needs non-empty grids")
    cells: list[GridCell] = []
    for lam in lambda_grid:
        for gamma in gamma_grid:
            cell = GridCell(float(lam), float(gamma))
            try:
                s_old, s_new = run_cell(float(lam), float(gamma))
                if not (math.isfinite(s_old) and math.isfinite(s_new)):
                    raise DivergenceError("non-finite metric")
                cell.s_old, cell.s_new = float(s_old), float(s_new)
                cell.h = harmonic_mean(cell.s_old, cell.s_new)
            except DivergenceError:
                cell.failed = True
            cells.append(cell)
    best: GridCell | None = None
    for cell in cells:
        if cell.failed:
            continue
        if best is None or cell.h > best.h or (
                cell.h == best.h and cell.lambda_reg > best.lambda_reg):
            best = cell
    if best is None:
        raise DivergenceError("every grid cell diverged")
    chosen = RegConfig(lambda_reg=best.lambda_reg, gamma=best.gamma, mode=mode)
    return chosen, cells
