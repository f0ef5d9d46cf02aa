"""Low-rank adapters: factor pairs (X, Y) per named weight matrix.

An adapter approximates a fine-tuning delta as X @ Y^T with X in R^{p x r}
and Y in R^{q x r}, cutting trainable parameters from p*q to r*(p+q). Y
starts at zero so a fresh adapter is an exact no-op on the base model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import CompatibilityError, ConfigError, TargetLookupError
from .model import LowRankPatch, Model, TargetSelector
from .tensor import Tensor

ADAPTER_MAGIC = b"LORA0001"
FORMAT_VERSION = 1
_STORAGE = {"binary16": np.float16, "binary32": np.float32}


@dataclass
class LoRAAdapter:
    task_name: str
    rank: int
    entries: dict[str, tuple[Tensor, Tensor]]  # name -> (X [p,r], Y [q,r])
    default_lambda: float = 1.0
    created_from: str | None = None
    base_hash: str | None = None
    seed: int | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, (x, y) in self.entries.items():
            if x.ndim != 2 or y.ndim != 2:
                raise ConfigError(f"factors for {name} must be 2-D")
            if x.shape[1] != self.rank or y.shape[1] != self.rank:
                raise ConfigError(
                    f"factors for {name} have inner extent "
                    f"({x.shape[1]}, {y.shape[1]}), expected rank {self.rank}")

    def trainable(self) -> list[Tensor]:
        out = []
        for x, y in self.entries.values():
            out.extend((x, y))
        return out

    def clone(self) -> "LoRAAdapter":
        entries = {
            name: (Tensor(x.data.copy(), requires_grad=True),
                   Tensor(y.data.copy(), requires_grad=True))
            for name, (x, y) in self.entries.items()}
        return LoRAAdapter(self.task_name, self.rank, entries,
                           self.default_lambda, self.created_from,
                           self.base_hash, self.seed, self.format_version)


def init_adapter(m: Model, sel: TargetSelector, r: int, seed: int = 0,
                 task_name: str = "task") -> LoRAAdapter:
    """Fresh adapter over every 2-D parameter the selector matches.

    X is Gaussian(0, 0.02^2), Y is zero: the initial delta is exactly zero,
    so attaching an untrained adapter cannot change model behavior.
    """
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    names = sel.select(m)
    if not names:
        raise ConfigError(f"selector {sel.pattern!r} matches no 2-D parameter")
    rng = np.random.default_rng(seed)
    entries: dict[str, tuple[Tensor, Tensor]] = {}
    for name in names:
        p, q = m.params[name].shape
        low = min(p, q)
        if r > low:
            raise ConfigError(
                f"rank {r} exceeds min(p, q) = {low} for target {name}")
        if r == low:
            warnings.warn(
                f"rank {r} equals min(p, q) for {name}: delta is full-rank",
                RuntimeWarning, stacklevel=2)
        x = Tensor(rng.normal(0.0, 0.02, (p, r)), requires_grad=True,
                   dtype=np.float32)
        y = Tensor(np.zeros((q, r), np.float32), requires_grad=True)
        entries[name] = (x, y)
    return LoRAAdapter(task_name, r, entries, seed=seed,
                       base_hash=m.content_hash())


def delta(a: LoRAAdapter, target_name: str) -> Tensor:
    """The materialized weight delta X @ Y^T for one target."""
    if target_name not in a.entries:
        raise TargetLookupError(
            f"adapter {a.task_name!r} has no target {target_name!r}")
    x, y = a.entries[target_name]
    return Tensor((x.data.astype(np.float64) @ y.data.T.astype(np.float64))
                  .astype(np.float32))


def param_count(a: LoRAAdapter) -> int:
    """Sum of r*(p+q) over entries; equals the stored scalar count."""
    return sum(a.rank * (x.shape[0] + y.shape[0])
               for x, y in a.entries.values())


def as_overrides(m: Model, a: LoRAAdapter, coeff: float = 1.0
                 ) -> dict[str, LowRankPatch]:
    """Dynamic-route override map: deltas stay factored through rank r."""
    out = {}
    for name, (x, y) in a.entries.items():
        base = m.params.get(name)
        if base is None:
            raise TargetLookupError(f"model has no parameter {name!r}")
        if base.shape != (x.shape[0], y.shape[0]):
            raise CompatibilityError(
                f"adapter target {name} is {x.shape[0]}x{y.shape[0]}, "
                f"base is {base.shape[0]}x{base.shape[1]}")
        out[name] = LowRankPatch(base=base, terms=[(x, y, coeff)])
    return out


def merge(m: Model, a: LoRAAdapter, scale: float = 1.0,
          direction: str = "apply", in_place: bool = False) -> Model:
    """Fold scale * X @ Y^T into the base weights (or subtract it back out).

    The returned model shares untouched tensors with the input unless
    in_place is set, in which case the input model is mutated and returned.
    """
    if direction not in ("apply", "revert"):
        raise ConfigError(f"direction must be apply|revert, got {direction!r}")
    sign = 1.0 if direction == "apply" else -1.0
    params = m.params if in_place else dict(m.params)
    for name, (x, y) in a.entries.items():
        base = m.params.get(name)
        if base is None:
            raise TargetLookupError(f"model has no parameter {name!r}")
        if base.shape != (x.shape[0], y.shape[0]):
            raise CompatibilityError(
                f"adapter target {name} is {x.shape[0]}x{y.shape[0]}, "
                f"base is {base.shape[0]}x{base.shape[1]}")
        d = x.data.astype(np.float64) @ y.data.T.astype(np.float64)
        merged = (base.data.astype(np.float64) + sign * scale * d
                  ).astype(np.float32)
        if in_place:
            base.data[...] = merged
        else:
            params[name] = Tensor(merged, requires_grad=True)
    if in_place:
        return m
    return Model(m.cfg, params)


def save_adapter(a: LoRAAdapter, path, dtype: str = "binary16") -> str:
    """Serialize factors in manifest order; returns the payload sha256."""
    if dtype not in _STORAGE:
        raise ConfigError(f"dtype must be binary16|binary32, got {dtype!r}")
    storage = _STORAGE[dtype]
    meta = {
        "kind": "lora-adapter",
        "version": a.format_version,
        "task_name": a.task_name,
        "rank": a.rank,
        "default_lambda": a.default_lambda,
        "created_from": a.created_from,
        "base_hash": a.base_hash,
        "seed": a.seed,
        "targets": [{"name": n, "p": x.shape[0], "q": y.shape[0]}
                    for n, (x, y) in a.entries.items()],
    }
    arrays = {}
    for name, (x, y) in a.entries.items():
        arrays[f"{name}.X"] = x.data.astype(storage)
        arrays[f"{name}.Y"] = y.data.astype(storage)
    return binio.write_record(path, ADAPTER_MAGIC, meta, arrays)


def load_adapter(path) -> LoRAAdapter:
    meta, arrays = binio.read_record(path, ADAPTER_MAGIC)
    if meta.get("version") != FORMAT_VERSION:
        raise CompatibilityError(
            f"unsupported adapter format version {meta.get('version')!r}")
    entries = {}
    for target in meta["targets"]:
        name = target["name"]
        x = arrays[f"{name}.X"].astype(np.float32)
        y = arrays[f"{name}.Y"].astype(np.float32)
        entries[name] = (Tensor(x, requires_grad=True),
                         Tensor(y, requires_grad=True))
    return LoRAAdapter(
        task_name=meta["task_name"], rank=meta["rank"], entries=entries,
        default_lambda=meta["default_lambda"], created_from=meta["created_from"],
        base_hash=meta["base_hash"], seed=meta["seed"])
