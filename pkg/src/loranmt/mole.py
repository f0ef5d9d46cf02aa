"""Gate-free mixtures of low-rank adapters.

The effective weight for a target is W' = W + sum_n alpha_n * lambda_n *
X_n @ Y_n^T: lambda_n comes from calibration, alpha_n is a user knob.
Negative coefficients are allowed on purpose; they extrapolate away from a
domain rather than toward it. Deltas are accumulated in float64 so the
result is independent of component order to well below float32 resolution.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .adapter import LoRAAdapter
from .errors import CompatibilityError, ConfigError, TargetLookupError
from .model import Model
from .tensor import Tensor


@dataclass
class MixtureComponent:
    adapter_id: str
    alpha: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for label, value in (("alpha", self.alpha), ("lambda", self.lam)):
            if not math.isfinite(value):
                raise ConfigError(f"{label} must be finite, got {value}")


@dataclass
class AdapterMixture:
    components: list[MixtureComponent] = field(default_factory=list)
    base_hash: str | None = None

    def descriptor(self) -> list[dict]:
        return [{"adapter": c.adapter_id, "alpha": c.alpha, "lambda": c.lam}
                for c in self.components]

    def content_hash(self) -> str:
        canon = {"base_hash": self.base_hash, "components": self.descriptor()}
        return hashlib.sha256(
            json.dumps(canon, sort_keys=True).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.descriptor(), indent=2), "utf-8")

    @classmethod
    def load(cls, path, base_hash: str | None = None) -> "AdapterMixture":
        rows = json.loads(Path(path).read_text("utf-8"))
        comps = [MixtureComponent(r["adapter"], float(r.get("alpha", 1.0)),
                                  float(r.get("lambda", 1.0))) for r in rows]
        return cls(comps, base_hash=base_hash)


def compose(m: Model, mix: AdapterMixture,
            adapters: Mapping[str, LoRAAdapter]) -> dict[str, Tensor]:
    """Effective weight map for every target touched by the mixture.

    Zero-coefficient components are skipped, so an all-zero mixture returns
    an empty map and the base model runs untouched.
    """
    acc: dict[str, np.ndarray] = {}
    for comp in mix.components:
        if comp.adapter_id not in adapters:
            raise TargetLookupError(f"unknown adapter {comp.adapter_id!r}")
        coeff = comp.alpha * comp.lam
        if coeff == 0.0:
            continue
        adapter = adapters[comp.adapter_id]
        for name, (x, y) in adapter.entries.items():
            base = m.params.get(name)
            if base is None:
                raise TargetLookupError(
                    f"adapter {comp.adapter_id!r} targets missing parameter {name!r}")
            if base.shape != (x.shape[0], y.shape[0]):
                raise CompatibilityError(
                    f"adapter {comp.adapter_id!r} target {name} is "
                    f"{x.shape[0]}x{y.shape[0]}, base is {base.shape}")
            d = coeff * (x.data.astype(np.float64) @ y.data.T.astype(np.float64))
            if name in acc:
                acc[name] += d
            else:
                acc[name] = d
    return {name: Tensor((m.params[name].data.astype(np.float64) + d)
                         .astype(np.float32))
            for name, d in acc.items()}


@dataclass
class CalibrationReport:
    lambdas: dict[str, float]
    before: dict[str, float]            # per-domain metric, bare base model
    after: dict[str, float]             # per-domain metric at chosen lambdas
    grid: list[float]
    table: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "lambdas": self.lambdas, "before": self.before,
            "after": self.after, "grid": self.grid, "table": self.table,
        }, indent=2, sort_keys=True)


Metric = Callable[[Model, dict[str, Tensor], Any], float]


def calibrate(m: Model, adapters: Mapping[str, LoRAAdapter],
              val_sets: Mapping[str, Any], grid: Sequence[float],
              metric: Metric) -> CalibrationReport:
    """Coordinate-wise maximin grid search over per-adapter lambdas.

    Each adapter's lambda is chosen in turn (others held at their current
    value, initialized to grid[0]) to maximize the minimum per-domain metric;
    the maximin objective keeps one strong domain from drowning the rest.
    Ties keep the earliest grid candidate, so the search is deterministic.
    Cost: len(adapters) * len(grid) evaluations per domain.
    """
    if not adapters:
        raise ConfigError("calibrate needs at least one adapter")
    if not val_sets:
        raise ConfigError("calibrate needs at least one validation set")
    if not grid:
        raise ConfigError("calibrate needs a non-empty grid")

    before = {d: metric(m, {}, vs) for d, vs in val_sets.items()}
    lambdas = {aid: float(grid[0]) for aid in adapters}
    table: list[dict] = []

    def scores_at(lams: dict[str, float]) -> dict[str, float]:
        mix = AdapterMixture(
            [MixtureComponent(aid, 1.0, lams[aid]) for aid in adapters],
            base_hash=m.content_hash())
        weights = compose(m, mix, adapters)
        return {d: metric(m, weights, vs) for d, vs in val_sets.items()}

    for aid in adapters:
        best_lam, best_obj = None, None
        for lam in grid:
            trial = dict(lambdas)
            trial[aid] = float(lam)
            scores = scores_at(trial)
            objective = min(scores.values())
            table.append({"adapter": aid, "lambda": float(lam),
                          "scores": scores, "objective": objective})
            if best_obj is None or objective > best_obj:
                best_lam, best_obj = float(lam), objective
        lambdas[aid] = best_lam

    return CalibrationReport(lambdas=lambdas, before=before,
                             after=scores_at(lambdas), grid=[float(g) for g in grid],
                             table=table)


def sweep_alpha(m: Model, mix: AdapterMixture,
                adapters: Mapping[str, LoRAAdapter],
                alphas: Sequence[float | Sequence[float]],
                val_set: Any, metric: Metric) -> list[dict]:
    """Metric curve over alpha settings; each entry is a uniform scalar or a
    per-component vector. Emits [{"alpha": ..., "score": ...}, ...]."""
    curve = []
    for alpha in alphas:
        if isinstance(alpha, (int, float)):
            per = [float(alpha)] * len(mix.components)
        else:
            per = [float(a) for a in alpha]
            if len(per) != len(mix.components):
                raise ConfigError(
                    f"alpha vector has {len(per)} entries for "
                    f"{len(mix.components)} components")
        probe = AdapterMixture(
            [MixtureComponent(c.adapter_id, a, c.lam)
             for c, a in zip(mix.components, per)], base_hash=mix.base_hash)
        weights = compose(m, probe, adapters)
        score = metric(m, weights, val_set)
        curve.append({"alpha": per[0] if len(set(per)) == 1 else per,
                      "score": score})
    return curve
