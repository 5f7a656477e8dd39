"""Generalization, fairness and system-cost accounting.

Accuracies are fractions in [0, 1]; multiply by 100 only when presenting.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from pfsim.models import ModelSpec
from pfsim.params import KeyMask, NamedParams


@dataclass(frozen=True)
class EvalReport:
    client_id: int
    n_samples: int
    n_correct: int
    loss: float
    participates: bool

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_samples if self.n_samples else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = self.accuracy
        return d


@dataclass(frozen=True)
class FairnessReport:
    weighted_acc: float
    uniform_acc: float
    std: float
    bottom_decile: float
    unseen_acc: float | None
    gap: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SystemReport:
    total_flops: int
    comm_bytes: int
    convergence_round: int

    def to_dict(self) -> dict:
        return asdict(self)


def _nonempty(reports: Iterable[EvalReport]) -> list[EvalReport]:
    return [r for r in reports if r.n_samples > 0]


def aggregate_weighted(reports: Sequence[EvalReport]) -> float:
    """Accuracy pooled over clients, i.e. weighted by local sample counts."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    if any(not r.participates for r in reports):
        raise ValueError("aggregate_weighted expects participating clients only")
    total = sum(r.n_samples for r in reports)
    if total == 0:
        raise ValueError("reports contain no samples")
    return sum(r.n_samples * r.accuracy for r in reports) / total


def weighted_accuracy(reports: Sequence[EvalReport]) -> float:
    """Like :func:`aggregate_weighted` without the participation check."""
    total = sum(r.n_samples for r in reports)
    if total == 0:
        raise ValueError("reports contain no samples")
    return sum(r.n_samples * r.accuracy for r in reports) / total


def bottom_decile_index(n_clients: int) -> int:
    """1-based rank (ascending) of the reported worst-decile client."""
    return max(1, n_clients // 10)


def fairness_stats(accuracies: Sequence[float]) -> tuple[float, float, float]:
    """Uniform mean, population std and the floor(|C|/10)-th worst value."""
    acc = np.asarray(list(accuracies), dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no accuracies")
    ordered = np.sort(acc)
    return float(acc.mean()), float(acc.std()), float(ordered[bottom_decile_index(acc.size) - 1])


def generalization_gap(participated_weighted: float, unseen_weighted: float) -> float:
    return unseen_weighted - participated_weighted


def fairness_report(reports: Sequence[EvalReport]) -> FairnessReport:
    seen = _nonempty(r for r in reports if r.participates)
    unseen = _nonempty(r for r in reports if not r.participates)
    weighted = aggregate_weighted(seen)
    uniform, std, bottom = fairness_stats([r.accuracy for r in seen])
    unseen_acc = weighted_accuracy(unseen) if unseen else None
    gap = generalization_gap(weighted, unseen_acc) if unseen_acc is not None else None
    return FairnessReport(weighted, uniform, std, bottom, unseen_acc, gap)


def forward_flops_per_sample(spec: ModelSpec) -> int:
    dims = spec.layer_dims
    total = sum(2 * a * b for a, b in zip(dims[:-1], dims[1:]))
    if spec.use_norm_layers:
        total += sum(4 * h for h in spec.hidden_dims)
    return total


def flops_estimate(spec: ModelSpec, n_samples: int, mode: str = "inference") -> int:
    """Closed-form FLOP proxy; training counts forward plus a 2x backward."""
    if mode not in ("inference", "training"):
        raise ValueError(f"unknown mode {mode!r}")
    fwd = forward_flops_per_sample(spec) * int(n_samples)
    return 3 * fwd if mode == "training" else fwd


def comm_bytes(params: NamedParams, mask: KeyMask | Iterable[str] | None = None) -> int:
    """Serialized size of the groups that actually travel (masked ones stay home)."""
    return params.serialized_size(exclude=mask or ())


def percent(x: float | None) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else 100.0 * x
