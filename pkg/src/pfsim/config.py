"""Experiment configuration: a strict YAML schema over the library's dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import TypeAdapter, ValidationError

from pfsim.data import (
    ClientData,
    DeviceProfile,
    DeviceShare,
    GroupSpec,
    assign_devices,
    check_ratios,
    dirichlet_partition,
    import_clients,
    make_classification_pool,
    mark_unseen,
    read_table,
    split_client,
    synth_generate,
)
from pfsim.models import ModelSpec
from pfsim.params import CATEGORIES
from pfsim.privacy import DpConfig
from pfsim.runtime import RuntimeConfig
from pfsim.strategies.methods import StrategyConfig

DATASET_KINDS = ("synthetic", "dirichlet", "csv", "csv_dir")


class ConfigError(ValueError):
    """Every problem found in a configuration, not just the first."""

    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class DatasetConfig:
    kind: Literal["synthetic", "dirichlet", "csv", "csv_dir"] = "synthetic"
    seed: int | None = None  # None: use the run seed
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    unseen_fraction: float = 0.2
    n_features: int = 5
    n_classes: int = 2
    # synthetic
    groups: tuple[GroupSpec, ...] = (GroupSpec(10, 100),)
    noise: float = 1.0
    # dirichlet / csv
    n_clients: int = 10
    alpha: float = 0.5
    n_samples: int = 1000
    separation: float = 2.0
    # csv / csv_dir
    path: str | None = None
    label_column: str = "label"

    def violations(self) -> list[str]:
        errs = []
        try:
            check_ratios(self.split_ratios)
        except ValueError as exc:
            errs.append(f"dataset.split_ratios: {exc}")
        if not 0 <= self.unseen_fraction < 1:
            errs.append("dataset.unseen_fraction must lie in [0, 1)")
        if self.kind == "synthetic" and not self.groups:
            errs.append("dataset.groups must list at least one group")
        if self.kind in ("dirichlet", "csv"):
            if self.n_clients < 1:
                errs.append("dataset.n_clients must be >= 1")
            if not self.alpha > 0:
                errs.append("dataset.alpha must be positive")
        if self.kind in ("csv", "csv_dir") and not self.path:
            errs.append(f"dataset.path is required for kind {self.kind!r}")
        return errs


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(input_dim=5))
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    privacy: DpConfig = field(default_factory=DpConfig)
    output_dir: str = "runs"
    seeds: tuple[int, ...] = (1, 2, 3)

    def violations(self) -> list[str]:
        errs = self.dataset.violations() + self.runtime.violations() + self.strategy.violations()
        if not self.seeds:
            errs.append("seeds must list at least one seed")
        if self.runtime.seed != 0:
            errs.append("runtime.seed is set per run from the top-level seeds list; remove it")
        if self.dataset.kind in ("synthetic", "dirichlet"):
            if self.model.input_dim != self.dataset.n_features:
                errs.append(
                    f"model.input_dim ({self.model.input_dim}) must equal dataset.n_features "
                    f"({self.dataset.n_features})"
                )
            if self.model.n_classes != self.dataset.n_classes:
                errs.append(
                    f"model.n_classes ({self.model.n_classes}) must equal dataset.n_classes "
                    f"({self.dataset.n_classes})"
                )
        present = set(self.model.categories().values())
        for cat in self.strategy.mask:
            if cat not in CATEGORIES:
                errs.append(f"strategy.mask: unknown parameter category {cat!r}")
            elif cat not in present:
                errs.append(f"strategy.mask: the model has no {cat!r} parameters to keep local")
        return errs

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def dump(self, path: str | Path | None = None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> ExperimentConfig:
        """New config with dotted keys (``runtime.lr``) replaced, re-validated."""
        tree = self.to_dict()
        for key, value in overrides.items():
            node = tree
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError([f"{key}: no such config section"])
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError([f"{key}: no such config field"])
            node[parts[-1]] = value
        return build_config(tree)

    def dataset_name(self) -> str:
        if self.dataset.path:
            return f"{self.dataset.kind}:{Path(self.dataset.path).name}"
        return self.dataset.kind

    # data ---------------------------------------------------------------
    def build_clients(self, seed: int) -> list[ClientData]:
        ds = self.dataset
        ds_seed = int(ds.seed if ds.seed is not None else seed)
        default = self.runtime.device_default
        if ds.kind == "csv_dir":
            clients = import_clients(ds.path)
        else:
            if ds.kind == "synthetic":
                groups = [g if g.device is not None else replace(g, device=default) for g in ds.groups]
                clients = synth_generate(
                    groups, ds_seed, ds.n_features, ds.n_classes, ds.split_ratios, ds.noise
                )
            else:
                if ds.kind == "dirichlet":
                    x, y = make_classification_pool(
                        ds.n_samples, ds.n_features, ds.n_classes, ds_seed, ds.separation
                    )
                else:
                    x, y = read_table(ds.path, ds.label_column)
                clients = partition_clients(x, y, ds.n_clients, ds.alpha, ds.split_ratios, ds_seed, default)
            clients = mark_unseen(clients, ds.unseen_fraction, ds_seed)
        if self.runtime.device_mix:
            clients = assign_devices(clients, self.runtime.device_mix, default, ds_seed)
        return clients


def partition_clients(
    x: np.ndarray,
    y: np.ndarray,
    n_clients: int,
    alpha: float,
    split_ratios,
    seed: int,
    device: DeviceProfile | None = None,
) -> list[ClientData]:
    parts = dirichlet_partition(x, y, n_clients, alpha, seed)
    clients = []
    for i, idx in enumerate(parts):
        if idx.size < 3:
            raise ValueError(f"client {i} received only {idx.size} samples; need 3 to split")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B17, i]))
        tr, va, te = split_client(x[idx], y[idx], split_ratios, rng)
        clients.append(ClientData(id=i, train=tr, val=va, test=te, device=device or DeviceProfile()))
    return clients


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelSpec,
    "runtime": RuntimeConfig,
    "strategy": StrategyConfig,
    "privacy": DpConfig,
}
# nested mappings that are themselves dataclasses: path -> (class, is_list)
_NESTED = {
    "runtime.device_default": (DeviceProfile, False),
    "runtime.device_mix": (DeviceShare, True),
    "dataset.groups": (GroupSpec, True),
}
_ADAPTERS = {name: TypeAdapter(cls) for name, cls in _SECTIONS.items()}
_TOP = TypeAdapter(ExperimentConfig)


def _unknown_keys(path: str, node: Any, cls: type) -> list[str]:
    if not isinstance(node, dict):
        return []
    known = cls.__dataclass_fields__
    errs = [f"{path}.{k}: unknown key" for k in node if k not in known]
    for k, v in node.items():
        sub = f"{path}.{k}"
        if sub in _NESTED:
            ncls, many = _NESTED[sub]
            items = enumerate(v) if many and isinstance(v, list) else [(None, v)]
            for i, item in items:
                loc = sub if i is None else f"{sub}.{i}"
                errs += _unknown_keys(loc, item, ncls)
                if ncls is GroupSpec and isinstance(item, dict):
                    errs += _unknown_keys(f"{loc}.device", item.get("device"), DeviceProfile)
    return errs


def _format(prefix: str, exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        if e["type"] == "unexpected_keyword_argument":
            continue  # reported by _unknown_keys
        loc = ".".join([prefix, *(str(p) for p in e["loc"])]) if prefix else ".".join(map(str, e["loc"]))
        out.append(f"{loc}: {e['msg'].removeprefix('Value error, ')}")
    return out


def build_config(tree: dict | None) -> ExperimentConfig:
    """Validate a nested mapping; raises :class:`ConfigError` listing every problem."""
    tree = {} if tree is None else tree
    if not isinstance(tree, dict):
        raise ConfigError(["top level must be a mapping"])
    errors: list[str] = []
    for key in tree:
        if key not in ExperimentConfig.__dataclass_fields__:
            errors.append(f"{key}: unknown key")
    # Sections are validated one by one so a broken section does not hide
    # problems elsewhere.
    defaults = ExperimentConfig()
    parts: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        node = tree.get(name)
        if node is None:
            parts[name] = getattr(defaults, name)
            continue
        if not isinstance(node, dict):
            errors.append(f"{name}: must be a mapping")
            continue
        errors += _unknown_keys(name, node, cls)
        # omitted fields take the experiment default, not the bare dataclass default
        node = {**_plain(asdict(getattr(defaults, name))), **node}
        try:
            parts[name] = _ADAPTERS[name].validate_python(node)
        except ValidationError as exc:
            errors += _format(name, exc)
    rest = {k: tree[k] for k in ("output_dir", "seeds") if k in tree}
    try:
        top = _TOP.validate_python(rest)
    except ValidationError as exc:
        errors += _format("", exc)
        top = None
    if errors:
        # range checks of the sections that did parse are still worth reporting
        for name in ("dataset", "runtime", "strategy"):
            if name in parts:
                errors += parts[name].violations()
        raise ConfigError(errors)
    cfg = replace(top, **parts)
    errors = cfg.violations()
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML syntax error: {exc}"]) from exc
    return build_config(tree)
