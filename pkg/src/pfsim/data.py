"""Client datasets: synthetic generation, Dirichlet partitioning, splits and analytics."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeviceProfile:
    """Client capacity used by the virtual-time cost model."""

    compute_speed: float = 100.0  # samples / second
    bandwidth: float = 1.0e6  # bytes / second

    def __post_init__(self) -> None:
        if not (self.compute_speed > 0 and self.bandwidth > 0):
            raise ValueError(
                f"device capacities must be positive, got compute_speed={self.compute_speed}, "
                f"bandwidth={self.bandwidth}"
            )


@dataclass(frozen=True)
class DeviceShare:
    """A fraction of the client population sharing one device profile."""

    fraction: float
    compute_speed: float = 100.0
    bandwidth: float = 1.0e6

    def __post_init__(self) -> None:
        if not 0 <= self.fraction <= 1:
            raise ValueError("device share fraction must lie in [0, 1]")
        DeviceProfile(self.compute_speed, self.bandwidth)

    @property
    def profile(self) -> DeviceProfile:
        return DeviceProfile(self.compute_speed, self.bandwidth)


def assign_devices(
    clients: Sequence["ClientData"], shares: Sequence[DeviceShare], default: DeviceProfile, seed: int
) -> list["ClientData"]:
    """Give ``round(fraction * n)`` randomly chosen clients each share's profile; the rest get ``default``."""
    n = len(clients)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE71])).permutation(n)
    devices = [default] * n
    pos = 0
    for share in shares:
        k = min(n - pos, round_half_up(share.fraction * n))
        for i in order[pos : pos + k]:
            devices[int(i)] = share.profile
        pos += k
    return [replace(c, device=d) for c, d in zip(clients, devices)]


@dataclass(frozen=True)
class DataSplit:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @staticmethod
    def concat(splits: Sequence[DataSplit]) -> DataSplit:
        return DataSplit(
            np.concatenate([s.features for s in splits]),
            np.concatenate([s.labels for s in splits]),
        )


@dataclass(frozen=True)
class ClientData:
    id: int
    train: DataSplit
    val: DataSplit
    test: DataSplit
    participates: bool = True
    device: DeviceProfile = field(default_factory=DeviceProfile)
    group: int = 0

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class GroupSpec:
    """One block of synthetic clients sharing a feature shift and labelling rule.

    ``concept`` names the rule: ``r<k>`` is the k-th random linear rule and
    ``~r<k>`` its negation (reversed class order).
    """

    n_clients: int
    samples_per_client: int
    concept: str = "r0"
    feature_shift: tuple[float, ...] | float = 0.0
    device: DeviceProfile | None = None


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha: float
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    unseen_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        check_ratios(self.split_ratios)
        if not 0 <= self.unseen_fraction < 1:
            raise ValueError("unseen_fraction must lie in [0, 1)")


_RULE_RE = re.compile(r"^(~?)r(\d+)$")


def check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


def parse_rule(concept: str) -> tuple[int, bool]:
    """``"~r3" -> (3, True)``."""
    m = _RULE_RE.match(concept)
    if not m:
        raise ValueError(f"invalid rule id {concept!r}; expected 'r<k>' or '~r<k>'")
    return int(m.group(2)), m.group(1) == "~"


def rule_matrix(rule: int, n_features: int, n_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED, int(rule)]))
    return rng.standard_normal((n_classes, n_features))


def apply_rule(concept: str, centered: np.ndarray, n_classes: int, seed: int) -> np.ndarray:
    """Labels of centered features under a named linear rule."""
    rule, negated = parse_rule(concept)
    scores = centered @ rule_matrix(rule, centered.shape[1], n_classes, seed).T
    if negated:
        scores = -scores
    return np.argmax(scores, axis=1)


def synth_generate(
    groups: Sequence[GroupSpec],
    seed: int,
    n_features: int = 5,
    n_classes: int = 2,
    split_ratios: Sequence[float] = (0.6, 0.2, 0.2),
    noise: float = 1.0,
) -> list[ClientData]:
    """Gaussian clusters around each group's shift, labelled by the group's rule.

    Two groups with rules ``r0`` and ``~r0`` over the same shift share P(X)
    but disagree on every label, which is pure concept shift.
    """
    if not groups:
        raise ValueError("need at least one group")
    for g in groups:
        parse_rule(g.concept)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    clients: list[ClientData] = []
    cid = 0
    for gi, g in enumerate(groups):
        shift = np.broadcast_to(np.asarray(g.feature_shift, dtype=np.float64), (n_features,))
        for _ in range(g.n_clients):
            centered = noise * rng.standard_normal((g.samples_per_client, n_features))
            y = apply_rule(g.concept, centered, n_classes, seed)
            x = centered + shift
            train, val, test = split_client(x, y, split_ratios, rng)
            clients.append(
                ClientData(
                    id=cid,
                    train=train,
                    val=val,
                    test=test,
                    device=g.device or DeviceProfile(),
                    group=gi,
                )
            )
            cid += 1
    return clients


def make_classification_pool(
    n_samples: int, n_features: int, n_classes: int, seed: int, separation: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced class-conditional Gaussian blobs, used as the pool for label-skew partitions."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    centers = separation * rng.standard_normal((n_classes, n_features))
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    x = centers[y] + rng.standard_normal((n_samples, n_features))
    return x, y


def dirichlet_partition(
    features: np.ndarray | None,
    labels: np.ndarray,
    n_clients: int,
    alpha: float,
    seed: int,
    max_retries: int = 100,
) -> list[np.ndarray]:
    """Label-Dirichlet split of sample indices over ``n_clients``.

    Each class's shuffled indices are cut contiguously according to
    proportions drawn from Dir(alpha * 1). Draws repeat (up to
    ``max_retries``) until no client is empty; remaining empties then take
    one sample from the currently largest client.
    """
    labels = np.asarray(labels).reshape(-1)
    n = labels.shape[0]
    if features is not None and np.asarray(features).shape[0] != n:
        raise ValueError("features and labels differ in length")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if n_clients > n:
        raise ValueError(f"cannot give {n_clients} clients a sample each from {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD1A1]))
    classes = np.unique(labels)

    parts: list[list[int]] = []
    for _ in range(max_retries + 1):
        parts = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, float(alpha)))
            cuts = (np.cumsum(props) * idx.size).astype(int)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].extend(chunk.tolist())
        if all(parts):
            break
    else:
        for k in range(n_clients):
            if not parts[k]:
                donor = max(range(n_clients), key=lambda j: (len(parts[j]), -j))
                parts[k].append(parts[donor].pop())
        logger.warning("dirichlet_partition: moved samples into empty clients after retries")
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor each share, then hand leftovers to train, then val."""
    check_ratios(ratios)
    sizes = [int(math.floor(r * n + 1e-9)) for r in ratios]
    left = n - sum(sizes)
    k = 0
    while left > 0:
        sizes[k % 2] += 1
        left -= 1
        k += 1
    return sizes[0], sizes[1], sizes[2]


def split_client(
    features: np.ndarray,
    labels: np.ndarray,
    ratios: Sequence[float],
    seed_or_rng: int | np.random.Generator,
) -> tuple[DataSplit, DataSplit, DataSplit]:
    """Shuffle a client's samples and cut them into train/val/test."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = y.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(np.random.SeedSequence([int(seed_or_rng), 0x5B17]))
    )
    n_tr, n_va, _ = split_sizes(n, ratios)
    perm = rng.permutation(n)
    tr, va, te = perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]
    return DataSplit(x[tr], y[tr]), DataSplit(x[va], y[va]), DataSplit(x[te], y[te])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mark_unseen(clients: Sequence[ClientData], fraction: float, seed: int) -> list[ClientData]:
    """Flag ``round(fraction * n)`` uniformly chosen clients as non-participating."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(clients)
    k = round_half_up(fraction * n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0E5E]))
    unseen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    return [replace(c, participates=(i not in unseen)) for i, c in enumerate(clients)]


def label_js_distance(p_counts: Sequence[float], q_counts: Sequence[float]) -> float:
    """Jensen-Shannon distance (base 2, so in [0, 1]) between two label histograms."""
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("histograms must have the same number of classes")
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("histogram totals must be positive")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    jsd = 0.5 * kl(p) + 0.5 * kl(q)
    return float(np.sqrt(min(max(jsd, 0.0), 1.0)))


@dataclass
class HeterogeneityReport:
    sizes: list[int]
    mean_size: float
    std_size: float
    label_histograms: list[list[int]]
    js_matrix: np.ndarray
    js_mean: float
    js_histogram: tuple[list[int], list[float]]

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "mean_size": self.mean_size,
            "std_size": self.std_size,
            "label_histograms": self.label_histograms,
            "js_mean": self.js_mean,
            "js_histogram": {"counts": self.js_histogram[0], "edges": self.js_histogram[1]},
            "js_matrix": self.js_matrix.tolist(),
        }


def label_histogram(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)


def heterogeneity_report(
    clients: Sequence[ClientData], n_classes: int | None = None, bins: int = 10
) -> HeterogeneityReport:
    """Size statistics (population std), label histograms and pairwise JS distances.

    Histograms are taken over each client's train split.
    """
    if not clients:
        raise ValueError("need at least one client")
    if n_classes is None:
        n_classes = int(max(int(c.train.labels.max(initial=0)) for c in clients)) + 1
    sizes = np.array([c.n_train for c in clients], dtype=np.float64)
    hists = [label_histogram(c.train.labels, n_classes) for c in clients]
    n = len(clients)
    js = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if hists[i].sum() and hists[j].sum():
                js[i, j] = js[j, i] = label_js_distance(hists[i], hists[j])
    upper = js[np.triu_indices(n, k=1)]
    counts, edges = np.histogram(upper, bins=bins, range=(0.0, 1.0))
    return HeterogeneityReport(
        sizes=[int(s) for s in sizes],
        mean_size=float(sizes.mean()),
        std_size=float(sizes.std()),
        label_histograms=[h.tolist() for h in hists],
        js_matrix=js,
        js_mean=float(upper.mean()) if upper.size else 0.0,
        js_histogram=(counts.tolist(), edges.tolist()),
    )


# CSV import/export -----------------------------------------------------------
MANIFEST = "manifest.json"


def _write_split(path: Path, split: DataSplit) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(split.features.shape[1])] + ["label"])
        for row, label in zip(split.features, split.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _read_split(path: Path, label_column: str = "label") -> DataSplit:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        li = header.index(label_column)
        xs, ys = [], []
        for row in reader:
            if not row:
                continue
            ys.append(int(float(row[li])))
            xs.append([float(v) for j, v in enumerate(row) if j != li])
    n_feat = len(header) - 1
    return DataSplit(np.array(xs, dtype=np.float64).reshape(-1, n_feat), np.array(ys, dtype=np.int64))


def export_clients(clients: Sequence[ClientData], out_dir: str | Path, meta: dict | None = None) -> Path:
    """Write ``client_<id>_{train,val,test}.csv`` files plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clients:
        for split_name in ("train", "val", "test"):
            _write_split(out / f"client_{c.id}_{split_name}.csv", getattr(c, split_name))
        entries.append(
            {
                "id": c.id,
                "participates": c.participates,
                "group": c.group,
                "device": {"compute_speed": c.device.compute_speed, "bandwidth": c.device.bandwidth},
            }
        )
    manifest = {"schema": "pfsim.dataset/1", "meta": meta or {}, "clients": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def import_clients(in_dir: str | Path) -> list[ClientData]:
    src = Path(in_dir)
    manifest = json.loads((src / MANIFEST).read_text())
    clients = []
    for e in manifest["clients"]:
        splits = [_read_split(src / f"client_{e['id']}_{s}.csv") for s in ("train", "val", "test")]
        clients.append(
            ClientData(
                id=int(e["id"]),
                train=splits[0],
                val=splits[1],
                test=splits[2],
                participates=bool(e.get("participates", True)),
                device=DeviceProfile(**e["device"]) if "device" in e else DeviceProfile(),
                group=int(e.get("group", 0)),
            )
        )
    return clients


def read_table(path: str | Path, label_column: str = "label") -> tuple[np.ndarray, np.ndarray]:
    """Load a small tabular dataset (numeric features plus an integer label column)."""
    split = _read_split(Path(path), label_column)
    return split.features, split.labels
