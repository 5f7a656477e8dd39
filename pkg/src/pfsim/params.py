"""Named, order-stable parameter containers and the vector arithmetic on them.

Every model, update and aggregate in the simulator is a :class:`NamedParams`:
a set of flat float64 groups keyed by name and iterated lexicographically.
Each group carries a category (``dense``, ``norm`` or ``embedding``) so that
key masks can keep whole categories local (FedBN-style personalization).
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence

import numpy as np

CATEGORIES = ("dense", "norm", "embedding")
_CATEGORY_CODE = {name: i for i, name in enumerate(CATEGORIES)}

_MAGIC = b"NPRM"
_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_GROUP_HEAD = struct.Struct("<H")
_GROUP_TAIL = struct.Struct("<BQ")

HEADER_BYTES = _HEADER.size


class ShapeMismatchError(ValueError):
    """Two parameter containers do not share names, lengths and categories."""

    def __init__(self, message: str, group: str | None = None) -> None:
        super().__init__(message)
        self.group = group


class NonFiniteError(ValueError):
    """A parameter or loss value became NaN or infinite."""


class NamedParams(Mapping[str, np.ndarray]):
    """Immutable mapping ``group name -> flat float64 array``.

    Arrays are copied on construction and marked read-only, so instances can
    be shared freely between clients and the server.
    """

    __slots__ = ("_groups", "_categories")

    def __init__(
        self,
        groups: Mapping[str, Iterable[float] | np.ndarray],
        categories: Mapping[str, str] | None = None,
        *,
        check_finite: bool = True,
    ) -> None:
        categories = dict(categories or {})
        unknown = set(categories) - set(groups)
        if unknown:
            raise KeyError(f"categories given for unknown groups: {sorted(unknown)}")
        store: dict[str, np.ndarray] = {}
        cats: dict[str, str] = {}
        for name in sorted(groups):
            arr = np.array(groups[name], dtype=np.float64).reshape(-1)
            if check_finite and not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"group {name!r} contains non-finite values")
            arr.flags.writeable = False
            cat = categories.get(name, "dense")
            if cat not in _CATEGORY_CODE:
                raise ValueError(f"group {name!r}: unknown category {cat!r}")
            store[name] = arr
            cats[name] = cat
        self._groups = store
        self._categories = cats

    # Mapping protocol -------------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._groups[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._groups)

    def __len__(self) -> int:
        return len(self._groups)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}[{self._categories[k]}]:{v.size}" for k, v in self._groups.items())
        return f"NamedParams({body})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NamedParams):
            return NotImplemented
        if not self.compatible(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None  # type: ignore[assignment]

    # ------------------------------------------------------------------------
    @property
    def categories(self) -> dict[str, str]:
        return dict(self._categories)

    def category(self, name: str) -> str:
        return self._categories[name]

    @property
    def size(self) -> int:
        """Total number of scalar parameters."""
        return sum(v.size for v in self._groups.values())

    def compatible(self, other: NamedParams) -> bool:
        try:
            check_compatible(self, other)
        except ShapeMismatchError:
            return False
        return True

    def names_in(self, categories: Iterable[str]) -> frozenset[str]:
        wanted = set(categories)
        return frozenset(k for k, c in self._categories.items() if c in wanted)

    def to_dict(self) -> dict[str, np.ndarray]:
        """Writable copies of every group."""
        return {k: v.copy() for k, v in self._groups.items()}

    def flat(self) -> np.ndarray:
        """All values concatenated in iteration order."""
        if not self._groups:
            return np.zeros(0)
        return np.concatenate(list(self._groups.values()))

    def replace(self, groups: Mapping[str, np.ndarray]) -> NamedParams:
        """New container with some groups swapped for arrays of equal length."""
        merged: dict[str, np.ndarray] = dict(self._groups)
        for name, arr in groups.items():
            if name not in merged:
                raise ShapeMismatchError(f"unknown group {name!r}", group=name)
            arr = np.asarray(arr, dtype=np.float64).reshape(-1)
            if arr.size != merged[name].size:
                raise ShapeMismatchError(
                    f"group {name!r}: length {arr.size} != {merged[name].size}", group=name
                )
            merged[name] = arr
        return NamedParams(merged, self._categories)

    def map(self, fn) -> NamedParams:
        """Apply ``fn`` to every group array."""
        return NamedParams({k: fn(v) for k, v in self._groups.items()}, self._categories)

    def zeros_like(self) -> NamedParams:
        return self.map(np.zeros_like)

    # Canonical wire format --------------------------------------------------
    def to_bytes(self, exclude: Iterable[str] = ()) -> bytes:
        """Serialize to the canonical little-endian layout.

        Layout: header (magic, version, group count) followed, per group in
        iteration order, by the UTF-8 name, category code, length and the
        float64 values. Groups in ``exclude`` are not written.
        """
        skip = set(exclude)
        names = [k for k in self._groups if k not in skip]
        parts = [_HEADER.pack(_MAGIC, _VERSION, len(names))]
        for name in names:
            raw = name.encode("utf-8")
            arr = self._groups[name]
            parts.append(_GROUP_HEAD.pack(len(raw)))
            parts.append(raw)
            parts.append(_GROUP_TAIL.pack(_CATEGORY_CODE[self._categories[name]], arr.size))
            parts.append(arr.astype("<f8").tobytes())
        return b"".join(parts)

    def serialized_size(self, exclude: Iterable[str] = ()) -> int:
        """Length of :meth:`to_bytes` without building the buffer."""
        skip = set(exclude)
        total = _HEADER.size
        for name, arr in self._groups.items():
            if name in skip:
                continue
            total += _GROUP_HEAD.size + len(name.encode("utf-8")) + _GROUP_TAIL.size + 8 * arr.size
        return total

    @classmethod
    def from_bytes(cls, buf: bytes) -> NamedParams:
        magic, version, count = _HEADER.unpack_from(buf, 0)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a serialized NamedParams buffer")
        offset = _HEADER.size
        groups: dict[str, np.ndarray] = {}
        cats: dict[str, str] = {}
        for _ in range(count):
            (name_len,) = _GROUP_HEAD.unpack_from(buf, offset)
            offset += _GROUP_HEAD.size
            name = buf[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, n = _GROUP_TAIL.unpack_from(buf, offset)
            offset += _GROUP_TAIL.size
            groups[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)
            cats[name] = CATEGORIES[code]
            offset += 8 * n
        if offset != len(buf):
            raise ValueError(f"trailing bytes after parameter payload ({len(buf) - offset})")
        return cls(groups, cats)


class KeyMask(frozenset):
    """Set of group names that stay local (never transmitted or aggregated)."""

    def __new__(cls, names: Iterable[str] = ()) -> KeyMask:
        return super().__new__(cls, names)

    @classmethod
    def from_categories(cls, params: NamedParams, categories: Iterable[str]) -> KeyMask:
        return cls(params.names_in(categories))

    def validate(self, params: NamedParams) -> None:
        missing = sorted(set(self) - set(params))
        if missing:
            raise KeyError(f"mask references unknown groups: {missing}")

    def __repr__(self) -> str:
        return f"KeyMask({sorted(self)})"


def check_compatible(p: NamedParams, q: NamedParams) -> None:
    """Raise :class:`ShapeMismatchError` naming the first offending group."""
    names_p, names_q = list(p), list(q)
    if names_p != names_q:
        diff = sorted(set(names_p) ^ set(names_q))
        raise ShapeMismatchError(f"group names differ: {diff}", group=diff[0] if diff else None)
    for name in names_p:
        if p[name].size != q[name].size:
            raise ShapeMismatchError(
                f"group {name!r}: length {p[name].size} != {q[name].size}", group=name
            )
        if p.category(name) != q.category(name):
            raise ShapeMismatchError(
                f"group {name!r}: category {p.category(name)} != {q.category(name)}", group=name
            )


def linear_combine(a: float, p: NamedParams, b: float, q: NamedParams) -> NamedParams:
    """Return ``a*p + b*q`` group by group."""
    check_compatible(p, q)
    with np.errstate(over="ignore", invalid="ignore"):  # NamedParams reports non-finite results
        groups = {k: a * p[k] + b * q[k] for k in p}
    return NamedParams(groups, p.categories)


def weighted_average(entries: Sequence[tuple[NamedParams, float]]) -> NamedParams:
    """Weighted mean ``sum(w_i p_i) / sum(w_i)``.

    Weights are normalized before accumulation so that a single entry is
    returned bit-for-bit unchanged.
    """
    if not entries:
        raise ValueError("weighted_average needs at least one entry")
    weights = np.array([float(w) for _, w in entries])
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError(f"weights must be finite and nonnegative, got {weights.tolist()}")
    total = weights.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    first = entries[0][0]
    for params, _ in entries[1:]:
        check_compatible(first, params)
    coeffs = weights / total
    out: dict[str, np.ndarray] = {}
    for name in first:
        acc = coeffs[0] * first[name]
        for c, (params, _) in zip(coeffs[1:], entries[1:]):
            acc = acc + c * params[name]
        out[name] = acc
    return NamedParams(out, first.categories)


def apply_masked_update(local: NamedParams, incoming: NamedParams, mask: KeyMask) -> NamedParams:
    """Take ``incoming`` everywhere except the masked groups, which keep ``local``."""
    check_compatible(local, incoming)
    mask = KeyMask(mask)
    mask.validate(local)
    if not mask:
        return incoming
    return NamedParams(
        {k: (local[k] if k in mask else incoming[k]) for k in local}, local.categories
    )


def l2_distance(p: NamedParams, q: NamedParams, mask: KeyMask | None = None) -> float:
    """Euclidean distance between ``p`` and ``q`` over the unmasked groups."""
    check_compatible(p, q)
    skip = set(mask or ())
    sq = 0.0
    for name in p:
        if name in skip:
            continue
        d = p[name] - q[name]
        sq += float(d @ d)
    return float(np.sqrt(sq))


def l2_norm(p: NamedParams, mask: KeyMask | None = None) -> float:
    skip = set(mask or ())
    return float(np.sqrt(sum(float(p[k] @ p[k]) for k in p if k not in skip)))
