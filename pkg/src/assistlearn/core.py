"""Sample identity, feature partitions and collation.

A dataset is split *vertically*: every participant holds all rows but only its
own columns. Rows are addressed by opaque string ids; whenever two partitions
must line up, the engine inner-joins on ids and sorts the survivors
lexicographically, so row order never depends on insertion order.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateId,
    EmptyIntersection,
    MissingId,
    OverlappingGroups,
    UnknownColumn,
)

log = logging.getLogger("assistlearn")

SampleId = str


def derive_seed(*parts) -> int:
    """Deterministically derive a 63-bit seed from arbitrary labelled parts.

    Uses SHA-256 over a delimited string rendering, so the same parts give the
    same seed on every platform and in every process.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# construction problems are caller bugs, not protocol events; plain ValueError
DimensionError = ValueError


@dataclass(frozen=True, eq=False)
class FeaturePartition:
    """One participant's vertical slice: ids, a float64 matrix, column names."""

    ids: tuple[SampleId, ...]
    features: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] != len(ids):
            raise DimensionError(
                f"{len(ids)} ids but {feats.shape[0]} feature rows"
            )
        names = tuple(str(n) for n in self.feature_names)
        if len(names) != feats.shape[1]:
            raise DimensionError(
                f"{len(names)} names for {feats.shape[1]} columns"
            )
        if len(set(names)) != len(names):
            raise DimensionError("feature names must be unique")
        if any(not i for i in ids):
            raise DimensionError("empty sample id")
        if len(set(ids)) != len(ids):
            raise DuplicateId("duplicate sample ids in partition")
        if not np.all(np.isfinite(feats)):
            raise DimensionError("features must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "_row_of", {s: r for r, s in enumerate(ids)})

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_cols(self) -> int:
        return self.features.shape[1]

    def rows_for(self, ids: Iterable[SampleId]) -> np.ndarray:
        """Row positions for the given ids; MissingId if any is absent."""
        lookup = self._row_of  # type: ignore[attr-defined]
        ids = tuple(ids)
        out = np.empty(len(ids), dtype=np.intp)
        for j, s in enumerate(ids):
            try:
                out[j] = lookup[s]
            except KeyError:
                raise MissingId(f"sample id {s!r} not in partition") from None
        return out


@dataclass(frozen=True, eq=False)
class TaskLabels:
    """Supervised targets owned by the task initiator."""

    ids: tuple[SampleId, ...]
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise DimensionError(f"labels must be 1-D, got shape {vals.shape}")
        if len(ids) != vals.shape[0]:
            raise DimensionError(f"{len(ids)} ids but {vals.shape[0]} labels")
        if len(set(ids)) != len(ids):
            raise DuplicateId("duplicate sample ids in labels")
        if not np.all(np.isfinite(vals)):
            raise DimensionError("labels must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_value_of", dict(zip(ids, vals.tolist())))

    def lookup(self, ids: Sequence[SampleId]) -> np.ndarray:
        table = self._value_of  # type: ignore[attr-defined]
        try:
            return np.array([table[s] for s in ids], dtype=np.float64)
        except KeyError as exc:
            raise MissingId(f"no label for sample id {exc.args[0]!r}") from None


@dataclass(frozen=True)
class CollationIndex:
    """Shared row ordering: the sorted inner join of several partitions.

    ``row_maps[j][i]`` is the row position inside input partition ``j`` of the
    ``i``-th collated id. ``source_sizes`` keeps the original row counts so
    callers can see how many rows the join dropped.
    """

    ids: tuple[SampleId, ...]
    row_maps: tuple[np.ndarray, ...]
    source_sizes: tuple[int, ...]

    @property
    def retained(self) -> int:
        return len(self.ids)


def collate(partitions: Sequence[FeaturePartition]) -> CollationIndex:
    """Inner-join partitions on sample id, sorted lexicographically.

    Raises EmptyIntersection when no id is common to all partitions.
    """
    if not partitions:
        raise DimensionError("collate needs at least one partition")
    common = set(partitions[0].ids)
    for part in partitions[1:]:
        common &= set(part.ids)
    if not common:
        raise EmptyIntersection("partitions share no sample id")
    ids = tuple(sorted(common))
    maps = tuple(part.rows_for(ids) for part in partitions)
    for m in maps:
        m.setflags(write=False)
    dropped = [p.n_rows - len(ids) for p in partitions]
    if any(dropped):
        log.debug("collate retained %d rows, dropped %s", len(ids), dropped)
    return CollationIndex(ids=ids, row_maps=maps,
                          source_sizes=tuple(p.n_rows for p in partitions))


def align(partition: FeaturePartition, index) -> np.ndarray:
    """Feature rows of ``partition`` reordered to a collation index.

    ``index`` may be a CollationIndex or any sequence of sample ids. The
    result is a fresh writable array; the partition stays immutable.
    """
    ids = index.ids if isinstance(index, CollationIndex) else tuple(index)
    rows = partition.rows_for(ids)
    return partition.features[rows].copy()


def vertical_split(full: FeaturePartition,
                   groups: Sequence[Sequence[str]]) -> list[FeaturePartition]:
    """Split one partition column-wise into disjoint named groups."""
    out = []
    seen: set[str] = set()
    for group in groups:
        names = sorted(group) if isinstance(group, (set, frozenset)) else list(group)
        for name in names:
            if name not in full.feature_names:
                raise UnknownColumn(f"column {name!r} not in partition")
            if name in seen:
                raise OverlappingGroups(f"column {name!r} assigned twice")
            seen.add(name)
        cols = [full.feature_names.index(n) for n in names]
        out.append(FeaturePartition(ids=full.ids,
                                    features=full.features[:, cols],
                                    feature_names=tuple(names)))
    return out


@dataclass
class LocalModule:
    """A participant: its partition, its learner, and its private model store.

    The store maps (task id, round) to a fitted model and is written at most
    once per key; a second write raises StorageConflict.
    """

    module_id: str
    partition: FeaturePartition
    learner: "LearnerSpec"  # noqa: F821  (import cycle kept out on purpose)
    model_store: dict = field(default_factory=dict)

    def record_model(self, task_id: str, round_no: int, model) -> None:
        from .errors import StorageConflict
        key = (task_id, int(round_no))
        if key in self.model_store:
            raise StorageConflict(f"model already recorded for {key}")
        self.model_store[key] = model

    def stored_model(self, task_id: str, round_no: int):
        from .errors import UnknownRound
        try:
            return self.model_store[(task_id, int(round_no))]
        except KeyError:
            raise UnknownRound(
                f"no model for task {task_id!r} round {round_no}"
            ) from None
