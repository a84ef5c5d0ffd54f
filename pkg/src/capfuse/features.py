"""Feature vector tables: text I/O, region pooling, late fusion, normalization.

Two on-disk formats are handled here. Whole-image tables::

    #dim 3
    img001 0.1 0.2 0.3

and region sets, where each line carries a priority before the values and
repeated ids accumulate regions in file order::

    #dim 3
    img001 0.93 0.1 0.2 0.3
    img001 0.41 0.0 1.0 0.5
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_TOP_K = 5


class FeatureFormatError(ValueError):
    """Raised for malformed feature files; message carries the line number."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class FeatureTable:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> np.ndarray:
        return self.entries[key]

    def ids(self) -> list[str]:
        return list(self.entries)

    def add(self, id_: str, values) -> None:
        vec = _as_vector(values)
        if vec.shape[0] != self.dim:
            raise ValueError(f"{id_}: length {vec.shape[0]} != dim {self.dim}")
        if id_ in self.entries:
            raise ValueError(f"duplicate id {id_!r}")
        self.entries[id_] = vec


@dataclass
class RegionFeatureSet:
    """Region encodings of one image, kept in their original order."""

    id: str
    priorities: np.ndarray
    vectors: np.ndarray  # (n_regions, dim)

    def __post_init__(self):
        self.priorities = np.asarray(self.priorities, dtype=np.float64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"{self.id}: region vectors must form a 2-d array")
        if self.priorities.shape[0] == 0 or self.vectors.shape[0] == 0:
            raise ValueError(f"{self.id}: empty region list")
        if self.priorities.shape[0] != self.vectors.shape[0]:
            raise ValueError(f"{self.id}: priorities/vectors length mismatch")
        if not np.all(np.isfinite(self.priorities)):
            raise ValueError(f"{self.id}: non-finite priority")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError(f"{self.id}: non-finite region value")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


def _as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if vec.shape[0] == 0:
        raise ValueError("zero-length vector")
    if not np.all(np.isfinite(vec)):
        raise ValueError("non-finite value in vector")
    return vec


def _data_lines(path):
    """Yield (lineno, tokens) for non-empty, non-comment lines after the header,
    plus the declared dim as the first yielded item."""
    with open(path) as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2 or parts[0] != "#dim":
            raise FeatureFormatError(path, 1, f"expected '#dim D' header, got {header.strip()!r}")
        try:
            dim = int(parts[1])
        except ValueError:
            raise FeatureFormatError(path, 1, f"bad dim {parts[1]!r}") from None
        if dim < 1:
            raise FeatureFormatError(path, 1, f"dim must be positive, got {dim}")
        yield dim
        for lineno, line in enumerate(fh, start=2):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, stripped.split()


def _parse_floats(path, lineno, tokens) -> np.ndarray:
    try:
        arr = np.array(tokens, dtype=np.float64)
    except ValueError:
        raise FeatureFormatError(path, lineno, "unparseable number") from None
    if not np.all(np.isfinite(arr)):
        raise FeatureFormatError(path, lineno, "non-finite value")
    return arr


def load_feature_table(path) -> FeatureTable:
    lines = _data_lines(path)
    dim = next(lines)
    table = FeatureTable(dim)
    for lineno, tokens in lines:
        if len(tokens) - 1 != dim:
            raise FeatureFormatError(
                path, lineno, f"row length mismatch: expected {dim} values, got {len(tokens) - 1}"
            )
        id_ = tokens[0]
        if id_ in table.entries:
            raise FeatureFormatError(path, lineno, f"duplicate id {id_!r}")
        table.entries[id_] = _parse_floats(path, lineno, tokens[1:])
    return table


def load_region_features(path) -> dict[str, RegionFeatureSet]:
    lines = _data_lines(path)
    dim = next(lines)
    grouped: dict[str, tuple[list, list]] = {}
    for lineno, tokens in lines:
        if len(tokens) - 2 != dim:
            raise FeatureFormatError(
                path, lineno, f"row length mismatch: expected priority + {dim} values, got {len(tokens) - 1}"
            )
        row = _parse_floats(path, lineno, tokens[1:])
        prios, vecs = grouped.setdefault(tokens[0], ([], []))
        prios.append(row[0])
        vecs.append(row[1:])
    return {
        id_: RegionFeatureSet(id_, np.array(p), np.vstack(v))
        for id_, (p, v) in grouped.items()
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def write_feature_table(table: FeatureTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"#dim {table.dim}\n")
        for id_, vec in table.entries.items():
            fh.write(id_ + " " + " ".join(map(_fmt, vec)) + "\n")


def write_region_features(regions: Iterable[RegionFeatureSet], path, dim: int | None = None) -> None:
    regions = list(regions)
    if dim is None:
        if not regions:
            raise ValueError("cannot infer dim from an empty region collection")
        dim = regions[0].dim
    with open(path, "w") as fh:
        fh.write(f"#dim {dim}\n")
        for rset in regions:
            if rset.dim != dim:
                raise ValueError(f"{rset.id}: region dim {rset.dim} != {dim}")
            for prio, vec in zip(rset.priorities, rset.vectors):
                fh.write(f"{rset.id} {_fmt(prio)} " + " ".join(map(_fmt, vec)) + "\n")


def mean_pool(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("mean_pool of an empty list")
    try:
        stacked = np.vstack([np.asarray(v, dtype=np.float64).reshape(1, -1) for v in vectors])
    except ValueError:
        raise ValueError("mean_pool: vectors differ in dimension") from None
    if stacked.shape[1] == 0:
        raise ValueError("zero-length vector")
    return stacked.mean(axis=0)


def mean_pool_topk(rset: RegionFeatureSet, k: int = DEFAULT_TOP_K) -> np.ndarray:
    """Unweighted mean of the ``k`` highest-priority regions.

    Equal priorities keep their original order (stable sort). The selected
    rows are averaged in file order, so ``k >= len(rset)`` reproduces
    ``mean_pool`` over all regions bit for bit.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    chosen = np.sort(np.argsort(-rset.priorities, kind="stable")[:k])
    return mean_pool(rset.vectors[chosen])


def concat_fuse(a, b) -> np.ndarray:
    return np.concatenate([_as_vector(a), _as_vector(b)])


def l2_normalize(v) -> np.ndarray:
    vec = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if not norm > 0:
        raise ValueError("cannot normalize a zero-norm vector")
    return vec / norm


VIEWS = ("both", "fic", "regions")


def build_inputs(
    fic: FeatureTable | None,
    regions: dict[str, RegionFeatureSet] | None,
    ids: Iterable[str],
    k: int = DEFAULT_TOP_K,
    views: str = "both",
) -> tuple[list[str], np.ndarray]:
    """Network inputs for ``ids``: FIC vector followed by pooled regions.

    ``views`` selects a single source instead of the fused pair. Returns the
    ids in the order given and a matrix with one row per id.
    """
    if views not in VIEWS:
        raise ValueError(f"views must be one of {VIEWS}, got {views!r}")
    ids = list(ids)
    rows = []
    for id_ in ids:
        parts = []
        if views in ("both", "fic"):
            if id_ not in fic.entries:
                raise KeyError(f"id {id_!r} missing from whole-image features")
            parts.append(fic.entries[id_])
        if views in ("both", "regions"):
            if id_ not in regions:
                raise KeyError(f"id {id_!r} missing from region features")
            parts.append(mean_pool_topk(regions[id_], k))
        rows.append(parts[0] if len(parts) == 1 else concat_fuse(*parts))
    if not rows:
        dim = (fic.dim if views != "regions" else 0) + (
            next(iter(regions.values())).dim if views != "fic" and regions else 0
        )
        return ids, np.zeros((0, dim))
    return ids, np.vstack(rows)
