"""Graded-relevance retrieval datasets, training pairs, fold splits and a
planted-similarity corpus generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .features import FeatureTable, RegionFeatureSet

GRADES = (0, 1, 2, 3)


class RelevanceFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class RetrievalDataset:
    """Queries with their judged reference pools.

    ``judgments[q]`` maps reference id to grade, in the order judgments were
    added, which is also the order :func:`generate_pairs` emits them.
    """

    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def queries(self) -> list[str]:
        return list(self.judgments)

    def references(self, query: str) -> list[str]:
        return list(self.judgments[query])

    def grade(self, query: str, ref: str) -> int:
        return self.judgments[query][ref]

    def add(self, query: str, ref: str, grade: int) -> None:
        if grade not in GRADES:
            raise ValueError(f"grade {grade!r} outside 0-3 for ({query}, {ref})")
        refs = self.judgments.setdefault(query, {})
        if ref in refs:
            raise ValueError(f"duplicate judgment ({query}, {ref})")
        refs[ref] = int(grade)

    def n_judgments(self, queries=None) -> int:
        queries = self.queries if queries is None else queries
        return sum(len(self.judgments[q]) for q in queries)

    def image_ids(self) -> list[str]:
        """Every query and reference id, first-seen order, no repeats."""
        seen = dict.fromkeys(self.judgments)
        for refs in self.judgments.values():
            seen.update(dict.fromkeys(refs))
        return list(seen)


class Pair(NamedTuple):
    id_a: str
    id_b: str
    y: int


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_queries: list[str]
    eval_queries: list[str]


def load_relevance(path) -> RetrievalDataset:
    ds = RetrievalDataset()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) != 3:
                raise RelevanceFormatError(path, lineno, f"expected 'QUERY REF GRADE', got {stripped!r}")
            query, ref, grade_txt = tokens
            try:
                grade = int(grade_txt)
            except ValueError:
                raise RelevanceFormatError(path, lineno, f"grade {grade_txt!r} is not an integer") from None
            if grade not in GRADES:
                raise RelevanceFormatError(path, lineno, f"grade {grade} out of range 0-3")
            if query == ref:
                raise RelevanceFormatError(path, lineno, f"query {query!r} judged against itself")
            if ref in ds.judgments.get(query, ()):
                raise RelevanceFormatError(path, lineno, f"duplicate judgment ({query}, {ref})")
            ds.add(query, ref, grade)
    if not ds.judgments:
        raise RelevanceFormatError(path, 0, "no judgments in file")
    return ds


def write_relevance(ds: RetrievalDataset, path) -> None:
    with open(path, "w") as fh:
        for query, refs in ds.judgments.items():
            for ref, grade in refs.items():
                fh.write(f"{query} {ref} {grade}\n")


def generate_pairs(ds: RetrievalDataset, train_queries) -> list[Pair]:
    pairs = []
    for query in train_queries:
        if query not in ds.judgments:
            raise KeyError(f"unknown query id {query!r}")
        pairs.extend(Pair(query, ref, grade) for ref, grade in ds.judgments[query].items())
    return pairs


def kfold_split(queries, folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Seeded shuffle, then deal queries round-robin into ``folds`` eval sets."""
    queries = list(queries)
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if len(queries) < folds:
        raise ValueError(f"{len(queries)} queries cannot fill {folds} folds")
    if len(set(queries)) != len(queries):
        raise ValueError("query ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(queries))
    shuffled = [queries[i] for i in perm]
    splits = []
    for f in range(folds):
        eval_q = shuffled[f::folds]
        held = set(eval_q)
        train_q = [q for q in queries if q not in held]
        splits.append(FoldSplit(f, train_q, eval_q))
    return splits


@dataclass
class SynthConfig:
    """Planted-similarity corpus parameters.

    Defaults match the scale of the target benchmark: 50 queries, 180
    judged references each, 1835 images in total.
    """

    n_queries: int = 50
    refs_per_query: int = 180
    dim_a: int = 512
    dim_b: int = 512
    n_latent_clusters: int = 30
    noise_sigma: float = 1.0
    seed: int = 0
    pool_size: int = 1785
    n_regions: int = 5
    n_distractor_regions: int = 3
    ring_grading: bool = True
    decimals: int = 4
    # view A sees cluster c through centroid c % period_a (same for B);
    # 0 gives every cluster its own centroid
    period_a: int = 15
    period_b: int = 10

    def __post_init__(self):
        for name in ("n_queries", "refs_per_query", "dim_a", "dim_b", "n_latent_clusters", "n_regions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_distractor_regions < 0:
            raise ValueError("n_distractor_regions must be >= 0")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        for name in ("period_a", "period_b"):
            p = getattr(self, name)
            if not 0 <= p <= self.n_latent_clusters:
                raise ValueError(
                    f"{name}={p} must lie in 0..n_latent_clusters ({self.n_latent_clusters}); 0 disables aliasing"
                )
        if self.pool_size < self.refs_per_query:
            raise ValueError(f"pool_size {self.pool_size} < refs_per_query {self.refs_per_query}")


def synth_grade(c1: int, c2: int, n_clusters: int, ring: bool = True) -> int:
    if c1 == c2:
        return 3
    if ring and n_clusters > 2 and (c1 - c2) % n_clusters in (1, n_clusters - 1):
        return 2
    return 0


def synth_generate(cfg: SynthConfig) -> tuple[FeatureTable, dict[str, RegionFeatureSet], RetrievalDataset]:
    """Build a two-view corpus whose relevance is fixed by hidden clusters.

    Every image belongs to one latent cluster; grades come from the
    clusters: 3 for the same cluster, 2 for ring neighbours, 0 otherwise.

    The whole-image view is a view-A centroid plus isotropic noise. The
    region view holds ``n_regions`` noisy copies of an independent view-B
    centroid, plus low-priority distractor regions of pure noise; region
    noise is inflated by sqrt(n_regions) so both views are equally noisy
    after pooling. Cluster c uses view-A centroid ``c % period_a`` and view-B
    centroid ``c % period_b``, so with coprime-ish periods each view alone
    merges unrelated clusters that the pair of views tells apart.

    Values are rounded to ``cfg.decimals`` places so the text formats
    reproduce them exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_latent_clusters
    period_a = cfg.period_a or k
    period_b = cfg.period_b or k
    cent_a = rng.standard_normal((period_a, cfg.dim_a))
    cent_b = rng.standard_normal((period_b, cfg.dim_b))

    n_images = cfg.n_queries + cfg.pool_size
    width = len(str(max(cfg.n_queries, cfg.pool_size) - 1))
    ids = [f"q{i:0{width}d}" for i in range(cfg.n_queries)]
    ids += [f"r{i:0{width}d}" for i in range(cfg.pool_size)]
    clusters = rng.integers(0, k, size=n_images)

    sigma = cfg.noise_sigma
    view_a = cent_a[clusters % period_a] + sigma * rng.standard_normal((n_images, cfg.dim_a))
    view_a = np.round(view_a, cfg.decimals)
    fic = FeatureTable(cfg.dim_a)
    for id_, row in zip(ids, view_a):
        fic.entries[id_] = row

    regions: dict[str, RegionFeatureSet] = {}
    n_sig, n_dis = cfg.n_regions, cfg.n_distractor_regions
    # pooling n_sig regions divides noise variance by n_sig; match view A's level
    region_sigma = sigma * np.sqrt(n_sig)
    for id_, c in zip(ids, clusters):
        sig = cent_b[c % period_b] + region_sigma * rng.standard_normal((n_sig, cfg.dim_b))
        dis = region_sigma * rng.standard_normal((n_dis, cfg.dim_b))
        prios = np.concatenate([rng.uniform(0.5, 1.0, n_sig), rng.uniform(0.0, 0.5, n_dis)])
        order = rng.permutation(n_sig + n_dis)
        regions[id_] = RegionFeatureSet(
            id_,
            np.round(prios[order], cfg.decimals),
            np.round(np.vstack([sig, dis])[order], cfg.decimals),
        )

    ds = RetrievalDataset()
    pool = np.arange(cfg.n_queries, n_images)
    for qi in range(cfg.n_queries):
        picked = np.sort(rng.choice(pool, size=cfg.refs_per_query, replace=False))
        for ri in picked:
            ds.add(ids[qi], ids[ri], synth_grade(clusters[qi], clusters[ri], k, cfg.ring_grading))
    return fic, regions, ds
