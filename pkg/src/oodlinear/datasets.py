"""Synthetic feature generation, in/out mixing, and stream batching.

Randomness everywhere comes from numpy's default_rng (PCG64), seeded
explicitly; identical seeds reproduce identical draws on any platform
running the same numpy implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from oodlinear.errors import ConfigurationError, InsufficientDataError, ShapeError

NOISE_KINDS = ("uniform01", "gaussian_half")


@dataclass(frozen=True)
class FeatureRecord:
    """One sample: feature vector, optional logits, origin, source name.

    logits_perturbed carries precomputed perturbed-input logits for
    imported data whose producer ran the perturbation at the pixel
    level; synthetic records leave it None.
    """

    feature: np.ndarray
    logits: np.ndarray | None
    origin: str  # "in" or "out"
    source_tag: str
    logits_perturbed: np.ndarray | None = None

    def __post_init__(self):
        if self.origin not in ("in", "out"):
            raise ConfigurationError(f"origin must be 'in' or 'out', got {self.origin!r}")


def features_of(records: Sequence[FeatureRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    return np.stack([np.asarray(r.feature, dtype=np.float64) for r in records])


def logits_of(records: Sequence[FeatureRecord]) -> np.ndarray:
    rows = []
    for i, r in enumerate(records):
        if r.logits is None:
            raise ConfigurationError(f"record {i} has no logits")
        rows.append(np.asarray(r.logits, dtype=np.float64))
    return np.stack(rows) if rows else np.zeros((0, 0))


def labels_of(records: Sequence[FeatureRecord]) -> np.ndarray:
    """0 for in-distribution, 1 for out, matching the metrics convention."""
    return np.array([0 if r.origin == "in" else 1 for r in records], dtype=np.uint8)


def tags_of(records: Sequence[FeatureRecord]) -> list[str]:
    return [r.source_tag for r in records]


def records_from_arrays(
    features: np.ndarray,
    logits: np.ndarray | None,
    labels: np.ndarray,
    source_tags: Sequence[str] | None = None,
    logits_perturbed: np.ndarray | None = None,
) -> list[FeatureRecord]:
    """Zip parallel arrays into records; labels are 0 = in, 1 = out."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 (in) or 1 (out)")
    if source_tags is None:
        source_tags = ["in" if v == 0 else "out" for v in labels]
    if len(source_tags) != n:
        raise ShapeError(f"{len(source_tags)} source tags for {n} rows")
    out = []
    for i in range(n):
        out.append(
            FeatureRecord(
                feature=features[i],
                logits=None if logits is None else np.asarray(logits[i], dtype=np.float64),
                origin="in" if labels[i] == 0 else "out",
                source_tag=str(source_tags[i]),
                logits_perturbed=None if logits_perturbed is None else np.asarray(logits_perturbed[i], dtype=np.float64),
            )
        )
    return out


@dataclass(frozen=True)
class ClusterSpec:
    mean: np.ndarray
    cov: np.ndarray
    count: int
    origin: str = "in"
    source_tag: str = "cluster"


def gen_gaussian_clusters(clusters: Sequence[ClusterSpec], seed: int) -> list[FeatureRecord]:
    """Seeded multivariate-normal draws, one block per cluster spec."""
    rng = np.random.default_rng(seed)
    records = []
    for c in clusters:
        mean = np.asarray(c.mean, dtype=np.float64)
        cov = np.asarray(c.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"covariance shape {cov.shape} does not match mean dim {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh((cov + cov.T) / 2.0)
        if w.size and w[0] < -1e-10 * max(1.0, abs(w[-1])):
            raise ValueError(f"covariance must be positive semidefinite, min eigenvalue {w[0]}")
        # eigh factorization pinned so identical seeds give identical draws
        points = rng.multivariate_normal(mean, cov, size=c.count, method="eigh", check_valid="ignore")
        for i in range(c.count):
            records.append(FeatureRecord(points[i], None, c.origin, c.source_tag))
    return records


def gen_noise_ood(
    kind: str,
    dim: int,
    count: int,
    seed: int,
    sigma: float = 1.0,
    source_tag: str | None = None,
) -> list[FeatureRecord]:
    """Noise features in [0,1]^dim, always labeled out-of-distribution.

    uniform01 draws each coordinate uniformly; gaussian_half draws
    N(0.5, sigma) per coordinate and clips to [0,1].  sigma applies
    pre-clip and only to the gaussian kind.
    """
    if kind not in NOISE_KINDS:
        raise ConfigurationError(f"unknown noise kind {kind!r}, expected one of {NOISE_KINDS}")
    if count < 1 or dim < 1:
        raise ConfigurationError(f"count and dim must be at least 1, got count={count} dim={dim}")
    rng = np.random.default_rng(seed)
    if kind == "uniform01":
        points = rng.random((count, dim))
    else:
        points = np.clip(rng.normal(0.5, sigma, size=(count, dim)), 0.0, 1.0)
    tag = source_tag if source_tag is not None else kind
    return [FeatureRecord(points[i], None, "out", tag) for i in range(count)]


@dataclass(frozen=True)
class MixSpec:
    """How to compose a mixed test set.

    ood_sources maps source tag -> weight of the OOD budget; weights
    must sum to 1.  None splits the budget uniformly over whatever out
    pools are supplied.
    """

    in_rate: float
    total: int
    seed: int
    ood_sources: Mapping[str, float] | None = None

    def __post_init__(self):
        if not 0.0 < self.in_rate < 1.0:
            raise ConfigurationError(f"in_rate must be in (0, 1), got {self.in_rate}")
        if self.total < 2:
            raise ConfigurationError(f"total must be at least 2, got {self.total}")
        if self.ood_sources is not None:
            s = sum(self.ood_sources.values())
            if abs(s - 1.0) > 1e-9:
                raise ConfigurationError(f"ood_sources weights must sum to 1, got {s}")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _apportion(n_out: int, weights: list[float]) -> list[int]:
    """Integer split of n_out proportional to weights (largest remainder)."""
    quotas = [w * n_out for w in weights]
    counts = [int(np.floor(q)) for q in quotas]
    short = n_out - sum(counts)
    remainders = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def _draw(pool: Sequence[FeatureRecord], k: int, rng: np.random.Generator, name: str) -> list[FeatureRecord]:
    if k > len(pool):
        raise InsufficientDataError(f"pool {name!r} has {len(pool)} records, {k} requested")
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


def mix(
    in_pool: Sequence[FeatureRecord],
    out_pools: Mapping[str, Sequence[FeatureRecord]],
    spec: MixSpec,
) -> list[FeatureRecord]:
    """Sample a mixed test set at the requested in-distribution rate.

    Takes round-half-up(in_rate*total) in-records, splits the remainder
    over the out pools by weight, samples each pool without
    replacement, then applies one seeded shuffle to the union.
    """
    rng = np.random.default_rng(spec.seed)
    n_in = round_half_up(spec.in_rate * spec.total)
    n_out = spec.total - n_in
    if spec.ood_sources is None:
        tags = sorted(out_pools.keys())
        weights = [1.0 / len(tags)] * len(tags) if tags else []
    else:
        tags = list(spec.ood_sources.keys())
        weights = [spec.ood_sources[t] for t in tags]
    for t in tags:
        if t not in out_pools:
            raise ConfigurationError(f"no out pool named {t!r} supplied")
    if n_out > 0 and not tags:
        raise ConfigurationError("mix needs at least one out pool")
    chosen = _draw(in_pool, n_in, rng, "in")
    for t, k in zip(tags, _apportion(n_out, weights)):
        chosen.extend(_draw(out_pools[t], k, rng, t))
    perm = rng.permutation(len(chosen))
    return [chosen[i] for i in perm]


@dataclass(frozen=True)
class StreamSpec:
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")


def stream(records: Sequence[FeatureRecord], spec: StreamSpec) -> list[list[FeatureRecord]]:
    """Seeded shuffle, then contiguous batches; the last may run short.

    Concatenating the batches yields an exact permutation of the input.
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(records))
    shuffled = [records[i] for i in perm]
    return [shuffled[i : i + spec.batch_size] for i in range(0, len(shuffled), spec.batch_size)]
