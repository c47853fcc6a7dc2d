"""End-to-end experiment orchestration: score, calibrate, evaluate.

An ExperimentPlan names a dataset (synthetic family or imported
containers), a grid of scorers, a grid of calibration methods, and a
repeat count.  run() executes every cell deterministically: repeat r
draws its mixed test set with seed base+r while the data pools and any
logit model stay fixed, so methods within a repeat see identical
samples and differ only in calibration.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from oodlinear import calibrate, datasets, io, linalg, metrics, mlp, scorers
from oodlinear.errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class SyntheticSpec:
    """A desk-scale data family: Gaussian in-clusters plus OOD pools.

    In-distribution points sit in n_classes unit-covariance clusters at
    radius `separation` in random directions.  ood_kinds may contain
    "midspace" (clusters in the low-confidence region between the class
    modes, at 0.3x the class radius), "uniform01", or "gaussian_half"
    (noise in the unit box, sigma pre-clip).  Logits come from a seeded
    linear map or a small trained network over the in-clusters;
    logit_noise adds Gaussian noise to the stored logits.
    """

    name: str = "synthetic"
    dim: int = 16
    n_classes: int = 4
    in_count: int = 2500
    out_count: int = 2500
    separation: float = 3.0
    ood_kinds: tuple[str, ...] = ("midspace",)
    noise_sigma: float = 1.0
    logit_source: str = "linear"
    logit_scale: float = 1.0
    logit_noise: float = 0.0

    def __post_init__(self):
        if self.dim < 1 or self.n_classes < 2:
            raise ConfigurationError(f"need dim >= 1 and n_classes >= 2, got {self.dim}/{self.n_classes}")
        if self.in_count < 1 or self.out_count < 1:
            raise ConfigurationError("in_count and out_count must be positive")
        if self.logit_source not in ("linear", "mlp"):
            raise ConfigurationError(f"logit_source must be 'linear' or 'mlp', got {self.logit_source!r}")
        bad = [k for k in self.ood_kinds if k != "midspace" and k not in datasets.NOISE_KINDS]
        if not self.ood_kinds or bad:
            raise ConfigurationError(f"ood_kinds must name 'midspace' or noise kinds, got {self.ood_kinds}")


@dataclass(frozen=True)
class ImportSpec:
    """Pools read from containers: one in-distribution file, tagged OOD files."""

    in_path: str
    out_paths: tuple[tuple[str, str], ...]  # (tag, path)
    name: str | None = None

    @property
    def display_name(self) -> str:
        if self.name:
            return self.name
        return os.path.splitext(os.path.basename(self.in_path))[0]


@dataclass(frozen=True)
class MethodSpec:
    """One calibration method cell: none, dlr, rlr, or online.

    batch_size applies to online only; None streams everything as a
    single batch.
    """

    kind: str
    rlr: calibrate.RlrConfig = field(default_factory=calibrate.RlrConfig)
    batch_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "dlr", "rlr", "online"):
            raise ConfigurationError(f"unknown method kind {self.kind!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")

    @property
    def name(self) -> str:
        if self.kind == "rlr":
            return f"rlr[lam={self.rlr.lam:g},p={self.rlr.percentile:g}]"
        if self.kind == "online":
            b = "all" if self.batch_size is None else str(self.batch_size)
            return f"online[b={b}]"
        return self.kind


def scorer_name(cfg: scorers.ScorerConfig) -> str:
    label = f"{cfg.kind}[T={cfg.temperature:g}"
    if cfg.kind == "odin":
        label += f",eps={cfg.epsilon:g}"
    return label + "]"


@dataclass(frozen=True)
class ExperimentPlan:
    dataset: SyntheticSpec | ImportSpec
    scorers: tuple[scorers.ScorerConfig, ...]
    methods: tuple[MethodSpec, ...]
    prep: calibrate.PrepSpec = field(default_factory=calibrate.PrepSpec)
    in_rate: float = 0.5
    total: int | None = None  # None = use the full pools, no subsampling
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.scorers or not self.methods:
            raise ConfigurationError("plan needs at least one scorer and one method")
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be at least 1, got {self.repeats}")
        if not 0.0 < self.in_rate < 1.0:
            raise ConfigurationError(f"in_rate must be in (0, 1), got {self.in_rate}")


@dataclass(frozen=True)
class CellResult:
    in_dataset: str
    ood_dataset: str
    scorer: str
    method: str
    repeat: int
    report: metrics.EvalReport
    wall_time: float
    exact_fit: bool  # sample count at or below the processed feature dim


@dataclass(frozen=True)
class CellAggregate:
    in_dataset: str
    ood_dataset: str
    scorer: str
    method: str
    repeats: int
    fpr95_mean: float
    fpr95_std: float
    auroc_mean: float
    auroc_std: float
    aupr_mean: float
    aupr_std: float


@dataclass(frozen=True)
class RunResult:
    cells: tuple[CellResult, ...]
    aggregates: tuple[CellAggregate, ...]


def aggregate_cells(cells) -> tuple[CellAggregate, ...]:
    """Mean and population stdev per (dataset, scorer, method) key."""
    groups: dict[tuple[str, str, str, str], list[metrics.EvalReport]] = {}
    for c in cells:
        groups.setdefault((c.in_dataset, c.ood_dataset, c.scorer, c.method), []).append(c.report)
    out = []
    for key, reports in groups.items():
        fpr = np.array([r.fpr95 for r in reports])
        roc = np.array([r.auroc for r in reports])
        pr = np.array([r.aupr for r in reports])
        out.append(
            CellAggregate(
                *key,
                repeats=len(reports),
                fpr95_mean=float(fpr.mean()),
                fpr95_std=float(fpr.std()),
                auroc_mean=float(roc.mean()),
                auroc_std=float(roc.std()),
                aupr_mean=float(pr.mean()),
                aupr_std=float(pr.std()),
            )
        )
    return tuple(out)


class _Pools:
    """Materialized data pools plus the logit model, fixed for a plan."""

    def __init__(self, in_pool, out_pools, model, in_name, ood_name):
        self.in_pool = in_pool
        self.out_pools = out_pools
        self.model = model
        self.in_name = in_name
        self.ood_name = ood_name


def _attach_logits(records, logits):
    return [replace(r, logits=logits[i]) for i, r in enumerate(records)]


def _build_synthetic(spec: SyntheticSpec, seed: int) -> _Pools:
    sub = np.random.SeedSequence(seed).generate_state(8)
    rng = np.random.default_rng(int(sub[0]))

    directions = rng.normal(size=(spec.n_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    counts = [spec.in_count // spec.n_classes] * spec.n_classes
    for i in range(spec.in_count - sum(counts)):
        counts[i] += 1
    eye = np.eye(spec.dim)
    in_clusters = [
        datasets.ClusterSpec(spec.separation * directions[c], eye, counts[c], "in", "clusters")
        for c in range(spec.n_classes)
    ]
    in_records = datasets.gen_gaussian_clusters(in_clusters, seed=int(sub[1]))
    class_labels = np.repeat(np.arange(spec.n_classes), counts)

    out_pools: dict[str, list[datasets.FeatureRecord]] = {}
    for k, kind in enumerate(spec.ood_kinds):
        if kind == "midspace":
            mid = rng.normal(size=(spec.n_classes, spec.dim))
            mid /= np.linalg.norm(mid, axis=1, keepdims=True)
            per = [spec.out_count // spec.n_classes] * spec.n_classes
            for i in range(spec.out_count - sum(per)):
                per[i] += 1
            clusters = [
                datasets.ClusterSpec(0.3 * spec.separation * mid[c], eye, per[c], "out", "midspace")
                for c in range(spec.n_classes)
            ]
            out_pools[kind] = datasets.gen_gaussian_clusters(clusters, seed=int(sub[2]) + k)
        else:
            out_pools[kind] = datasets.gen_noise_ood(
                kind, spec.dim, spec.out_count, seed=int(sub[2]) + k, sigma=spec.noise_sigma
            )

    if spec.logit_source == "linear":
        w = rng.normal(size=(spec.dim, spec.n_classes)) * (spec.logit_scale / np.sqrt(spec.dim))
        model = mlp.Mlp([spec.dim, spec.n_classes], [w], [np.zeros(spec.n_classes)])
    else:
        model = mlp.init_mlp([spec.dim, 32, spec.n_classes], seed=int(sub[3]))
        cfg = mlp.TrainConfig(learning_rate=0.05, epochs=30, batch_size=64, seed=int(sub[4]))
        mlp.train(model, datasets.features_of(in_records), class_labels, cfg)

    noise_rng = np.random.default_rng(int(sub[5]))

    def with_logits(records):
        feats = datasets.features_of(records)
        logits = model.forward(feats)
        if spec.logit_noise > 0:
            logits = logits + noise_rng.normal(0.0, spec.logit_noise, size=logits.shape)
        return _attach_logits(records, logits)

    in_records = with_logits(in_records)
    out_pools = {tag: with_logits(pool) for tag, pool in out_pools.items()}
    return _Pools(in_records, out_pools, model, spec.name, "+".join(spec.ood_kinds))


def _build_import(spec: ImportSpec) -> _Pools:
    in_records = [replace(r, origin="in") for r in io.sections_to_records(io.read_container(spec.in_path))]
    out_pools = {}
    for tag, path in spec.out_paths:
        loaded = io.sections_to_records(io.read_container(path))
        out_pools[tag] = [replace(r, origin="out", source_tag=tag) for r in loaded]
    ood_name = "+".join(tag for tag, _ in spec.out_paths) if spec.out_paths else "none"
    return _Pools(in_records, out_pools, None, spec.display_name, ood_name)


def build_pools(plan: ExperimentPlan) -> _Pools:
    if isinstance(plan.dataset, SyntheticSpec):
        return _build_synthetic(plan.dataset, plan.seed)
    return _build_import(plan.dataset)


def draw_mixed_set(pools: _Pools, plan: ExperimentPlan, rep_seed: int):
    """The mixed test set of one repeat; reseeds the sampling only."""
    if plan.total is None:
        combined = list(pools.in_pool)
        for tag in sorted(pools.out_pools):
            combined.extend(pools.out_pools[tag])
        perm = np.random.default_rng(rep_seed).permutation(len(combined))
        return [combined[i] for i in perm]
    spec = datasets.MixSpec(in_rate=plan.in_rate, total=plan.total, seed=rep_seed)
    return datasets.mix(pools.in_pool, pools.out_pools, spec)


def apply_method(
    method: MethodSpec,
    features: np.ndarray,
    base_scores: np.ndarray,
    prep: calibrate.PrepSpec,
    stream_seed: int,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Calibrated scores for one cell.

    Returns (scores, index order relative to the input, exact-fit flag).
    Batch methods keep the input order; the online method returns
    scores in stream order together with the permutation that produced
    it.  The preprocessor is always fitted on the full feature matrix
    so that batch and online cells share one representation.
    """
    n = features.shape[0]
    identity = np.arange(n)
    if method.kind == "none":
        return base_scores, identity, False
    fitted = calibrate.preprocess_fit(features, prep)
    z = fitted.transform(features)
    exact_fit = n <= z.shape[1]
    if method.kind == "dlr":
        model = calibrate.fit_dlr(features, base_scores, fitted)
        return calibrate.predict(model, features), identity, exact_fit
    if method.kind == "rlr":
        model, _ = calibrate.fit_rlr(features, base_scores, fitted, method.rlr)
        return calibrate.predict(model, features), identity, exact_fit
    # online: seeded shuffle, contiguous batches, per-batch refit
    order = np.random.default_rng(stream_seed).permutation(n)
    b = n if method.batch_size is None else method.batch_size
    state = calibrate.online_init(z.shape[1])
    chunks = []
    for start in range(0, n, b):
        idx = order[start : start + b]
        state, out = calibrate.online_update(state, z[idx], base_scores[idx])
        chunks.append(out)
    return np.concatenate(chunks), order, exact_fit


def run(plan: ExperimentPlan) -> RunResult:
    """Execute every (scorer, method, repeat) cell of the plan."""
    pools = build_pools(plan)
    cells = []
    for rep in range(plan.repeats):
        rep_seed = plan.seed + rep
        records = draw_mixed_set(pools, plan, rep_seed)
        features = datasets.features_of(records)
        labels = datasets.labels_of(records)
        for s_cfg in plan.scorers:
            s_name = scorer_name(s_cfg)
            try:
                base = scorers.score_batch(records, s_cfg, pools.model)
            except ConfigurationError as exc:
                raise ConfigurationError(
                    f"cell ({pools.in_name}, {pools.ood_name}, {s_name}): {exc}"
                ) from exc
            for method in plan.methods:
                started = time.perf_counter()
                values, order, exact_fit = apply_method(method, features, base, plan.prep, rep_seed)
                report = metrics.evaluate(values, labels[order])
                cells.append(
                    CellResult(
                        in_dataset=pools.in_name,
                        ood_dataset=pools.ood_name,
                        scorer=s_name,
                        method=method.name,
                        repeat=rep,
                        report=report,
                        wall_time=time.perf_counter() - started,
                        exact_fit=exact_fit,
                    )
                )
    return RunResult(cells=tuple(cells), aggregates=aggregate_cells(cells))


@dataclass(frozen=True)
class LinearityReport:
    """Plot-ready linear-separability diagnostic.

    coords are 2-D PCA coordinates; plane holds the fitted coefficients
    over [coord1, coord2, 1]; r_squared is clamped to [0, 1]; probe
    accuracy is the best single-threshold accuracy on the calibrated
    1-D output (None when labels are absent or single-class).
    """

    coords: np.ndarray
    plane: np.ndarray
    r_squared: float
    probe_accuracy: float | None
    calibrated: np.ndarray
    labels: np.ndarray | None

    def table_text(self) -> str:
        """TSV with one row per sample: coordinates, score, label."""
        lines = ["x\ty\tcalibrated\tlabel"]
        for i in range(self.coords.shape[0]):
            label = "" if self.labels is None else str(int(self.labels[i]))
            lines.append(
                f"{self.coords[i, 0]:.6f}\t{self.coords[i, 1]:.6f}\t{self.calibrated[i]:.6f}\t{label}"
            )
        return "\n".join(lines) + "\n"


def best_threshold_accuracy(values: np.ndarray, labels: np.ndarray) -> float:
    """Best 0/1 accuracy of any threshold on 1-D values, both orientations."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    is_in = (labels[order] == 0).astype(np.int64)
    n = values.size
    n_in = int(is_in.sum())
    n_out = n - n_in
    cum_in = np.concatenate([[0], np.cumsum(is_in)])  # in-count strictly below cut i
    cum_out = np.concatenate([[0], np.cumsum(1 - is_in)])
    best = 0.0
    for i in range(n + 1):
        if 0 < i < n and sorted_vals[i] == sorted_vals[i - 1]:
            continue  # not a valid cut: would split a tie group
        acc = ((n_in - cum_in[i]) + cum_out[i]) / n  # predict "in" at and above the cut
        best = max(best, acc, 1.0 - acc)
    return best


def diagnose_linearity(
    features: np.ndarray,
    scores: np.ndarray,
    labels: np.ndarray | None = None,
) -> LinearityReport:
    """How linear is score-vs-feature structure, on a 2-D PCA view?

    Fits the direct linear calibration on the two leading principal
    coordinates (plus bias) and reports the fitted plane coefficients,
    the R^2 of that fit, and a linear-probe accuracy when labels with
    both classes are supplied.
    """
    x = np.asarray(features, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ShapeError(f"need at least 3 samples of 2-d features, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError(f"need at least 2 feature dimensions, got {x.shape[1]}")
    basis = linalg.pca_fit(x, 2)
    coords = linalg.pca_transform(basis, x)
    model = calibrate.fit_dlr(coords, s, calibrate.PrepSpec(add_bias=True))
    calibrated = calibrate.predict(model, coords)
    ss_res = float(np.sum((calibrated - s) ** 2))
    ss_tot = float(np.sum((s - s.mean()) ** 2))
    if ss_tot <= 1e-30:
        r2 = 1.0 if ss_res <= 1e-20 else 0.0  # constant target: fit either nails it or cannot
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    accuracy = None
    if labels is not None:
        labels = np.asarray(labels)
        if np.unique(labels).size < 2:
            warnings.warn("single-class labels: separability omitted", stacklevel=2)
        else:
            accuracy = best_threshold_accuracy(calibrated, labels)
    return LinearityReport(
        coords=coords,
        plane=model.beta,
        r_squared=r2,
        probe_accuracy=accuracy,
        calibrated=calibrated,
        labels=None if labels is None else labels,
    )


def in_rate_grid() -> list[float]:
    """The 5% .. 95% grid at 5% spacing (19 rates)."""
    return [i / 100.0 for i in range(5, 100, 5)]


def sweep_in_rate(plan: ExperimentPlan, rates=None) -> list[tuple[float, RunResult]]:
    """run() once per in-rate, everything else held fixed."""
    rates = in_rate_grid() if rates is None else list(rates)
    return [(r, run(replace(plan, in_rate=r))) for r in rates]


def default_repeat_rule(count: int) -> int:
    """More repeats for smaller samples: ceil(1e5/count), capped at 1e4."""
    return min(10_000, math.ceil(100_000 / count))


def sweep_sample_count(plan: ExperimentPlan, counts, repeat_rule=None) -> list[tuple[int, RunResult]]:
    """run() once per total sample count, reweighting repeats per count.

    Cells carry exact_fit=True whenever the count is at or below the
    processed feature dimension (where the fit interpolates and
    calibration cannot revise the scores).
    """
    rule = default_repeat_rule if repeat_rule is None else repeat_rule
    out = []
    for count in counts:
        if count < 2:
            raise ConfigurationError(f"sample count must be at least 2, got {count}")
        out.append((count, run(replace(plan, total=count, repeats=rule(count)))))
    return out


def sweep_batch_sizes(plan: ExperimentPlan, batch_sizes) -> list[tuple[str, RunResult]]:
    """run() once per online batch size; None means one full batch."""
    out = []
    for b in batch_sizes:
        method = MethodSpec(kind="online", batch_size=b)
        label = "all" if b is None else str(b)
        out.append((label, run(replace(plan, methods=(method,)))))
    return out
