"""Test-time linear rectification of OOD scores.

Three fitting procedures over the same linear model s = z'beta:

- fit_dlr: direct least squares of base scores on features, fitted
  transductively on the mixed test set itself.
- fit_rlr: robust variant; per-sample residual magnitudes are estimated
  by a Lasso on the column-space-annihilated system, the worst samples
  are dropped, and beta is refit on the reliable subset.
- online_init / online_update: streaming variant accumulating the Gram
  matrix and moment vector batch by batch with a per-batch refit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from oodlinear import linalg
from oodlinear.errors import ConfigurationError, InsufficientDataError, ShapeError
from oodlinear.linalg import Matrix, PcaBasis, Vector


@dataclass(frozen=True)
class PrepSpec:
    """Feature preprocessing to fit: unit-norm rows, PCA, bias column.

    The bias column is on by default: base scores have nonzero mean
    (energy sits near log C at uniform logits), and a pure linear map
    through the origin would have to spend a feature direction on that
    offset.
    """

    unit_normalize: bool = False
    pca_dim: int | None = None
    add_bias: bool = True

    def __post_init__(self):
        if self.pca_dim is not None and self.pca_dim < 1:
            raise ConfigurationError(f"pca_dim must be at least 1, got {self.pca_dim}")


@dataclass(frozen=True)
class Preprocessor:
    """Fitted, deterministic feature transform: normalize -> project -> bias."""

    unit_normalize: bool
    pca: PcaBasis | None
    add_bias: bool
    input_dim: int

    @property
    def output_dim(self) -> int:
        d = self.pca.output_dim if self.pca is not None else self.input_dim
        return d + (1 if self.add_bias else 0)

    def transform(self, features: Matrix) -> Matrix:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"features shape {x.shape} do not match preprocessor input dim {self.input_dim}")
        if self.unit_normalize:
            x = unit_normalize_rows(x)
        if self.pca is not None:
            x = linalg.pca_transform(self.pca, x)
        if self.add_bias:
            x = np.hstack([x, np.ones((x.shape[0], 1))])
        return x


def unit_normalize_rows(x: Matrix) -> Matrix:
    """Scale each row to unit Euclidean norm; zero rows pass through."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms == 0.0
    if np.any(zero):
        warnings.warn(f"{int(np.sum(zero))} zero-norm rows left unnormalized", stacklevel=2)
    return x / np.where(zero, 1.0, norms)  # zero rows divide by 1, i.e. pass through


def preprocess_fit(features: Matrix, spec: PrepSpec) -> Preprocessor:
    """Fit the preprocessing on a feature matrix (PCA basis included)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"need a nonempty 2-d feature matrix, got shape {x.shape}")
    d = x.shape[1]
    basis = None
    if spec.pca_dim is not None:
        if spec.pca_dim >= d:
            raise ConfigurationError(f"pca_dim {spec.pca_dim} must be below the feature dim {d}")
        fit_input = unit_normalize_rows(x) if spec.unit_normalize else x
        basis = linalg.pca_fit(fit_input, spec.pca_dim)
    return Preprocessor(
        unit_normalize=spec.unit_normalize,
        pca=basis,
        add_bias=spec.add_bias,
        input_dim=d,
    )


def _resolve_prep(features: Matrix, prep) -> Preprocessor:
    if prep is None:
        prep = PrepSpec()
    if isinstance(prep, PrepSpec):
        return preprocess_fit(features, prep)
    if isinstance(prep, Preprocessor):
        return prep
    raise ConfigurationError(f"prep must be a PrepSpec or fitted Preprocessor, got {type(prep).__name__}")


@dataclass(frozen=True)
class RegressionModel:
    """Linear score model: calibrated score = preprocessor(z) @ beta.

    residual_norm and gram_rank describe the fit set; gram_rank below
    the processed dimension flags a degenerate (minimum-norm) solve.
    """

    beta: Vector
    preprocessor: Preprocessor
    residual_norm: float
    gram_rank: int


def _solve(z: Matrix, s: Vector) -> tuple[Vector, float, int]:
    beta = linalg.least_squares(z, s)
    resid = z @ beta - s
    gram = z.T @ z
    gram = (gram + gram.T) / 2.0
    w = np.linalg.eigvalsh(gram)
    cutoff = max(gram.shape) * np.finfo(np.float64).eps * (np.max(np.abs(w)) if w.size else 0.0)
    rank = int(np.sum(np.abs(w) > cutoff))
    return beta, float(np.linalg.norm(resid)), rank


def fit_dlr(features: Matrix, scores: Vector, prep=None) -> RegressionModel:
    """Least-squares fit of base scores onto (preprocessed) features.

    prep may be a PrepSpec (fitted here, on these features) or an
    already fitted Preprocessor; None means the default spec.  Uses the
    minimum-norm solution, so rank-deficient designs still solve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    p = _resolve_prep(features, prep)
    z = p.transform(features)
    if z.shape[0] != scores.shape[0]:
        raise ShapeError(f"{z.shape[0]} feature rows vs {scores.shape[0]} scores")
    beta, resid_norm, rank = _solve(z, scores)
    return RegressionModel(beta=beta, preprocessor=p, residual_norm=resid_norm, gram_rank=rank)


def predict(model: RegressionModel, features: Matrix) -> Vector:
    """Calibrated scores for new features under an existing fit."""
    return model.preprocessor.transform(features) @ model.beta


@dataclass(frozen=True)
class RlrConfig:
    lam: float = 1e-5
    percentile: float = 80.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.percentile <= 100.0:
            raise ConfigurationError(f"percentile must be in (0, 100], got {self.percentile}")


@dataclass(frozen=True)
class ResidualReport:
    """Per-sample residual magnitudes and the kept subset.

    selected holds round-half-up(percentile% of n) indices (at least 1)
    with the smallest |gamma|, ties broken by ascending index; sorted
    ascending.  lasso_converged=False marks a fit that hit the sweep
    cap, with the best iterate used anyway.
    """

    gamma: Vector
    selected: np.ndarray
    lasso_converged: bool


def residual_projector(z: Matrix) -> Matrix:
    """Projector onto the orthogonal complement of Z's column space.

    I - Z (Z'Z)+ Z'; symmetric and idempotent, annihilates Z exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    gram = z.T @ z
    gram = (gram + gram.T) / 2.0
    proj = np.eye(z.shape[0]) - z @ linalg.pseudoinverse(gram) @ z.T
    return (proj + proj.T) / 2.0


def subset_size(n: int, percentile: float) -> int:
    # round half up, never below one sample
    return max(1, int(np.floor(percentile / 100.0 * n + 0.5)))


def fit_rlr(
    features: Matrix,
    scores: Vector,
    prep=None,
    cfg: RlrConfig = RlrConfig(),
) -> tuple[RegressionModel, ResidualReport]:
    """Robust fit: estimate per-sample corruption, drop the worst, refit.

    The residual variables gamma solve a Lasso on the annihilated
    system min 0.5*||P(s - gamma)||^2 + lam*||gamma||_1 with
    P = residual_projector(Z); large |gamma| marks samples whose score
    is inconsistent with any linear model over the features.
    """
    scores = np.asarray(scores, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != scores.shape[0]:
        raise ShapeError(f"features shape {x.shape} vs {scores.shape[0]} scores")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"robust fit needs at least 2 samples, got {n}")
    p = _resolve_prep(x, prep)
    z = p.transform(x)
    proj = residual_projector(z)
    result = linalg.lasso_path(proj, proj @ scores, cfg.lam)
    keep = subset_size(n, cfg.percentile)
    order = np.argsort(np.abs(result.coef), kind="stable")
    selected = np.sort(order[:keep])
    beta, resid_norm, rank = _solve(z[selected], scores[selected])
    model = RegressionModel(beta=beta, preprocessor=p, residual_norm=resid_norm, gram_rank=rank)
    return model, ResidualReport(gamma=result.coef, selected=selected, lasso_converged=result.converged)


@dataclass(frozen=True)
class OnlineState:
    """Streaming accumulators: a = sum Z'Z, b = sum Z's over batches seen."""

    a: Matrix
    b: Vector
    samples_seen: int

    @property
    def dim(self) -> int:
        return self.b.shape[0]


def online_init(dim: int) -> OnlineState:
    if dim < 1:
        raise ConfigurationError(f"dim must be at least 1, got {dim}")
    return OnlineState(a=np.zeros((dim, dim)), b=np.zeros(dim), samples_seen=0)


def online_coefficients(state: OnlineState) -> Vector:
    """Current minimum-norm solution a+ b; all zeros before any update."""
    return linalg.pseudoinverse(state.a) @ state.b


def online_update(state: OnlineState, features: Matrix, scores: Vector) -> tuple[OnlineState, Vector]:
    """Fold one batch of processed features into the fit.

    Returns the new state and the calibrated scores of this batch under
    the refreshed coefficients.  features must already be preprocessed
    to the state's dimension.  An empty batch is a no-op.
    """
    z = np.asarray(features, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != state.dim:
        raise ShapeError(f"batch shape {z.shape} does not match state dim {state.dim}")
    if s.shape != (z.shape[0],):
        raise ShapeError(f"scores shape {s.shape} does not match batch rows {z.shape[0]}")
    if z.shape[0] == 0:
        return state, np.zeros(0)
    a = state.a + z.T @ z
    a = (a + a.T) / 2.0
    new = OnlineState(a=a, b=state.b + z.T @ s, samples_seen=state.samples_seen + z.shape[0])
    beta = online_coefficients(new)
    return new, z @ beta
