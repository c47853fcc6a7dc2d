"""Dense linear-algebra kernels: pseudoinverse, least squares, PCA, Lasso.

Matrices and vectors are plain float64 numpy arrays (row-major).  All
functions are pure; nothing here keeps state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodlinear.errors import ConfigurationError, ShapeError

Matrix = np.ndarray
Vector = np.ndarray

MAX_LASSO_SWEEPS = 10_000
LASSO_TOL = 1e-8


def _check_finite(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def pseudoinverse(m: Matrix) -> Matrix:
    """Moore-Penrose pseudoinverse with relative singular-value truncation.

    Singular values sigma_i with sigma_i <= rtol * sigma_max are treated
    as zero, rtol = max(rows, cols) * machine epsilon.  Symmetric square
    inputs go through an eigendecomposition instead of a full SVD; the
    Gram matrices this package inverts are small (d x d after PCA) and
    exactly symmetric by construction.
    """
    m = _check_finite(m, "matrix")
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a nonempty 2-d array, got shape {m.shape}")
    rows, cols = m.shape
    rtol = max(rows, cols) * np.finfo(np.float64).eps
    if rows == cols and np.array_equal(m, m.T):
        w, v = np.linalg.eigh(m)
        cutoff = rtol * np.max(np.abs(w)) if w.size else 0.0
        inv = np.where(np.abs(w) <= cutoff, 0.0, np.divide(1.0, w, where=np.abs(w) > cutoff))
        return (v * inv) @ v.T
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = rtol * (s[0] if s.size else 0.0)
    inv = np.where(s <= cutoff, 0.0, np.divide(1.0, s, where=s > cutoff))
    return (vt.T * inv) @ u.T


def least_squares(z: Matrix, s: Vector) -> Vector:
    """Minimum-norm least-squares solution beta = (Z'Z)+ Z' s."""
    z = _check_finite(z, "design")
    s = _check_finite(s, "target")
    if z.ndim != 2:
        raise ShapeError(f"design must be 2-d, got shape {z.shape}")
    if s.ndim != 1 or s.shape[0] != z.shape[0]:
        raise ShapeError(f"target shape {s.shape} does not match design rows {z.shape[0]}")
    if z.shape[0] == 0:
        raise ShapeError("empty design")
    gram = z.T @ z
    gram = (gram + gram.T) / 2.0  # exact symmetry so pseudoinverse takes the eigh path
    return pseudoinverse(gram) @ (z.T @ s)


@dataclass(frozen=True)
class PcaBasis:
    """Fitted principal-component basis.

    components holds orthonormal rows sorted by descending explained
    variance; the largest-magnitude entry of each row is positive so
    refits of the same data reproduce the same basis.
    """

    mean: Vector
    components: Matrix
    explained_variance: Vector

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(x: Matrix, k: int) -> PcaBasis:
    """Fit a k-component PCA basis by eigendecomposition of the covariance."""
    x = _check_finite(x, "data")
    if x.ndim != 2:
        raise ShapeError(f"data must be 2-d, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ConfigurationError(f"k={k} out of range 1..{min(n, d)} for {n}x{d} data")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    cov = (cov + cov.T) / 2.0
    w, v = np.linalg.eigh(cov)  # ascending
    order = np.argsort(w, kind="stable")[::-1][:k]
    comps = v[:, order].T.copy()
    var = np.maximum(w[order], 0.0)
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaBasis(mean=mean, components=comps, explained_variance=var)


def pca_transform(basis: PcaBasis, x: Matrix) -> Matrix:
    """Project rows of x into the basis: (x - mean) @ components'."""
    x = _check_finite(x, "data")
    if x.ndim != 2 or x.shape[1] != basis.input_dim:
        raise ShapeError(f"data shape {x.shape} does not match basis input dim {basis.input_dim}")
    return (x - basis.mean) @ basis.components.T


def pca_inverse_transform(basis: PcaBasis, y: Matrix) -> Matrix:
    """Lift projected coordinates back to the input space."""
    y = _check_finite(y, "coords")
    if y.ndim != 2 or y.shape[1] != basis.output_dim:
        raise ShapeError(f"coords shape {y.shape} does not match basis output dim {basis.output_dim}")
    return y @ basis.components + basis.mean


@dataclass(frozen=True)
class LassoResult:
    coef: Vector
    sweeps: int
    converged: bool
    objectives: Vector  # one entry per completed sweep, nonincreasing


def soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def lasso(
    design: Matrix,
    target: Vector,
    lam: float,
    max_sweeps: int = MAX_LASSO_SWEEPS,
    tol: float = LASSO_TOL,
    init: Vector | None = None,
) -> LassoResult:
    """Solve min_g 0.5*||target - design@g||^2 + lam*||g||_1.

    Cyclic coordinate descent in fixed column order (deterministic).
    Converged once the largest absolute coefficient change within a
    sweep drops to tol or below; otherwise stops after max_sweeps and
    reports converged=False with the best iterate.  init warm-starts
    the iteration (default: all zeros).
    """
    design = _check_finite(design, "design")
    target = _check_finite(target, "target")
    if design.ndim != 2:
        raise ShapeError(f"design must be 2-d, got shape {design.shape}")
    if target.ndim != 1 or target.shape[0] != design.shape[0]:
        raise ShapeError(f"target shape {target.shape} does not match design rows {design.shape[0]}")
    if lam < 0:
        raise ConfigurationError(f"lambda must be nonnegative, got {lam}")

    n, m = design.shape
    col_sq = np.einsum("ij,ij->j", design, design)
    if init is None:
        gamma = np.zeros(m)
        resid = target.copy()
    else:
        gamma = np.array(init, dtype=np.float64)
        if gamma.shape != (m,):
            raise ShapeError(f"init shape {gamma.shape} does not match {m} columns")
        resid = target - design @ gamma
    objectives = []
    converged = False
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        max_delta = 0.0
        for j in range(m):
            if col_sq[j] == 0.0:
                continue  # all-zero column: coefficient stays 0
            old = gamma[j]
            rho = design[:, j] @ resid + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                resid -= design[:, j] * (new - old)
                gamma[j] = new
                max_delta = max(max_delta, abs(new - old))
        objectives.append(0.5 * (resid @ resid) + lam * np.sum(np.abs(gamma)))
        if max_delta <= tol:
            converged = True
            break
    return LassoResult(
        coef=gamma,
        sweeps=sweeps,
        converged=converged,
        objectives=np.asarray(objectives),
    )


def lasso_path(design: Matrix, target: Vector, lam: float) -> LassoResult:
    """Exact Lasso solution via the homotopy (least-angle) path.

    Coordinate descent stalls on rank-deficient designs when the
    penalty is tiny: progress along the design's null space is bounded
    by lam per sweep, so a solution component of size r needs about
    r/lam sweeps.  The path algorithm instead walks the piecewise-linear
    solution path from lambda_max down to lam, reaching the argmin in
    at most a few times min(rows, cols) breakpoints regardless of how
    small lam is.  A short warm-started descent pass afterwards scrubs
    accumulated drift.
    """
    design = _check_finite(design, "design")
    target = _check_finite(target, "target")
    if design.ndim != 2:
        raise ShapeError(f"design must be 2-d, got shape {design.shape}")
    if target.ndim != 1 or target.shape[0] != design.shape[0]:
        raise ShapeError(f"target shape {target.shape} does not match design rows {design.shape[0]}")
    if lam < 0:
        raise ConfigurationError(f"lambda must be nonnegative, got {lam}")

    m = design.shape[1]
    gram = design.T @ design
    gram = (gram + gram.T) / 2.0
    c0 = design.T @ target
    gamma = np.zeros(m)
    lam_cur = float(np.max(np.abs(c0))) if m else 0.0
    if lam_cur <= lam:
        return LassoResult(coef=gamma, sweeps=0, converged=True, objectives=np.zeros(0))

    tiny = 1e-14
    active = [j for j in range(m) if abs(c0[j]) >= lam_cur - 1e-12 * max(1.0, lam_cur)]
    theta = c0.copy()
    completed = False
    steps = 0
    for _ in range(4 * m + 16):
        steps += 1
        idx = np.array(active)
        signs = np.sign(theta[idx])
        sub = gram[np.ix_(idx, idx)]
        d = pseudoinverse(sub) @ signs
        if np.max(np.abs(sub @ d - signs)) > 1e-8:
            break  # active quadratic cannot track the penalty: path stalls
        v = gram[:, idx] @ d

        t_stop = lam_cur - lam
        t_best, event = t_stop, ("stop", -1)
        for j in range(m):
            if j in active:
                continue
            for t in (
                (lam_cur - theta[j]) / (1.0 - v[j]) if 1.0 - v[j] > tiny else np.inf,
                (lam_cur + theta[j]) / (1.0 + v[j]) if 1.0 + v[j] > tiny else np.inf,
            ):
                if tiny < t < t_best - tiny:
                    t_best, event = t, ("add", j)
        for pos, j in enumerate(idx):
            if d[pos] != 0.0:
                t = -gamma[j] / d[pos]
                if tiny < t < t_best - tiny:
                    t_best, event = t, ("drop", int(j))

        gamma[idx] += t_best * d
        lam_cur -= t_best
        theta = c0 - gram @ gamma
        kind, j = event
        if kind == "stop" or lam_cur <= lam + tiny:
            completed = True
            break
        if kind == "add":
            active.append(j)
        else:
            gamma[j] = 0.0
            active.remove(j)

    polish = lasso(design, target, lam, max_sweeps=200, tol=1e-12, init=gamma)
    return LassoResult(
        coef=polish.coef,
        sweeps=steps,
        converged=completed and polish.converged,
        objectives=polish.objectives,
    )
