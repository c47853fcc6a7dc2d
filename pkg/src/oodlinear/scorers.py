"""Base OOD scores from logits: max softmax, energy, KL-to-uniform, ODIN.

Every score is oriented the same way: higher = more in-distribution.
Scorers accept a single logit vector or a batch with classes on the
last axis; a 1-d input yields a plain float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodlinear.errors import ConfigurationError, ShapeError

SCORER_KINDS = ("msp", "energy", "kl", "odin")


def default_temperature(kind: str) -> float:
    # odin conventionally runs at T = 1000, the others at T = 1
    return 1000.0 if kind == "odin" else 1.0


@dataclass(frozen=True)
class ScorerConfig:
    """Which score to compute and at what temperature.

    temperature = None picks the per-kind default.  epsilon is the
    input-perturbation magnitude and only meaningful for odin.
    """

    kind: str
    temperature: float | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ConfigurationError(f"unknown scorer kind {self.kind!r}, expected one of {SCORER_KINDS}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", default_temperature(self.kind))
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.epsilon > 0 and self.kind != "odin":
            raise ConfigurationError(f"epsilon applies to the odin scorer only, not {self.kind!r}")

    @property
    def name(self) -> str:
        return self.kind


def _check_logits(logits) -> np.ndarray:
    a = np.asarray(logits, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] < 2:
        raise ShapeError(f"need at least 2 classes on the last axis, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("logits contain non-finite entries")
    return a


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stabilized log-sum-exp along an axis."""
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _maybe_scalar(values: np.ndarray, was_1d: bool):
    return float(values) if was_1d else values


def score_msp(logits, temperature: float = 1.0):
    """Maximum softmax probability at temperature T; range (1/C, 1]."""
    a = _check_logits(logits)
    p = softmax(a, temperature)
    return _maybe_scalar(np.max(p, axis=-1), a.ndim == 1)


def score_energy(logits, temperature: float = 1.0):
    """Energy score T*logsumexp(f/T); shift-equivariant in the logits."""
    a = _check_logits(logits)
    return _maybe_scalar(temperature * logsumexp(a / temperature), a.ndim == 1)


def score_kl(logits, temperature: float = 1.0):
    """KL divergence of the softmax from uniform, constant term dropped.

    Equals logsumexp(f/T) - mean(f)/T - log C; nonnegative, and zero
    exactly when the softmax is uniform.
    """
    a = _check_logits(logits)
    c = a.shape[-1]
    out = logsumexp(a / temperature) - np.mean(a, axis=-1) / temperature - np.log(c)
    return _maybe_scalar(out, a.ndim == 1)


def score_odin(x, model, temperature: float = 1000.0, epsilon: float = 0.0) -> float:
    """MSP on an input nudged toward higher softmax confidence.

    The perturbation follows x~ = x - eps*sign(grad of -log S_MSP(x));
    no clipping is applied because inputs here are feature-space
    vectors, not pixel arrays.  eps = 0 reduces exactly to MSP on the
    unmodified input.
    """
    x = np.asarray(x, dtype=np.float64)
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be nonnegative, got {epsilon}")
    if epsilon == 0.0:
        return score_msp(model.forward(x), temperature)
    if not hasattr(model, "input_gradient"):
        raise NotImplementedError("odin with epsilon > 0 needs a model exposing input_gradient")
    grad = model.input_gradient(x, temperature=temperature)
    perturbed = x - epsilon * np.sign(grad)
    return score_msp(model.forward(perturbed), temperature)


def _stacked_logits(records, attr: str) -> np.ndarray:
    rows = []
    for i, rec in enumerate(records):
        value = getattr(rec, attr)
        if value is None:
            raise ConfigurationError(f"record {i} has no {attr}; cannot apply a logit-based scorer")
        rows.append(np.asarray(value, dtype=np.float64))
    widths = {r.shape[-1] for r in rows}
    if len(widths) > 1:
        raise ShapeError(f"records disagree on class count: {sorted(widths)}")
    return np.stack(rows)


def score_batch(records, cfg: ScorerConfig, model=None) -> np.ndarray:
    """Apply the configured scorer to every record, order-preserving.

    msp/energy/kl read stored logits.  odin with eps = 0 is MSP on the
    stored logits.  odin with eps > 0 uses stored perturbed logits when
    every record carries them (imported data), otherwise perturbs each
    record's feature through the supplied model.
    """
    records = list(records)
    if not records:
        return np.zeros(0)
    t = cfg.temperature
    if cfg.kind in ("msp", "energy", "kl"):
        logits = _stacked_logits(records, "logits")
        fn = {"msp": score_msp, "energy": score_energy, "kl": score_kl}[cfg.kind]
        return fn(logits, t)
    # odin
    if cfg.epsilon == 0.0:
        return score_msp(_stacked_logits(records, "logits"), t)
    if all(getattr(r, "logits_perturbed", None) is not None for r in records):
        return score_msp(_stacked_logits(records, "logits_perturbed"), t)
    if model is None:
        raise ConfigurationError(
            "odin with epsilon > 0 needs either a model or stored perturbed logits on every record"
        )
    return np.array([score_odin(r.feature, model, t, cfg.epsilon) for r in records])
