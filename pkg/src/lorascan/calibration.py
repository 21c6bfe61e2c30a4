"""Benign reference bank, z-score/tanh normalization, fusion weights, threshold.

Scoring is a convex combination of per-metric normalized scores
``n_m = (1 + tanh(z_m / 2)) / 2``. The weights come from a logistic
regression on z-scores: the absolute coefficients, rescaled to sum to one.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import (
    EmptyClass,
    InsufficientBank,
    NonConvergenceWarning,
    DegenerateBankWarning,
    SingleClassInput,
    VersionError,
)
from .spectral import METRIC_ORDER, MetricVector

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
STD_FLOOR = 1e-12
DEFAULT_SIGNS = (1, 1, 1, -1, 1)  # entropy inverted: low entropy is anomalous

BENIGN, POISONED = 0, 1
_LABELS = {"benign": BENIGN, "poisoned": POISONED, 0: BENIGN, 1: POISONED}


def _check_version(doc: dict, what: str) -> None:
    version = str(doc.get("version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise VersionError(f"unsupported {what} file version {version!r} (expected {FORMAT_VERSION})")


def _as_metric_array(m: MetricVector | Sequence[float]) -> np.ndarray:
    if isinstance(m, MetricVector):
        return m.as_array()
    return np.asarray(m, dtype=np.float64)


def signs_with_entropy(entropy_sign: int) -> tuple[int, ...]:
    if entropy_sign not in (1, -1):
        raise ValueError(f"entropy sign must be +1 or -1, got {entropy_sign}")
    signs = list(DEFAULT_SIGNS)
    signs[METRIC_ORDER.index("entropy")] = entropy_sign
    return tuple(signs)


# --- reference bank ----------------------------------------------------------


@dataclass
class ReferenceBank:
    mean: np.ndarray
    std: np.ndarray
    count: int
    metric_order: tuple[str, ...] = METRIC_ORDER

    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "metric_order": list(self.metric_order),
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "count": int(self.count),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReferenceBank":
        doc = json.loads(text)
        _check_version(doc, "bank")
        order = tuple(doc["metric_order"])
        if order != METRIC_ORDER:
            raise VersionError(f"bank metric order {order} differs from {METRIC_ORDER}")
        return cls(
            mean=np.array(doc["mean"], dtype=np.float64),
            std=np.array(doc["std"], dtype=np.float64),
            count=int(doc["count"]),
            metric_order=order,
        )


def fit_reference_bank(metrics: Sequence[MetricVector | Sequence[float]]) -> ReferenceBank:
    """Per-metric sample mean and sample std (n - 1) over benign adapters."""
    if len(metrics) < 2:
        raise InsufficientBank(f"reference bank needs at least 2 adapters, got {len(metrics)}")
    X = np.stack([_as_metric_array(m) for m in metrics])
    if not np.all(np.isfinite(X)):
        raise ValueError("reference bank metrics must be finite")
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    low = std < STD_FLOOR
    if low.any():
        names = [m for m, flag in zip(METRIC_ORDER, low) if flag]
        warnings.warn(
            f"degenerate reference bank: std of {names} floored at {STD_FLOOR}",
            DegenerateBankWarning,
            stacklevel=2,
        )
        std = np.where(low, STD_FLOOR, std)
    return ReferenceBank(mean=mean, std=std, count=len(metrics))


def _sigmoid(s: np.ndarray) -> np.ndarray:
    # equals (1 + tanh(s/2)) / 2 but keeps relative precision in the lower tail
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def normalize_metrics(
    m: MetricVector | Sequence[float],
    bank: ReferenceBank,
    signs: Sequence[int] = DEFAULT_SIGNS,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, n)``: signed z-scores and their tanh squashing into (0, 1)."""
    x = _as_metric_array(m)
    z = np.asarray(signs, dtype=np.float64) * (x - bank.mean) / bank.std
    return z, _sigmoid(z)


# --- logistic fusion ---------------------------------------------------------


@dataclass
class TrainingConfig:
    learning_rate: float = 0.1
    max_iter: int = 5000
    l2: float = 1e-3
    tol: float = 1e-8




def logistic_loss(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean log loss plus ``l2 / 2 * |w|^2`` (bias not penalized)."""
    s = X @ w + b
    return float(np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * l2 * np.dot(w, w))


def logistic_gradient(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple[np.ndarray, float]:
    resid = _sigmoid(X @ w + b) - y
    return X.T @ resid / len(y) + l2 * w, float(resid.mean())


@dataclass
class LogisticFit:
    coef: np.ndarray
    bias: float
    n_iter: int
    converged: bool
    grad_norm: float


def fit_logistic(X: np.ndarray, y: np.ndarray, config: TrainingConfig = TrainingConfig()) -> LogisticFit:
    """Full-batch gradient descent from zero; stops when the gradient inf-norm < tol."""
    w = np.zeros(X.shape[1])
    b = 0.0
    gnorm = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        gw, gb = logistic_gradient(w, b, X, y, config.l2)
        gnorm = max(float(np.max(np.abs(gw))), abs(gb))
        if gnorm < config.tol:
            return LogisticFit(w, b, it - 1, True, gnorm)
        w = w - config.learning_rate * gw
        b = b - config.learning_rate * gb
    gw, gb = logistic_gradient(w, b, X, y, config.l2)
    gnorm = max(float(np.max(np.abs(gw))), abs(gb))
    return LogisticFit(w, b, it, gnorm < config.tol, gnorm)


class ThresholdRule(str, enum.Enum):
    SEPARATION_MARGIN = "SeparationMargin"
    YOUDEN_J = "YoudenJ"


@dataclass
class FusionModel:
    weights: np.ndarray
    bias: float
    signs: tuple[int, ...] = DEFAULT_SIGNS
    threshold: float = 0.5
    threshold_rule: ThresholdRule | None = None
    training_config: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "weights": [float(x) for x in self.weights],
            "bias": float(self.bias),
            "signs": [int(s) for s in self.signs],
            "threshold": float(self.threshold),
            "threshold_rule": self.threshold_rule.value if self.threshold_rule else None,
            "training_config": self.training_config,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FusionModel":
        doc = json.loads(text)
        _check_version(doc, "model")
        weights = np.array(doc["weights"], dtype=np.float64)
        if weights.shape != (len(METRIC_ORDER),) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise ValueError("model weights must be 5 nonnegative values summing to 1")
        rule = doc.get("threshold_rule")
        return cls(
            weights=weights,
            bias=float(doc["bias"]),
            signs=tuple(int(s) for s in doc["signs"]),
            threshold=float(doc["threshold"]),
            threshold_rule=ThresholdRule(rule) if rule else None,
            training_config=dict(doc.get("training_config") or {}),
        )


def encode_labels(labels: Sequence) -> np.ndarray:
    try:
        return np.array([_LABELS[lab] for lab in labels], dtype=np.float64)
    except KeyError as exc:
        raise ValueError(f"unknown label {exc.args[0]!r}; use 'benign'/'poisoned' or 0/1") from None


def train_fusion(
    features: Sequence[Sequence[float]],
    labels: Sequence,
    config: TrainingConfig = TrainingConfig(),
    signs: Sequence[int] = DEFAULT_SIGNS,
) -> FusionModel:
    """Fit logistic regression on z-score vectors and derive unit-sum weights.

    The returned model carries a placeholder threshold; set it with
    :func:`calibrate_threshold`. Failure to reach ``config.tol`` is reported
    with a :class:`NonConvergenceWarning` and ``converged: false`` in the
    model's training config; the model is still usable.
    """
    X = np.asarray(features, dtype=np.float64)
    y = encode_labels(labels)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"features shape {X.shape} does not match {y.size} labels")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    if np.unique(y).size < 2:
        raise SingleClassInput("training data must contain both benign and poisoned adapters")

    fit = fit_logistic(X, y, config)
    if not fit.converged:
        warnings.warn(
            f"logistic regression stopped after {fit.n_iter} iterations with gradient "
            f"inf-norm {fit.grad_norm:.3g} > tol {config.tol:g}",
            NonConvergenceWarning,
            stacklevel=2,
        )
    mag = np.abs(fit.coef)
    if mag.sum() > 0:
        weights = mag / mag.sum()
    else:
        logger.warning("all logistic coefficients are zero; falling back to uniform weights")
        weights = np.full(X.shape[1], 1.0 / X.shape[1])
    details = asdict(config)
    details.update(
        coefficients=[float(c) for c in fit.coef],
        iterations=fit.n_iter,
        converged=bool(fit.converged),
        grad_inf_norm=float(fit.grad_norm),
        n_train=int(y.size),
        n_poisoned=int(y.sum()),
    )
    return FusionModel(weights=weights, bias=fit.bias, signs=tuple(signs), training_config=details)


# --- threshold ---------------------------------------------------------------


def calibrate_threshold(
    benign_scores: Sequence[float], poison_scores: Sequence[float]
) -> tuple[float, ThresholdRule]:
    """Pick the decision threshold from validation scores (flag iff score > tau).

    Perfectly separated classes: ``max(benign) + 0.25 * (min(poison) - max(benign))``.
    Otherwise the midpoint between consecutive distinct pooled scores that
    maximizes ``TPR - FPR``; ties go to the larger threshold.
    """
    benign = np.sort(np.asarray(benign_scores, dtype=np.float64))
    poison = np.sort(np.asarray(poison_scores, dtype=np.float64))
    if benign.size == 0 or poison.size == 0:
        raise EmptyClass("threshold calibration needs scores for both classes")
    b_max, p_min = benign[-1], poison[0]
    if p_min > b_max:
        return float(b_max + 0.25 * (p_min - b_max)), ThresholdRule.SEPARATION_MARGIN

    pooled = np.unique(np.concatenate([benign, poison]))
    if pooled.size == 1:
        return float(pooled[0]), ThresholdRule.YOUDEN_J
    mids = 0.5 * (pooled[:-1] + pooled[1:])
    tp = poison.size - np.searchsorted(poison, mids, side="right")
    fp = benign.size - np.searchsorted(benign, mids, side="right")
    # J scaled by P*N keeps the comparison in exact integers
    j = tp.astype(np.int64) * benign.size - fp.astype(np.int64) * poison.size
    best = int(np.flatnonzero(j == j.max())[-1])
    return float(mids[best]), ThresholdRule.YOUDEN_J


# --- scoring -----------------------------------------------------------------


@dataclass
class Verdict:
    adapter_id: str
    metrics: MetricVector
    z_scores: np.ndarray
    normalized: np.ndarray
    score: float
    flagged: bool
    threshold: float
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "adapter": self.adapter_id,
            "metrics": self.metrics.as_dict(),
            "z_scores": dict(zip(METRIC_ORDER, map(float, self.z_scores))),
            "normalized": dict(zip(METRIC_ORDER, map(float, self.normalized))),
            "score": float(self.score),
            "flagged": bool(self.flagged),
            "threshold": float(self.threshold),
        }
        if self.details:
            doc["details"] = self.details
        return doc


def score(
    m: MetricVector | Sequence[float],
    bank: ReferenceBank,
    model: FusionModel,
    adapter_id: str = "",
) -> Verdict:
    if not isinstance(m, MetricVector):
        m = MetricVector.from_sequence(m)
    z, n = normalize_metrics(m, bank, model.signs)
    fused = float(np.dot(model.weights, n))
    return Verdict(
        adapter_id=adapter_id,
        metrics=m,
        z_scores=z,
        normalized=n,
        score=fused,
        flagged=fused > model.threshold,
        threshold=float(model.threshold),
    )


def stratified_split(
    labels: Sequence, val_fraction: float = 0.2, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stratified split; returns sorted ``(train_idx, val_idx)``.

    Each class contributes ``round(n_c * val_fraction)`` validation items,
    at least one when the class has two or more members.
    """
    y = encode_labels(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in (BENIGN, POISONED):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(idx.size * val_fraction))
        if idx.size >= 2:
            n_val = min(max(n_val, 1), idx.size - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


@dataclass
class DetectorFit:
    """Trained model plus the validation scores its threshold came from."""

    model: FusionModel
    train_idx: np.ndarray
    val_idx: np.ndarray
    val_scores: np.ndarray
    val_labels: np.ndarray


def fit_detector(
    metrics: Sequence[MetricVector | Sequence[float]],
    labels: Sequence,
    bank: ReferenceBank,
    signs: Sequence[int] = DEFAULT_SIGNS,
    config: TrainingConfig = TrainingConfig(),
    val_fraction: float = 0.2,
    seed: int = 0,
) -> DetectorFit:
    """Stratified split, logistic fit on the training part, threshold on the rest."""
    y = encode_labels(labels)
    if np.unique(y).size < 2:
        raise SingleClassInput("training data must contain both benign and poisoned adapters")
    Z = np.stack([normalize_metrics(m, bank, signs)[0] for m in metrics])
    N = np.stack([normalize_metrics(m, bank, signs)[1] for m in metrics])
    train_idx, val_idx = stratified_split(y, val_fraction, seed)
    model = train_fusion(Z[train_idx], y[train_idx], config, signs)
    val_scores = N[val_idx] @ model.weights
    val_y = y[val_idx]
    tau, rule = calibrate_threshold(val_scores[val_y == BENIGN], val_scores[val_y == POISONED])
    model.threshold = tau
    model.threshold_rule = rule
    model.training_config.update(val_fraction=val_fraction, split_seed=seed, n_val=int(val_idx.size))
    return DetectorFit(model, train_idx, val_idx, val_scores, val_y)
