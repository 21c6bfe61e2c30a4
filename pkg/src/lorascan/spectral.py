"""Summed LoRA weight update, its singular spectrum, and the five metrics.

The update ``sum_p B_p @ A_p`` is never materialized. It is kept as one
factor pair ``(B_cat, A_cat)`` whose inner dimension ``R`` is the total rank,
so the SVD reduces to an ``R x R`` core after two thin QR factorizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSpectrum,
    InconsistentInputDim,
    NonFiniteTensor,
    NumericalFailure,
    OversizedProjection,
    ZeroVarianceEntries,
)
from .safetensors_io import LoraPair

METRIC_ORDER = ("sigma1", "frobenius", "energy", "entropy", "kurtosis")
ZERO_CLAMP = 1e-12
_STREAM_BLOCK_ELEMENTS = 1 << 20


@dataclass
class FactoredDelta:
    """``B_cat @ A_cat`` equals the summed (row-padded) projection updates."""

    B_cat: np.ndarray
    A_cat: np.ndarray
    projection_rows: dict[str, int] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.B_cat.shape[0]

    @property
    def k(self) -> int:
        return self.A_cat.shape[1]

    @property
    def R(self) -> int:
        return self.A_cat.shape[0]

    def dense(self) -> np.ndarray:
        """Materialize the full ``d x k`` update. Intended for tests and small inputs."""
        return self.B_cat @ self.A_cat

    def iter_row_blocks(self, block_rows: int | None = None):
        """Yield consecutive row blocks of the dense update, in order."""
        if block_rows is None:
            block_rows = max(1, _STREAM_BLOCK_ELEMENTS // max(self.k, 1))
        for start in range(0, self.d, block_rows):
            yield self.B_cat[start : start + block_rows] @ self.A_cat


@dataclass(frozen=True)
class MetricVector:
    sigma1: float
    frobenius: float
    energy: float
    entropy: float
    kurtosis: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, m) for m in METRIC_ORDER], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {m: float(getattr(self, m)) for m in METRIC_ORDER}

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "MetricVector":
        if len(values) != len(METRIC_ORDER):
            raise ValueError(f"expected {len(METRIC_ORDER)} metric values, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class EntryMoments:
    """Central moments of the flattened entries of a dense update."""

    count: int
    mean: float
    sum_sq: float
    m2: float
    m4: float


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteTensor(f"{name} contains {bad} non-finite value(s)")


def build_factored_delta(pairs: Sequence[LoraPair], d_target: int | None = None) -> FactoredDelta:
    """Concatenate per-projection factors into one factored update.

    Each ``B_p`` is zero-padded to ``d_target`` rows (default: the largest
    output dimension among the pairs), so projections with fewer output rows
    (grouped-query k/v) still contribute to the sum.
    """
    if not pairs:
        raise ValueError("need at least one LoRA pair")
    ks = {p.A.shape[1] for p in pairs}
    if len(ks) != 1:
        raise InconsistentInputDim(f"LoRA A factors disagree on input dimension: {sorted(ks)}")
    (k,) = ks
    d_max = max(p.B.shape[0] for p in pairs)
    if d_target is None:
        d_target = d_max
    if d_target < d_max:
        worst = max(pairs, key=lambda p: p.B.shape[0])
        raise OversizedProjection(
            f"{worst.projection.value}_proj has {worst.B.shape[0]} output rows, d_target is {d_target}"
        )
    for p in pairs:
        _check_finite(p.names[0] or f"{p.projection.value}_proj lora_A", p.A)
        _check_finite(p.names[1] or f"{p.projection.value}_proj lora_B", p.B)

    R = sum(p.rank for p in pairs)
    B_cat = np.zeros((d_target, R), dtype=np.float64)
    A_cat = np.empty((R, k), dtype=np.float64)
    col = 0
    rows = {}
    multi_layer = len({p.layer_index for p in pairs}) > 1
    for p in pairs:
        r = p.rank
        B_cat[: p.B.shape[0], col : col + r] = p.B
        A_cat[col : col + r] = p.A
        col += r
        label = f"{p.layer_index}.{p.projection.value}" if multi_layer else p.projection.value
        rows[label] = int(p.B.shape[0])
    return FactoredDelta(B_cat, A_cat, rows)


def singular_values(delta: FactoredDelta) -> np.ndarray:
    """Singular values of ``B_cat @ A_cat``, descending, via QR reduction.

    ``B_cat = Q_B R_B`` and ``A_cat.T = Q_A R_A`` give
    ``B_cat @ A_cat = Q_B (R_B @ R_A.T) Q_A.T``; only the small core is
    decomposed. Values below ``ZERO_CLAMP * sigma_1`` are set to 0.
    """
    try:
        _, r_b = np.linalg.qr(delta.B_cat, mode="reduced")
        _, r_a = np.linalg.qr(delta.A_cat.T, mode="reduced")
        sigma = np.linalg.svd(r_b @ r_a.T, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD of the reduced core failed: {exc}") from exc
    if not np.all(np.isfinite(sigma)):
        raise NumericalFailure("SVD of the reduced core produced non-finite values")
    sigma = np.sort(sigma)[::-1].copy()
    if sigma.size and sigma[0] > 0:
        sigma[sigma < ZERO_CLAMP * sigma[0]] = 0.0
    return sigma


def entry_moments(delta: FactoredDelta, block_rows: int | None = None) -> EntryMoments:
    """Stream the dense update in row blocks and accumulate central moments.

    The entry mean is exact from the factors, ``(1^T B)(A 1) / (d k)``, so a
    single pass suffices. Blocks are reduced in a fixed order.
    """
    count = delta.d * delta.k
    mean = float(delta.B_cat.sum(axis=0) @ delta.A_cat.sum(axis=1)) / count
    sum_sq = 0.0
    s2 = 0.0
    s4 = 0.0
    for block in delta.iter_row_blocks(block_rows):
        sum_sq += float(np.einsum("ij,ij->", block, block))
        c2 = block - mean
        c2 *= c2
        s2 += float(c2.sum())
        s4 += float(np.einsum("ij,ij->", c2, c2))
    return EntryMoments(count, mean, sum_sq, s2 / count, s4 / count)


def compute_metrics(delta: FactoredDelta, spectrum: np.ndarray | None = None) -> MetricVector:
    """Leading singular value, Frobenius norm, energy, entropy (nats) and Pearson kurtosis."""
    if spectrum is None:
        spectrum = singular_values(delta)
    sigma = np.asarray(spectrum, dtype=np.float64)
    if sigma.size == 0 or not sigma[0] > 0:
        raise DegenerateSpectrum("empty update: leading singular value is zero")
    total = float(sigma.sum())
    sigma1 = float(sigma[0])
    p = sigma[sigma > 0] / total
    # every term is >= 0; adding 0.0 turns a rank-1 -0.0 into 0.0
    entropy = 0.0 + float(-(p * np.log(p)).sum())

    mom = entry_moments(delta)
    if mom.m2 == 0.0:
        raise ZeroVarianceEntries("all update entries are equal; kurtosis undefined")
    return MetricVector(
        sigma1=sigma1,
        frobenius=math.sqrt(float(np.dot(sigma, sigma))),
        energy=sigma1 / total,
        entropy=entropy,
        kurtosis=mom.m4 / (mom.m2 * mom.m2),
    )
