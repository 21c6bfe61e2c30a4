"""Seeded synthetic LoRA adapter banks with ground-truth labels.

Benign adapters are Gaussian factor pairs, which gives a dispersed singular
spectrum. Poisoned adapters start from the benign draw for the same index and
overwrite one (rare-token) or two (contextual) rank channels of the q
projection with a dominant spike whose magnitude grows with the injection
rate.

Every adapter draws from its own random stream keyed by ``(seed, index)``,
so any subset can be generated independently and in any order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import RateOutOfSpec, VersionError
from .safetensors_io import (
    DEFAULT_LAYER,
    Projection,
    TensorRecord,
    emit_safetensors,
    lora_tensor_name,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "1.0"
RARE_TOKEN = "rare-token"
CONTEXTUAL = "contextual"
TRIGGER_CLASSES = (RARE_TOKEN, CONTEXTUAL)

DEFAULT_SPIKE_COEF = 30.0

_STREAM_BENIGN = 0
_STREAM_SPIKE = 1


@dataclass
class GenSpec:
    seed: int = 0
    d: int = 256
    k: int = 256
    rank: int = 16
    n_benign: int = 200
    n_poison: int = 50
    injection_rates: tuple[float, ...] = (0.01, 0.03, 0.05)
    sigma_a: float = 1.0
    sigma_b: float = 0.05
    spike_coef: float = DEFAULT_SPIKE_COEF
    layer: int = DEFAULT_LAYER
    d_kv: int | None = None
    dtype: str = "F32"
    prefix: str = "base_model.model.model"

    def __post_init__(self) -> None:
        self.injection_rates = tuple(float(r) for r in self.injection_rates)
        if min(self.d, self.k, self.rank) < 1:
            raise ValueError("d, k and rank must be positive")
        if self.rank > min(self.d, self.k, self.d_kv or self.d):
            raise ValueError(f"rank {self.rank} exceeds min(d, k)")
        if self.n_benign < 0 or self.n_poison < 0:
            raise ValueError("adapter counts must be nonnegative")
        if self.n_poison and not self.injection_rates:
            raise ValueError("poisoned adapters need at least one injection rate")
        for r in self.injection_rates:
            if not 0.0 < r < 1.0:
                raise RateOutOfSpec(f"injection rate {r} is not strictly between 0 and 1")
        if self.sigma_a <= 0 or self.sigma_b <= 0 or self.spike_coef <= 0:
            raise ValueError("sigma_a, sigma_b and spike_coef must be positive")

    def output_dim(self, projection: Projection) -> int:
        if self.d_kv is not None and projection in (Projection.K, Projection.V):
            return self.d_kv
        return self.d

    @property
    def expected_benign_frobenius(self) -> float:
        """RMS Frobenius norm of a benign summed update.

        Each entry of ``B_p @ A_p`` has variance ``sigma_a^2 sigma_b^2 / k``,
        so ``E|dW_p|_F^2 = d_out_p sigma_a^2 sigma_b^2``; the projections are
        independent and their squared norms add.
        """
        rows = sum(self.output_dim(p) for p in Projection)
        return self.sigma_a * self.sigma_b * math.sqrt(rows)

    def spike_magnitude(self, rate: float) -> float:
        return self.spike_coef * rate * self.expected_benign_frobenius


def _rng(spec: GenSpec, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, index, stream])))


def _names(spec: GenSpec, proj: Projection) -> tuple[str, str]:
    return (
        lora_tensor_name(spec.layer, proj, "A", spec.prefix),
        lora_tensor_name(spec.layer, proj, "B", spec.prefix),
    )


def gen_benign(spec: GenSpec, index: int) -> dict[str, np.ndarray]:
    """Gaussian factors: ``A ~ N(0, sigma_a^2 / k)``, ``B ~ N(0, sigma_b^2 / r)``."""
    rng = _rng(spec, index, _STREAM_BENIGN)
    out = {}
    for proj in Projection:
        name_a, name_b = _names(spec, proj)
        A = rng.standard_normal((spec.rank, spec.k)) * (spec.sigma_a / math.sqrt(spec.k))
        B = rng.standard_normal((spec.output_dim(proj), spec.rank)) * (spec.sigma_b / math.sqrt(spec.rank))
        out[name_a] = A.astype(np.float32)
        out[name_b] = B.astype(np.float32)
    return out


def _orthonormal_columns(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, count)))
    return q * np.sign(np.diag(r))


def gen_poisoned(spec: GenSpec, index: int, rate: float, trigger_class: str) -> dict[str, np.ndarray]:
    """Benign draw for ``index`` plus a spike of magnitude ``c * rate * F_benign`` in q.

    A rare-token trigger is a rank-1 spike in one rank channel. A contextual
    trigger spreads the same Frobenius magnitude over two channels with
    orthogonal directions, each carrying ``beta / sqrt(2)``.
    """
    if not any(math.isclose(rate, r, rel_tol=0, abs_tol=1e-12) for r in spec.injection_rates):
        raise RateOutOfSpec(f"rate {rate} not in the configured tiers {spec.injection_rates}")
    if trigger_class not in TRIGGER_CLASSES:
        raise ValueError(f"unknown trigger class {trigger_class!r}")
    tensors = gen_benign(spec, index)
    rng = _rng(spec, index, _STREAM_SPIKE)
    beta = spec.spike_magnitude(rate)
    n_dirs = 1 if trigger_class == RARE_TOKEN else 2
    if n_dirs > spec.rank:
        raise ValueError("contextual trigger needs rank >= 2")
    channels = rng.choice(spec.rank, size=n_dirs, replace=False)
    u = _orthonormal_columns(rng, spec.output_dim(Projection.Q), n_dirs)
    v = _orthonormal_columns(rng, spec.k, n_dirs)
    amp = math.sqrt(beta / math.sqrt(n_dirs))
    name_a, name_b = _names(spec, Projection.Q)
    A = tensors[name_a].astype(np.float64)
    B = tensors[name_b].astype(np.float64)
    for i, j in enumerate(channels):
        B[:, j] = amp * u[:, i]
        A[j, :] = amp * v[:, i]
    tensors[name_a] = A.astype(np.float32)
    tensors[name_b] = B.astype(np.float32)
    return tensors


@dataclass
class ManifestEntry:
    file: str
    label: str
    seed: int
    index: int
    trigger_class: str | None = None
    rate: float | None = None

    def to_dict(self) -> dict:
        doc = {"file": self.file, "label": self.label, "seed": self.seed, "index": self.index}
        if self.trigger_class is not None:
            doc["trigger_class"] = self.trigger_class
            doc["rate"] = self.rate
        return doc


@dataclass
class BankManifest:
    spec: GenSpec
    entries: list[ManifestEntry] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {"benign": 0, "poisoned": 0}
        for e in self.entries:
            out[e.label] += 1
        return out

    def label_of(self) -> dict[str, str]:
        """Map from file basename to label."""
        return {Path(e.file).name: e.label for e in self.entries}

    def to_json(self) -> str:
        spec = asdict(self.spec)
        spec["injection_rates"] = list(self.spec.injection_rates)
        doc = {
            "version": MANIFEST_VERSION,
            "spec": spec,
            "entries": [e.to_dict() for e in self.entries],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BankManifest":
        doc = json.loads(text)
        if str(doc.get("version", "")).split(".")[0] != MANIFEST_VERSION.split(".")[0]:
            raise VersionError(f"unsupported manifest version {doc.get('version')!r}")
        spec = GenSpec(**doc["spec"])
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(spec, entries)


def plan_bank(spec: GenSpec) -> list[ManifestEntry]:
    """Assign file names, labels, classes and rates without generating anything.

    Benign adapters take indices ``0..n_benign-1``; poisoned ones follow.
    Trigger classes alternate and rates cycle in the configured order.
    """
    entries = []
    for i in range(spec.n_benign):
        entries.append(ManifestEntry(f"benign/adapter_{i:04d}.safetensors", "benign", spec.seed, i))
    for j in range(spec.n_poison):
        index = spec.n_benign + j
        entries.append(
            ManifestEntry(
                f"poisoned/adapter_{index:04d}.safetensors",
                "poisoned",
                spec.seed,
                index,
                trigger_class=TRIGGER_CLASSES[j % 2],
                rate=spec.injection_rates[j % len(spec.injection_rates)],
            )
        )
    return entries


def adapter_bytes(spec: GenSpec, entry: ManifestEntry) -> bytes:
    if entry.label == "benign":
        tensors = gen_benign(spec, entry.index)
    else:
        tensors = gen_poisoned(spec, entry.index, entry.rate, entry.trigger_class)
    records = [TensorRecord.from_array(name, arr, spec.dtype) for name, arr in tensors.items()]
    return emit_safetensors(
        records,
        spec.dtype,
        metadata={"generator": "lorascan.synth", "seed": str(spec.seed), "index": str(entry.index)},
    )


def gen_bank(spec: GenSpec, out_dir: str | Path, parallelism: int = 1) -> BankManifest:
    """Write every adapter of ``spec`` under ``out_dir`` plus ``manifest.json``."""
    out = Path(out_dir)
    entries = plan_bank(spec)
    for sub in {Path(e.file).parent for e in entries}:
        (out / sub).mkdir(parents=True, exist_ok=True)

    def write(entry: ManifestEntry) -> None:
        (out / entry.file).write_bytes(adapter_bytes(spec, entry))

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(write, entries))
    else:
        for e in entries:
            write(e)
    manifest = BankManifest(spec, entries)
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest
