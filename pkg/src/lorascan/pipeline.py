"""End-to-end scanning: file -> factored update -> spectrum -> metrics -> verdict."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .calibration import FusionModel, ReferenceBank, Verdict, score
from .errors import NoLoraPairs, ScanError, UnreadableFile, VersionError
from .safetensors_io import ALL_PROJECTIONS, DEFAULT_LAYER, Projection, extract_lora_pairs, parse_safetensors
from .spectral import METRIC_ORDER, MetricVector, build_factored_delta, compute_metrics, singular_values

logger = logging.getLogger(__name__)

REPORT_VERSION = "1.0"
CSV_COLUMNS = (
    ["path"] + list(METRIC_ORDER) + [f"n_{m}" for m in METRIC_ORDER] + ["score", "flagged"]
)


@dataclass(frozen=True)
class ScanConfig:
    layer: int | None = DEFAULT_LAYER
    projections: frozenset[Projection] = ALL_PROJECTIONS
    d_target: int | None = None
    signs: tuple[int, ...] | None = None  # None: use the model's signs

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "projections": "".join(p.value for p in Projection if p in self.projections),
            "d_target": self.d_target if self.d_target is not None else "auto",
            "signs": list(self.signs) if self.signs is not None else None,
        }


@dataclass
class AdapterAnalysis:
    metrics: MetricVector
    spectrum: np.ndarray
    d_target: int
    projection_rows: dict[str, int]

    def details(self) -> dict[str, Any]:
        return {"d_target": self.d_target, "projection_rows": dict(self.projection_rows)}


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read adapter: {exc.strerror or exc}") from exc


def analyze_adapter(path: str | Path, config: ScanConfig = ScanConfig()) -> AdapterAnalysis:
    """Compute the metric vector of one adapter file.

    Any :class:`ScanError` raised on the way is re-raised with ``path`` set.
    """
    path = Path(path)
    try:
        tensors = parse_safetensors(_read(path))
        pairs = extract_lora_pairs(tensors, config.layer, config.projections)
        if not pairs:
            where = f" at layer {config.layer}" if config.layer is not None else ""
            raise NoLoraPairs(f"no LoRA attention pairs found{where}")
        delta = build_factored_delta(pairs, config.d_target)
        spectrum = singular_values(delta)
        metrics = compute_metrics(delta, spectrum)
    except ScanError as exc:
        if exc.path is None:
            exc.path = str(path)
        raise
    logger.debug(
        "%s: d=%d k=%d R=%d spectrum=%s metrics=%s",
        path, delta.d, delta.k, delta.R, spectrum.tolist(), metrics.as_dict(),
    )
    return AdapterAnalysis(metrics, spectrum, delta.d, delta.projection_rows)


def scan_adapter(
    path: str | Path,
    config: ScanConfig,
    bank: ReferenceBank,
    model: FusionModel,
    adapter_id: str | None = None,
) -> Verdict:
    analysis = analyze_adapter(path, config)
    if config.signs is not None:
        model = replace(model, signs=tuple(config.signs))
    verdict = score(analysis.metrics, bank, model, adapter_id or str(path))
    verdict.details = analysis.details()
    logger.debug("%s: z=%s n=%s score=%.6f", verdict.adapter_id, verdict.z_scores, verdict.normalized, verdict.score)
    return verdict


# --- discovery ---------------------------------------------------------------


def discover(sources: Sequence[str | Path]) -> list[tuple[str, Path]]:
    """``(adapter_id, path)`` for every ``*.safetensors`` under ``sources``, sorted by id.

    Ids are paths relative to the scanned directory; with several sources
    the source path as given is kept as a prefix.
    """
    found: dict[str, Path] = {}
    for src in sources:
        src = Path(src)
        if src.is_file():
            found[src.as_posix()] = src
            continue
        if not src.is_dir():
            raise FileNotFoundError(f"scan root does not exist: {src}")
        for f in src.rglob("*.safetensors"):
            if not f.is_file():
                continue
            rel = f.relative_to(src).as_posix()
            found[(src / rel).as_posix() if len(sources) > 1 else rel] = f
    return sorted(found.items())


def _map(fn, items: list, parallelism: int) -> list:
    if parallelism > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _error_entry(adapter_id: str, exc: BaseException) -> dict[str, Any]:
    entry = {"path": adapter_id, "kind": type(exc).__name__}
    if isinstance(exc, ScanError):
        entry["message"] = exc.message
        if exc.offset is not None:
            entry["offset"] = exc.offset
    else:
        entry["message"] = str(exc)
    return entry


def collect_metrics(
    sources: Sequence[str | Path], config: ScanConfig = ScanConfig(), parallelism: int = 1
) -> tuple[list[tuple[str, AdapterAnalysis]], list[dict[str, Any]]]:
    """Analyze every adapter under ``sources``; failures are collected, not raised."""
    items = discover(sources)

    def work(item):
        adapter_id, path = item
        try:
            return adapter_id, analyze_adapter(path, config), None
        except Exception as exc:  # noqa: BLE001 - one bad file must not stop the batch
            logger.warning("%s: %s", adapter_id, exc)
            return adapter_id, None, _error_entry(adapter_id, exc)

    ok, errors = [], []
    for adapter_id, analysis, err in _map(work, items, parallelism):
        if err is None:
            ok.append((adapter_id, analysis))
        else:
            errors.append(err)
    return ok, errors


# --- reports -----------------------------------------------------------------


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class ScanReport:
    config: dict[str, Any]
    bank_sha256: str
    model_sha256: str
    threshold: float
    verdicts: list[Verdict] = field(default_factory=list)
    errors: list[dict[str, Any]] = field(default_factory=list)
    wall_time: float = 0.0
    labels: dict[str, str] | None = None
    tool_version: str = __version__

    @property
    def summary(self) -> dict[str, int]:
        flagged = sum(v.flagged for v in self.verdicts)
        return {
            "scanned": len(self.verdicts) + len(self.errors),
            "flagged": flagged,
            "clean": len(self.verdicts) - flagged,
            "errored": len(self.errors),
        }

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        results = []
        for v in sorted(self.verdicts, key=lambda v: v.adapter_id):
            doc = v.to_dict()
            if self.labels is not None and v.adapter_id in self.labels:
                doc["label"] = self.labels[v.adapter_id]
            results.append(doc)
        doc = {
            "version": REPORT_VERSION,
            "tool_version": self.tool_version,
            "config": self.config,
            "bank_sha256": self.bank_sha256,
            "model_sha256": self.model_sha256,
            "threshold": float(self.threshold),
            "summary": self.summary,
            "results": results,
            "errors": sorted(self.errors, key=lambda e: e["path"]),
        }
        if include_timing:
            doc["wall_time_s"] = self.wall_time
        return doc

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for v in sorted(self.verdicts, key=lambda v: v.adapter_id):
            writer.writerow(
                [v.adapter_id]
                + [repr(float(x)) for x in v.metrics.as_array()]
                + [repr(float(x)) for x in v.normalized]
                + [repr(float(v.score)), "true" if v.flagged else "false"]
            )
        return buf.getvalue()


def score_analyses(
    analyses: Iterable[tuple[str, AdapterAnalysis]], bank: ReferenceBank, model: FusionModel
) -> list[Verdict]:
    out = []
    for adapter_id, analysis in analyses:
        verdict = score(analysis.metrics, bank, model, adapter_id)
        verdict.details = analysis.details()
        out.append(verdict)
    return out


def scan_bank(
    sources: str | Path | Sequence[str | Path],
    config: ScanConfig,
    bank: ReferenceBank,
    model: FusionModel,
    parallelism: int = 1,
) -> ScanReport:
    """Scan every adapter under ``sources``; per-file failures land in ``errors``."""
    if isinstance(sources, (str, Path)):
        sources = [sources]
    start = time.perf_counter()
    if config.signs is not None:
        model = replace(model, signs=tuple(config.signs))
    analyses, errors = collect_metrics(sources, config, parallelism)
    verdicts = score_analyses(analyses, bank, model)
    return ScanReport(
        config=config.to_dict(),
        bank_sha256=digest(bank.to_json()),
        model_sha256=digest(model.to_json()),
        threshold=model.threshold,
        verdicts=verdicts,
        errors=errors,
        wall_time=time.perf_counter() - start,
    )


def load_report(text: str) -> dict[str, Any]:
    doc = json.loads(text)
    if str(doc.get("version", "")).split(".")[0] != REPORT_VERSION.split(".")[0]:
        raise VersionError(f"unsupported report version {doc.get('version')!r}")
    return doc


def score_histogram(
    report: dict[str, Any],
    labels: dict[str, str] | None = None,
    bins: int = 20,
    threshold: float | None = None,
) -> dict[str, Any]:
    """Score histogram over [0, 1], split by class when labels are known.

    Labels come from each result's ``label`` field, else from ``labels``
    keyed by file basename. Unlabeled results are counted as ``unlabeled``.
    """
    if threshold is None:
        threshold = float(report.get("threshold", 0.5))
    edges = np.linspace(0.0, 1.0, bins + 1)
    groups: dict[str, list[float]] = {}
    for res in report["results"]:
        label = res.get("label")
        if label is None and labels is not None:
            label = labels.get(Path(res["adapter"]).name)
        groups.setdefault(label or "unlabeled", []).append(float(res["score"]))
    counts = {}
    above = {}
    for label in sorted(groups):
        vals = np.clip(np.array(groups[label]), 0.0, 1.0)
        counts[label] = np.histogram(vals, bins=edges)[0].astype(int).tolist()
        above[label] = int(np.count_nonzero(np.array(groups[label]) > threshold))
    return {
        "bin_edges": [float(e) for e in edges],
        "counts": counts,
        "totals": {label: len(v) for label, v in sorted(groups.items())},
        "threshold": threshold,
        "above_threshold": above,
    }
