"""Acceptance criteria, one marked test group per criterion.

Run ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``);
the terminal summary ends with one PASS/FAIL line per criterion.
"""

import sys
import time
import warnings
from fractions import Fraction
from pathlib import Path

import ml_dtypes
import numpy as np
import pytest
from scipy import stats

from lorascan.calibration import (
    FusionModel,
    ReferenceBank,
    ThresholdRule,
    calibrate_threshold,
    fit_detector,
    fit_reference_bank,
    logistic_gradient,
    logistic_loss,
    score,
)
from lorascan.pipeline import ScanConfig, collect_metrics, scan_bank
from lorascan.safetensors_io import TensorRecord, emit_safetensors, parse_safetensors
from lorascan.spectral import ZERO_CLAMP, FactoredDelta, compute_metrics, entry_moments, singular_values
from lorascan.synth import GenSpec, gen_bank

criterion = pytest.mark.criterion

# --- 1. golden worked example -------------------------------------------------

GOLDEN_METRICS = (8.5, 12.3, 0.92, 2.1, 5.4)
GOLDEN_BANK = ReferenceBank(
    mean=np.array([4.2, 6.5, 0.65, 3.2, 2.1]), std=np.array([1.8, 2.1, 0.15, 0.9, 1.2]), count=400
)
GOLDEN_MODEL = FusionModel(
    weights=np.array([0.056, 0.097, 0.353, 0.042, 0.452]),
    bias=0.0,
    signs=(1, 1, 1, 1, 1),
    threshold=0.718,
    threshold_rule=ThresholdRule.SEPARATION_MARGIN,
)
C1 = "golden worked example"


def golden_verdict():
    start = time.perf_counter()
    v = score(GOLDEN_METRICS, GOLDEN_BANK, GOLDEN_MODEL, "golden")
    assert time.perf_counter() - start < 1.0
    return v


@criterion(1, C1)
def test_c1_z_scores():
    assert [round(float(z), 2) for z in golden_verdict().z_scores] == [2.39, 2.76, 1.80, -1.22, 2.75]


@criterion(1, C1)
def test_c1_normalized_scores():
    # the printed 0.917 for sigma1 disagrees with the logistic of z = 2.389 (0.916)
    assert [round(float(n), 3) for n in golden_verdict().normalized] == [0.917, 0.941, 0.858, 0.228, 0.940]


@criterion(1, C1)
def test_c1_fused_score_and_flag():
    v = golden_verdict()
    assert round(v.score, 3) == 0.880
    assert v.flagged is True


# --- 2. reduced SVD vs dense SVD ----------------------------------------------


@criterion(2, "SVD oracle equivalence, 200 random factored deltas")
def test_c2_svd_oracle():
    rng = np.random.default_rng(20)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        d, k = (int(x) for x in rng.integers(1, 129, size=2))
        R = int(rng.integers(1, 33))
        delta = FactoredDelta(rng.standard_normal((d, R)), rng.standard_normal((R, k)))
        ours = singular_values(delta)
        ref = np.linalg.svd(delta.dense(), compute_uv=False)[: ours.size]
        keep = ours > ZERO_CLAMP * ours[0]
        worst = max(worst, float(np.max(np.abs(ours[keep] - ref[keep]) / ref[keep])))
    assert worst <= 1e-9
    assert time.perf_counter() - start < 30


# --- 3. metric identities -----------------------------------------------------


@criterion(3, "metric identities")
def test_c3_frobenius_identities():
    rng = np.random.default_rng(30)
    start = time.perf_counter()
    for _ in range(200):
        d, k = (int(x) for x in rng.integers(2, 129, size=2))
        R = int(rng.integers(1, 33))
        delta = FactoredDelta(rng.standard_normal((d, R)), rng.standard_normal((R, k)))
        m = compute_metrics(delta)
        f2 = m.frobenius**2
        assert abs(f2 - float(np.sum(singular_values(delta) ** 2))) <= 1e-9 * f2
        assert abs(f2 - entry_moments(delta).sum_sq) <= 1e-9 * f2
    assert time.perf_counter() - start < 10


@criterion(3, "metric identities")
def test_c3_rank_one_limits():
    rng = np.random.default_rng(31)
    for _ in range(100):
        d, k = (int(x) for x in rng.integers(2, 129, size=2))
        u, v = rng.standard_normal((d, 1)), rng.standard_normal((1, k))
        m = compute_metrics(FactoredDelta(u, v))
        assert abs(m.energy - 1.0) <= 1e-12
        assert abs(m.entropy) <= 1e-12
        # rank-1 spread over several channels: u a1 + u a2 = u (a1 + a2)
        a = rng.standard_normal((3, 1))
        m = compute_metrics(FactoredDelta(u * a.T, np.repeat(v, 3, axis=0)))
        assert abs(m.energy - 1.0) <= 1e-12
        assert abs(m.entropy) <= 1e-12


# --- 4. logistic gradient -----------------------------------------------------


@criterion(4, "logistic gradient vs central differences")
def test_c4_gradient_check():
    rng = np.random.default_rng(40)
    X = rng.standard_normal((64, 5)) * 2
    y = (rng.random(64) < 0.4).astype(float)
    h = 1e-5
    worst = 0.0
    for _ in range(50):
        w = rng.standard_normal(5) * 2
        b = float(rng.standard_normal())
        gw, gb = logistic_gradient(w, b, X, y, 1e-3)
        for j in range(6):
            if j < 5:
                e = np.zeros(5)
                e[j] = h
                fd = (logistic_loss(w + e, b, X, y, 1e-3) - logistic_loss(w - e, b, X, y, 1e-3)) / (2 * h)
                worst = max(worst, abs(fd - gw[j]))
            else:
                fd = (logistic_loss(w, b + h, X, y, 1e-3) - logistic_loss(w, b - h, X, y, 1e-3)) / (2 * h)
                worst = max(worst, abs(fd - gb))
    assert worst <= 1e-6


# --- 5. threshold rules -------------------------------------------------------

C5 = "threshold rules vs formula and brute force"


def youden_j(benign, poison, t):
    return Fraction(sum(p > t for p in poison), len(poison)) - Fraction(sum(b > t for b in benign), len(benign))


@criterion(5, C5)
def test_c5_separation_margin():
    rng = np.random.default_rng(50)
    for _ in range(100):
        cut = rng.uniform(0.2, 0.8)
        benign = list(rng.uniform(0, cut, size=int(rng.integers(1, 30))))
        poison = list(rng.uniform(cut, 1, size=int(rng.integers(1, 30))))
        tau, rule = calibrate_threshold(benign, poison)
        assert rule is ThresholdRule.SEPARATION_MARGIN
        assert tau == max(benign) + 0.25 * (min(poison) - max(benign))


@criterion(5, C5)
def test_c5_youden_brute_force():
    rng = np.random.default_rng(51)
    for _ in range(100):
        benign = list(np.round(rng.uniform(0, 0.7, size=int(rng.integers(2, 30))), 2))
        poison = list(np.round(rng.uniform(0.3, 1, size=int(rng.integers(2, 30))), 2))
        poison.append(min(benign))  # guarantee overlap
        tau, rule = calibrate_threshold(benign, poison)
        assert rule is ThresholdRule.YOUDEN_J
        pooled = sorted(set(benign) | set(poison))
        mids = [(a + b) / 2 for a, b in zip(pooled, pooled[1:])]
        best = max(youden_j(benign, poison, t) for t in mids)
        assert youden_j(benign, poison, tau) == best
        assert tau == max(t for t in mids if youden_j(benign, poison, t) == best)


# --- 6 and 7. end-to-end benchmark and determinism ----------------------------

CAL_SPEC = GenSpec(seed=0, n_benign=200, n_poison=50)
HELD_OUT_SPEC = GenSpec(seed=1, n_benign=50, n_poison=50)


def run_benchmark(root: Path, parallelism: int = 4):
    cal = gen_bank(CAL_SPEC, root / "cal", parallelism)
    gen_bank(HELD_OUT_SPEC, root / "held_out", parallelism)
    config = ScanConfig()
    analyses, errors = collect_metrics([root / "cal"], config, parallelism)
    assert not errors
    labels = {e.file: e.label for e in cal.entries}
    y = [labels[aid] for aid, _ in analyses]
    metrics = [a.metrics for _, a in analyses]
    bank = fit_reference_bank([m for m, lab in zip(metrics, y) if lab == "benign"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_detector(metrics, y, bank).model
    (root / "bank.json").write_text(bank.to_json())
    (root / "model.json").write_text(model.to_json())
    report = scan_bank(root / "held_out", config, bank, model, parallelism)
    (root / "report.json").write_text(report.to_json())
    return report


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    a_root, b_root = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    start = time.perf_counter()
    report = run_benchmark(a_root)
    elapsed = time.perf_counter() - start
    run_benchmark(b_root)
    return report, elapsed, a_root, b_root


@criterion(6, "end-to-end synthetic benchmark accuracy >= 95%, FPR <= 4%")
def test_c6_end_to_end(benchmark_runs):
    report, elapsed, _, _ = benchmark_runs
    truth = {f"{lab}/": lab for lab in ("benign", "poisoned")}
    tp = fp = tn = fn = 0
    for v in report.verdicts:
        label = next(lab for prefix, lab in truth.items() if v.adapter_id.startswith(prefix))
        if label == "poisoned":
            tp += v.flagged
            fn += not v.flagged
        else:
            fp += v.flagged
            tn += not v.flagged
    assert tp + fp + tn + fn == 100 and not report.errors
    accuracy = (tp + tn) / 100
    fpr = fp / (fp + tn)
    print(f"held-out accuracy {accuracy:.3f}, FPR {fpr:.3f}, tau {report.threshold:.4f}, {elapsed:.1f}s")
    assert accuracy >= 0.95
    assert fpr <= 0.04
    assert elapsed < 300


@criterion(7, "determinism of banks, models, reports and parallel scans")
def test_c7_determinism(benchmark_runs):
    _, _, a_root, b_root = benchmark_runs
    files = sorted(f.relative_to(a_root) for f in a_root.rglob("*") if f.is_file())
    assert files == sorted(f.relative_to(b_root) for f in b_root.rglob("*") if f.is_file())
    # 350 adapters, 2 manifests, bank, model, report
    assert len(files) == 355
    for rel in files:
        assert (a_root / rel).read_bytes() == (b_root / rel).read_bytes(), rel
    bank = ReferenceBank.from_json((a_root / "bank.json").read_text())
    model = FusionModel.from_json((a_root / "model.json").read_text())
    one = scan_bank(a_root / "held_out", ScanConfig(), bank, model, parallelism=1)
    eight = scan_bank(a_root / "held_out", ScanConfig(), bank, model, parallelism=8)
    assert one.to_json() == eight.to_json() == (a_root / "report.json").read_text()
    assert one.to_csv() == eight.to_csv()


# --- 8. format round trip -----------------------------------------------------


def expected_after_store(values, dtype):
    if dtype in ("F64", "F32"):
        return values.astype(np.float32).astype(np.float64) if dtype == "F32" else values
    if dtype == "F16":
        with np.errstate(over="ignore"):
            return values.astype(np.float16).astype(np.float64)
    return values.astype(ml_dtypes.bfloat16).astype(np.float64)


@criterion(8, "500 randomized safetensors round trips")
def test_c8_round_trips():
    rng = np.random.default_rng(80)
    mismatches = 0
    for trial in range(500):
        records = []
        for i in range(int(rng.integers(0, 6))):
            dtype = str(rng.choice(["F64", "F32", "F16", "BF16"]))
            shape = tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 4))))
            scale = 10.0 ** rng.uniform(-6, 5)
            values = rng.standard_normal(int(np.prod(shape, dtype=int))) * scale
            records.append(TensorRecord(f"t{trial}.{i}", dtype, shape, values))
        metadata = {"trial": str(trial)} if trial % 2 else None
        data = emit_safetensors(records, dtype_out=None, metadata=metadata)
        back = parse_safetensors(data)
        if list(back) != [r.name for r in records]:
            mismatches += 1
            continue
        for r in records:
            got = back[r.name]
            want = expected_after_store(r.values, r.dtype)
            ok = got.dtype == r.dtype and got.shape == r.shape and np.array_equal(got.values, want)
            # stored values are fixed points of a second round trip
            again = parse_safetensors(emit_safetensors([got], dtype_out=None))[r.name]
            mismatches += not (ok and again == got)
    assert mismatches == 0


# --- 9. statistical signature -------------------------------------------------


@criterion(9, "poisoned vs benign signature, Welch one-sided p < 0.01")
def test_c9_signature(default_population):
    _, rows = default_population
    by = {"benign": [], "poisoned": []}
    for entry, m, _ in rows:
        by[entry.label].append(m.as_array())
    benign, poisoned = np.array(by["benign"]), np.array(by["poisoned"])
    for col, alternative in ((2, "greater"), (4, "greater"), (3, "less")):
        res = stats.ttest_ind(poisoned[:, col], benign[:, col], equal_var=False, alternative=alternative)
        print(f"metric {col}: poisoned mean {poisoned[:, col].mean():.4g}, benign {benign[:, col].mean():.4g}, p={res.pvalue:.2e}")
        assert res.pvalue < 0.01
        if alternative == "greater":
            assert poisoned[:, col].mean() > benign[:, col].mean()
        else:
            assert poisoned[:, col].mean() < benign[:, col].mean()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
