import numpy as np
import pytest

from lorascan.safetensors_io import extract_lora_pairs, parse_safetensors
from lorascan.spectral import build_factored_delta, compute_metrics, singular_values
from lorascan.synth import GenSpec, adapter_bytes, plan_bank

_criteria: dict[int, dict] = {}


def analyze_bytes(data: bytes, layer: int = 21):
    delta = build_factored_delta(extract_lora_pairs(parse_safetensors(data), layer))
    sigma = singular_values(delta)
    return compute_metrics(delta, sigma), sigma


@pytest.fixture(scope="session")
def default_population():
    """Metrics and spectra of the default 200 + 50 bank, computed in memory."""
    spec = GenSpec()
    rows = []
    for entry in plan_bank(spec):
        m, sigma = analyze_bytes(adapter_bytes(spec, entry))
        rows.append((entry, m, sigma))
    return spec, rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number = getattr(report, "criterion_number", None)
    if number is None:
        return
    slot = _criteria.setdefault(number, {"desc": report.criterion_desc, "ok": True, "ran": 0})
    slot["ran"] += 1
    slot["ok"] &= report.passed


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion_number = mark.args[0]
        report.criterion_desc = mark.args[1]
    return report


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        slot = _criteria[number]
        status = "PASS" if slot["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {slot['desc']}")
