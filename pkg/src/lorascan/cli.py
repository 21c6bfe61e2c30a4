"""Command-line front end.

Exit codes: 0 success, 1 scan finished with flagged adapters (only with
``--fail-on-flag``), 2 any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any

from . import __version__
from .calibration import (
    FusionModel,
    ReferenceBank,
    TrainingConfig,
    fit_detector,
    fit_reference_bank,
    score,
    signs_with_entropy,
)
from .errors import ScanError
from .pipeline import (
    ScanConfig,
    ScanReport,
    analyze_adapter,
    collect_metrics,
    load_report,
    scan_bank,
    digest,
    score_histogram,
)
from .safetensors_io import DEFAULT_LAYER, Projection
from .spectral import METRIC_ORDER
from .synth import MANIFEST_NAME, BankManifest, GenSpec, gen_bank

logger = logging.getLogger("lorascan")

EXIT_OK, EXIT_FLAGGED, EXIT_ERROR = 0, 1, 2

# keys a --config file may set; command-line flags take precedence
CONFIG_DEFAULTS: dict[str, Any] = {
    "layer": DEFAULT_LAYER,
    "projections": "qkvo",
    "d_target": "auto",
    "entropy_sign": -1,
    "parallelism": None,
}


class CliError(Exception):
    pass


def _default_parallelism() -> int:
    env = os.environ.get("LORASCAN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _resolve(args: argparse.Namespace) -> dict[str, Any]:
    conf = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot load config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(conf)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        conf.update(loaded)
    for key in CONFIG_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    if conf["parallelism"] is None:
        conf["parallelism"] = _default_parallelism()
    return conf


def _scan_config(conf: dict[str, Any], with_signs: bool = False) -> ScanConfig:
    layer = conf["layer"]
    if isinstance(layer, str):
        layer = None if layer == "all" else int(layer)
    d_target = conf["d_target"]
    d_target = None if d_target in (None, "auto") else int(d_target)
    try:
        projections = Projection.parse_set(conf["projections"])
    except ValueError as exc:
        raise CliError(f"invalid projections {conf['projections']!r}") from exc
    signs = signs_with_entropy(int(conf["entropy_sign"])) if with_signs else None
    return ScanConfig(layer=layer, projections=projections, d_target=d_target, signs=signs)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_bank(path: str) -> ReferenceBank:
    try:
        return ReferenceBank.from_json(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read bank {path}: {exc}") from exc


def _load_model(path: str) -> FusionModel:
    try:
        return FusionModel.from_json(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc}") from exc


def _metrics_or_fail(directory: str, config: ScanConfig, parallelism: int):
    if not Path(directory).is_dir():
        raise CliError(f"not a directory: {directory}")
    analyses, errors = collect_metrics([directory], config, parallelism)
    if errors:
        for e in errors:
            print(f"error: {directory}/{e['path']}: {e['kind']}: {e['message']}", file=sys.stderr)
        raise CliError(f"{len(errors)} adapter(s) in {directory} could not be analyzed")
    return analyses


# --- commands ----------------------------------------------------------------


def cmd_inspect(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    analysis = analyze_adapter(args.adapter, _scan_config(conf))
    doc = analysis.metrics.as_dict()
    if args.spectrum:
        doc = {"metrics": doc, "spectrum": analysis.spectrum.tolist(), **analysis.details()}
    _write(None, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_calibrate_bank(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    analyses = _metrics_or_fail(args.directory, _scan_config(conf), conf["parallelism"])
    bank = fit_reference_bank([a.metrics for _, a in analyses])
    _write(args.output, bank.to_json())
    print(f"reference bank over {bank.count} adapters", file=sys.stderr)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    config = _scan_config(conf)
    signs = signs_with_entropy(int(conf["entropy_sign"]))
    bank = _load_bank(args.bank)
    benign = _metrics_or_fail(args.benign, config, conf["parallelism"])
    poison = _metrics_or_fail(args.poison, config, conf["parallelism"])
    ids = [f"{Path(args.benign).as_posix()}/{i}" for i, _ in benign]
    ids += [f"{Path(args.poison).as_posix()}/{i}" for i, _ in poison]
    analyses = [a for _, a in benign] + [a for _, a in poison]
    labels = ["benign"] * len(benign) + ["poisoned"] * len(poison)
    train_conf = TrainingConfig(
        learning_rate=args.learning_rate, max_iter=args.max_iter, l2=args.l2, tol=args.tol
    )
    fit = fit_detector(
        [a.metrics for a in analyses], labels, bank, signs, train_conf, args.val_fraction, args.seed
    )
    model = fit.model
    _write(args.output, model.to_json())

    print(f"{'metric':<10} {'weight':>7}")
    for name, w in zip(METRIC_ORDER, model.weights):
        print(f"{name:<10} {w:7.3f}")
    print(f"{'total':<10} {model.weights.sum():7.3f}")
    print(f"threshold  {model.threshold:.6f} ({model.threshold_rule.value})")

    if args.report_out:
        verdicts = []
        for i in fit.val_idx:
            v = score(analyses[i].metrics, bank, model, ids[i])
            v.details = analyses[i].details()
            verdicts.append(v)
        report = ScanReport(
            config=config.to_dict(),
            bank_sha256=digest(bank.to_json()),
            model_sha256=digest(model.to_json()),
            threshold=model.threshold,
            verdicts=verdicts,
            labels={ids[i]: labels[i] for i in fit.val_idx},
        )
        Path(args.report_out).write_text(report.to_json())
    return EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    conf = _resolve(args)
    explicit_sign = args.entropy_sign is not None
    config = _scan_config(conf, with_signs=explicit_sign)
    bank = _load_bank(args.bank)
    model = _load_model(args.model)
    for p in args.paths:
        if not Path(p).exists():
            raise CliError(f"scan path does not exist: {p}")
    report = scan_bank(args.paths, config, bank, model, conf["parallelism"])
    text = report.to_csv() if args.format == "csv" else report.to_json(args.timing)
    _write(args.output, text)
    s = report.summary
    print(
        f"scanned {s['scanned']}: {s['flagged']} flagged, {s['clean']} clean, "
        f"{s['errored']} errored ({report.wall_time:.2f}s)",
        file=sys.stderr,
    )
    for e in report.errors:
        print(f"error: {e['path']}: {e['kind']}: {e['message']}", file=sys.stderr)
    if report.errors:
        return EXIT_ERROR
    if args.fail_on_flag and s["flagged"]:
        return EXIT_FLAGGED
    return EXIT_OK


def cmd_bench_gen(args: argparse.Namespace) -> int:
    spec = GenSpec(
        seed=args.seed,
        d=args.d,
        k=args.k,
        rank=args.rank,
        n_benign=args.n_benign,
        n_poison=args.n_poison,
        injection_rates=tuple(float(r) for r in args.rates.split(",")),
        sigma_a=args.sigma_a,
        sigma_b=args.sigma_b,
        spike_coef=args.spike_coef,
        layer=args.layer,
        d_kv=args.d_kv,
        dtype=args.dtype,
    )
    parallelism = args.parallelism or _default_parallelism()
    manifest = gen_bank(spec, args.out_dir, parallelism)
    c = manifest.counts()
    print(f"wrote {len(manifest.entries)} adapters ({c['benign']} benign, {c['poisoned']} poisoned) to {args.out_dir}",
          file=sys.stderr)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        report = load_report(Path(args.report).read_text())
    except OSError as exc:
        raise CliError(f"cannot read report {args.report}: {exc}") from exc
    labels = None
    if args.manifest:
        manifest_path = Path(args.manifest)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        labels = BankManifest.from_json(manifest_path.read_text()).label_of()
    if args.hist:
        doc = score_histogram(report, labels, args.bins, args.threshold)
    else:
        doc = {"summary": report["summary"], "threshold": report["threshold"]}
    _write(args.output, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _analysis_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file with layer/projections/d_target/entropy_sign/parallelism")
    p.add_argument("--layer", help=f"layer index to analyze, or 'all' (default {DEFAULT_LAYER})")
    p.add_argument("--projections", help="subset of qkvo (default qkvo)")
    p.add_argument("--d-target", dest="d_target", help="padded output dimension, or 'auto'")
    p.add_argument("--entropy-sign", dest="entropy_sign", type=int, choices=(1, -1),
                   help="sign applied to the entropy z-score (default -1)")
    p.add_argument("--parallelism", "-j", type=int, help="worker threads (default: all cores)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorascan", description="Spectral backdoor screening for LoRA adapters."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _analysis_options()

    p = sub.add_parser("inspect", parents=[common], help="print the five metrics of one adapter")
    p.add_argument("adapter")
    p.add_argument("--spectrum", action="store_true", help="also print singular values and padding")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("calibrate-bank", parents=[common], help="fit the benign reference bank")
    p.add_argument("directory")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_calibrate_bank)

    p = sub.add_parser("train", parents=[common], help="train fusion weights and calibrate the threshold")
    p.add_argument("--benign", required=True)
    p.add_argument("--poison", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--learning-rate", type=float, default=TrainingConfig.learning_rate)
    p.add_argument("--max-iter", type=int, default=TrainingConfig.max_iter)
    p.add_argument("--l2", type=float, default=TrainingConfig.l2)
    p.add_argument("--tol", type=float, default=TrainingConfig.tol)
    p.add_argument("--report-out", help="write validation-set verdicts (with labels) as a report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("scan", parents=[common], help="scan adapter files or directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-o", "--output")
    p.add_argument("--fail-on-flag", action="store_true")
    p.add_argument("--timing", action="store_true", help="include wall time in the JSON report")
    p.set_defaults(func=cmd_scan)

    g = GenSpec()
    p = sub.add_parser("bench-gen", help="generate a labeled synthetic adapter bank")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=g.seed)
    p.add_argument("--d", type=int, default=g.d)
    p.add_argument("--k", type=int, default=g.k)
    p.add_argument("--rank", type=int, default=g.rank)
    p.add_argument("--n-benign", type=int, default=g.n_benign)
    p.add_argument("--n-poison", type=int, default=g.n_poison)
    p.add_argument("--rates", default=",".join(str(r) for r in g.injection_rates))
    p.add_argument("--sigma-a", type=float, default=g.sigma_a)
    p.add_argument("--sigma-b", type=float, default=g.sigma_b)
    p.add_argument("--spike-coef", type=float, default=g.spike_coef)
    p.add_argument("--layer", type=int, default=g.layer)
    p.add_argument("--d-kv", type=int, default=None, help="output rows of k/v (grouped-query layout)")
    p.add_argument("--dtype", choices=("F32", "F16", "BF16", "F64"), default=g.dtype)
    p.add_argument("--parallelism", "-j", type=int)
    p.set_defaults(func=cmd_bench_gen)

    p = sub.add_parser("report", help="summarize a scan report")
    p.add_argument("report")
    p.add_argument("--hist", action="store_true", help="emit score histogram data")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--manifest", help="bank manifest (or bank directory) supplying labels")
    p.add_argument("--threshold", type=float, help="override the report's threshold")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    saved_format = warnings.formatwarning
    warnings.formatwarning = lambda msg, cat, *_a, **_k: f"{cat.__name__}: {msg}"
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except ScanError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    finally:
        logging.captureWarnings(False)
        warnings.formatwarning = saved_format
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
