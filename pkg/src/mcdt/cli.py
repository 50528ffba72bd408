"""Command line entry point.

    mcdt run          one scenario -> runlog.csv, metrics.json, config.yaml
    mcdt ablate       ablation suite -> ablation.csv, reports.json
    mcdt characterize detector noise statistics -> noise.json, noise_errors.csv
    mcdt metrics      score an existing runlog.csv

Exit codes: 0 success, 2 config error, 3 runtime failure. ``MCDT_OUT_DIR``
overrides the default output directory (``--out`` still wins).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig, dump_config, load_config
from .detector import synthetic_detections
from .metrics import MetricsError, characterize_noise, relative_errors
from .runlog import RunLog, atomic_write
from .runner import metrics_report, run_ablation_suite, simulate, variant_config, variant_names

log = logging.getLogger("mcdt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "MCDT_OUT_DIR"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _dumps(obj) -> str:
    # NaN is not valid JSON; write null instead
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, (float, np.floating)) and not math.isfinite(x):
            return None
        return x
    return json.dumps(clean(obj), indent=2, default=_json_default) + "\n"


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "out")


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed).validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    name = args.variant or "online"
    if name not in variant_names(cfg):
        raise ConfigError([f"--variant: unknown variant {name!r} (choose from {', '.join(variant_names(cfg))})"])
    cfg = variant_config(cfg, name)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    trace = open(out / "trace.jsonl", "w") if args.trace else None
    try:
        result = simulate(cfg, trace)
    finally:
        if trace:
            trace.close()
    report = metrics_report(result.log, cfg, name, cfg.scored(), result)
    result.log.write(out / "runlog.csv")
    atomic_write(out / "metrics.json", _dumps(report.to_dict()))
    atomic_write(out / "config.yaml", dump_config(cfg))
    print(f"{name}: mse2d={report.mse2d:.4f} mse3d={report.mse3d:.4f} nees={report.nees:.2f} "
          f"rates={report.detection_rates} -> {out}")
    return EXIT_OK


SUMMARY_COLUMNS = ("seed", "variant", "mse2d", "mse3d", "truth_mse2d", "truth_mse3d", "nees",
                   "detection_rate_min", "config_digest")


def cmd_ablate(args) -> int:
    base = _config(args)
    seeds = [args.seed if args.seed is not None else int(base.seeds.get("world", 0))]
    if args.seeds:
        seeds = list(range(seeds[0], seeds[0] + args.seeds))
    names = [args.variant] if args.variant else None
    if names and names[0] not in variant_names(base):
        raise ConfigError([f"--variant: unknown variant {names[0]!r}"])
    rows, reports = [], []
    for seed in seeds:
        for r in run_ablation_suite(base.with_seed(seed), names):
            reports.append(r.to_dict())
            rates = [v for v in r.detection_rates.values() if not math.isnan(v)]
            rows.append((seed, r.variant, r.mse2d, r.mse3d, r.truth_mse2d, r.truth_mse3d, r.nees,
                         min(rates) if rates else math.nan, r.config_digest))
            print(f"seed {seed} {r.variant:>10}: mse3d={r.mse3d:.4f} rates={r.detection_rates}")
    out = _out_dir(args)
    lines = [",".join(SUMMARY_COLUMNS)]
    for row in rows:
        lines.append(",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in row))
    atomic_write(out / "ablation.csv", "\n".join(lines) + "\n")
    atomic_write(out / "reports.json", _dumps(reports))
    return EXIT_OK


def cmd_characterize(args) -> int:
    cfg = _config(args)
    model = cfg.detector_model()
    rng = np.random.default_rng(args.seed if args.seed is not None else int(cfg.seeds.get("detector", 0)))
    samples = synthetic_detections(model, args.samples, args.relative_height, rng)
    stats = characterize_noise(samples)
    out = _out_dir(args)
    result = {
        "relative_height": args.relative_height,
        "n_samples": stats.n_samples,
        "variances": stats.variances,
        "configured_variances": dict(zip(("top", "bottom", "left", "right"), model.variances)),
        "means": stats.means,
        "skewness": stats.skewness,
        "excess_kurtosis": stats.excess_kurtosis,
        "correlations": stats.correlations,
    }
    atomic_write(out / "noise.json", _dumps(result))
    errors = relative_errors(samples)
    atomic_write(out / "noise_errors.csv",
                 "top,bottom,left,right\n" + "".join(",".join(f"{v:.9g}" for v in row) + "\n" for row in errors))
    for side, v in stats.variances.items():
        print(f"{side:>6}: variance {v:.5f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = _config(args)
    if args.variant:
        cfg = variant_config(cfg, args.variant)
    try:
        runlog = RunLog.read(args.runlog)
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"cannot read {args.runlog}: {exc}") from exc
    report = metrics_report(runlog, cfg, args.variant or "online", cfg.scored())
    text = _dumps(report.to_dict())
    if args.out or os.environ.get(OUT_ENV):
        atomic_write(_out_dir(args) / "metrics.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcdt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML scenario file (defaults reproduce the field setup)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        sp.add_argument("--seed", type=int, help="seed for every random stream, overrides the config")

    sp = sub.add_parser("run", help="simulate one scenario")
    common(sp)
    sp.add_argument("--variant", help="online, no_spbc, no_as_roi or single_<agent>")
    sp.add_argument("--trace", action="store_true", help="also write the message trace")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="run the ablation variants")
    common(sp)
    sp.add_argument("--variant", help="restrict to one variant")
    sp.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("characterize", help="detector noise statistics")
    common(sp)
    sp.add_argument("--samples", type=int, default=10000)
    sp.add_argument("--relative-height", type=float, default=0.5)
    sp.set_defaults(func=cmd_characterize)

    sp = sub.add_parser("metrics", help="score a run log")
    common(sp)
    sp.add_argument("runlog")
    sp.add_argument("--variant", help="variant the log was produced with")
    sp.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (MetricsError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
