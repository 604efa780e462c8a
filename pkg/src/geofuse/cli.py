"""Command-line entry point: ``geofuse run | gradcheck | heatmap | gen-data``.

Failures print a JSON object ``{"error": ..., "kind": ..., "field": ...}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    CheckpointMissing,
    ConfigError,
    dataset_manifest,
    export_heatmaps,
    load_config,
    run_experiment,
    seeds_from_env,
    write_json,
)
from .fusion import Variant
from .gradcheck import PIPELINES, gradcheck
from .synthdata import make_dataset, write_jsonl
from .tensor import ContractError, DimensionError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3


def _error(exc: BaseException, kind: str, out_dir: Path | None = None) -> dict:
    err = {"error": str(exc), "kind": kind}
    if isinstance(exc, ConfigError):
        err["field"] = exc.field
    text = json.dumps(err, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return err


def _csv_list(text: str, cast, name: str):
    try:
        return tuple(cast(x.strip()) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from exc


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.variants:
        cfg = cfg.replace(variants=_csv_list(args.variants, Variant, "variants"))
    if args.seeds:
        cfg = cfg.replace(seeds=_csv_list(args.seeds, int, "seeds"))
    cfg = cfg.replace(seeds=seeds_from_env(cfg.seeds))
    if args.qformer_static:
        cfg = cfg.replace(model=dataclasses.replace(cfg.model, qformer_static=True))
    if args.gradcheck and cmd_gradcheck(args) != EXIT_OK:
        return EXIT_FAILED
    out = Path(args.out or cfg.output_dir)
    report = run_experiment(cfg, out, timestamps=not args.no_timestamps, jobs=args.jobs)
    for v, a in report["aggregate"].items():
        t = a["test_acc"]
        print(f"variant {v}: test {t['mean']:.4f} +/- {t['std']:.4f} (n={t['n']})")
    if report["partial"]:
        _error(RuntimeError(f"runs failed: {', '.join(report['failed_runs'])}"), "diverged", out)
        return EXIT_PARTIAL
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for name in PIPELINES:
        rep = gradcheck(name, tol=args.tol)
        ok &= rep.passed
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name:16s} max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_path}"
              + (f" nonfinite={rep.nonfinite_path}" if rep.nonfinite_path else ""))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_heatmap(args) -> int:
    written = export_heatmaps(args.run, args.sample, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    train_set, test_set = make_dataset(cfg.scene, cfg.data.n_train, cfg.data.n_test, cfg.data.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, [(s, "train") for s in train_set] + [(s, "test") for s in test_set])
    write_json(out.with_name(out.stem + ".manifest.json"),
               dataset_manifest(cfg.scene, cfg.data, train_set, test_set))
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geofuse", description="Geometry/vision token fusion experiments.")
    p.add_argument("--gradcheck", action="store_true", help="run the gradient-check suite and exit")
    p.add_argument("--tol", type=float, default=1e-4, help="gradcheck tolerance")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="run the ablation grid (and optional sweep) from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (defaults to the config's output_dir)")
    r.add_argument("--seeds", help="comma-separated seed list overriding the config")
    r.add_argument("--variants", help="comma-separated variants (a-f) overriding the config")
    r.add_argument("--no-timestamps", action="store_true", help="omit wall-clock fields from the report")
    r.add_argument("--qformer-static", action="store_true", help="use the query-transformer pipeline on static scenes")
    r.add_argument("--gradcheck", action="store_true", help="run the gradient-check suite before training")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.add_argument("--tol", type=float, default=1e-4)
    r.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log training progress")

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    g.add_argument("--tol", type=float, default=1e-4)

    h = sub.add_parser("heatmap", help="export relevance and gate heatmaps for one test sample")
    h.add_argument("--run", required=True, help="a run directory containing checkpoint/ and dataset.json")
    h.add_argument("--sample", type=int, required=True)
    h.add_argument("--out", help="destination directory")

    d = sub.add_parser("gen-data", help="write the configured dataset as JSON lines")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    return p


COMMANDS = {"run": cmd_run, "gradcheck": cmd_gradcheck, "heatmap": cmd_heatmap, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command is None:
        if args.gradcheck:
            return cmd_gradcheck(args)
        parser.print_help()
        return EXIT_USAGE
    out_dir = Path(args.out) if args.command == "run" and args.out else None
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _error(exc, "config", out_dir)
        return EXIT_USAGE
    except CheckpointMissing as exc:
        _error(exc, "missing_file", out_dir)
        return EXIT_FAILED
    except (ContractError, DimensionError) as exc:
        _error(exc, "contract", out_dir)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
