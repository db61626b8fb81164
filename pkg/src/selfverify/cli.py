"""Command line front end: extract, evaluate, ablate, report, cache.

Exit codes: 0 success, 2 bad usage or configuration, 3 unreadable or
invalid input artifact (dataset, run dir, script, store), 4 run and
dataset disagree about which documents exist, 5 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .backend import (
    Backend,
    BackendError,
    CachingBackend,
    HttpBackend,
    HttpConfig,
    MockBackend,
    RecordBackend,
    ReplayBackend,
    ResponseStore,
    StoreCorrupt,
    load_script,
)
from .core import TASKS, TaskKind, normalize, task_by_name
from .data import (
    DatasetRecord,
    FormatError,
    RunExists,
    demo_pool_from_records,
    emit_report,
    load_dataset,
    load_run,
    make_manifest,
    records_to_documents,
    write_run,
)
from .evaluation import (
    DocMetrics,
    aggregate_variants,
    evaluate_doc,
    filter_values,
    macro_average,
    render_dsv,
    render_text_table,
    rows_to_records,
    status_accuracy,
    top_k_codes,
)
from .pipeline import (
    ABLATION_PRESETS,
    OPTIONAL_STEPS,
    PipelineConfig,
    run_batch,
)
from .prompts import catalog_version

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4
EXIT_BACKEND = 5

# PipelineConfig fields a YAML config file may set; flags win over these.
_CONFIG_KEYS = (
    "model_id",
    "steps",
    "demonstrations_k",
    "omission_min_iters",
    "omission_max_iters",
    "icd_mapping",
    "temperature",
    "max_output_tokens_extract",
    "max_output_tokens_prune",
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_steps(raw: str) -> tuple[str, ...]:
    text = raw.strip().lower()
    if text in ("none", ""):
        return ()
    if text == "full":
        return OPTIONAL_STEPS
    wanted = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [w for w in wanted if w not in OPTIONAL_STEPS]
    if unknown:
        raise CliError(
            EXIT_USAGE,
            f"unknown steps {unknown}; choose from {list(OPTIONAL_STEPS)}, 'full', or 'none'",
        )
    return tuple(s for s in OPTIONAL_STEPS if s in wanted)


def _parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"seeds must be comma-separated integers, got {raw!r}")
    if not seeds:
        raise CliError(EXIT_USAGE, "at least one seed is required")
    return seeds


def _task(name: str) -> TaskKind:
    try:
        return task_by_name(name)
    except KeyError as exc:
        raise CliError(EXIT_USAGE, str(exc))


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read config file: {exc}")
    except yaml.YAMLError as exc:
        raise CliError(EXIT_USAGE, f"config file is not valid YAML: {exc}")
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise CliError(EXIT_USAGE, "config file must be a YAML mapping")
    unknown = sorted(set(loaded) - set(_CONFIG_KEYS))
    if unknown:
        raise CliError(
            EXIT_USAGE, f"unknown config keys {unknown}; known: {list(_CONFIG_KEYS)}"
        )
    return loaded


def _pipeline_config(args) -> PipelineConfig:
    settings = _read_config_file(getattr(args, "config", None))
    if isinstance(settings.get("steps"), list):
        settings["steps"] = tuple(settings["steps"])
    if getattr(args, "steps", None) is not None:
        settings["steps"] = _parse_steps(args.steps)
    if getattr(args, "model", None) is not None:
        settings["model_id"] = args.model
    if getattr(args, "demos", None) is not None:
        settings["demonstrations_k"] = args.demos
    try:
        return PipelineConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"bad pipeline configuration: {exc}")


def _load_records(args) -> tuple[list[DatasetRecord], list[str]]:
    path = Path(args.dataset)
    try:
        records, warnings = load_dataset(path, lenient=getattr(args, "lenient", False))
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"dataset not found: {path}")
    except FormatError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}")
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return records, warnings


def _store(args) -> ResponseStore:
    if not getattr(args, "cache", None):
        raise CliError(EXIT_USAGE, f"--cache is required for backend {args.backend!r}")
    try:
        return ResponseStore(args.cache)
    except StoreCorrupt as exc:
        raise CliError(EXIT_DATA, f"response store is corrupt: {exc}")


def _mock_backend(args) -> MockBackend:
    if not getattr(args, "script", None):
        raise CliError(EXIT_USAGE, "--script is required for the mock backend")
    try:
        steps = load_script(args.script)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"script not found: {args.script}")
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"bad script file: {exc}")
    return MockBackend(steps, default=args.mock_default)


def make_backend(args) -> Backend:
    """Build the backend named by --backend from the relevant flags."""
    kind = args.backend
    if kind == "mock":
        backend: Backend = _mock_backend(args)
        if getattr(args, "cache", None):
            backend = CachingBackend(backend, _store(args))
        return backend
    if kind == "replay":
        return ReplayBackend(_store(args))
    if kind in ("http", "record"):
        base: Backend
        if getattr(args, "script", None):
            base = _mock_backend(args)
        else:
            if not getattr(args, "endpoint", None):
                raise CliError(
                    EXIT_USAGE, f"--endpoint (or --script) is required for backend {kind!r}"
                )
            base = HttpBackend(HttpConfig(base_url=args.endpoint))
        if kind == "record":
            return RecordBackend(base, _store(args))
        if getattr(args, "cache", None):
            return CachingBackend(base, _store(args))
        return base
    raise CliError(EXIT_USAGE, f"unknown backend {kind!r}")


def _run_over_dataset(args, config, task, records, backend, seeds, megaprompt):
    documents = records_to_documents(records, task)
    if not documents:
        raise CliError(EXIT_DATA, "dataset has no eval-split documents")
    demo_pool = demo_pool_from_records(records, task)
    needed = config.resolved_k(task)
    if needed > len(demo_pool):
        raise CliError(
            EXIT_USAGE,
            f"{needed} demonstrations requested but the demo-pool split has "
            f"only {len(demo_pool)} documents",
        )
    return run_batch(
        backend,
        config,
        documents,
        seeds=seeds,
        demo_pool=demo_pool or None,
        workers=args.workers,
        megaprompt=megaprompt,
    )


def cmd_extract(args) -> int:
    task = _task(args.task)
    config = _pipeline_config(args)
    records, _ = _load_records(args)
    backend = make_backend(args)
    seeds = _parse_seeds(args.seeds)
    results = _run_over_dataset(args, config, task, records, backend, seeds, args.megaprompt)
    out_dir = Path(args.out)
    manifest = make_manifest(
        run_id=out_dir.name,
        task=task,
        backend=args.backend,
        config_description=config.describe(task),
        seeds=seeds,
        workers=args.workers,
        catalog_version=catalog_version(),
        dataset=str(args.dataset),
        n_documents=len({r.doc_id for r in results}),
        megaprompt=args.megaprompt,
    )
    try:
        write_run(out_dir, manifest, results, include_traces=not args.no_traces)
    except RunExists:
        raise CliError(EXIT_USAGE, f"run directory already exists: {out_dir}")
    print(f"wrote {len(results)} results to {out_dir}")
    return EXIT_OK


def _gold_maps(records) -> tuple[dict[str, list[str]], dict[str, dict[str, str | None]]]:
    values: dict[str, list[str]] = {}
    statuses: dict[str, dict[str, str | None]] = {}
    for record in records:
        values[record.doc_id] = record.gold_values()
        statuses[record.doc_id] = {
            normalize(item.value): (item.status.value if item.status else None)
            for item in record.gold
        }
    return values, statuses


def cmd_evaluate(args) -> int:
    try:
        manifest, run_records = load_run(args.run)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"run directory not found or incomplete: {args.run}")
    except (json.JSONDecodeError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"run directory is corrupt: {exc}")
    records, _ = _load_records(args)
    gold_values, gold_statuses = _gold_maps(records)

    missing = sorted({r["doc_id"] for r in run_records} - set(gold_values))
    if missing:
        raise CliError(
            EXIT_MISMATCH,
            f"run contains documents absent from the dataset: {missing[:5]}"
            + ("..." if len(missing) > 5 else ""),
        )

    allowed: set[str] | None = None
    if args.top_k is not None:
        allowed = set(top_k_codes(gold_values.values(), k=args.top_k))

    by_seed: dict[int, list[DocMetrics]] = {}
    status_pairs: list[float] = []
    for record in run_records:
        predicted = [item["value"] for item in record["final"]]
        gold = gold_values[record["doc_id"]]
        if allowed is not None:
            predicted = filter_values(predicted, allowed)
            gold = filter_values(gold, allowed)
        metrics = evaluate_doc(record["doc_id"], predicted, gold)
        by_seed.setdefault(record["seed"], []).append(metrics)
        if args.per_doc:
            print(
                f"seed={record['seed']} doc={record['doc_id']} "
                f"P={metrics.precision:.3f} R={metrics.recall:.3f} F1={metrics.f1:.3f}"
            )
        if args.status:
            predicted_status = {
                item["value"]: item["status"] for item in record["final"]
            }
            accuracy = status_accuracy(predicted_status, gold_statuses[record["doc_id"]])
            if accuracy is not None:
                status_pairs.append(accuracy)

    macros = [macro_average(by_seed[seed]) for seed in sorted(by_seed)]
    row = aggregate_variants({manifest.get("run_id", "run"): macros})[0]
    print(render_text_table([row]))
    if args.status:
        if status_pairs:
            print(f"Status accuracy: {sum(status_pairs) / len(status_pairs):.3f}")
        else:
            print("Status accuracy: n/a (no shared values)")
    if args.json:
        Path(args.json).write_text(
            json.dumps(rows_to_records([row]), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def cmd_ablate(args) -> int:
    task = _task(args.task)
    records, _ = _load_records(args)
    gold_values, _ = _gold_maps(records)
    seeds = _parse_seeds(args.seeds)
    base_config = _pipeline_config(args)

    variants: dict[str, tuple[str, ...] | None] = dict(ABLATION_PRESETS)
    if args.with_megaprompt:
        variants["Megaprompt"] = None

    shared_backend = None if args.backend == "mock" else make_backend(args)
    per_variant = {}
    for name, steps in variants.items():
        macros = []
        for seed in seeds:
            config = base_config if steps is None else _replace_steps(base_config, steps)
            backend = shared_backend or make_backend(args)
            results = _run_over_dataset(
                args, config, task, records, backend, [seed], megaprompt=steps is None
            )
            per_doc = [
                evaluate_doc(r.doc_id, [i.value for i in r.final], gold_values[r.doc_id])
                for r in results
            ]
            macros.append(macro_average(per_doc))
        per_variant[name] = macros

    rows = aggregate_variants(per_variant)
    print(render_text_table(rows))
    if args.dsv:
        Path(args.dsv).write_text(render_dsv(rows), encoding="utf-8")
    if args.json:
        Path(args.json).write_text(
            json.dumps(rows_to_records(rows), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def _replace_steps(config: PipelineConfig, steps: tuple[str, ...]) -> PipelineConfig:
    from dataclasses import replace

    return replace(config, steps=steps)


def cmd_report(args) -> int:
    try:
        path = emit_report(args.run, args.out)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"run directory not found or incomplete: {args.run}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_cache(args) -> int:
    try:
        store = ResponseStore(args.cache)
        if args.action == "stats":
            print(json.dumps(store.stats(), indent=2, sort_keys=True))
        elif args.action == "purge":
            print(f"removed {store.purge()} entries")
        elif args.action == "export":
            added = ResponseStore(args.into).merge_from(args.cache)
            print(f"exported {added} new entries to {args.into}")
        elif args.action == "import":
            added = store.merge_from(getattr(args, "from"))
            print(f"imported {added} new entries")
    except StoreCorrupt as exc:
        raise CliError(EXIT_DATA, f"response store is corrupt: {exc}")
    return EXIT_OK


def _add_backend_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--backend",
        choices=["mock", "http", "record", "replay"],
        default="mock",
        help="model backend (default: mock)",
    )
    sub.add_argument("--script", help="JSONL script for the mock backend")
    sub.add_argument(
        "--mock-default", help="fallback response when no script step matches"
    )
    sub.add_argument("--cache", help="response store file (record/replay/caching)")
    sub.add_argument("--endpoint", help="base URL for the http backend")
    sub.add_argument("--model", help="model id sent to the backend")


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--dataset", required=True, help="JSONL dataset path")
    sub.add_argument("--config", help="YAML file with pipeline settings")
    sub.add_argument("--steps", help="comma list of omission,evidence,prune; or full/none")
    sub.add_argument("--demos", type=int, help="demonstration count override")
    sub.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
    sub.add_argument("--workers", type=int, default=4, help="thread count (default: 4)")
    sub.add_argument("--lenient", action="store_true", help="skip malformed dataset lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfverify",
        description="Few-shot clinical extraction with chained self-verification.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    extract = commands.add_parser("extract", help="run the pipeline over a dataset")
    extract.add_argument("--task", required=True, choices=sorted(TASKS))
    _add_run_flags(extract)
    _add_backend_flags(extract)
    extract.add_argument("--out", required=True, help="run directory to create")
    extract.add_argument(
        "--megaprompt",
        action="store_true",
        help="single-call variant: verification folded into the first prompt",
    )
    extract.add_argument(
        "--no-traces", action="store_true", help="omit prompts/responses from results"
    )
    extract.set_defaults(func=cmd_extract)

    evaluate = commands.add_parser("evaluate", help="score a run against its dataset")
    evaluate.add_argument("--run", required=True, help="run directory")
    evaluate.add_argument("--dataset", required=True, help="JSONL dataset path")
    evaluate.add_argument("--lenient", action="store_true", help="skip malformed dataset lines")
    evaluate.add_argument(
        "--top-k", type=int, help="restrict scoring to the k most frequent gold values"
    )
    evaluate.add_argument("--per-doc", action="store_true", help="print per-document scores")
    evaluate.add_argument("--status", action="store_true", help="also report status accuracy")
    evaluate.add_argument("--json", help="write aggregate metrics to this JSON file")
    evaluate.set_defaults(func=cmd_evaluate)

    ablate = commands.add_parser("ablate", help="compare step bundles on one dataset")
    ablate.add_argument("--task", required=True, choices=sorted(TASKS))
    _add_run_flags(ablate)
    _add_backend_flags(ablate)
    ablate.add_argument(
        "--with-megaprompt", action="store_true", help="add the single-call variant"
    )
    ablate.add_argument("--dsv", help="write the table to this delimiter-separated file")
    ablate.add_argument("--json", help="write the table to this JSON file")
    ablate.set_defaults(func=cmd_ablate)

    report = commands.add_parser("report", help="render the HTML audit report for a run")
    report.add_argument("--run", required=True, help="run directory")
    report.add_argument("--out", help="output path (default: <run>/report.html)")
    report.set_defaults(func=cmd_report)

    cache = commands.add_parser("cache", help="inspect or edit a response store")
    cache.add_argument("action", choices=["stats", "purge", "export", "import"])
    cache.add_argument("--cache", required=True, help="response store file")
    cache.add_argument("--into", help="destination store for export")
    cache.add_argument("--from", dest="from", help="source store for import")
    cache.set_defaults(func=cmd_cache)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "cache":
        if args.action == "export" and not args.into:
            parser.error("cache export requires --into")
        if args.action == "import" and not getattr(args, "from"):
            parser.error("cache import requires --from")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    raise SystemExit(main())
