#!/usr/bin/env python3
"""Reproduce the step-ablation table on the engineered offline corpus.

Each pipeline variant runs over the same 50 scripted notes; the table
shows the omission pass buying recall, the prune pass buying precision,
and the full chain landing the best F1. The single-call variant scores
exactly like the plain first pass because nothing acts on its appended
verification instructions.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from selfverify.evaluation import (
    aggregate_variants,
    evaluate_doc,
    macro_average,
    render_dsv,
    render_text_table,
)
from selfverify.pipeline import ABLATION_PRESETS, PipelineConfig, run_batch
from selfverify.synthetic import directional_backend, directional_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--dsv", help="also write the table to this TSV file")
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    documents, gold = directional_corpus()
    variants: dict[str, tuple[str, ...] | None] = dict(ABLATION_PRESETS)
    variants["Megaprompt"] = None

    per_variant = {}
    for name, steps in variants.items():
        macros = []
        for seed in seeds:
            config = PipelineConfig(steps=steps or (), demonstrations_k=0)
            results = run_batch(
                directional_backend(),
                config,
                documents,
                seeds=[seed],
                workers=args.workers,
                megaprompt=steps is None,
            )
            per_doc = [
                evaluate_doc(r.doc_id, [i.value for i in r.final], gold[r.doc_id])
                for r in results
            ]
            macros.append(macro_average(per_doc))
        per_variant[name] = macros

    rows = aggregate_variants(per_variant)
    print(render_text_table(rows))
    if args.dsv:
        Path(args.dsv).write_text(render_dsv(rows), encoding="utf-8")
        print(f"wrote {args.dsv}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
