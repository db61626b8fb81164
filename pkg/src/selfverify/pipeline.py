"""The extraction pipeline: original pass, omission loop, grounding, prune.

Each document flows through up to four chained model calls plus an
optional code-mapping call for ICD tasks:

  1. original    first extraction from the input text
  2. omission    "what did you miss?" repeated to a fixpoint
  3. evidence    one verbatim quote per item, located to char offsets
  4. prune       per-item keep/discard verdict, optionally quote-grounded
  5. icd map     diagnosis wording -> ICD code (ICD tasks, after prune)

A separate single-call variant packs the verification instructions into
the original prompt instead of making follow-up calls.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backend import Backend, LlmRequest
from .core import (
    Document,
    EvidenceSpan,
    ExtractedItem,
    ExtractionSet,
    Origin,
    TaskFamily,
    TaskKind,
    merge,
    normalize,
)
from .parsing import (
    AmbiguousVerdict,
    locate_quote,
    parse_bulleted_list,
    parse_evidence,
    parse_icd_codes,
    parse_status_pairs,
    parse_verdict,
)
from .prompts import (
    DEFAULT_DEMONSTRATIONS,
    DemoExample,
    build_evidence_prompt,
    build_icd_map_prompt,
    build_megaprompt,
    build_omission_prompt,
    build_original_prompt,
    build_prune_prompt,
    sample_demonstrations,
)

OPTIONAL_STEPS = ("omission", "evidence", "prune")

# Named step bundles compared by the ablation runner. "prune" without
# "evidence" asks the verdict question without a supporting quote.
ABLATION_PRESETS: dict[str, tuple[str, ...]] = {
    "Original": (),
    "+ Omission": ("omission",),
    "+ Prune": ("prune",),
    "+ Full SV": ("omission", "evidence", "prune"),
}

DEFAULT_OMISSION_MIN_ITERS_LONG = 5
DEFAULT_OMISSION_MAX_ITERS = 10


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that decides pipeline behavior, independent of the task.

    Fields left None resolve per task: demonstrations default to 5 for
    short-input tasks and 0 for long ones; the omission floor defaults to 5
    passes for long-input tasks and 1 otherwise; code mapping defaults to
    on for ICD tasks.
    """

    model_id: str = "default-model"
    steps: tuple[str, ...] = OPTIONAL_STEPS
    demonstrations_k: int | None = None
    omission_min_iters: int | None = None
    omission_max_iters: int = DEFAULT_OMISSION_MAX_ITERS
    icd_mapping: bool | None = None
    temperature: float = 0.1
    max_output_tokens_extract: int = 1024
    max_output_tokens_prune: int = 256
    catalog_root: Path | None = None

    def __post_init__(self) -> None:
        unknown = [s for s in self.steps if s not in OPTIONAL_STEPS]
        if unknown:
            raise ValueError(f"unknown steps {unknown}; valid: {list(OPTIONAL_STEPS)}")
        if len(set(self.steps)) != len(self.steps):
            raise ValueError("steps must not repeat")
        if self.demonstrations_k is not None and self.demonstrations_k < 0:
            raise ValueError("demonstrations_k must be >= 0")
        if self.omission_min_iters is not None and self.omission_min_iters < 1:
            raise ValueError("omission_min_iters must be >= 1")
        if self.omission_max_iters < 1:
            raise ValueError("omission_max_iters must be >= 1")
        if self.omission_min_iters is not None and self.omission_max_iters < self.omission_min_iters:
            raise ValueError("omission_max_iters must be >= omission_min_iters")

    def resolved_k(self, task: TaskKind) -> int:
        if self.demonstrations_k is not None:
            return self.demonstrations_k
        return 0 if task.long_input else DEFAULT_DEMONSTRATIONS

    def resolved_min_iters(self, task: TaskKind) -> int:
        if self.omission_min_iters is not None:
            return self.omission_min_iters
        return DEFAULT_OMISSION_MIN_ITERS_LONG if task.long_input else 1

    def resolved_icd_mapping(self, task: TaskKind) -> bool:
        if self.icd_mapping is not None:
            return self.icd_mapping
        return task.family is TaskFamily.ICD_CODE

    def describe(self, task: TaskKind) -> dict:
        """Effective settings for this task, for run manifests."""
        return {
            "model_id": self.model_id,
            "steps": list(self.steps),
            "demonstrations_k": self.resolved_k(task),
            "omission_min_iters": self.resolved_min_iters(task),
            "omission_max_iters": self.omission_max_iters,
            "icd_mapping": self.resolved_icd_mapping(task),
            "temperature": self.temperature,
            "max_output_tokens_extract": self.max_output_tokens_extract,
            "max_output_tokens_prune": self.max_output_tokens_prune,
        }


@dataclass(frozen=True)
class StepTrace:
    """One model call: prompt in, text out, what the parser made of it.

    Traces deliberately carry no timing, so a replayed run serializes
    byte-identically to the run that recorded it.
    """

    step: str
    prompt: str
    response: str
    temperature: float
    summary: str = ""
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class PipelineResult:
    doc_id: str
    text: str
    task_name: str
    seed: int
    final: ExtractionSet
    pruned: tuple[ExtractedItem, ...] = ()
    pre_prune: ExtractionSet = field(default_factory=ExtractionSet.empty)
    traces: tuple[StepTrace, ...] = ()
    warnings: tuple[str, ...] = ()
    omission_iters: int = 0
    megaprompt: bool = False


class ExtractionPipeline:
    """Runs the chained extraction steps against one backend."""

    def __init__(self, backend: Backend, config: PipelineConfig | None = None):
        self.backend = backend
        self.config = config or PipelineConfig()

    def _call(self, prompt: str, max_tokens: int) -> str:
        request = LlmRequest.chat(
            self.config.model_id,
            prompt,
            temperature=self.config.temperature,
            max_output_tokens=max_tokens,
        )
        return self.backend.complete(request).text

    def _parse_items(self, task: TaskKind, text: str, origin: Origin) -> tuple[list[ExtractedItem], list[str]]:
        if task.wants_status:
            pairs, warnings = parse_status_pairs(text)
            items = [
                ExtractedItem.from_raw(raw, status=status, origin=origin)
                for raw, status in pairs
            ]
            return items, warnings
        raws = parse_bulleted_list(text)
        return [ExtractedItem.from_raw(raw, origin=origin) for raw in raws], []

    def _demos_for(self, task: TaskKind, seed: int, demo_pool: list[DemoExample] | None) -> list[DemoExample]:
        k = self.config.resolved_k(task)
        if k == 0:
            return []
        if not demo_pool:
            raise ValueError(
                f"task {task.name} wants {k} demonstrations but no demo pool was provided"
            )
        return sample_demonstrations(demo_pool, k, seed)

    def run(
        self,
        document: Document,
        seed: int = 0,
        demo_pool: list[DemoExample] | None = None,
    ) -> PipelineResult:
        task = document.task
        cfg = self.config
        root = cfg.catalog_root
        traces: list[StepTrace] = []
        warnings: list[str] = []

        demos = self._demos_for(task, seed, demo_pool)
        prompt = build_original_prompt(task, document.text, demos, root)
        response = self._call(prompt, cfg.max_output_tokens_extract)
        items, parse_warnings = self._parse_items(task, response, Origin.original())
        current, _, merge_warnings = merge(ExtractionSet.empty(), items)
        step_warnings = tuple(parse_warnings + merge_warnings)
        traces.append(
            StepTrace(
                step="original",
                prompt=prompt,
                response=response,
                temperature=cfg.temperature,
                summary=f"{len(current)} items",
                warnings=step_warnings,
            )
        )
        warnings.extend(step_warnings)

        omission_iters = 0
        if "omission" in cfg.steps:
            current, omission_iters = self._omission_loop(document, current, traces, warnings)

        if "evidence" in cfg.steps:
            current = self._evidence_step(document, current, traces, warnings)

        pre_prune = current
        pruned: tuple[ExtractedItem, ...] = ()
        if "prune" in cfg.steps:
            current, pruned = self._prune_step(document, current, traces, warnings)

        if cfg.resolved_icd_mapping(task) and task.family is TaskFamily.ICD_CODE:
            current = self._icd_map_step(document, current, traces, warnings)

        return PipelineResult(
            doc_id=document.id,
            text=document.text,
            task_name=task.name,
            seed=seed,
            final=current,
            pruned=pruned,
            pre_prune=pre_prune,
            traces=tuple(traces),
            warnings=tuple(warnings),
            omission_iters=omission_iters,
        )

    def _omission_loop(
        self,
        document: Document,
        current: ExtractionSet,
        traces: list[StepTrace],
        warnings: list[str],
    ) -> tuple[ExtractionSet, int]:
        task = document.task
        cfg = self.config
        min_iters = cfg.resolved_min_iters(task)
        iters = 0
        while True:
            iters += 1
            prompt = build_omission_prompt(task, document.text, current, cfg.catalog_root)
            response = self._call(prompt, cfg.max_output_tokens_extract)
            items, parse_warnings = self._parse_items(task, response, Origin.omission(iters))
            current, new_count, merge_warnings = merge(current, items)
            step_warnings = tuple(parse_warnings + merge_warnings)
            traces.append(
                StepTrace(
                    step=f"omission[{iters}]",
                    prompt=prompt,
                    response=response,
                    temperature=cfg.temperature,
                    summary=f"added {new_count} new",
                    warnings=step_warnings,
                )
            )
            warnings.extend(step_warnings)
            if (iters >= min_iters and new_count == 0) or iters >= cfg.omission_max_iters:
                return current, iters

    def _evidence_step(
        self,
        document: Document,
        current: ExtractionSet,
        traces: list[StepTrace],
        warnings: list[str],
    ) -> ExtractionSet:
        task = document.task
        cfg = self.config
        if len(current) == 0:
            traces.append(
                StepTrace(
                    step="evidence",
                    prompt="",
                    response="",
                    temperature=cfg.temperature,
                    summary="skipped: no items",
                )
            )
            return current
        prompt = build_evidence_prompt(task, document.text, current, cfg.catalog_root)
        response = self._call(prompt, cfg.max_output_tokens_extract)
        mapping, parse_warnings = parse_evidence(response, list(current.keys()))
        located = 0
        updated: list[ExtractedItem] = []
        for item in current:
            quote = mapping.get(item.key)
            if quote is None:
                updated.append(
                    replace(item, evidence=EvidenceSpan.not_found(""), flags=item.flags + ("no_evidence_line",))
                )
                continue
            span = locate_quote(document.text, quote)
            if span.located:
                located += 1
                updated.append(replace(item, evidence=span))
            else:
                updated.append(replace(item, evidence=span, flags=item.flags + ("quote_not_found",)))
        current = ExtractionSet(tuple(updated))
        step_warnings = tuple(parse_warnings)
        traces.append(
            StepTrace(
                step="evidence",
                prompt=prompt,
                response=response,
                temperature=cfg.temperature,
                summary=f"{located} of {len(current)} quotes located",
                warnings=step_warnings,
            )
        )
        warnings.extend(step_warnings)
        return current

    def _prune_step(
        self,
        document: Document,
        current: ExtractionSet,
        traces: list[StepTrace],
        warnings: list[str],
    ) -> tuple[ExtractionSet, tuple[ExtractedItem, ...]]:
        task = document.task
        cfg = self.config
        kept: list[ExtractedItem] = []
        pruned: list[ExtractedItem] = []
        for item in current:
            quote = item.evidence.quote if item.evidence and item.evidence.quote else None
            prompt = build_prune_prompt(task, document.text, item.value, quote, cfg.catalog_root)
            response = self._call(prompt, cfg.max_output_tokens_prune)
            step_warnings: tuple[str, ...] = ()
            try:
                keep = parse_verdict(response)
                summary = "keep" if keep else "remove"
            except AmbiguousVerdict:
                keep = True
                summary = "ambiguous, kept"
                step_warnings = (f"ambiguous verdict for {item.key!r}; keeping",)
                item = replace(item, flags=item.flags + ("ambiguous_verdict",))
            if keep:
                kept.append(item)
            else:
                reason = response.strip().splitlines()[0][:200] if response.strip() else "removed"
                pruned.append(replace(item, pruned=True, prune_reason=reason))
            traces.append(
                StepTrace(
                    step=f"prune[{item.key}]",
                    prompt=prompt,
                    response=response,
                    temperature=cfg.temperature,
                    summary=summary,
                    warnings=step_warnings,
                )
            )
            warnings.extend(step_warnings)
        return ExtractionSet(tuple(kept)), tuple(pruned)

    def _icd_map_step(
        self,
        document: Document,
        current: ExtractionSet,
        traces: list[StepTrace],
        warnings: list[str],
    ) -> ExtractionSet:
        task = document.task
        cfg = self.config
        if len(current) == 0:
            traces.append(
                StepTrace(
                    step="icd_map",
                    prompt="",
                    response="",
                    temperature=cfg.temperature,
                    summary="skipped: no items",
                )
            )
            return current
        prompt = build_icd_map_prompt(task, current, cfg.catalog_root)
        response = self._call(prompt, cfg.max_output_tokens_extract)
        step_warnings: list[str] = []
        code_by_key: dict[str, str | None] = {}
        for line in parse_bulleted_list(response):
            left, sep, right = line.partition(":")
            key = normalize(left if sep else line)
            if key not in current.key_set():
                contains = [
                    k for k in current.keys() if len(key) >= 3 and (key in k or k in key)
                ]
                if len(contains) == 1:
                    key = contains[0]
                else:
                    step_warnings.append(f"code line for unknown diagnosis {left.strip()!r}")
                    continue
            codes = parse_icd_codes(right if sep else line, task.icd_version or 10)
            if key in code_by_key:
                step_warnings.append(f"duplicate code line for {key!r}; keeping the first")
                continue
            if codes:
                code_by_key[key] = codes[0]
            elif normalize(right) in ("none", "n/a", "na", "no code"):
                code_by_key[key] = None
            else:
                step_warnings.append(f"no code found on line for {key!r}")

        mapped: list[ExtractedItem] = []
        dropped = 0
        for item in current:
            if item.key not in code_by_key:
                mapped.append(replace(item, flags=item.flags + ("unmapped_code",)))
                continue
            code = code_by_key[item.key]
            if code is None:
                dropped += 1
                step_warnings.append(f"diagnosis {item.key!r} reported uncodable; dropped")
                continue
            mapped.append(
                ExtractedItem(
                    raw_value=code,
                    value=normalize(code),
                    status=item.status,
                    evidence=item.evidence,
                    origin=item.origin,
                    icd_code=code,
                    flags=item.flags,
                )
            )
        current, _, merge_warnings = merge(ExtractionSet.empty(), mapped)
        all_warnings = tuple(step_warnings + merge_warnings)
        traces.append(
            StepTrace(
                step="icd_map",
                prompt=prompt,
                response=response,
                temperature=cfg.temperature,
                summary=f"{len(current)} codes, {dropped} uncodable",
                warnings=all_warnings,
            )
        )
        warnings.extend(all_warnings)
        return current

    def run_megaprompt(
        self,
        document: Document,
        seed: int = 0,
        demo_pool: list[DemoExample] | None = None,
    ) -> PipelineResult:
        """Single-call baseline: verification folded into one prompt."""
        task = document.task
        cfg = self.config
        demos = self._demos_for(task, seed, demo_pool)
        prompt = build_megaprompt(task, document.text, demos, cfg.catalog_root)
        response = self._call(prompt, cfg.max_output_tokens_extract)
        items, parse_warnings = self._parse_items(task, response, Origin.megaprompt())
        current, _, merge_warnings = merge(ExtractionSet.empty(), items)
        traces = [
            StepTrace(
                step="megaprompt",
                prompt=prompt,
                response=response,
                temperature=cfg.temperature,
                summary=f"{len(current)} items",
                warnings=tuple(parse_warnings + merge_warnings),
            )
        ]
        warnings = list(parse_warnings + merge_warnings)
        if cfg.resolved_icd_mapping(task) and task.family is TaskFamily.ICD_CODE:
            current = self._icd_map_step(document, current, traces, warnings)
        return PipelineResult(
            doc_id=document.id,
            text=document.text,
            task_name=task.name,
            seed=seed,
            final=current,
            pre_prune=current,
            traces=tuple(traces),
            warnings=tuple(warnings),
            megaprompt=True,
        )


def run_batch(
    backend: Backend,
    config: PipelineConfig,
    documents: list[Document],
    seeds: list[int],
    demo_pool: list[DemoExample] | None = None,
    workers: int = 4,
    megaprompt: bool = False,
) -> list[PipelineResult]:
    """Run every (document, seed) pair, fanning out across worker threads.

    Results come back in deterministic (seed, document) order regardless of
    scheduling; the first backend failure aborts the batch.
    """
    pipeline = ExtractionPipeline(backend, config)
    jobs = [(seed, doc) for seed in seeds for doc in documents]

    def work(job: tuple[int, Document]) -> PipelineResult:
        seed, doc = job
        if megaprompt:
            return pipeline.run_megaprompt(doc, seed=seed, demo_pool=demo_pool)
        return pipeline.run(doc, seed=seed, demo_pool=demo_pool)

    if workers <= 1:
        return [work(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, jobs))
