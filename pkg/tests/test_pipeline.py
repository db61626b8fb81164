"""Tests for the chained extraction pipeline."""

from __future__ import annotations

import pytest

from selfverify.backend import FnBackend, MockBackend, ScriptStep
from selfverify.core import (
    Document,
    MatchKind,
    StatusLabel,
    clinical_trial_arm_task,
    icd_task,
    medication_status_task,
)
from selfverify.pipeline import (
    ABLATION_PRESETS,
    ExtractionPipeline,
    PipelineConfig,
    run_batch,
)
from selfverify.prompts import DemoExample

MED_DOC = Document(
    id="note-1",
    text="Patient takes aspirin 81 mg daily. Metformin was stopped last month.",
    task=medication_status_task(),
)


def med_backend(extra: list[ScriptStep] | None = None) -> MockBackend:
    steps = [
        ScriptStep(
            "List every medication",
            "- Aspirin 81 mg: Active\n- Metformin: stopped\n- Ibuprofen: Active",
        ),
        ScriptStep("missing from the list above", "None"),
        ScriptStep(
            "exact quote",
            '- aspirin 81 mg: "takes aspirin 81 mg daily"\n'
            '- metformin: "Metformin was stopped"\n'
            '- ibuprofen: "ibuprofen as needed"',
        ),
        ScriptStep("Candidate medication: aspirin 81 mg", "Yes"),
        ScriptStep("Candidate medication: metformin", "Yes, clearly stated."),
        ScriptStep("Candidate medication: ibuprofen", "No. The note never mentions it."),
    ]
    return MockBackend((extra or []) + steps)


class TestOriginalStep:
    def test_parses_items_and_status(self):
        pipeline = ExtractionPipeline(med_backend(), PipelineConfig(steps=(), demonstrations_k=0))
        result = pipeline.run(MED_DOC)
        assert result.final.keys() == ("aspirin 81 mg", "metformin", "ibuprofen")
        assert result.final.get("aspirin 81 mg").status is StatusLabel.ACTIVE
        assert result.final.get("metformin").status is StatusLabel.DISCONTINUED
        assert [t.step for t in result.traces] == ["original"]
        assert result.traces[0].temperature == 0.1
        assert str(result.final.get("metformin").origin) == "original"

    def test_original_dedups(self):
        backend = MockBackend(
            [ScriptStep("List every medication", "- Aspirin: Active\n- ASPIRIN.: Active")]
        )
        pipeline = ExtractionPipeline(backend, PipelineConfig(steps=(), demonstrations_k=0))
        result = pipeline.run(MED_DOC)
        assert result.final.keys() == ("aspirin",)


class TestOmissionLoop:
    def test_adds_items_until_fixpoint(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active"),
                ScriptStep("missing from the list above", "- Lisinopril: Active", once=True),
                ScriptStep("missing from the list above", "None"),
            ]
        )
        config = PipelineConfig(steps=("omission",), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        assert result.final.keys() == ("aspirin", "lisinopril")
        assert result.omission_iters == 2
        lisinopril = result.final.get("lisinopril")
        assert str(lisinopril.origin) == "omission[1]"
        assert [t.step for t in result.traces] == ["original", "omission[1]", "omission[2]"]

    def test_relisting_existing_items_is_a_fixpoint(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active"),
                ScriptStep("missing from the list above", "- aspirin: Active"),
            ]
        )
        config = PipelineConfig(steps=("omission",), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        assert result.final.keys() == ("aspirin",)
        assert result.omission_iters == 1

    def test_long_input_task_repeats_at_least_five_times(self):
        backend = MockBackend(
            [
                ScriptStep("List every diagnosis", "- copd"),
                ScriptStep("missing from the list above", "None"),
            ]
        )
        doc = Document(id="icd-1", text="Long note about copd.", task=icd_task(10))
        config = PipelineConfig(steps=("omission",), demonstrations_k=0, icd_mapping=False)
        result = ExtractionPipeline(backend, config).run(doc)
        assert result.omission_iters == 5

    def test_min_iters_override(self):
        backend = MockBackend(
            [
                ScriptStep("List every diagnosis", "- copd"),
                ScriptStep("missing from the list above", "None"),
            ]
        )
        doc = Document(id="icd-1", text="note", task=icd_task(10))
        config = PipelineConfig(
            steps=("omission",), demonstrations_k=0, icd_mapping=False, omission_min_iters=2
        )
        result = ExtractionPipeline(backend, config).run(doc)
        assert result.omission_iters == 2

    def test_max_iters_caps_a_never_ending_stream(self):
        counter = {"n": 0}

        def fn(request):
            if "missing from the list above" in request.text:
                counter["n"] += 1
                return f"- med{counter['n']}: Active"
            return "- Aspirin: Active"

        config = PipelineConfig(steps=("omission",), demonstrations_k=0)
        result = ExtractionPipeline(FnBackend(fn), config).run(MED_DOC)
        assert result.omission_iters == 10
        assert len(result.final) == 11

    def test_status_conflict_keeps_earliest_and_warns(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active"),
                ScriptStep("missing from the list above", "- aspirin: stopped", once=True),
                ScriptStep("missing from the list above", "None"),
            ]
        )
        config = PipelineConfig(steps=("omission",), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        assert result.final.get("aspirin").status is StatusLabel.ACTIVE
        assert any("status conflict" in w for w in result.warnings)


class TestEvidenceStep:
    def test_spans_attached_and_located(self):
        config = PipelineConfig(steps=("omission", "evidence"), demonstrations_k=0)
        result = ExtractionPipeline(med_backend(), config).run(MED_DOC)
        aspirin = result.final.get("aspirin 81 mg")
        assert aspirin.evidence.match_kind is MatchKind.EXACT
        assert MED_DOC.text[aspirin.evidence.start : aspirin.evidence.end] == (
            "takes aspirin 81 mg daily"
        )
        ibuprofen = result.final.get("ibuprofen")
        assert ibuprofen.evidence.match_kind is MatchKind.NOT_FOUND
        assert "quote_not_found" in ibuprofen.flags

    def test_missing_evidence_line_flagged(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active\n- Statin: Active"),
                ScriptStep("missing from the list above", "None"),
                ScriptStep("exact quote", '- aspirin: "takes aspirin 81 mg daily"'),
            ]
        )
        config = PipelineConfig(steps=("omission", "evidence"), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        statin = result.final.get("statin")
        assert "no_evidence_line" in statin.flags
        assert statin.evidence.match_kind is MatchKind.NOT_FOUND

    def test_no_items_skips_the_call(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "None"),
                ScriptStep("missing from the list above", "None"),
            ]
        )
        config = PipelineConfig(steps=("omission", "evidence"), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        assert len(result.final) == 0
        evidence_traces = [t for t in result.traces if t.step == "evidence"]
        assert evidence_traces[0].summary == "skipped: no items"


class TestPruneStep:
    def test_full_chain_prunes_unsupported_item(self):
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(med_backend(), config).run(MED_DOC)
        assert result.final.keys() == ("aspirin 81 mg", "metformin")
        assert len(result.pruned) == 1
        assert result.pruned[0].key == "ibuprofen"
        assert result.pruned[0].pruned
        assert result.pruned[0].prune_reason == "No. The note never mentions it."

    def test_partition_of_pre_prune(self):
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(med_backend(), config).run(MED_DOC)
        final_keys = set(result.final.keys())
        pruned_keys = {i.key for i in result.pruned}
        assert final_keys | pruned_keys == set(result.pre_prune.keys())
        assert not (final_keys & pruned_keys)

    def test_prune_prompt_includes_quote_when_evidence_ran(self):
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(med_backend(), config).run(MED_DOC)
        prune_traces = [t for t in result.traces if t.step.startswith("prune[")]
        aspirin_trace = next(t for t in prune_traces if "aspirin" in t.step)
        assert "Supporting quote" in aspirin_trace.prompt
        assert "takes aspirin 81 mg daily" in aspirin_trace.prompt

    def test_evidence_free_prune_prompt(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active"),
                ScriptStep("Candidate medication: aspirin", "Yes"),
            ]
        )
        config = PipelineConfig(steps=("prune",), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        prune_trace = next(t for t in result.traces if t.step.startswith("prune["))
        assert "quote" not in prune_trace.prompt.lower()
        assert result.final.keys() == ("aspirin",)

    def test_ambiguous_verdict_keeps_and_flags(self):
        backend = MockBackend(
            [
                ScriptStep("List every medication", "- Aspirin: Active"),
                ScriptStep("Candidate medication: aspirin", "Hard to say."),
            ]
        )
        config = PipelineConfig(steps=("prune",), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(MED_DOC)
        aspirin = result.final.get("aspirin")
        assert aspirin is not None
        assert "ambiguous_verdict" in aspirin.flags
        assert any("ambiguous" in w for w in result.warnings)


ICD_DOC = Document(
    id="icd-note",
    text="Assessment: COPD exacerbation. Also noted essential hypertension.",
    task=icd_task(10),
)


def icd_backend() -> MockBackend:
    return MockBackend(
        [
            ScriptStep("List every diagnosis", "- COPD exacerbation\n- essential hypertension"),
            ScriptStep("missing from the list above", "None"),
            ScriptStep(
                "exact quote",
                '- COPD exacerbation: "COPD exacerbation"\n'
                '- essential hypertension: "essential hypertension"',
            ),
            ScriptStep("Candidate diagnosis: copd exacerbation", "Yes"),
            ScriptStep("Candidate diagnosis: essential hypertension", "Yes"),
            ScriptStep(
                "Convert each diagnosis",
                "- COPD exacerbation: J44.1\n- essential hypertension: I10",
            ),
        ]
    )


class TestIcdMapping:
    def test_codes_replace_diagnoses_after_prune(self):
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(icd_backend(), config).run(ICD_DOC)
        assert result.final.keys() == ("j44.1", "i10")
        assert result.final.get("j44.1").icd_code == "J44.1"
        assert [t.step for t in result.traces][-1] == "icd_map"
        # Evidence follows the item through the mapping.
        assert result.final.get("j44.1").evidence.match_kind is MatchKind.EXACT

    def test_mapping_runs_after_prune_not_before(self):
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(icd_backend(), config).run(ICD_DOC)
        steps = [t.step for t in result.traces]
        assert steps.index("icd_map") > max(
            i for i, s in enumerate(steps) if s.startswith("prune[")
        )

    def test_same_code_merges(self):
        backend = MockBackend(
            [
                ScriptStep("List every diagnosis", "- copd\n- chronic obstructive pulmonary disease"),
                ScriptStep(
                    "Convert each diagnosis",
                    "- copd: J44.9\n- chronic obstructive pulmonary disease: J44.9",
                ),
            ]
        )
        config = PipelineConfig(steps=(), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(ICD_DOC)
        assert result.final.keys() == ("j44.9",)

    def test_uncodable_dropped_with_warning(self):
        backend = MockBackend(
            [
                ScriptStep("List every diagnosis", "- copd\n- feeling unwell"),
                ScriptStep("Convert each diagnosis", "- copd: J44.9\n- feeling unwell: none"),
            ]
        )
        config = PipelineConfig(steps=(), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(ICD_DOC)
        assert result.final.keys() == ("j44.9",)
        assert any("uncodable" in w for w in result.warnings)

    def test_missing_line_keeps_diagnosis_flagged(self):
        backend = MockBackend(
            [
                ScriptStep("List every diagnosis", "- copd\n- hypertension"),
                ScriptStep("Convert each diagnosis", "- copd: J44.9"),
            ]
        )
        config = PipelineConfig(steps=(), demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run(ICD_DOC)
        assert result.final.keys() == ("j44.9", "hypertension")
        assert "unmapped_code" in result.final.get("hypertension").flags

    def test_mapping_can_be_disabled(self):
        config = PipelineConfig(steps=(), demonstrations_k=0, icd_mapping=False)
        backend = MockBackend([ScriptStep("List every diagnosis", "- copd")])
        result = ExtractionPipeline(backend, config).run(ICD_DOC)
        assert result.final.keys() == ("copd",)


class TestMegaprompt:
    def test_single_call_and_origin(self):
        backend = MockBackend([ScriptStep("(1)", "- Aspirin: Active\n- Metformin: stopped")])
        config = PipelineConfig(demonstrations_k=0)
        result = ExtractionPipeline(backend, config).run_megaprompt(MED_DOC)
        assert result.megaprompt
        assert [t.step for t in result.traces] == ["megaprompt"]
        assert result.final.keys() == ("aspirin", "metformin")
        assert str(result.final.get("aspirin").origin) == "megaprompt"
        assert len(backend.calls) == 1


class TestDemonstrations:
    def make_pool(self, n=10):
        return [DemoExample(f"demo text {i}", f"- med{i}: Active") for i in range(n)]

    def test_short_task_defaults_to_five(self):
        backend = med_backend()
        config = PipelineConfig(steps=())
        pipeline = ExtractionPipeline(backend, config)
        pipeline.run(MED_DOC, seed=3, demo_pool=self.make_pool())
        prompt = backend.calls[0].text
        assert prompt.count("demo text") == 5

    def test_same_seed_same_prompt(self):
        pool = self.make_pool()
        prompts = []
        for _ in range(2):
            backend = med_backend()
            ExtractionPipeline(backend, PipelineConfig(steps=())).run(
                MED_DOC, seed=7, demo_pool=pool
            )
            prompts.append(backend.calls[0].text)
        assert prompts[0] == prompts[1]

    def test_different_seed_different_sample(self):
        pool = self.make_pool(20)
        prompts = []
        for seed in (1, 2):
            backend = med_backend()
            ExtractionPipeline(backend, PipelineConfig(steps=())).run(
                MED_DOC, seed=seed, demo_pool=pool
            )
            prompts.append(backend.calls[0].text)
        assert prompts[0] != prompts[1]

    def test_missing_pool_raises(self):
        pipeline = ExtractionPipeline(med_backend(), PipelineConfig(steps=()))
        with pytest.raises(ValueError, match="demo pool"):
            pipeline.run(MED_DOC, seed=1, demo_pool=None)

    def test_long_input_task_needs_no_pool(self):
        backend = MockBackend([ScriptStep("List every diagnosis", "- copd")])
        config = PipelineConfig(steps=(), icd_mapping=False)
        result = ExtractionPipeline(backend, config).run(ICD_DOC, seed=1)
        assert result.final.keys() == ("copd",)


class TestPipelineConfig:
    def test_rejects_unknown_steps(self):
        with pytest.raises(ValueError):
            PipelineConfig(steps=("omission", "bogus"))

    def test_rejects_repeats(self):
        with pytest.raises(ValueError):
            PipelineConfig(steps=("omission", "omission"))

    def test_rejects_bad_iters(self):
        with pytest.raises(ValueError):
            PipelineConfig(omission_min_iters=0)
        with pytest.raises(ValueError):
            PipelineConfig(omission_min_iters=5, omission_max_iters=3)

    def test_describe_resolves_per_task(self):
        config = PipelineConfig()
        short = config.describe(medication_status_task())
        long = config.describe(icd_task(10))
        assert short["demonstrations_k"] == 5
        assert long["demonstrations_k"] == 0
        assert short["omission_min_iters"] == 1
        assert long["omission_min_iters"] == 5
        assert long["icd_mapping"] is True
        assert short["icd_mapping"] is False

    def test_presets(self):
        assert set(ABLATION_PRESETS) == {"Original", "+ Omission", "+ Prune", "+ Full SV"}
        assert ABLATION_PRESETS["Original"] == ()
        assert ABLATION_PRESETS["+ Full SV"] == ("omission", "evidence", "prune")
        for steps in ABLATION_PRESETS.values():
            PipelineConfig(steps=steps)


class TestRunBatch:
    def test_deterministic_order_and_worker_independence(self):
        docs = [
            Document(id=f"d{i}", text=f"Doc {i}: patient takes aspirin.", task=medication_status_task())
            for i in range(4)
        ]
        config = PipelineConfig(steps=(), demonstrations_k=0)

        def backend():
            return MockBackend([ScriptStep("List every medication", "- Aspirin: Active")])

        serial = run_batch(backend(), config, docs, seeds=[1, 2], workers=1)
        parallel = run_batch(backend(), config, docs, seeds=[1, 2], workers=4)
        assert [(r.seed, r.doc_id) for r in serial] == [
            (1, "d0"), (1, "d1"), (1, "d2"), (1, "d3"),
            (2, "d0"), (2, "d1"), (2, "d2"), (2, "d3"),
        ]
        assert [(r.seed, r.doc_id) for r in parallel] == [(r.seed, r.doc_id) for r in serial]
        assert [r.final.keys() for r in parallel] == [r.final.keys() for r in serial]

    def test_megaprompt_batch(self):
        docs = [Document(id="d0", text="txt", task=medication_status_task())]
        backend = MockBackend([ScriptStep("(1)", "- Aspirin: Active")])
        config = PipelineConfig(demonstrations_k=0)
        results = run_batch(backend, config, docs, seeds=[0], megaprompt=True)
        assert results[0].megaprompt
