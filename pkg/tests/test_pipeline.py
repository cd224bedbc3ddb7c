"""Pipeline tests: prompts, retrieval, staging, replay, artifacts."""

import dataclasses
import json
import math

import pytest
from conftest import case_variant

from adnopt.modelir import parse_fragment, print_model
from adnopt.pipeline import (
    ABLATIONS,
    EMBED_DIM,
    ChatError,
    ChatMessage,
    GenerationParams,
    PipelineError,
    PipelineTrace,
    RagEntry,
    RagStore,
    ReplayChatClient,
    ScriptedChatClient,
    StageRecord,
    assemble_prompt,
    baseline_voltage_table,
    bundled_catalog,
    bundled_ragstore,
    bundled_requests,
    case_for_district,
    cosine_similarity,
    embed_text,
    prompt_hash,
    reference_extract,
    reference_formulation,
    retrieve_examples,
    run_pipeline,
    write_run_artifacts,
)
from adnopt.requirements import parse_decorated, render_decorated

REQUEST = (
    "minimize losses on the campus feeder with rooftop solar and the var compensator"
)


def msgs(*pairs):
    return [ChatMessage(role, content) for role, content in pairs]


class TestPromptHash:
    def test_deterministic(self):
        m = msgs(("system", "a"), ("user", "b"))
        assert prompt_hash(m) == prompt_hash(list(m))
        assert len(prompt_hash(m)) == 64

    def test_sensitive_to_content_role_and_order(self):
        base = prompt_hash(msgs(("system", "a"), ("user", "b")))
        assert prompt_hash(msgs(("system", "a"), ("user", "c"))) != base
        assert prompt_hash(msgs(("user", "a"), ("system", "b"))) != base
        assert prompt_hash(msgs(("user", "b"), ("system", "a"))) != base


class TestPromptAssembly:
    def test_six_sections_in_order(self, catalog):
        bundle = assemble_prompt("extractor", catalog)
        assert [key for key, _ in bundle.sections] == [
            "role", "task", "environment", "output_format", "few_shot", "cot",
        ]
        for key in ("role", "task", "output_format", "cot"):
            assert bundle.section(key).strip()

    def test_environment_lists_catalog(self, catalog):
        text = assemble_prompt("extractor", catalog).section("environment")
        for name in ("campus", "riverside", "valley33"):
            assert name in text
        assert "min_loss" in text and "bess" in text

    def test_section_miss_raises(self, catalog):
        with pytest.raises(KeyError):
            assemble_prompt("extractor", catalog).section("poetry")

    def test_render_includes_titles_and_skips_blank(self, catalog):
        rendered = assemble_prompt("formulator", catalog).render()
        assert "## Role" in rendered and "## Environment" in rendered
        # no few-shot content supplied, so the section disappears entirely
        assert "## Examples" not in rendered

    def test_few_shot_and_extra_environment(self, catalog):
        bundle = assemble_prompt(
            "programmer", catalog,
            few_shot=("exemplar one", "exemplar two"),
            environment_extra="local note",
        )
        assert bundle.section("few_shot") == "exemplar one\n\nexemplar two"
        assert bundle.section("environment").endswith("local note")
        assert "## Examples" in bundle.render()

    def test_no_ek_blanks_environment(self, catalog):
        bundle = assemble_prompt("extractor", catalog, ablation="no_ek")
        assert bundle.section("environment") == ""
        assert "## Environment" not in bundle.render()

    def test_no_fs_blanks_few_shot(self, catalog):
        bundle = assemble_prompt(
            "programmer", catalog, ablation="no_fs", few_shot=("exemplar one",)
        )
        assert bundle.section("few_shot") == ""
        # ablating the section must not touch its neighbours
        assert bundle.section("cot").strip()

    def test_unknown_agent_and_ablation(self, catalog):
        with pytest.raises(PipelineError, match="unknown agent"):
            assemble_prompt("stenographer", catalog)
        with pytest.raises(PipelineError, match="unknown ablation"):
            assemble_prompt("extractor", catalog, ablation="no_coffee")

    def test_every_agent_has_prompt_assets(self, catalog):
        for agent in ("extractor", "formulator", "programmer"):
            bundle = assemble_prompt(agent, catalog)
            assert bundle.render()


class TestEmbedding:
    def test_deterministic_unit_vector(self):
        a = embed_text("minimize losses on the feeder")
        b = embed_text("minimize losses on the feeder")
        assert a == b
        assert len(a) == EMBED_DIM
        assert math.isclose(sum(x * x for x in a), 1.0, abs_tol=1e-12)

    def test_empty_text_maps_to_first_axis(self):
        vec = embed_text("   ")
        assert vec[0] == 1.0
        assert all(x == 0.0 for x in vec[1:])

    def test_distinct_texts_distinct_vectors(self):
        assert embed_text("storage dispatch") != embed_text("voltage band")

    def test_client_dimension_check(self):
        class Stub:
            def __init__(self, n):
                self.n = n

            def embed(self, text):
                return [1.0] + [0.0] * (self.n - 1)

        assert embed_text("x", Stub(EMBED_DIM))[0] == 1.0
        with pytest.raises(PipelineError, match="dimension 4"):
            embed_text("x", Stub(4))


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        vec = embed_text("battery dispatch at riverside")
        assert abs(cosine_similarity(vec, vec) - 1.0) <= 1e-12

    def test_orthogonal_vectors(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_known_value(self):
        got = cosine_similarity([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
        assert got == pytest.approx(32.0 / math.sqrt(14.0 * 77.0), abs=1e-15)
        assert got == pytest.approx(0.974631846197076, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(PipelineError, match="dimensions differ"):
            cosine_similarity([1.0], [1.0, 2.0])

    def test_zero_norm_rejected(self):
        with pytest.raises(PipelineError, match="zero-norm"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])


def unit(i, n=4):
    vec = [0.0] * n
    vec[i] = 1.0
    return tuple(vec)


def small_store():
    entries = [
        RagEntry("first", unit(0), "exemplar-a"),
        RagEntry("second", unit(1), "exemplar-b"),
        RagEntry("third", unit(0), "exemplar-c"),
        RagEntry("fourth", (0.5, 0.5, 0.0, 0.0), "exemplar-d"),
    ]
    return RagStore(entries, dimension=4)


class TestRagStore:
    def test_dimension_enforced(self):
        with pytest.raises(PipelineError, match="entry 0 has dimension 2"):
            RagStore([RagEntry("x", (1.0, 0.0), "e")], dimension=4)

    def test_non_finite_rejected(self):
        bad = (math.nan, 0.0, 0.0, 0.0)
        with pytest.raises(PipelineError, match="non-finite"):
            RagStore([RagEntry("x", bad, "e")], dimension=4)

    def test_from_document_computes_missing_vectors(self):
        doc = json.dumps({
            "entries": [
                {"text": "minimize losses", "exemplar": "m1"},
                {"text": "battery schedule", "exemplar": "m2"},
            ]
        })
        store = RagStore.from_document(doc)
        assert store.dimension == EMBED_DIM
        assert list(store.entries[0].vector) == embed_text("minimize losses")

    def test_fixed_exemplars_take_the_head(self):
        store = small_store()
        assert [e.exemplar for e in store.fixed_exemplars(3)] == [
            "exemplar-a", "exemplar-b", "exemplar-c",
        ]
        assert len(store.fixed_exemplars(10)) == 4

    def test_bundled_store_loads_normalized(self):
        store = bundled_ragstore()
        assert len(store.entries) >= 3
        for entry in store.entries:
            norm = math.sqrt(sum(x * x for x in entry.vector))
            assert norm == pytest.approx(1.0, abs=1e-9)
            parse_fragment(entry.exemplar)


class TestRetrieval:
    def test_descending_with_insertion_order_ties(self):
        ranked = retrieve_examples(list(unit(0)), small_store(), k=4)
        assert [entry.exemplar for entry, _ in ranked] == [
            "exemplar-a", "exemplar-c", "exemplar-d", "exemplar-b",
        ]
        sims = [sim for _, sim in ranked]
        assert sims == sorted(sims, reverse=True)
        assert sims[0] == sims[1] == 1.0

    def test_exactly_k(self):
        assert len(retrieve_examples(list(unit(0)), small_store(), k=3)) == 3
        assert len(retrieve_examples(list(unit(0)), small_store(), k=9)) == 4

    def test_zero_query_rejected(self):
        with pytest.raises(PipelineError, match="zero-norm"):
            retrieve_examples([0.0] * 4, small_store())

    def test_empty_store_rejected(self):
        with pytest.raises(PipelineError, match="empty store"):
            retrieve_examples([1.0], RagStore([], dimension=1))


class TestReferenceExtract:
    def test_full_request(self, catalog):
        reqs = reference_extract(
            "give me the cheapest dispatch for the university campus using the"
            " genset and battery storage, keep voltages in band",
            catalog,
        )
        assert reqs.district == "campus"
        assert reqs.objective == "min_cost"
        assert reqs.equipment == {"dg", "bess"}
        assert [c.kind for c in reqs.extra_constraints] == ["voltage_safety"]

    def test_earliest_objective_mention_wins(self, catalog):
        reqs = reference_extract(
            "reduce losses, or failing that the cheapest dispatch, on campus",
            catalog,
        )
        assert reqs.objective == "min_loss"

    def test_equipment_deduplicated(self, catalog):
        reqs = reference_extract(
            "minimize losses on campus with the battery and extra energy storage",
            catalog,
        )
        assert reqs.equipment == {"bess"}

    def test_snapshot_timestep_parsed(self, catalog):
        reqs = reference_extract(
            "fix the undervoltage at hour 2 on the campus feeder with the svc",
            catalog,
        )
        assert reqs.horizon.kind == "single_timestep"
        assert reqs.horizon.t_hat == 2

    def test_snapshot_defaults_to_step_zero(self, catalog):
        # "late at 18" carries no timestep token, so the default applies
        reqs = reference_extract(
            "fix the undervoltage on the campus feeder late at 18", catalog
        )
        assert reqs.horizon.t_hat == 0

    def test_day_ahead_ignores_stray_numbers(self, catalog):
        reqs = reference_extract("minimize losses on campus over step 3", catalog)
        assert reqs.horizon.kind == "day_ahead"

    def test_missing_district(self, catalog):
        with pytest.raises(PipelineError, match="could not identify a district"):
            reference_extract("minimize losses somewhere nice", catalog)

    def test_multiple_districts(self, catalog):
        with pytest.raises(PipelineError, match="campus, riverside"):
            reference_extract(
                "minimize losses on the campus feeder and the riverside feeder",
                catalog,
            )

    def test_missing_objective(self, catalog):
        with pytest.raises(PipelineError, match="could not identify an objective"):
            reference_extract("do something clever on the campus feeder", catalog)

    def test_word_boundaries_respected(self, catalog):
        # "scampus" must not hit the campus synonym table
        with pytest.raises(PipelineError, match="district"):
            reference_extract("minimize losses on scampus", catalog)


class TestReferenceFormulation:
    def test_six_round_texts_end_with_final_script(self, catalog, campus):
        reqs = reference_extract(REQUEST, catalog)
        model, work_case, texts = reference_formulation(reqs, campus)
        assert len(texts) == 6
        assert texts[-1] == print_model(model)
        assert work_case.horizon.T == campus.horizon.T
        for text in texts:
            parse_fragment(text)


class TestRunPipelineReference:
    def test_full_run_trace_shape(self, catalog, campus):
        result = run_pipeline(REQUEST, campus, catalog, seed=7)
        assert not result.failed
        assert result.executable
        assert result.trace.district == "campus"
        assert result.trace.seed == 7

        stages = [(s.stage, s.status) for s in result.trace.stages]
        assert stages == [
            ("extraction", "ok"),
            *[("formulation", "ok")] * 6,
            ("code", "ok"),
            ("solve", "ok"),
        ]
        rounds = [s.round for s in result.trace.stages if s.stage == "formulation"]
        assert rounds == [1, 2, 3, 4, 5, 6]

        assert result.solution.status == "optimal"
        assert result.model.name == "campus_min_loss"
        doc = result.trace.solve
        assert {"status", "objective", "iterations", "nodes", "wall_time_ms",
                "tightness_max_gap", "max_violation"} <= set(doc)
        assert result.strategy["model"] == "campus_min_loss"

    def test_snapshot_request_projects_work_case(self, catalog, campus):
        result = run_pipeline(
            "fix the undervoltage at hour 2 on the campus feeder with the svc",
            campus, catalog,
        )
        assert not result.failed
        assert result.model.name.endswith("_t2")
        assert result.work_case.horizon.T == 1
        assert result.strategy["horizon"]["T"] == 1

    def test_unknown_mode_and_ablation(self, catalog, campus):
        with pytest.raises(PipelineError, match="unknown mode"):
            run_pipeline(REQUEST, campus, catalog, mode="psychic")
        with pytest.raises(PipelineError, match="unknown ablation"):
            run_pipeline(REQUEST, campus, catalog, ablation="no_lunch")

    def test_replay_requires_transcript(self, catalog, campus):
        with pytest.raises(PipelineError, match="transcript client"):
            run_pipeline(REQUEST, campus, catalog, mode="replay")

    def test_llm_mode_needs_an_endpoint(self, catalog, campus, monkeypatch):
        monkeypatch.delenv("ADN_CHAT_ENDPOINT", raising=False)
        with pytest.raises(ChatError, match="no chat endpoint"):
            run_pipeline(REQUEST, campus, catalog, mode="llm")

    def test_extraction_failure_is_traced(self, catalog, campus):
        result = run_pipeline("minimize losses somewhere nice", campus, catalog)
        assert result.failed
        assert result.trace.error.startswith("extraction:")
        assert not result.executable
        assert [s.status for s in result.trace.stages] == ["error"]

    def test_requirement_validation_failure(self, catalog):
        stripped = case_variant("campus", kinds=("dg", "pv", "svc"))
        result = run_pipeline(
            "minimize losses on campus using the battery", stripped, catalog
        )
        assert result.failed
        assert result.trace.error.startswith("extraction:")
        assert "not installed" in result.trace.error

    def test_review_edit_changes_the_model(self, catalog, campus):
        def review(reqs, trace):
            return dataclasses.replace(reqs, objective="min_cost")

        result = run_pipeline(REQUEST, campus, catalog, review=review)
        assert not result.failed
        assert result.model.name == "campus_min_cost"
        record = next(s for s in result.trace.stages if s.stage == "review")
        assert record.detail == "requirements edited by operator"
        assert "<objective>min_cost</objective>" in record.outputs[0]

    def test_review_approval_is_recorded(self, catalog, campus):
        result = run_pipeline(REQUEST, campus, catalog, review=lambda r, t: r)
        record = next(s for s in result.trace.stages if s.stage == "review")
        assert record.detail == "requirements approved"
        assert record.outputs == []

    def test_wiring_ablations_keep_reference_artifacts(self, catalog, campus):
        baseline = run_pipeline(REQUEST, campus, catalog)
        expect = print_model(baseline.model)
        skips = {
            "no_ie": ["extraction"],
            "no_pf": ["formulation"],
            "no_iepf": ["extraction", "formulation"],
        }
        for ablation, skipped_stages in skips.items():
            result = run_pipeline(REQUEST, campus, catalog, ablation=ablation)
            assert not result.failed, ablation
            assert print_model(result.model) == expect
            got = [s.stage for s in result.trace.stages if s.status == "skipped"]
            assert got == skipped_stages
        record = run_pipeline(REQUEST, campus, catalog, ablation="no_ie").trace.stages[0]
        assert record.detail == "stage disabled by ablation; raw request forwarded"


def scripted_texts(request, case, catalog):
    """Responses a well-behaved generator would produce, via the reference path."""
    reqs = reference_extract(request, catalog)
    model, _, texts = reference_formulation(reqs, case)
    return [render_decorated(reqs), *texts, print_model(model)], model


class TestScriptedLlm:
    def test_round_trip_matches_reference(self, catalog, campus):
        responses, ref_model = scripted_texts(REQUEST, campus, catalog)
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", client=client,
            store=bundled_ragstore(),
        )
        assert not result.failed
        assert result.executable
        assert print_model(result.model) == print_model(ref_model)
        assert len(client.prompts) == 8
        assert client.prompts[0][0].role == "system"

        code = next(s for s in result.trace.stages if s.stage == "code")
        assert code.detail.startswith("retrieved exemplars:")
        sims = code.detail.split(": ")[1].split(", ")
        assert len(sims) == 3
        rounds = [s for s in result.trace.stages if s.stage == "formulation"]
        assert [s.detail for s in rounds] == [
            "round 1: objective", "round 2: equipment", "round 3: power_flow",
            "round 4: additional", "round 5: assembly", "round 6: convexification",
        ]
        assert all(s.prompts and s.outputs for s in rounds)

    def test_no_fs_skips_exemplars(self, catalog, campus):
        responses, _ = scripted_texts(REQUEST, campus, catalog)
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", ablation="no_fs",
            client=client, store=bundled_ragstore(),
        )
        code = next(s for s in result.trace.stages if s.stage == "code")
        assert code.detail == "no exemplars (few-shot ablated)"
        assert "## Examples" not in code.prompts[0]

    def test_no_rag_uses_fixed_exemplars(self, catalog, campus):
        store = bundled_ragstore()
        responses, _ = scripted_texts(REQUEST, campus, catalog)
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", ablation="no_rag",
            client=client, store=store,
        )
        code = next(s for s in result.trace.stages if s.stage == "code")
        assert code.detail == "fixed exemplars (retrieval ablated)"
        assert store.entries[0].exemplar in code.prompts[0]

    def test_no_ek_blanks_environment_in_prompts(self, catalog, campus):
        responses, _ = scripted_texts(REQUEST, campus, catalog)
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", ablation="no_ek",
            client=client, store=bundled_ragstore(),
        )
        assert not result.failed
        for prompt in client.prompts:
            assert "Known districts:" not in prompt[0].content

    @pytest.mark.parametrize(
        "ablation,n_responses",
        [("no_ie", 7), ("no_pf", 2), ("no_iepf", 1)],
    )
    def test_wiring_ablation_exchange_counts(self, catalog, campus, ablation, n_responses):
        responses, ref_model = scripted_texts(REQUEST, campus, catalog)
        if ablation == "no_ie":
            responses = responses[1:]
        elif ablation == "no_pf":
            responses = [responses[0], responses[-1]]
        else:
            responses = [responses[-1]]
        assert len(responses) == n_responses
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", ablation=ablation,
            client=client, store=bundled_ragstore(),
        )
        assert not result.failed, result.trace.error
        assert len(client.prompts) == n_responses
        assert print_model(result.model) == print_model(ref_model)

    def test_bad_extraction_output(self, catalog, campus):
        client = ScriptedChatClient(["not decorated at all"])
        result = run_pipeline(REQUEST, campus, catalog, mode="llm", client=client)
        assert result.failed
        assert result.trace.error.startswith("extraction:")

    def test_bad_fragment_fails_its_round(self, catalog, campus):
        responses, _ = scripted_texts(REQUEST, campus, catalog)
        responses[3] = "var 3x broken ["
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", client=client,
            store=bundled_ragstore(),
        )
        assert result.failed
        assert result.trace.error.startswith("formulation: formulation round 3:")
        last = result.trace.stages[-1]
        assert last.stage == "formulation" and last.status == "error"
        assert last.round == 3

    def test_unparseable_code_is_not_executable(self, catalog, campus):
        responses, _ = scripted_texts(REQUEST, campus, catalog)
        responses[-1] = "print('hello')"
        client = ScriptedChatClient(responses)
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", client=client,
            store=bundled_ragstore(),
        )
        assert result.failed
        assert result.trace.error.startswith("code:")
        assert result.trace.stages[-1].stage == "solve"
        assert result.trace.stages[-1].detail.startswith("not executable")
        assert not result.executable

    def test_scripted_exhaustion_surfaces_as_chat_error(self, catalog, campus):
        result = run_pipeline(
            REQUEST, campus, catalog, mode="llm", client=ScriptedChatClient([])
        )
        assert result.failed
        assert "ran out of responses" in result.trace.error


def record_transcript(request, case, catalog, ablation="full"):
    responses, _ = scripted_texts(request, case, catalog)
    if ablation == "no_ie":
        responses = responses[1:]
    client = ScriptedChatClient(list(responses))
    result = run_pipeline(
        request, case, catalog, mode="llm", ablation=ablation,
        client=client, store=bundled_ragstore(),
    )
    assert not result.failed
    return [
        {"prompt_hash": prompt_hash(p), "response": r}
        for p, r in zip(client.prompts, responses)
    ]


class TestReplay:
    def test_replay_is_deterministic_and_untimed(self, catalog, campus):
        records = record_transcript(REQUEST, campus, catalog)
        docs = []
        for _ in range(2):
            client = ReplayChatClient.from_document(json.dumps(records))
            result = run_pipeline(
                REQUEST, campus, catalog, mode="replay", client=client,
                store=bundled_ragstore(),
            )
            assert not result.failed
            for stage in result.trace.stages:
                assert stage.wall_time_ms == 0
            assert result.trace.solve["wall_time_ms"] == 0
            docs.append(json.dumps(result.trace.to_document(), sort_keys=True))
        assert docs[0] == docs[1]

    def test_prompt_mismatch_is_caught(self, catalog, campus):
        records = record_transcript(REQUEST, campus, catalog)
        records[0]["prompt_hash"] = "0" * 64
        result = run_pipeline(
            REQUEST, campus, catalog, mode="replay",
            client=ReplayChatClient(records), store=bundled_ragstore(),
        )
        assert result.failed
        assert "replay prompt mismatch at exchange 0" in result.trace.error

    def test_exhausted_transcript(self, catalog, campus):
        records = record_transcript(REQUEST, campus, catalog)[:2]
        result = run_pipeline(
            REQUEST, campus, catalog, mode="replay",
            client=ReplayChatClient(records), store=bundled_ragstore(),
        )
        assert result.failed
        assert "exhausted after 2 exchanges" in result.trace.error

    def test_malformed_record_rejected(self):
        with pytest.raises(ChatError, match="record 1 lacks"):
            ReplayChatClient([{"prompt_hash": "x", "response": "y"}, {"response": "y"}])


class TestVoltageTable:
    def test_header_and_shape(self, catalog, campus):
        result = run_pipeline(REQUEST, campus, catalog)
        table = baseline_voltage_table(result.work_case, result.strategy)
        lines = table.strip().split("\n")
        assert lines[0] == "bus,t,v_before,v_after"
        T = result.strategy["horizon"]["T"]
        assert len(lines) == 1 + len(campus.buses) * T
        assert lines[1] == "0,0,1,1"
        for line in lines[1:]:
            bus, t, before, after = line.split(",")
            assert 0 <= int(t) < T
            assert 0.5 < float(before) < 1.5
            assert 0.5 < float(after) < 1.5

    def test_horizon_mismatch_raises(self, catalog, campus):
        result = run_pipeline(
            "fix the undervoltage at hour 2 on the campus feeder with the svc",
            campus, catalog,
        )
        with pytest.raises(PipelineError, match="does not match the case horizon"):
            baseline_voltage_table(campus, result.strategy)


class TestWriteRunArtifacts:
    def test_successful_run_writes_everything(self, catalog, campus, tmp_path):
        result = run_pipeline(REQUEST, campus, catalog)
        out = tmp_path / "run"
        written = write_run_artifacts(result, str(out))
        assert written == [
            "trace.json", "model.dsl", "solution.json", "strategy.json", "voltage.csv",
        ]
        trace = PipelineTrace.from_document(
            json.loads((out / "trace.json").read_text())
        )
        assert trace == result.trace
        sol = json.loads((out / "solution.json").read_text())
        assert sol["status"] == "optimal"
        assert list(sol["values"]) == sorted(sol["values"])
        assert (out / "model.dsl").read_text() == print_model(result.model)
        assert (out / "voltage.csv").read_text() == baseline_voltage_table(
            result.work_case, result.strategy
        )

    def test_failed_run_writes_only_the_trace(self, catalog, campus, tmp_path):
        result = run_pipeline("minimize losses somewhere nice", campus, catalog)
        written = write_run_artifacts(result, str(tmp_path / "bad"))
        assert written == ["trace.json"]

    def test_redaction_applies_to_every_file(self, catalog, campus, tmp_path):
        request = REQUEST + " (ticket hunter2)"
        result = run_pipeline(request, campus, catalog)
        out = tmp_path / "run"
        write_run_artifacts(
            result, str(out), redact=lambda text: text.replace("hunter2", "[secret]")
        )
        body = (out / "trace.json").read_text()
        assert "hunter2" not in body
        assert "[secret]" in body


class TestDocuments:
    def test_stage_record_round_trip(self):
        rec = StageRecord("code", "ok", "detail", ["p"], ["o"], 3, 12)
        assert StageRecord.from_document(rec.to_document()) == rec

    def test_trace_round_trip(self, catalog, campus):
        trace = run_pipeline(REQUEST, campus, catalog).trace
        assert PipelineTrace.from_document(trace.to_document()) == trace

    def test_generation_params_defaults(self):
        params = GenerationParams()
        assert params.temperature == 0.6 and params.top_p == 0.7
        assert params.seed is None


class TestBundledAssets:
    def test_requests_suite_shape(self, catalog):
        suite = bundled_requests()
        assert len(suite) == 30
        ids = [r["id"] for r in suite]
        assert len(set(ids)) == 30
        for entry in suite:
            assert entry["district"] in catalog.districts
            reqs = parse_decorated(entry["expected"], catalog)
            assert reqs.district == entry["district"]

    def test_case_lookup(self):
        assert case_for_district("campus").horizon.T == 4
        with pytest.raises(PipelineError, match="unknown district"):
            case_for_district("atlantis")

    def test_ablation_roster(self):
        assert ABLATIONS == (
            "full", "no_ie", "no_pf", "no_iepf", "no_ek", "no_fs", "no_rag",
        )
