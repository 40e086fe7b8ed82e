import json
import threading

import httpx
import pytest
from pydantic import BaseModel

from finrag.gateway import (
    AgentCall,
    AuditLog,
    ConcurrencyLimiter,
    EmbeddingError,
    EmbeddingVector,
    HashEmbedder,
    LlmGateway,
    OpenAIChatProvider,
    StructuredOutputError,
    UsageRecord,
    account,
    cosine_similarity,
    merge_usage,
)
from finrag.offline import OfflineRuleProvider, ScriptedProvider


class Verdict(BaseModel):
    approved: bool
    reason: str = ""


def make_gateway(provider, **kw):
    kw.setdefault("models", {"default": "offline-rules"})
    return LlmGateway(provider, HashEmbedder(dim=64), **kw)


def verdict_call(max_retries=3):
    return AgentCall(
        agent_name="validator",
        system_prompt="Return JSON.",
        user_prompt="Judge it.",
        response_schema=Verdict,
        max_retries=max_retries,
    )


VALID = json.dumps({"approved": True, "reason": "fine"})


class TestStructuredOutput:
    def test_defaults(self):
        call = verdict_call()
        assert call.temperature == 0.1
        assert call.max_retries == 3

    def test_happy_path_single_call(self):
        provider = ScriptedProvider([VALID])
        gw = make_gateway(provider)
        obj, usage = gw.complete_structured(verdict_call())
        assert obj.approved is True
        assert provider.calls == 1
        assert usage.input_tokens > 0 and usage.output_tokens > 0

    def test_code_fences_stripped(self):
        provider = ScriptedProvider(["```json\n" + VALID + "\n```"])
        gw = make_gateway(provider)
        obj, _ = gw.complete_structured(verdict_call())
        assert obj.approved is True

    def test_retry_until_valid_accumulates_usage(self):
        provider = ScriptedProvider(["not json", '{"approved": "maybe"}', VALID])
        gw = make_gateway(provider)
        single = make_gateway(ScriptedProvider([VALID]))
        _, one_usage = single.complete_structured(verdict_call())
        obj, usage = gw.complete_structured(verdict_call())
        assert obj.approved is True
        assert provider.calls == 3
        # three attempts cost strictly more than one
        assert usage.input_tokens > one_usage.input_tokens
        assert usage.output_tokens > one_usage.output_tokens

    @pytest.mark.parametrize("max_retries", [0, 1, 2, 3])
    def test_call_count_never_exceeds_one_plus_retries(self, max_retries):
        provider = ScriptedProvider(["garbage"] * 10)
        gw = make_gateway(provider)
        with pytest.raises(StructuredOutputError) as exc:
            gw.complete_structured(verdict_call(max_retries=max_retries))
        assert provider.calls == 1 + max_retries
        assert len(exc.value.attempts) == 1 + max_retries
        assert all("response" in a and "error" in a for a in exc.value.attempts)

    def test_correction_message_carries_schema_and_error(self):
        provider = ScriptedProvider(["nonsense", VALID])
        gw = make_gateway(provider)
        gw.complete_structured(verdict_call())
        second = provider.transcripts[1]
        assert second[-2]["role"] == "assistant"
        assert second[-2]["content"] == "nonsense"
        correction = second[-1]["content"]
        assert "failed validation" in correction
        assert "approved" in correction  # schema embedded

    def test_semantic_validator_triggers_retry(self):
        provider = ScriptedProvider(
            [json.dumps({"approved": True, "reason": "bad-value"}), VALID]
        )
        gw = make_gateway(provider)

        def check(v):
            if v.reason == "bad-value":
                raise ValueError("reason must not be bad-value")

        obj, _ = gw.complete_structured(verdict_call(), validate=check)
        assert provider.calls == 2
        assert obj.reason == "fine"
        assert "bad-value" in provider.transcripts[1][-1]["content"]

    def test_exhaustion_reports_usage(self):
        provider = ScriptedProvider(["x"] * 4)
        gw = make_gateway(provider)
        with pytest.raises(StructuredOutputError) as exc:
            gw.complete_structured(verdict_call())
        assert exc.value.usage.input_tokens > 0

    def test_run_agent_records_audit(self):
        gw = make_gateway(OfflineRuleProvider())
        obj, usage = gw.run_agent(
            "validator",
            {"sub_query": "revenue in 2023", "chunk_text": "Revenue in 2023 was 5.1"},
            Verdict,
            stage="validate",
            round_no=1,
        )
        assert obj.approved is True
        rec = gw.audit.records[-1]
        assert rec["stage"] == "validate"
        assert rec["round"] == 1
        assert rec["ok"] is True
        assert rec["output_tokens"] == usage.output_tokens

    def test_run_agent_audits_failure(self):
        gw = make_gateway(ScriptedProvider(["bad"] * 4))
        with pytest.raises(StructuredOutputError):
            gw.run_agent("validator", {"x": 1}, Verdict)
        assert gw.audit.records[-1]["ok"] is False

    def test_template_system_prompt_embeds_schema(self):
        gw = make_gateway(OfflineRuleProvider())
        call = gw.agent_call("planner", {"question": "q"}, Verdict)
        assert "approved" in call.system_prompt
        assert "$schema" not in call.system_prompt
        assert call.payload == {"question": "q"}


class TestOpenAIProvider:
    def _provider_and_capture(self):
        captured = {}

        def handler(request: httpx.Request) -> httpx.Response:
            captured["body"] = json.loads(request.content)
            captured["auth"] = request.headers.get("authorization")
            return httpx.Response(
                200,
                json={
                    "choices": [{"message": {"content": VALID}}],
                    "usage": {"prompt_tokens": 42, "completion_tokens": 7},
                },
            )

        client = httpx.Client(transport=httpx.MockTransport(handler))
        return OpenAIChatProvider("http://llm.local/v1", "sk-test", client=client), captured

    def test_request_shape_and_usage(self):
        provider, captured = self._provider_and_capture()
        call = verdict_call()
        completion = provider.complete(
            call,
            [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
            "gpt-4.1-mini",
        )
        assert completion.text == VALID
        assert completion.input_tokens == 42
        assert completion.output_tokens == 7
        assert captured["body"]["model"] == "gpt-4.1-mini"
        assert captured["body"]["temperature"] == pytest.approx(0.1)
        assert captured["body"]["messages"][0]["role"] == "system"
        assert captured["auth"] == "Bearer sk-test"

    def test_temperature_omitted_for_reasoning_models(self):
        provider, captured = self._provider_and_capture()
        provider.complete(verdict_call(), [{"role": "user", "content": "u"}], "o4-mini")
        assert "temperature" not in captured["body"]


class TestEmbeddings:
    def test_deterministic_and_order_preserving(self):
        gw = make_gateway(OfflineRuleProvider())
        texts = ["alpha revenue", "beta profit", "alpha revenue"]
        vecs1 = gw.embed(texts)
        vecs2 = gw.embed(texts)
        assert vecs1 == vecs2
        assert vecs1[0] == vecs1[2]
        assert vecs1[0] != vecs1[1]

    def test_unit_norm_and_dim(self):
        emb = HashEmbedder(dim=768)
        [row] = emb.embed_batch(["net revenue grew nine percent"])
        vec = EmbeddingVector(row)
        assert vec.dim == 768
        assert vec.norm == pytest.approx(1.0, abs=1e-6)

    def test_different_texts_not_collinear(self):
        emb = HashEmbedder(dim=768)
        a, b = emb.embed_batch(["operating cash flow 2023", "board of directors report"])
        sim = cosine_similarity(EmbeddingVector(a), EmbeddingVector(b))
        assert -0.9 < sim < 0.9

    def test_related_texts_more_similar_than_unrelated(self):
        emb = HashEmbedder(dim=768)
        a, b, c = emb.embed_batch(
            [
                "net revenue increased in fiscal 2023",
                "revenue for fiscal 2023 increased strongly",
                "the board proposes a dividend policy change",
            ]
        )
        va, vb, vc = (EmbeddingVector(x) for x in (a, b, c))
        assert cosine_similarity(va, vb) > cosine_similarity(va, vc)

    def test_empty_batch(self):
        gw = make_gateway(OfflineRuleProvider())
        assert gw.embed([]) == []

    def test_arity_violation_raises(self):
        class BrokenEmbedder:
            name = "broken"
            dim = 4

            def embed_batch(self, texts):
                return [[0.0] * 4]  # always one row

        gw = LlmGateway(OfflineRuleProvider(), BrokenEmbedder(), embed_retries=1)
        with pytest.raises(EmbeddingError) as exc:
            gw.embed(["a", "b", "c"])
        assert exc.value.indices == [0, 1, 2]

    def test_transient_fault_retried(self):
        class FlakyEmbedder:
            name = "flaky"
            dim = 4

            def __init__(self):
                self.calls = 0

            def embed_batch(self, texts):
                self.calls += 1
                if self.calls == 1:
                    raise RuntimeError("boom")
                return [[1.0, 0.0, 0.0, 0.0] for _ in texts]

        flaky = FlakyEmbedder()
        gw = LlmGateway(OfflineRuleProvider(), flaky, embed_retries=1)
        vecs = gw.embed(["a", "b"])
        assert len(vecs) == 2
        assert flaky.calls == 2


# (model, accuracy %, expected relative cost) for every published grid cell
COST_GRID = [
    ("gpt-4.1-mini", 62.0, 0.032),
    ("gpt-4.1-mini", 65.3, 0.031),
    ("gpt-4.1-mini", 69.3, 0.029),
    ("gpt-4.1-mini", 71.3, 0.028),
    ("gpt-4.1-mini", 76.0, 0.026),
    ("gpt-4.1", 78.7, 0.127),
    ("o4-mini", 79.3, 0.069),
    ("gpt-4.1", 82.7, 0.121),
    ("gpt-4.1-mini", 68.0, 0.029),
    ("gpt-4.1-mini", 79.3, 0.025),
    ("gpt-4.1-mini", 84.7, 0.024),
    ("gpt-4.1", 89.3, 0.112),
]


class TestAccounting:
    @pytest.mark.parametrize("model_id,accuracy,expected", COST_GRID)
    def test_cost_grid(self, model_id, accuracy, expected):
        records = [UsageRecord(1000, 500, model_id, 0.0)]
        assert account(records, accuracy) == expected

    def test_dominant_model_selected_by_output_tokens(self):
        records = [
            UsageRecord(10, 900, "gpt-4.1-mini", 0.0),
            UsageRecord(10, 100, "gpt-4.1", 0.0),
        ]
        assert account(records, 76.0) == 0.026

    def test_zero_accuracy_rejected(self):
        with pytest.raises(ValueError):
            account([UsageRecord(1, 1, "gpt-4.1", 0.0)], 0.0)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            account([], 50.0)

    def test_usage_cost_from_price_table(self):
        gw = make_gateway(OfflineRuleProvider())
        usage = gw.usage(1_000_000, 500_000, "gpt-4.1-mini")
        assert usage.cost_usd == pytest.approx(0.40 + 0.80)

    def test_merge_usage_sums(self):
        merged = merge_usage(
            [UsageRecord(10, 5, "m", 0.001), UsageRecord(20, 15, "m", 0.002)]
        )
        assert (merged.input_tokens, merged.output_tokens) == (30, 20)
        assert merged.cost_usd == pytest.approx(0.003)


class TestConcurrencyLimiter:
    def test_peak_bounded_and_reached(self):
        limiter = ConcurrencyLimiter(4)
        gate = threading.Barrier(8)

        def work():
            with limiter.slot():
                try:
                    gate.wait(timeout=0.2)
                except threading.BrokenBarrierError:
                    pass

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert limiter.peak <= 4
        assert limiter.peak >= 2
        assert limiter.current == 0

    def test_invalid_limit(self):
        with pytest.raises(ValueError):
            ConcurrencyLimiter(0)


class TestOfflineResponders:
    def run(self, agent, payload, schema=None):
        gw = make_gateway(OfflineRuleProvider())
        call = gw.agent_call(agent, payload, schema or Verdict)
        provider = OfflineRuleProvider()
        completion = provider.complete(
            call,
            [{"role": "system", "content": call.system_prompt},
             {"role": "user", "content": call.user_prompt}],
            "offline-rules",
        )
        return json.loads(completion.text)

    def test_planner_year_comparison_three_subqueries(self):
        out = self.run(
            "planner", {"question": "How did Novo Nordisk's profit change between 2022 and 2023?"}
        )
        subs = out["sub_queries"]
        assert len(subs) == 3
        assert "2022" in subs[0] and "2023" not in subs[0]
        assert "2023" in subs[1] and "2022" not in subs[1]
        assert "change" in subs[2].lower()
        assert all("profit" in s.lower() for s in subs)

    def test_planner_conjunction_splits(self):
        out = self.run(
            "planner", {"question": "What was ACME Corp's revenue and operating margin in 2023?"}
        )
        assert len(out["sub_queries"]) == 2
        assert all("2023" in s for s in out["sub_queries"])

    def test_planner_single_fact_single_subquery(self):
        out = self.run("planner", {"question": "What was ACME Corp's revenue in 2023?"})
        assert out["sub_queries"] == ["What was ACME Corp's revenue in 2023?"]

    def test_replanner_avoids_prior(self):
        q = "What was ACME Corp's revenue in 2023?"
        first = self.run("replanner", {"question": q, "prior_sub_queries": [q]})
        assert first["sub_queries"]
        assert all(s != q for s in first["sub_queries"])
        second = self.run(
            "replanner",
            {"question": q, "prior_sub_queries": [q] + first["sub_queries"]},
        )
        assert all(s not in [q] + first["sub_queries"] for s in second["sub_queries"])

    def test_search_directive_matches_catalog(self):
        out = self.run(
            "search",
            {
                "sub_query": "ACME Corp revenue in fiscal 2023",
                "companies": ["ACME Corp", "Borealis Group"],
                "report_types": ["Annual Report", "10-K"],
            },
        )
        assert out["company_names"] == ["ACME Corp"]
        assert out["date_start"] == "2023-01-01"
        assert out["date_end"] == "2023-12-31"
        assert "revenue" in out["keywords"]
        assert "2023" not in out["keywords"]

    def test_search_directive_no_period(self):
        out = self.run(
            "search",
            {"sub_query": "ACME Corp dividend policy", "companies": ["ACME Corp"]},
        )
        assert out["date_start"] is None and out["date_end"] is None

    def test_validator_requires_years_and_terms(self):
        ok = self.run(
            "validator",
            {
                "sub_query": "ACME Corp revenue in fiscal 2023",
                "chunk_text": "ACME Corp reported revenue of 84.2 million in fiscal 2023.",
            },
        )
        assert ok["approved"] is True
        wrong_year = self.run(
            "validator",
            {
                "sub_query": "ACME Corp revenue in fiscal 2023",
                "chunk_text": "ACME Corp reported revenue of 80.0 million in fiscal 2021.",
            },
        )
        assert wrong_year["approved"] is False
        off_topic = self.run(
            "validator",
            {
                "sub_query": "ACME Corp dividend policy in 2023",
                "chunk_text": "In 2023 ACME Corp opened three new offices.",
            },
        )
        assert off_topic["approved"] is False

    def test_router_first_message_full_retrieval(self):
        out = self.run(
            "router",
            {"message": "restate that please", "is_first_message": True, "companies": []},
        )
        assert out["action"] == "full_retrieval"

    def test_router_reformat_direct(self):
        out = self.run(
            "router",
            {
                "message": "Can you restate that in bullet points?",
                "is_first_message": False,
                "companies": ["ACME Corp"],
            },
        )
        assert out["action"] == "direct_answer"

    def test_router_new_entity_full(self):
        out = self.run(
            "router",
            {
                "message": "What about Borealis Group?",
                "is_first_message": False,
                "companies": ["ACME Corp", "Borealis Group"],
            },
        )
        assert out["action"] == "full_retrieval"

    def test_judge_tolerance(self):
        out = self.run(
            "judge",
            {"question": "q", "gold_answer": "1.06", "answer": "The quick ratio was 1.0603 [1]."},
        )
        assert out["verdict"] == "Correct"
        out = self.run(
            "judge",
            {"question": "q", "gold_answer": "1.06", "answer": "The quick ratio was 1.21 [1]."},
        )
        assert out["verdict"] == "Incorrect"
        out = self.run(
            "judge",
            {"question": "q", "gold_answer": "1.06", "answer": "I could not find this figure."},
        )
        assert out["verdict"] == "FailureToAnswer"

    def test_writer_cites_sources(self):
        context = (
            '<source id="doc1" title="Annual Report – 2023 (ACME Corp)" company="ACME Corp" '
            'date="2023-12-31" report_type="Annual Report">\n'
            "Excerpt 1:\nRevenue was 84.2 million in fiscal 2023.\n</source>"
        )
        out = self.run("writer", {"question": "revenue?", "context": context})
        assert "[1]" in out["text"]
        assert out["citations"][0]["report_id"] == "doc1"

    def test_determinism_across_instances(self):
        payload = {"question": "What was ACME Corp's revenue and margin in 2023?"}
        assert self.run("planner", payload) == self.run("planner", payload)
