import json
import logging
import math
import re
from decimal import ROUND_HALF_EVEN, Decimal

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airglyph.classify import Source
from airglyph.core import Dataset
from airglyph.llm import (
    ANSWER_MARKER,
    DEFAULT_TEMPLATE,
    ChatMessage,
    HttpClient,
    InstructionPair,
    LlmLetterPredictor,
    MockClient,
    MockRule,
    MockScript,
    NoLetterFound,
    PairClients,
    PairGenerationError,
    TransportError,
    build_few_shot_prompt,
    build_pair_dataset,
    build_zero_shot_prompt,
    diversify_prompt,
    export_pairs,
    generate_explanation,
    load_pairs,
    parse_letter_response,
    prompt_tokens,
    restructure_response,
    split_reasoning,
    token_estimate,
    window_for,
)
from airglyph.preprocess import serialize_pseudo_text
from airglyph.synth import GenSpec, synth_dataset

from conftest import lcg_window

NUM = re.compile(r"-?\d+\.\d+")


@pytest.fixture(scope="module")
def s1_train():
    return synth_dataset(GenSpec(subjects=("S1",))).filter(subject="S1")


def test_token_estimate_definition():
    assert token_estimate("") == 0
    assert token_estimate("x" * 4000) == 1000
    assert token_estimate("abcde") == 2
    assert token_estimate("abcd") == 1


def test_chat_message_validation():
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")
    with pytest.raises(ValueError):
        ChatMessage("user", "   ")


def test_zero_shot_prompt_structure():
    msgs = build_zero_shot_prompt(lcg_window(40, 2))
    assert [m.role for m in msgs] == ["system", "user"]
    assert "t,ax,ay,az" in msgs[1].content
    assert ANSWER_MARKER in msgs[0].content
    t = DEFAULT_TEMPLATE
    assert msgs[0].content == "\n\n".join([t.task_preamble, t.cot_instruction, t.answer_format_instruction])


def test_zero_shot_numbers_have_requested_decimals():
    for d in (1, 3, 5):
        body = build_zero_shot_prompt(lcg_window(30, 4), decimals=d)[1].content.split("t,ax,ay,az\n", 1)[1]
        nums = NUM.findall(body)
        assert len(nums) == 90
        assert all(len(n.split(".")[1]) == d for n in nums)


def _w_recording():
    return synth_dataset(GenSpec(subjects=("S1",), letters="W", modes=("3D",), reps_per_letter=1)).recordings[0]


def _oracle_prompt_tokens(values):
    # independent count: Decimal rounding per field, header, index column, commas and newlines
    t = DEFAULT_TEMPLATE
    system = len("\n\n".join([t.task_preamble, t.cot_instruction, t.answer_format_instruction]))
    user = len(t.query_intro) + 1 + len("t,ax,ay,az\n")
    for i, row in enumerate(values):
        fields = []
        for v in row:
            s = format(Decimal(float(v)).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN), "f")
            fields.append(s[1:] if s.startswith("-") and set(s[1:]) <= set("0.") else s)
        user += len(str(i)) + 3 + sum(map(len, fields)) + 1
    return math.ceil(system / 4) + math.ceil(user / 4)


def _t128_prompt_tokens():
    return prompt_tokens(build_zero_shot_prompt(window_for(_w_recording(), 128)))


def test_t128_prompt_token_estimate_measured():
    w = window_for(_w_recording(), 128)
    n = _t128_prompt_tokens()
    assert n == _oracle_prompt_tokens(w.values)
    # z-scored values serialize as 5-6 characters, so 128 rows stay under a thousand tokens
    assert 700 < n < 1000


@pytest.mark.xfail(strict=True, reason="a 128-step prompt at 3 decimals measures under 1000 tokens, not > 2000")
def test_t128_prompt_exceeds_2000_tokens():
    assert _t128_prompt_tokens() > 2000


def test_200_step_prompt_is_far_below_8k():
    w = window_for(_w_recording(), 200)
    n = prompt_tokens(build_zero_shot_prompt(w))
    assert n == _oracle_prompt_tokens(w.values)
    assert n < 8000


def _exemplars(n):
    return [(lcg_window(16, 10 + i), "ABCDEFG"[i]) for i in range(n)]


def test_few_shot_huge_budget_takes_all():
    msgs, n = build_few_shot_prompt(lcg_window(16, 1), _exemplars(5), budget=10 ** 6)
    assert n == 5
    assert all(f"Example {i}:" in msgs[1].content for i in range(1, 6))


def test_few_shot_budget_for_exactly_two():
    q, exs = lcg_window(16, 1), _exemplars(4)
    t = DEFAULT_TEMPLATE

    def user_text(k):
        blocks = [f"Example {i + 1}:\n{serialize_pseudo_text(w).rstrip()}\nLetter: {L}" for i, (w, L) in
                  enumerate(exs[:k])]
        return f"{t.fewshot_intro}\n\n" + "\n\n".join(blocks) + "\n\n" + f"{t.query_intro}\n{serialize_pseudo_text(q)}"

    system = "\n\n".join([t.task_preamble, t.cot_instruction, t.answer_format_instruction])
    budget = math.ceil(len(system) / 4) + math.ceil(len(user_text(2)) / 4)
    msgs, n = build_few_shot_prompt(q, exs, budget)
    assert n == 2
    assert msgs[1].content == user_text(2)
    assert build_few_shot_prompt(q, exs, budget - 1)[1] == 1


def test_few_shot_errors():
    with pytest.raises(ValueError, match="at least one"):
        build_few_shot_prompt(lcg_window(16, 1), [], 10 ** 6)
    with pytest.raises(ValueError, match="exceeds"):
        build_few_shot_prompt(lcg_window(16, 1), _exemplars(1), 10)


def test_zero_shot_is_few_shot_minus_exemplar_block():
    q = lcg_window(20, 3)
    zero = build_zero_shot_prompt(q)
    few, _ = build_few_shot_prompt(q, _exemplars(3), 10 ** 6)
    assert zero[0] == few[0]
    assert few[1].content.endswith(zero[1].content)
    block = few[1].content[: -len(zero[1].content)]
    assert block.startswith(DEFAULT_TEMPLATE.fewshot_intro)
    assert "t,ax,ay,az" in block


def test_few_shot_renders_explanations():
    exs = [(lcg_window(8, 1), "O", "One closed loop.")]
    msgs, _ = build_few_shot_prompt(lcg_window(8, 2), exs, 10 ** 6)
    assert "Explanation: One closed loop.\nLetter: O" in msgs[1].content


@pytest.mark.parametrize("text, letter", [
    ("after thinking, the letter is: B", "B"),
    ("could be B or R... final answer: R", "R"),
    ("Final answer: q", "Q"),
    ("Reasoning: loops.\nFinal answer: **S**", "S"),
    ("Answer: Z because of the diagonal", "Z"),
])
def test_parse_letter_response(text, letter):
    assert parse_letter_response(text) == letter


@pytest.mark.parametrize("text", [
    "I'm sorry, I cannot interpret raw sensor data.",
    "Answer: I cannot tell",
    "",
    "The answer is unclear.",
])
def test_parse_refusals(text):
    with pytest.raises(NoLetterFound):
        parse_letter_response(text)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=200)
       .filter(lambda s: s.strip() and not re.search(r"answer|letter", s, re.I)),
       st.sampled_from("ABCDEFGHIJKLMNOPQRSTUVWXYZ"))
def test_parse_inverts_pair_rendering(reasoning, letter):
    pair = InstructionPair("instr", reasoning, letter, "id")
    assert parse_letter_response(pair.response) == letter
    assert split_reasoning(pair.response) == (reasoning.strip(), letter)


def test_mock_rules():
    with pytest.raises(ValueError):
        MockRule("x")
    with pytest.raises(ValueError):
        MockRule("x", index=0, contains="a")
    script = MockScript((MockRule("second", index=1), MockRule("hit \\1", pattern=r"id=(\w+)"),
                         MockRule("plain", contains="hello")), "fallback")
    c = MockClient(script)
    u = lambda s: [ChatMessage("user", s)]
    assert c.complete(u("hello")) == "plain"
    assert c.complete(u("id=abc")) == "second"
    assert c.complete(u("id=abc")) == "hit abc"
    assert c.complete(u("nothing")) == "fallback"
    assert len(c.calls) == 4
    assert MockScript.from_dict(script.to_dict()) == script


def test_mock_is_a_pure_function_of_inputs():
    msgs = build_zero_shot_prompt(lcg_window(20, 9))
    a, b = MockClient(), MockClient()
    assert a.complete(msgs, 0.3, 100, 5) == b.complete(msgs, 0.3, 100, 5)


def test_default_mock_refuses_classification():
    p = LlmLetterPredictor(MockClient())
    rec = synth_dataset(GenSpec(subjects=("S1",), letters="B", reps_per_letter=1, modes=("2D",))).recordings[0]
    assert p(rec) is None


def test_llm_predictor_parses_scripted_letter():
    script = MockScript((MockRule("Strokes suggest B.\nFinal answer: B", contains="Recording to classify:"),))
    rec = synth_dataset(GenSpec(subjects=("S1",), letters="B", reps_per_letter=1, modes=("2D",))).recordings[0]
    pred = LlmLetterPredictor(MockClient(script))(rec)
    assert (pred.letter, pred.source) == ("B", Source.LLM)
    few = LlmLetterPredictor(MockClient(script), [(lcg_window(128, 1), "A")], budget=10 ** 5)
    assert "Example 1:" in few.messages(rec)[1].content


def test_explain_restructure_diversify_steps():
    c = MockClient()
    w = lcg_window(32, 5)
    raw = generate_explanation(c, w, "K")
    assert "letter K" in raw and "The ground truth letter is K." in c.calls[0][0][1].content
    reasoning, conclusion = restructure_response(c, raw, expected="K")
    assert conclusion == "K" and reasoning and ANSWER_MARKER not in reasoning
    prompts = diversify_prompt(c, "base text", 3)
    assert len(prompts) == len(set(prompts)) == 3
    with pytest.raises(ValueError):
        diversify_prompt(c, "base", 0)
    with pytest.raises(ValueError):
        restructure_response(c, "  ")


def test_diversify_falls_back_to_base():
    c = MockClient(MockScript((MockRule("1. same\n2. same", contains="rewrite"),)))
    assert diversify_prompt(c, "base", 2) == ["base", "same"]
    with pytest.raises(ValueError, match="distinct"):
        diversify_prompt(c, "base", 3)


def test_restructure_retries_then_fails():
    c = MockClient(MockScript((), "no marker here"))
    with pytest.raises(ValueError, match="restructure"):
        restructure_response(c, "raw", attempts=2)
    assert len(c.calls) == 2
    wrong = MockClient(MockScript((), "Reasoning: x\nFinal answer: Q"))
    with pytest.raises(ValueError, match="expected K"):
        restructure_response(wrong, "raw", expected="K")


def test_full_pair_dataset_count_and_labels(s1_train):
    assert len(s1_train) == 520
    pairs = build_pair_dataset(MockClient(), s1_train, 3, jobs=4)
    assert len(pairs) == 1560
    letters = {r.id: r.letter for r in s1_train}
    assert all(p.conclusion == letters[p.source_id] for p in pairs)
    assert all(parse_letter_response(p.response) == p.conclusion for p in pairs)
    assert [p.source_id for p in pairs[::3]] == [r.id for r in s1_train]


def test_single_recording_single_variation(s1_train):
    one = Dataset((s1_train.recordings[7],))
    pairs = build_pair_dataset(MockClient(), one, 1)
    assert len(pairs) == 1 and pairs[0].conclusion == one.recordings[0].letter


def test_pair_export_is_byte_identical_across_runs(s1_train, tmp_path):
    part = Dataset(s1_train.recordings[:40])
    export_pairs(build_pair_dataset(MockClient(), part, 3, jobs=1), tmp_path / "a.jsonl")
    export_pairs(build_pair_dataset(MockClient(), part, 3, jobs=4), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"instruction", "response", "letter", "source_id"}
    assert load_pairs(tmp_path / "a.jsonl") == build_pair_dataset(MockClient(), part, 3)


def test_pair_failure_keeps_checkpoint_and_resumes(s1_train, tmp_path):
    part = Dataset(s1_train.recordings[:6])
    bad_id = part.recordings[3].id

    class Flaky(MockClient):
        def __init__(self, broken):
            super().__init__()
            self.broken = broken

        def complete(self, messages, *a, **kw):
            if self.broken and "The ground truth letter is" in messages[1].content and \
                    serialize_pseudo_text(window_for(part.recordings[3])) in messages[1].content:
                raise TransportError("boom", 3)
            return super().complete(messages, *a, **kw)

    ck = tmp_path / "ck.jsonl"
    with pytest.raises(PairGenerationError) as err:
        build_pair_dataset(Flaky(True), part, 2, checkpoint=ck)
    assert err.value.completed == 3 and err.value.checkpoint == str(ck)
    assert bad_id in str(err.value)
    assert len(ck.read_text().splitlines()) == 3
    resumed = Flaky(False)
    pairs = build_pair_dataset(resumed, part, 2, checkpoint=ck)
    assert len(pairs) == 12
    # three finished recordings are not requested again: three calls each for the rest
    assert len(resumed.calls) == 9
    assert pairs == build_pair_dataset(MockClient(), part, 2)


def test_pair_clients_roles(s1_train):
    ex, re_, di = MockClient(), MockClient(), MockClient()
    build_pair_dataset(PairClients(ex, re_, di), Dataset(s1_train.recordings[:2]), 2)
    assert len(ex.calls) == len(re_.calls) == len(di.calls) == 2
    assert all("ground truth" in c[0][1].content for c in ex.calls)


def _http(handler, **kw):
    sleeps = []
    client = HttpClient("https://llm.test/v1/", "m1", api_key="k", transport=httpx.MockTransport(handler),
                        sleep=sleeps.append, **kw)
    return client, sleeps


def _ok(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_http_request_shape():
    seen = []

    def handler(req):
        seen.append(req)
        return _ok("Final answer: A")

    client, _ = _http(handler)
    out = client.complete([ChatMessage("user", "hi")], temperature=0.2, max_tokens=7, seed=3)
    assert out == "Final answer: A"
    req = seen[0]
    assert str(req.url) == "https://llm.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer k"
    assert json.loads(req.content) == {"model": "m1", "messages": [{"role": "user", "content": "hi"}],
                                       "temperature": 0.2, "max_tokens": 7, "seed": 3}


def test_http_retries_server_errors_with_backoff(caplog):
    n = {"calls": 0}

    def handler(req):
        n["calls"] += 1
        return httpx.Response(503, text="busy")

    client, sleeps = _http(handler)
    with caplog.at_level(logging.WARNING, logger="airglyph.llm"):
        with pytest.raises(TransportError) as err:
            client.complete([ChatMessage("user", "hi")])
    assert n["calls"] == 3 and sleeps == [1.0, 2.0]
    assert (err.value.attempts, err.value.status, err.value.body) == (3, 503, "busy")
    assert "attempt 1/3" in caplog.text and "attempt 2/3" in caplog.text


def test_http_recovers_after_transient_failure():
    replies = iter([httpx.Response(429), _ok("fine")])
    client, sleeps = _http(lambda req: next(replies))
    assert client.complete([ChatMessage("user", "hi")]) == "fine"
    assert sleeps == [1.0]


def test_http_does_not_retry_client_errors():
    n = {"calls": 0}

    def handler(req):
        n["calls"] += 1
        return httpx.Response(401, text="bad key")

    client, sleeps = _http(handler)
    with pytest.raises(TransportError, match="rejected"):
        client.complete([ChatMessage("user", "hi")])
    assert n["calls"] == 1 and sleeps == []


def test_http_connection_errors_are_retried():
    def handler(req):
        raise httpx.ConnectError("refused", request=req)

    client, sleeps = _http(handler, max_attempts=2)
    with pytest.raises(TransportError, match="ConnectError"):
        client.complete([ChatMessage("user", "hi")])
    assert sleeps == [1.0]


def test_http_malformed_body():
    client, _ = _http(lambda req: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(TransportError, match="malformed"):
        client.complete([ChatMessage("user", "hi")])


def test_http_from_env():
    env = {"AIRGLYPH_LLM_BASE_URL": "https://x.test", "AIRGLYPH_LLM_MODEL": "mm", "AIRGLYPH_LLM_API_KEY": "s"}
    c = HttpClient.from_env(env)
    assert (c.base_url, c.model) == ("https://x.test", "mm")
    with pytest.raises(ValueError, match="AIRGLYPH_LLM_BASE_URL"):
        HttpClient.from_env({})
