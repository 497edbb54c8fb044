"""Prompting chat models with accelerometer windows, and building fine-tuning pairs.

Every template asks the model to finish with ``Final answer: X`` so replies
parse deterministically. Two clients share one interface: :class:`HttpClient`
talks to a chat-completions endpoint and :class:`MockClient` answers from a
script so whole pipelines can run offline and reproducibly.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .classify import LetterPrediction, Source
from .core import Dataset, Recording, letter_index
from .preprocess import DEFAULT_LEN, Window, normalize, resample, serialize_pseudo_text

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
ANSWER_MARKER = "Final answer:"
ENV_BASE_URL = "AIRGLYPH_LLM_BASE_URL"
ENV_API_KEY = "AIRGLYPH_LLM_API_KEY"
ENV_MODEL = "AIRGLYPH_LLM_MODEL"


class NoLetterFound(ValueError):
    pass


class TransportError(RuntimeError):
    """A request that failed after all retries (or could not be retried)."""

    def __init__(self, message: str, attempts: int = 1, status: int | None = None, body: str | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status
        self.body = body


class PairGenerationError(RuntimeError):
    def __init__(self, message: str, completed: int, checkpoint: str | None):
        super().__init__(message)
        self.completed = completed
        self.checkpoint = checkpoint


def token_estimate(text: str) -> int:
    """Rough token count, ``ceil(len(text) / 4)``. A heuristic, not a tokenizer."""
    return -(-len(text) // 4)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.content or not self.content.strip():
            raise ValueError("message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


def prompt_tokens(messages: Sequence[ChatMessage]) -> int:
    return sum(token_estimate(m.content) for m in messages)


# -- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class Exemplar:
    serialized: str
    letter: str
    explanation: str | None = None

    def render(self, number: int) -> str:
        parts = [f"Example {number}:", self.serialized.rstrip("\n")]
        if self.explanation:
            parts.append(f"Explanation: {self.explanation.strip()}")
        parts.append(f"Letter: {self.letter}")
        return "\n".join(parts)


@dataclass(frozen=True)
class PromptTemplate:
    task_preamble: str = (
        "You are given readings from a 3-axis accelerometer held in the writing hand while a person writes "
        "a single capital English letter (A-Z). The data is a table with columns t (sample index), ax, ay and "
        "az (acceleration per axis, z-scored per axis)."
    )
    cot_instruction: str = (
        "Think step by step. Describe how each axis changes over time, infer the pen strokes that would "
        "produce those changes, and then decide which letter the strokes form."
    )
    answer_format_instruction: str = (
        f"After your reasoning, write the letter on the last line as '{ANSWER_MARKER} X', "
        "where X is one capital letter."
    )
    fewshot_intro: str = "Labeled examples of recordings and the letters they show:"
    query_intro: str = "Recording to classify:"
    fewshot_block: tuple = ()

    def system_text(self) -> str:
        return "\n\n".join([self.task_preamble, self.cot_instruction, self.answer_format_instruction])

    def exemplar_text(self) -> str:
        if not self.fewshot_block:
            return ""
        body = "\n\n".join(ex.render(i + 1) for i, ex in enumerate(self.fewshot_block))
        return f"{self.fewshot_intro}\n\n{body}\n\n"

    def messages(self, serialized: str) -> list[ChatMessage]:
        user = self.exemplar_text() + f"{self.query_intro}\n{serialized}"
        return [ChatMessage("system", self.system_text()), ChatMessage("user", user)]


DEFAULT_TEMPLATE = PromptTemplate()


def _serialized(window, decimals: int) -> str:
    return serialize_pseudo_text(window, decimals)


def build_zero_shot_prompt(window: "Window | object", template: PromptTemplate = DEFAULT_TEMPLATE,
                           decimals: int = 3) -> list[ChatMessage]:
    """System message with the instructions, user message with the serialized window."""
    return replace(template, fewshot_block=()).messages(_serialized(window, decimals))


def build_few_shot_prompt(window, exemplars: Sequence[tuple], budget: int,
                          template: PromptTemplate = DEFAULT_TEMPLATE,
                          decimals: int = 3) -> tuple[list[ChatMessage], int]:
    """Zero-shot prompt plus as many leading ``exemplars`` as fit ``budget``.

    ``exemplars`` holds ``(window, letter)`` or ``(window, letter, explanation)``
    tuples. Returns the messages and the number of exemplars included. The
    budget is measured with :func:`token_estimate` over all message contents.
    """
    if not exemplars:
        raise ValueError("few-shot prompt needs at least one exemplar")
    query = _serialized(window, decimals)
    block: list[Exemplar] = []
    best, n_used = None, 0
    for ex in exemplars:
        w, letter, *rest = ex
        letter_index(letter)
        block.append(Exemplar(_serialized(w, decimals), letter, rest[0] if rest else None))
        msgs = replace(template, fewshot_block=tuple(block)).messages(query)
        if prompt_tokens(msgs) > budget:
            break
        best, n_used = msgs, len(block)
    if best is None:
        raise ValueError(f"first exemplar alone exceeds the budget of {budget} tokens")
    return best, n_used


# -- response parsing --------------------------------------------------------

_LETTER_RE = re.compile(
    r"(?:final\s+answer|answer|the\s+letter\s+is|letter)(?:\s+is)?[\s:=*\"'`(\[\-]*"
    r"([A-Za-z])(?![A-Za-z0-9])(?=[\s*\"'`)\].,;!]*(?:$|\n|[,;]|\s+(?:because|since|as)\b))",
    re.IGNORECASE,
)


def parse_letter_response(text: str) -> str:
    """The single letter after the last answer marker in ``text``.

    Markers, case-insensitive: "final answer", "answer", "the letter is",
    "letter". The letter must stand alone at the end of its clause, so
    refusals such as "Answer: I cannot tell" do not yield a letter.
    """
    matches = list(_LETTER_RE.finditer(text or ""))
    if not matches:
        raise NoLetterFound(f"no answer letter in response {(text or '')[:80]!r}")
    return matches[-1].group(1).upper()


# -- clients -----------------------------------------------------------------

class ChatClient(Protocol):
    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.0, max_tokens: int = 512,
                 seed: int | None = None) -> str: ...


class HttpClient:
    """Chat-completions client: POST ``{base_url}/chat/completions``.

    Connection failures, HTTP 429 and 5xx responses are retried up to
    ``max_attempts`` in total with exponential backoff (``backoff_s``,
    doubled each retry). Other 4xx responses fail immediately.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 max_attempts: int = 3, backoff_s: float = 1.0, sleep: Callable[[float], None] = time.sleep,
                 transport=None):
        import httpx

        if not base_url:
            raise ValueError("base_url is required")
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, env=None, **kwargs) -> "HttpClient":
        env = os.environ if env is None else env
        base = kwargs.pop("base_url", None) or env.get(ENV_BASE_URL)
        if not base:
            raise ValueError(f"set {ENV_BASE_URL} or pass base_url")
        return cls(base, kwargs.pop("model", None) or env.get(ENV_MODEL, ""),
                   kwargs.pop("api_key", None) or env.get(ENV_API_KEY), **kwargs)

    def close(self):
        self._http.close()

    def complete(self, messages, temperature: float = 0.0, max_tokens: int = 512, seed: int | None = None) -> str:
        import httpx

        body = {"model": self.model, "messages": [m.to_dict() for m in messages],
                "temperature": temperature, "max_tokens": max_tokens}
        if seed is not None:
            body["seed"] = seed
        url = f"{self.base_url}/chat/completions"
        last_status, last_body, last_err = None, None, ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._http.post(url, json=body)
            except httpx.TransportError as exc:
                last_status, last_body, last_err = None, None, f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise TransportError(f"malformed completion response ({exc})", attempt,
                                             resp.status_code, resp.text) from exc
                last_status, last_body = resp.status_code, resp.text
                last_err = f"HTTP {resp.status_code}"
                if resp.status_code != 429 and resp.status_code < 500:
                    raise TransportError(f"request rejected: {last_err}", attempt, last_status, last_body)
            if attempt < self.max_attempts:
                delay = self.backoff_s * 2 ** (attempt - 1)
                log.warning("chat request attempt %d/%d failed (%s); retrying in %.1fs",
                            attempt, self.max_attempts, last_err, delay)
                self._sleep(delay)
        log.error("chat request failed after %d attempts (%s)", self.max_attempts, last_err)
        raise TransportError(f"request failed after {self.max_attempts} attempts: {last_err}",
                             self.max_attempts, last_status, last_body)


@dataclass(frozen=True)
class MockRule:
    response: str
    index: int | None = None
    contains: str | None = None
    pattern: str | None = None

    def __post_init__(self):
        if sum(x is not None for x in (self.index, self.contains, self.pattern)) != 1:
            raise ValueError("a mock rule needs exactly one of index, contains, pattern")
        if self.pattern is not None:
            re.compile(self.pattern)


@dataclass(frozen=True)
class MockScript:
    """Canned replies matched against the request text.

    A request's text is its message contents joined by blank lines. Rules are
    tried in order; ``pattern`` replies may reference groups (``\\1``,
    ``\\g<name>``). ``index`` rules match the n-th request a client receives,
    which makes replies depend on call order; prefer the other kinds when
    requests run concurrently.
    """

    rules: tuple = ()
    default: str = "I am unable to determine the letter from this data."

    @classmethod
    def from_dict(cls, d: dict) -> "MockScript":
        rules = tuple(MockRule(**r) for r in d.get("rules", []))
        return cls(rules, d.get("default", cls.default))

    def to_dict(self) -> dict:
        out = []
        for r in self.rules:
            item = {k: v for k, v in (("index", r.index), ("contains", r.contains), ("pattern", r.pattern))
                    if v is not None}
            item["response"] = r.response
            out.append(item)
        return {"rules": out, "default": self.default}

    @classmethod
    def load(cls, path: "str | os.PathLike | None" = None) -> "MockScript":
        """Read a script file; with no path, the bundled default script."""
        if path is None:
            text = resources.files("airglyph").joinpath("data/mock_script.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def reply(self, text: str, index: int) -> str:
        for r in self.rules:
            if r.index is not None and r.index == index:
                return r.response
            if r.contains is not None and r.contains in text:
                return r.response
            if r.pattern is not None:
                m = re.search(r.pattern, text)
                if m:
                    return m.expand(r.response)
        return self.default


class MockClient:
    """Scripted, offline chat client. ``calls`` records every request."""

    def __init__(self, script: "MockScript | dict | None" = None):
        if script is None:
            script = MockScript.load()
        elif isinstance(script, dict):
            script = MockScript.from_dict(script)
        self.script = script
        self.calls: list[tuple] = []

    def complete(self, messages, temperature: float = 0.0, max_tokens: int = 512, seed: int | None = None) -> str:
        text = "\n\n".join(m.content for m in messages)
        index = len(self.calls)
        self.calls.append((tuple(messages), temperature, max_tokens, seed))
        return self.script.reply(text, index)


# -- letter prediction with a chat model -------------------------------------

def window_for(rec: Recording, target_len: int = DEFAULT_LEN) -> Window:
    return normalize(resample(rec, target_len))


class LlmLetterPredictor:
    """Classify a recording by prompting a chat model.

    Returns ``None`` when the reply contains no parseable letter; the
    evaluation counts that as a wrong answer.
    """

    def __init__(self, client: ChatClient, exemplars: Sequence[tuple] = (), budget: int = 16_000,
                 template: PromptTemplate = DEFAULT_TEMPLATE, decimals: int = 3, temperature: float = 0.0,
                 max_tokens: int = 512, seed: int | None = None, target_len: int = DEFAULT_LEN):
        self.client = client
        self.exemplars = list(exemplars)
        self.budget, self.template, self.decimals = budget, template, decimals
        self.temperature, self.max_tokens, self.seed, self.target_len = temperature, max_tokens, seed, target_len

    def messages(self, rec: Recording) -> list[ChatMessage]:
        w = window_for(rec, self.target_len)
        if self.exemplars:
            return build_few_shot_prompt(w, self.exemplars, self.budget, self.template, self.decimals)[0]
        return build_zero_shot_prompt(w, self.template, self.decimals)

    def __call__(self, rec: Recording) -> LetterPrediction | None:
        reply = self.client.complete(self.messages(rec), self.temperature, self.max_tokens, self.seed)
        try:
            return LetterPrediction(parse_letter_response(reply), 1.0, Source.LLM)
        except NoLetterFound:
            return None


# -- instruction-answer pair generation --------------------------------------

EXPLAIN_SYSTEM = "You explain how accelerometer recordings of handwriting reveal the letter that was written."
EXPLAIN_USER = (
    "Below is a 3-axis accelerometer recording of a person writing one capital letter. "
    "The ground truth letter is {letter}. Explain, citing features of the signal, why this recording "
    "corresponds to the letter {letter}.\n\n{data}"
)
RESTRUCTURE_SYSTEM = "You rewrite explanations into a fixed two-part format."
RESTRUCTURE_USER = (
    "Rewrite the explanation below as two labeled parts. First a line starting with 'Reasoning:' that walks "
    "from the motion pattern to the letter without stating the answer up front. Then a last line "
    f"'{ANSWER_MARKER} X' with the single capital letter.\n\nExplanation to restructure:\n{{raw}}"
)
DIVERSIFY_SYSTEM = "You paraphrase instructions."
DIVERSIFY_USER = (
    "Rewrite the instruction below in {n} different ways that keep its meaning. "
    "Return one rewording per line, numbered 1 to {n}.\n\nInstruction to rewrite:\n{base}"
)
BASE_INSTRUCTION = (
    "The following table is a 3-axis accelerometer recording of a hand writing one capital English letter. "
    "Reason about the strokes the motion implies and identify the letter. "
    f"End with '{ANSWER_MARKER} X'."
)


@dataclass(frozen=True)
class InstructionPair:
    instruction: str
    reasoning: str
    conclusion: str
    source_id: str

    def __post_init__(self):
        letter_index(self.conclusion)
        if not self.reasoning.strip():
            raise ValueError("reasoning must be non-empty")
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")

    @property
    def response(self) -> str:
        return f"{self.reasoning.strip()}\n{ANSWER_MARKER} {self.conclusion}"

    def to_record(self) -> dict:
        return {"instruction": self.instruction, "response": self.response, "letter": self.conclusion,
                "source_id": self.source_id}

    @classmethod
    def from_record(cls, d: dict) -> "InstructionPair":
        reasoning, conclusion = split_reasoning(d["response"])
        if conclusion != d["letter"]:
            raise ValueError(f"pair for {d['source_id']}: response concludes {conclusion}, letter is {d['letter']}")
        return cls(d["instruction"], reasoning, conclusion, d["source_id"])


def generate_explanation(client: ChatClient, window, truth: str, decimals: int = 3, seed: int | None = None,
                         temperature: float = 0.7, max_tokens: int = 768) -> str:
    letter_index(truth)
    msgs = [ChatMessage("system", EXPLAIN_SYSTEM),
            ChatMessage("user", EXPLAIN_USER.format(letter=truth, data=_serialized(window, decimals)))]
    return client.complete(msgs, temperature, max_tokens, seed)


_REASONING = re.compile(r"reasoning\s*:\s*", re.IGNORECASE)
_MARKER = re.compile(re.escape(ANSWER_MARKER), re.IGNORECASE)


def split_reasoning(text: str) -> tuple[str, str]:
    """Split a two-part reply into its reasoning and the concluding letter."""
    markers = list(_MARKER.finditer(text))
    if not markers:
        raise NoLetterFound("missing final-answer marker")
    conclusion = parse_letter_response(text[markers[-1].start():])
    head = text[:markers[-1].start()]
    m = _REASONING.search(head)
    reasoning = (head[m.end():] if m else head).strip()
    if not reasoning:
        raise ValueError("reasoning part is empty")
    return reasoning, conclusion


def restructure_response(client: ChatClient, raw: str, expected: str | None = None, attempts: int = 2,
                         seed: int | None = None, max_tokens: int = 768) -> tuple[str, str]:
    """Ask ``client`` to split ``raw`` into reasoning and conclusion.

    Retries once when the reply does not parse, or (with ``expected``) when
    it concludes a different letter.
    """
    if not raw or not raw.strip():
        raise ValueError("raw explanation is empty")
    msgs = [ChatMessage("system", RESTRUCTURE_SYSTEM), ChatMessage("user", RESTRUCTURE_USER.format(raw=raw.strip()))]
    problem = ""
    for attempt in range(attempts):
        reply = client.complete(msgs, 0.0, max_tokens, seed)
        try:
            reasoning, conclusion = split_reasoning(reply)
        except ValueError as exc:
            problem = str(exc)
        else:
            if expected is None or conclusion == expected:
                return reasoning, conclusion
            problem = f"concluded {conclusion}, expected {expected}"
        log.warning("restructuring attempt %d/%d unusable: %s", attempt + 1, attempts, problem)
    raise ValueError(f"could not restructure explanation: {problem}")


_NUMBERED = re.compile(r"^\s*(?:\d+\s*[.):]|[-*])\s*(.+?)\s*$")


def diversify_prompt(client: ChatClient, base: str, n: int = 3, seed: int | None = None,
                     temperature: float = 0.9, max_tokens: int = 768) -> list[str]:
    """``n`` exact-string-distinct rewordings of ``base``.

    The base text fills in when the model returns too few distinct lines.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    msgs = [ChatMessage("system", DIVERSIFY_SYSTEM), ChatMessage("user", DIVERSIFY_USER.format(n=n, base=base))]
    reply = client.complete(msgs, temperature, max_tokens, seed)
    out: list[str] = []
    for line in reply.splitlines():
        m = _NUMBERED.match(line)
        if m and m.group(1) not in out:
            out.append(m.group(1))
    out = out[:n]
    if len(out) < n and base not in out:
        out.insert(0, base)
    if len(out) < n:
        raise ValueError(f"diversifier produced {len(out)} distinct prompts, needed {n}")
    return out


def _pair_seed(seed: int, rec_id: str) -> int:
    return (zlib.crc32(rec_id.encode("utf-8")) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF


@dataclass
class PairClients:
    """The three pipeline roles; they may all be the same client."""

    explainer: ChatClient
    restructurer: ChatClient
    diversifier: ChatClient

    @classmethod
    def single(cls, client: ChatClient) -> "PairClients":
        return cls(client, client, client)


def _pairs_for(clients: PairClients, rec: Recording, variations: int, decimals: int, seed: int,
               base: str, target_len: int) -> list[InstructionPair]:
    s = _pair_seed(seed, rec.id)
    window = window_for(rec, target_len)
    data = _serialized(window, decimals)
    raw = generate_explanation(clients.explainer, window, rec.letter, decimals, seed=s)
    reasoning, conclusion = restructure_response(clients.restructurer, raw, expected=rec.letter, seed=s)
    prompts = diversify_prompt(clients.diversifier, base, variations, seed=s)
    return [InstructionPair(f"{p}\n\n{data}", reasoning, conclusion, rec.id) for p in prompts]


def _read_checkpoint(path: Path) -> dict[str, list[InstructionPair]]:
    done: dict[str, list[InstructionPair]] = {}
    if not path.exists():
        return done
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
            done[item["source_id"]] = [InstructionPair.from_record(p) for p in item["pairs"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: corrupt checkpoint line ({exc})") from exc
    return done


def build_pair_dataset(client: "ChatClient | PairClients", train: Dataset, variations: int = 3, *,
                       jobs: int = 1, checkpoint: "str | os.PathLike | None" = None, decimals: int = 3,
                       seed: int = 0, base_instruction: str = BASE_INSTRUCTION,
                       target_len: int = DEFAULT_LEN) -> list[InstructionPair]:
    """``variations`` instruction-answer pairs per training recording.

    Per recording: explain the known letter, restructure the explanation into
    reasoning plus conclusion, and reword the base instruction ``variations``
    times. Output follows dataset order whatever ``jobs`` is. With
    ``checkpoint``, finished recordings are appended to that JSONL file as
    they complete, and recordings already present there are not requested
    again. A failure raises :class:`PairGenerationError` after the finished
    prefix is saved.
    """
    if variations < 1:
        raise ValueError("variations must be >= 1")
    clients = client if isinstance(client, PairClients) else PairClients.single(client)
    ck = Path(checkpoint) if checkpoint is not None else None
    done = _read_checkpoint(ck) if ck is not None else {}
    recs = list(train.recordings)
    for rid, pairs in done.items():
        if len(pairs) != variations:
            raise ValueError(f"checkpoint entry {rid} has {len(pairs)} pairs, expected {variations}")
    todo = [r for r in recs if r.id not in done]
    fh = ck.open("a", encoding="utf-8") if ck is not None else None

    def work(rec):
        return _pairs_for(clients, rec, variations, decimals, seed, base_instruction, target_len)

    try:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            futures = [(rec, pool.submit(work, rec)) for rec in todo]
            for n_done, (rec, fut) in enumerate(futures):
                try:
                    pairs = fut.result()
                except Exception as exc:
                    for _, f in futures[n_done + 1:]:
                        f.cancel()
                    raise PairGenerationError(f"pair generation failed at {rec.id}: {exc}",
                                              len(done), str(ck) if ck else None) from exc
                done[rec.id] = pairs
                if fh is not None:
                    fh.write(json.dumps({"source_id": rec.id, "pairs": [p.to_record() for p in pairs]},
                                        ensure_ascii=False) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return [p for r in recs for p in done[r.id]]


def export_pairs(pairs: Sequence[InstructionPair], path: "str | os.PathLike") -> None:
    """Write one JSON object per line: instruction, response, letter, source_id."""
    lines = [json.dumps(p.to_record(), ensure_ascii=False) for p in pairs]
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write pair file {path}: {exc.strerror or exc}") from exc


def load_pairs(path: "str | os.PathLike") -> list[InstructionPair]:
    text = Path(path).read_text(encoding="utf-8")
    return [InstructionPair.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
