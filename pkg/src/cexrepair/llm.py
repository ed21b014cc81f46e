"""Provider-agnostic chat-completion client: prompt templating, retries,
token/cost accounting, and an offline replay provider for hermetic tests.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources

from .errors import AuthError, MissingBinding, NoCodeBlock, ProviderError, RateLimited

log = logging.getLogger(__name__)

API_KEY_ENV = "CEXREPAIR_LLM_API_KEY"
BASE_URL_ENV = "CEXREPAIR_LLM_BASE_URL"

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_TOKENS = 8192

RETRY_ATTEMPTS = 3
RETRY_BACKOFF = (1.0, 2.0, 4.0)


class TemplateId(enum.Enum):
    InitialProof = "initial_proof"
    CexQuery = "cex_query"
    CexQueryFeedback = "cex_query_feedback"
    CompilationFix = "compilation_fix"
    Triage = "triage"
    MutatorTooWeak = "mutator_too_weak"
    MutatorWrongFact = "mutator_wrong_fact"
    MutatorOther = "mutator_other"
    DirectRepair = "direct_repair"
    IterativeRefine = "iterative_refine"
    Obfuscate = "obfuscate"
    BugInject = "bug_inject"


# Placeholders each template consumes. Rendering substitutes exactly these
# tokens and nothing else, so literal braces elsewhere in a template (JSON
# examples, Rust blocks) survive untouched.
TEMPLATE_PLACEHOLDERS: dict[TemplateId, frozenset[str]] = {
    TemplateId.InitialProof: frozenset({"program"}),
    TemplateId.CexQuery: frozenset({
        "num_cex", "proof_content", "extracted_loop_section",
        "error_type", "error_message", "console_error_msg",
    }),
    TemplateId.CexQueryFeedback: frozenset({
        "num_cex", "proof_content", "extracted_loop_section",
        "error_type", "error_message", "console_error_msg",
        "prev_status", "prev_stderr", "prev_gate",
    }),
    TemplateId.CompilationFix: frozenset({
        "proof_content", "original_proof", "diff", "error_message",
    }),
    TemplateId.Triage: frozenset({
        "proof_content", "error_type", "error_message",
        "console_error_msg", "cex_info",
    }),
    TemplateId.MutatorTooWeak: frozenset({
        "examples", "proof_content", "verdict_rationale", "error_type",
        "error_message", "console_error_msg", "counter_examples",
        "original_proof", "diff",
    }),
    TemplateId.MutatorWrongFact: frozenset({
        "examples", "proof_content", "verdict_rationale", "error_type",
        "error_message", "console_error_msg", "counter_examples",
        "original_proof", "diff",
    }),
    TemplateId.MutatorOther: frozenset({
        "examples", "proof_content", "verdict_rationale", "error_type",
        "error_message", "console_error_msg", "counter_examples",
        "original_proof", "diff",
    }),
    TemplateId.DirectRepair: frozenset({
        "proof_content", "error_type", "error_message", "console_error_msg",
        "cex_info", "original_proof", "diff",
    }),
    TemplateId.IterativeRefine: frozenset({
        "buggy_proof", "original_proof", "error_message",
    }),
    TemplateId.Obfuscate: frozenset({"other_notes", "ori_program"}),
    TemplateId.BugInject: frozenset({"strategy", "strategy_notes", "ground_truth"}),
}


def _load_template(template_id: TemplateId) -> str:
    ref = resources.files("cexrepair").joinpath(f"templates/{template_id.value}.txt")
    return ref.read_text(encoding="utf-8")


def load_mutator_examples(kind: str) -> str:
    ref = resources.files("cexrepair").joinpath(f"mutator_examples/{kind}.txt")
    return ref.read_text(encoding="utf-8")


def render_template(template_id: TemplateId, bindings: dict[str, object]) -> str:
    """Exact placeholder substitution, nothing else rewritten."""
    text = _load_template(template_id)
    placeholders = TEMPLATE_PLACEHOLDERS[template_id]
    for name in sorted(placeholders, key=len, reverse=True):
        if name not in bindings:
            raise MissingBinding(name)
        text = text.replace("{" + name + "}", str(bindings[name]))
    return text


_FENCE_RE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```", re.DOTALL)


def extract_code_block(completion: str, fence_language_tag: str = "") -> str:
    """Body of the last fenced block matching the tag.

    Completions are asked to put the final code "in the end", so when several
    fences appear the last matching one wins. An empty tag matches any fence.
    """
    matches = [
        m.group(2)
        for m in _FENCE_RE.finditer(completion)
        if not fence_language_tag or m.group(1) == fence_language_tag
    ]
    if not matches:
        raise NoCodeBlock(f"no fenced {fence_language_tag or 'code'} block in completion")
    return matches[-1].rstrip("\n") + "\n"


@dataclass
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass
class CostLedger:
    """Monotone token/cost totals, safe to update from concurrent tasks."""

    price_in_per_1k: float = 0.0
    price_out_per_1k: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0
    cost_usd: float = 0.0
    calls: int = 0
    wall_time: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_call(self, usage: Usage | None, wall_time: float = 0.0):
        with self._lock:
            self.calls += 1
            self.wall_time += wall_time
            if usage is not None:
                self.input_tokens += usage.input_tokens
                self.output_tokens += usage.output_tokens
                self.cost_usd += (
                    usage.input_tokens / 1000.0 * self.price_in_per_1k
                    + usage.output_tokens / 1000.0 * self.price_out_per_1k
                )

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens,
                "cost_usd": self.cost_usd,
                "calls": self.calls,
                "wall_time": self.wall_time,
            }


@dataclass
class CompletionRequest:
    template_id: TemplateId
    bindings: dict[str, object]
    temperature: float = DEFAULT_TEMPERATURE
    n_samples: int = 1
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def render(self) -> str:
        return render_template(self.template_id, self.bindings)


def bindings_digest(template_id: TemplateId, bindings: dict[str, object]) -> str:
    payload = json.dumps(
        {"template": template_id.value,
         "bindings": {k: str(v) for k, v in sorted(bindings.items())}},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:24]


class ReplayProvider:
    """Serves canned completions from a fixture directory.

    Files are keyed by template id plus a hash of the bindings, which makes
    replayed pipelines fully deterministic: same inputs, same prompt, same
    canned answer.
    """

    name = "replay"

    def __init__(self, fixtures_dir: str):
        self.fixtures_dir = fixtures_dir

    def _path(self, request: CompletionRequest) -> str:
        key = bindings_digest(request.template_id, request.bindings)
        return os.path.join(self.fixtures_dir, f"{request.template_id.value}-{key}.json")

    def record(self, template_id: TemplateId, bindings: dict[str, object],
               completions: list[str], usages: list[Usage] | None = None) -> str:
        """Write a fixture for the given request; returns the fixture path."""
        request = CompletionRequest(template_id=template_id, bindings=bindings)
        path = self._path(request)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        entries = []
        for i, text in enumerate(completions):
            usage = usages[i] if usages else Usage(
                input_tokens=max(1, len(request.render()) // 4),
                output_tokens=max(1, len(text) // 4),
            )
            entries.append({
                "text": text,
                "input_tokens": usage.input_tokens,
                "output_tokens": usage.output_tokens,
            })
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"completions": entries}, fh, indent=1)
        return path

    def complete_once(self, request: CompletionRequest) -> list[tuple[str, Usage]]:
        path = self._path(request)
        if not os.path.exists(path):
            raise ProviderError(
                f"no replay fixture for {request.template_id.value} at {path}")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        entries = data["completions"][:request.n_samples]
        return [
            (e["text"], Usage(e.get("input_tokens", 0), e.get("output_tokens", 0)))
            for e in entries
        ]


class LiveProvider:
    """OpenAI-compatible chat completions over HTTP."""

    name = "live"

    def __init__(self, model: str, base_url: str | None = None,
                 api_key: str | None = None, timeout: float = 120.0):
        self.model = model
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or "").rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        if not self.base_url:
            raise AuthError(f"no LLM endpoint configured: set ${BASE_URL_ENV}")
        if not self.api_key:
            raise AuthError(f"no API key configured: set ${API_KEY_ENV}")

    def complete_once(self, request: CompletionRequest) -> list[tuple[str, Usage]]:
        import httpx

        prompt = request.render()
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
        }
        try:
            response = httpx.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if response.status_code == 401:
            raise AuthError("provider rejected credentials")
        if response.status_code == 429:
            raise RateLimited("provider rate limit")
        if response.status_code >= 500:
            raise ProviderError(f"provider error {response.status_code}")
        if response.status_code != 200:
            raise ProviderError(
                f"unexpected status {response.status_code}: {response.text[:200]}")
        body = response.json()
        usage = body.get("usage", {})
        n = max(1, len(body.get("choices", [])))
        per_choice = Usage(
            input_tokens=int(usage.get("prompt_tokens", 0)) // n,
            output_tokens=int(usage.get("completion_tokens", 0)) // n,
        )
        return [
            (choice["message"]["content"], per_choice)
            for choice in body.get("choices", [])
        ]


class LLMClient:
    """Retrying front door over a provider, with shared cost accounting."""

    def __init__(self, provider, ledger: CostLedger | None = None,
                 sleep=time.sleep):
        self.provider = provider
        self.ledger = ledger if ledger is not None else CostLedger()
        self._sleep = sleep

    def complete(self, request: CompletionRequest) -> list[tuple[str, Usage]]:
        last_error: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS + 1):
            start = time.monotonic()
            try:
                results = self.provider.complete_once(request)
            except (RateLimited, ProviderError) as exc:
                self.ledger.record_call(None, time.monotonic() - start)
                if isinstance(exc, AuthError):
                    raise
                last_error = exc
                if attempt < RETRY_ATTEMPTS and _transient(exc):
                    self._sleep(RETRY_BACKOFF[attempt])
                    continue
                raise
            elapsed = time.monotonic() - start
            if len(results) < request.n_samples:
                log.warning(
                    "provider returned %d/%d completions for %s",
                    len(results), request.n_samples, request.template_id.value)
            total = Usage()
            for _, usage in results:
                total.input_tokens += usage.input_tokens
                total.output_tokens += usage.output_tokens
            self.ledger.record_call(total, elapsed)
            return results
        raise last_error if last_error else ProviderError("no completion produced")


def _transient(exc: Exception) -> bool:
    if isinstance(exc, AuthError):
        return False
    if isinstance(exc, RateLimited):
        return True
    return "transport" in str(exc) or "provider error 5" in str(exc)
