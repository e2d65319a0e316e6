"""Prompt templates, chat-completions clients and response parsing.

Every recommender behind the pipeline speaks the same wire shape
(POST {base_url}/v1/chat/completions, temperature 0, first choice
message content).  Two mock kinds stand in for real services during
tests and offline runs: a scripted replayer and a content-aware
retrieval mock that answers from the product index.
"""
from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import requests

from .catalog import Catalog
from .errors import BackendError, ConfigError, ParseError, TemplateError
from .retrieval import VectorIndex, nearest

__all__ = [
    "PromptTemplate",
    "load_template",
    "render_prompt",
    "render_product_prompt",
    "CompletionResult",
    "RecEntry",
    "RecommendationSet",
    "HttpChatBackend",
    "ScriptedChatBackend",
    "RetrievalChatBackend",
    "make_backend",
    "parse_numbered_list",
    "assign_label_via_llm",
    "assign_score_via_llm",
]

TEMPLATE_VERSION = "v1"
TEMPLATE_NAMES = (
    "server_recommend",
    "local_recommend",
    "sensitivity_label",
    "sensitivity_score",
)

_PLACEHOLDERS = ("{count}", "{history}", "{product}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    system_text: str
    user_text_template: str


def load_template(name: str, version: str = TEMPLATE_VERSION) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise ConfigError(f"unknown template {name!r}; expected one of {TEMPLATE_NAMES}")
    asset = resources.files("privrec").joinpath(f"prompts/{name}.{version}.txt")
    try:
        text = asset.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no template asset for {name} at version {version}")
    system_text, sep, user_template = text.partition("\n---\n")
    if not sep:
        raise ConfigError(f"template asset {name}.{version} is missing its section separator")
    return PromptTemplate(
        name=name,
        version=version,
        system_text=system_text.strip(),
        user_text_template=user_template.strip("\n"),
    )


def _substitute(template: PromptTemplate, required: Sequence[str], values: dict[str, str]) -> str:
    user = template.user_text_template
    for placeholder in required:
        if placeholder not in user:
            raise TemplateError(f"template {template.name} lacks required placeholder {placeholder}")
    for placeholder in _PLACEHOLDERS:
        if placeholder not in required and placeholder in user:
            raise TemplateError(f"template {template.name} has unexpected placeholder {placeholder}")
    for placeholder in required:
        user = user.replace(placeholder, values[placeholder])
    return user


def render_prompt(
    template: PromptTemplate, count: int, history_texts: Sequence[str]
) -> tuple[str, str]:
    """Fill a recommendation template; returns (system, user) texts.

    The history renders as a numbered list, so the same items in the
    same order always yield the same bytes, and the count is literal
    in the user text (rendering is injective in count).
    """
    if count < 1:
        raise ConfigError(f"requested count must be positive, got {count}")
    history_texts = list(history_texts)
    if not history_texts:
        raise TemplateError("cannot render a recommendation prompt over an empty history")
    history = "\n".join(f"{i}. {text}" for i, text in enumerate(history_texts, 1))
    user = _substitute(
        template,
        ("{count}", "{history}"),
        {"{count}": str(count), "{history}": history},
    )
    return template.system_text, user


def render_product_prompt(template: PromptTemplate, product_text: str) -> tuple[str, str]:
    """Fill a labeling / scoring template with one product text."""
    if not product_text.strip():
        raise TemplateError("cannot render a product prompt for empty text")
    user = _substitute(template, ("{product}",), {"{product}": product_text})
    return template.system_text, user


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_seconds: float


@dataclass(frozen=True)
class RecEntry:
    rank: int
    text: str


@dataclass
class RecommendationSet:
    entries: list[RecEntry]
    provenance: str  # "server" | "local"
    shortfall: int = 0
    latency_seconds: float = 0.0
    raw_response: str = ""


class HttpChatBackend:
    """Chat-completions client for remote_api and local_endpoint kinds.

    The auth token is read from the named environment variable at call
    time and appears only in the Authorization header, never in
    identity(), logs or artifacts.
    """

    def __init__(
        self,
        kind: str,
        base_url: str,
        model_name: str = "",
        auth_env: str | None = None,
        timeout: float = 60.0,
        max_output_items: int = 64,
    ):
        if kind not in ("remote_api", "local_endpoint"):
            raise ConfigError(f"unknown HTTP chat backend kind: {kind!r}")
        if not base_url:
            raise ConfigError(f"{kind} backend requires a base_url")
        if max_output_items < 1:
            raise ConfigError(f"max_output_items must be positive, got {max_output_items}")
        self.kind = kind
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.auth_env = auth_env
        self.timeout = timeout
        self.max_output_items = max_output_items

    def identity(self) -> dict:
        return {
            "kind": self.kind,
            "base_url": self.base_url,
            "model": self.model_name,
            "auth_env": self.auth_env,
        }

    def complete(self, system: str, user: str) -> CompletionResult:
        headers = {}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        }
        started = time.perf_counter()
        try:
            response = requests.post(
                f"{self.base_url}/v1/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise BackendError("transport", f"{self.kind} backend unreachable: {exc}")
        latency = time.perf_counter() - started
        if not 200 <= response.status_code < 300:
            raise BackendError(
                "protocol", f"{self.kind} backend returned HTTP {response.status_code}"
            )
        try:
            payload = response.json()
            choices = payload["choices"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError("protocol", f"malformed chat completion payload: {exc}")
        if not choices:
            raise BackendError("empty", "chat completion carried no choices")
        try:
            content = choices[0]["message"]["content"]
        except (KeyError, TypeError, IndexError) as exc:
            raise BackendError("protocol", f"malformed chat completion choice: {exc}")
        if not isinstance(content, str) or not content.strip():
            raise BackendError("empty", "chat completion content is empty")
        return CompletionResult(text=content, latency_seconds=latency)


class ScriptedChatBackend:
    """Fixture replayer.

    With keyed=False responses cycle in call order behind a lock; with
    keyed=True the response is chosen by a digest of the user prompt,
    which stays deterministic under any thread interleaving.  Calls are
    recorded so tests can inspect exactly what a backend was sent.
    """

    kind = "mock_scripted"

    def __init__(self, responses: Sequence[str], delay: float = 0.0, keyed: bool = False,
                 max_output_items: int = 64):
        if not responses:
            raise ConfigError("scripted backend needs at least one response")
        self.responses = list(responses)
        self.delay = delay
        self.keyed = keyed
        self.max_output_items = max_output_items
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        self._cursor = 0

    def identity(self) -> dict:
        digest = hashlib.sha256("\x00".join(self.responses).encode("utf-8")).hexdigest()
        return {"kind": self.kind, "keyed": self.keyed, "script_digest": digest[:16]}

    def complete(self, system: str, user: str) -> CompletionResult:
        started = time.perf_counter()
        if self.delay:
            time.sleep(self.delay)
        if self.keyed:
            key = int.from_bytes(hashlib.sha256(user.encode("utf-8")).digest()[:8], "big")
            response = self.responses[key % len(self.responses)]
        else:
            with self._lock:
                response = self.responses[self._cursor % len(self.responses)]
                self._cursor += 1
        with self._lock:
            self.calls.append((system, user))
        return CompletionResult(text=response, latency_seconds=time.perf_counter() - started)


_COUNT_RE = re.compile(r"(?:recommend|suggest only)\s+(\d+)\b")
_CATEGORY_RE = re.compile(r"^Main Category: (.*)$", re.MULTILINE)


class RetrievalChatBackend:
    """Content-aware mock: answers with titles of catalog products.

    mode "nearest" embeds the user prompt and returns the titles of the
    closest index rows.  mode "same_category" reads the category lines
    out of the prompt's history block and round-robins products from
    those categories, covering every category the prompt mentions.
    Useful as a deterministic stand-in with recommendation-shaped
    behaviour; requested counts are parsed from the rendered prompt.
    """

    kind = "mock_retrieval"

    def __init__(self, catalog: Catalog, index: VectorIndex, provider,
                 mode: str = "nearest", delay: float = 0.0, max_output_items: int = 64):
        if mode not in ("nearest", "same_category"):
            raise ConfigError(f"unknown retrieval mock mode: {mode!r}")
        self.catalog = catalog
        self.index = index
        self.provider = provider
        self.mode = mode
        self.delay = delay
        self.max_output_items = max_output_items
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        by_category: dict[str, list[str]] = {}
        for pid in sorted(catalog.products):
            by_category.setdefault(catalog.products[pid].main_category, []).append(pid)
        self._by_category = by_category

    def identity(self) -> dict:
        return {"kind": self.kind, "mode": self.mode, "rows": len(self.index)}

    def _requested_count(self, user: str) -> int:
        match = _COUNT_RE.search(user)
        return int(match.group(1)) if match else 10

    def _pick_same_category(self, user: str, count: int) -> list[str]:
        categories = []
        for name in _CATEGORY_RE.findall(user):
            if name in self._by_category and name not in categories:
                categories.append(name)
        chosen: list[str] = []
        used: set[str] = set()
        cursors = {name: 0 for name in categories}
        while len(chosen) < count and categories:
            progressed = False
            for name in categories:
                if len(chosen) >= count:
                    break
                pool = self._by_category[name]
                while cursors[name] < len(pool) and pool[cursors[name]] in used:
                    cursors[name] += 1
                if cursors[name] < len(pool):
                    pid = pool[cursors[name]]
                    chosen.append(pid)
                    used.add(pid)
                    progressed = True
            if not progressed:
                break
        if len(chosen) < count:
            for pid in sorted(self.catalog.products):
                if len(chosen) >= count:
                    break
                if pid not in used:
                    chosen.append(pid)
                    used.add(pid)
        return chosen

    def complete(self, system: str, user: str) -> CompletionResult:
        started = time.perf_counter()
        if self.delay:
            time.sleep(self.delay)
        count = min(self._requested_count(user), self.max_output_items)
        if self.mode == "nearest":
            query = self.provider.embed([user])[0]
            hits = nearest(self.index, query, min(count, len(self.index)))
            picked = [pid for pid, _, _ in hits]
        else:
            picked = self._pick_same_category(user, count)
        lines = [
            f"{rank}. {self.catalog.products[pid].title}"
            for rank, pid in enumerate(picked, 1)
        ]
        with self._lock:
            self.calls.append((system, user))
        return CompletionResult(
            text="\n".join(lines), latency_seconds=time.perf_counter() - started
        )


def make_backend(config: dict, *, catalog: Catalog | None = None,
                 index: VectorIndex | None = None, provider=None):
    """Build a chat backend from its run-config mapping.

    Network kinds require base_url and mock kinds forbid it; the
    retrieval mock additionally needs the catalog, index and embedding
    provider the caller is running with.
    """
    kind = config.get("kind")
    base_url = config.get("base_url")
    if kind in ("remote_api", "local_endpoint"):
        return HttpChatBackend(
            kind=kind,
            base_url=base_url or "",
            model_name=config.get("model", ""),
            auth_env=config.get("auth_env"),
            timeout=float(config.get("timeout", 60.0)),
            max_output_items=int(config.get("max_output_items", 64)),
        )
    if base_url:
        raise ConfigError(f"mock backend kind {kind!r} must not set base_url")
    if kind == "mock_scripted":
        return ScriptedChatBackend(
            responses=config.get("responses", ()),
            delay=float(config.get("delay", 0.0)),
            keyed=bool(config.get("keyed", False)),
            max_output_items=int(config.get("max_output_items", 64)),
        )
    if kind == "mock_retrieval":
        if catalog is None or index is None or provider is None:
            raise ConfigError("mock_retrieval backend needs catalog, index and provider wiring")
        return RetrievalChatBackend(
            catalog=catalog,
            index=index,
            provider=provider,
            mode=config.get("mode", "nearest"),
            delay=float(config.get("delay", 0.0)),
            max_output_items=int(config.get("max_output_items", 64)),
        )
    raise ConfigError(f"unknown backend kind: {kind!r}")


_ENTRY_RE = re.compile(r"^\s*\d+\s*[.):]\s*(.*\S)\s*$")


def parse_numbered_list(raw: str, expected: int) -> tuple[list[str], int]:
    """Extract numbered entries; returns (texts, shortfall).

    Source numbering is ignored beyond marking a line as an entry, so
    gaps renumber contiguously.  Fewer entries than expected is a
    shortfall, never padded; zero entries is a ParseError carrying the
    raw text for the audit trail.
    """
    if expected < 1:
        raise ConfigError(f"expected entry count must be positive, got {expected}")
    entries = []
    for line in raw.splitlines():
        match = _ENTRY_RE.match(line)
        if match:
            entries.append(match.group(1))
    if not entries:
        raise ParseError("response contained no numbered entries", raw=raw)
    entries = entries[:expected]
    return entries, expected - len(entries)


def _clean_scalar_reply(raw: str) -> str:
    return raw.strip().strip("'\"`").strip()


def assign_label_via_llm(backend, product_text: str,
                         template: PromptTemplate | None = None) -> bool:
    """Ask a backend for the sensitive / nonsensitive label of one product.

    Only the two exact labels are accepted (case-insensitive, quotes
    stripped); anything else is a ParseError, never a silent default.
    """
    template = template or load_template("sensitivity_label")
    system, user = render_product_prompt(template, product_text)
    reply = _clean_scalar_reply(backend.complete(system, user).text)
    label = reply.lower()
    if label == "sensitive":
        return True
    if label == "nonsensitive":
        return False
    raise ParseError(f"unrecognized sensitivity label: {reply!r}", raw=reply)


def assign_score_via_llm(backend, product_text: str,
                         template: PromptTemplate | None = None) -> float:
    """Ask a backend for a sensitivity score in [0, 1] for one product."""
    template = template or load_template("sensitivity_score")
    system, user = render_product_prompt(template, product_text)
    reply = _clean_scalar_reply(backend.complete(system, user).text)
    try:
        score = float(reply)
    except ValueError:
        raise ParseError(f"sensitivity score is not a decimal: {reply!r}", raw=reply)
    if not (0.0 <= score <= 1.0):
        raise ParseError(f"sensitivity score outside [0, 1]: {score}", raw=reply)
    return score
