"""Counterfactual caption generation.

Two routes produce a counterfactual for a factual caption:

* an LLM pipeline with two prompting steps - source identification followed
  by an intervention that replaces one or more identified sources - run
  against a pluggable chat-completion backend with caching and retries;
* a deterministic rule oracle that substitutes lexicon terms, used as the
  offline stand-in so the whole system is testable without network access.

Both routes emit ``CounterfactualRecord`` values that pass a shared
validator: the counterfactual must be non-empty, differ from the caption
after normalization, and alter at least one identified source span.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import requests

from .errors import BackendError, BackendResponseError, CfAudioError
from .manifest import DatasetManifest, ManifestEntry
from .synthetic import CLASS_TERMS
from .util import normalize_text, substream

logger = logging.getLogger(__name__)

POLICY_CLAUSES = {
    "primary-source": "the primary sound source",
    "background": "a background sound source",
    "ambient": "the ambient sound",
    "any": "one or more of the sources (primary, background, or ambient)",
}

_ROLES = ("primary", "background", "ambient", "unknown")

#: temperature schedule: base value per step, escalated on each retry
IDENTIFY_BASE_TEMPERATURE = 0.0
INTERVENE_BASE_TEMPERATURE = 0.7
RETRY_TEMPERATURE_STEP = 0.25
MAX_ATTEMPTS = 4

_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)

_STOPWORDS = frozenset(
    "a an the of in on at and or is are was were be been being then with "
    "some few this that these those by to for as its their his her it".split()
)

FALLBACK_SOURCES = (
    "a distant siren wailing",
    "rolling thunder",
    "a church bell tolling",
    "an engine revving",
    "rain falling on a roof",
    "waves crashing",
)


@dataclass(frozen=True)
class PromptPair:
    """The two prompting steps: identification (p1) and intervention (p2).

    ``p1_template`` must contain a ``{caption}`` slot; ``p2_template`` must
    contain ``{caption}`` and ``{sources}`` slots. Slots are replaced
    literally, so braces elsewhere in the templates are left alone.
    """

    p1_template: str
    p2_template: str
    intervention_policy: str = "any"

    def __post_init__(self):
        if "{caption}" not in self.p1_template:
            raise CfAudioError("p1 template is missing its {caption} slot")
        if "{caption}" not in self.p2_template or "{sources}" not in self.p2_template:
            raise CfAudioError("p2 template needs {caption} and {sources} slots")
        if self.intervention_policy not in POLICY_CLAUSES:
            raise CfAudioError(f"unknown intervention policy {self.intervention_policy!r}")

    @classmethod
    def default(cls, intervention_policy: str = "any") -> "PromptPair":
        prompts = resources.files("cfaudio") / "prompts"
        return cls(
            p1_template=(prompts / "identify.txt").read_text(encoding="utf-8"),
            p2_template=(prompts / "intervene.txt").read_text(encoding="utf-8"),
            intervention_policy=intervention_policy,
        )

    def render_p1(self, caption: str) -> str:
        return self.p1_template.replace("{caption}", caption)

    def render_p2(self, caption: str, sources: "SourceList") -> str:
        listing = "\n".join(f'- "{s.span}" ({s.role})' for s in sources) or "- (none identified)"
        text = self.p2_template.replace("{caption}", caption).replace("{sources}", listing)
        return text.replace("{policy}", POLICY_CLAUSES[self.intervention_policy])


@dataclass(frozen=True)
class SourceSpan:
    span: str
    role: str = "unknown"


@dataclass(frozen=True)
class SourceList:
    sources: tuple[SourceSpan, ...] = ()

    def __iter__(self):
        return iter(self.sources)

    def __len__(self) -> int:
        return len(self.sources)


@dataclass(frozen=True)
class CounterfactualRecord:
    """Outcome of one counterfactual generation, validated or not."""

    caption: str
    sources: SourceList
    counterfactual: str
    generator: str
    model_id: str
    validation_passed: bool
    failure_reason: str | None = None

    def __post_init__(self):
        if self.validation_passed:
            if not self.counterfactual.strip():
                raise CfAudioError("validated record with empty counterfactual")
            if normalize_text(self.counterfactual) == normalize_text(self.caption):
                raise CfAudioError("validated record equals its caption")


def validate_counterfactual(
    caption: str, counterfactual: str, sources: SourceList
) -> tuple[bool, str | None]:
    """Check non-emptiness, non-identity, and that some source span was altered."""
    if not counterfactual.strip():
        return False, "empty output"
    if normalize_text(counterfactual) == normalize_text(caption):
        return False, "identity output"
    if len(sources) > 0:
        lowered = counterfactual.lower()
        if all(s.span.lower() in lowered for s in sources):
            return False, "no source altered"
    return True, None


# --------------------------------------------------------------------------
# backends and response cache


class LlmBackend:
    """Minimal chat-completion interface: one prompt in, one text reply out."""

    model_id: str = "unknown"

    def complete(self, prompt: str, temperature: float) -> str:
        raise NotImplementedError


class HttpChatBackend(LlmBackend):
    """Generic chat-completions HTTP client.

    Configured by base URL and model identifier; the API key is read from an
    environment variable at call time. Transport failures are retried with
    backoff before raising. A minimum interval between requests provides
    simple rate limiting.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key_env: str = "CFAUDIO_API_KEY",
        timeout: float = 60.0,
        transport_retries: int = 3,
        min_interval: float = 0.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.min_interval = min_interval
        self._last_request = 0.0

    def complete(self, prompt: str, temperature: float) -> str:
        import os

        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.api_key_env} is not set")
        payload = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        last_error: Exception | None = None
        for attempt in range(self.transport_retries):
            wait = self.min_interval - (time.monotonic() - self._last_request)
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()
            try:
                response = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.timeout,
                )
                if response.status_code >= 500:
                    raise BackendError(f"server error {response.status_code}")
                response.raise_for_status()
                return response.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, BackendError, KeyError) as exc:
                last_error = exc
                time.sleep(min(2.0**attempt, 8.0))
        raise BackendError(f"backend failed after {self.transport_retries} attempts: {last_error}")


class StubBackend(LlmBackend):
    """Replays a fixed queue of responses; used by tests and dry runs."""

    model_id = "stub"

    def __init__(self, responses: list[str]):
        self._queue = list(responses)
        self.calls: list[tuple[str, float]] = []

    def complete(self, prompt: str, temperature: float) -> str:
        self.calls.append((prompt, temperature))
        if not self._queue:
            raise BackendError("stub backend exhausted its canned responses")
        return self._queue.pop(0)


class ResponseCache:
    """On-disk response cache plus an append-only request log.

    Entries are keyed by a hash of (model id, prompt, temperature) - the full
    identity of a sampled request - so a warm cache replays entire retry
    chains without any backend call.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.log_path = self.directory / "requests.log.jsonl"

    @staticmethod
    def key(model_id: str, prompt: str, temperature: float) -> str:
        material = "\x00".join([model_id, prompt, f"{temperature:.6f}"])
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, model_id: str, prompt: str, temperature: float) -> str | None:
        path = self._path(self.key(model_id, prompt, temperature))
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, model_id: str, prompt: str, temperature: float, response: str) -> None:
        key = self.key(model_id, prompt, temperature)
        payload = {
            "model_id": model_id,
            "temperature": temperature,
            "prompt": prompt,
            "response": response,
        }
        tmp = self._path(key).with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        tmp.replace(self._path(key))

    def log_request(self, key: str, prompt: str, response: str, retry: int) -> None:
        record = {
            "hash": key,
            "prompt": prompt,
            "response": response,
            "timestamp": time.time(),
            "retry": retry,
        }
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _complete(
    backend: LlmBackend,
    prompt: str,
    temperature: float,
    cache: ResponseCache | None,
    retry: int,
) -> str:
    if cache is not None:
        hit = cache.get(backend.model_id, prompt, temperature)
        if hit is not None:
            return hit
    response = backend.complete(prompt, temperature)
    if cache is not None:
        cache.put(backend.model_id, prompt, temperature, response)
        cache.log_request(
            ResponseCache.key(backend.model_id, prompt, temperature), prompt, response, retry
        )
    return response


# --------------------------------------------------------------------------
# response parsing


def _json_candidates(text: str):
    for block in _ANSWER_RE.findall(text):
        yield block.strip()
    yield text.strip()
    brace = re.search(r"\{.*\}", text, re.S)
    if brace:
        yield brace.group(0)


def parse_sources_response(text: str) -> list[SourceSpan] | None:
    """Extract a source list from a backend reply; None if unparseable."""
    for candidate in _json_candidates(text):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            obj = obj.get("sources")
        if not isinstance(obj, list):
            continue
        spans = []
        for item in obj:
            if isinstance(item, str):
                spans.append(SourceSpan(span=item))
            elif isinstance(item, dict) and isinstance(item.get("span"), str):
                role = item.get("role", "unknown")
                spans.append(SourceSpan(span=item["span"], role=role if role in _ROLES else "unknown"))
            else:
                break
        else:
            return spans
    return None


def parse_counterfactual_response(text: str) -> str | None:
    """Extract the rewritten caption from a backend reply; None if unparseable."""
    for candidate in _json_candidates(text):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and isinstance(obj.get("counterfactual"), str):
            return obj["counterfactual"]
    # tolerate a bare rewritten caption inside the answer tags
    blocks = _ANSWER_RE.findall(text)
    if blocks:
        bare = blocks[-1].strip()
        if bare and "{" not in bare:
            return bare
    return None


def _temperatures(base: float) -> list[float]:
    return [base + RETRY_TEMPERATURE_STEP * k for k in range(MAX_ATTEMPTS)]


def identify_sources(
    caption: str,
    backend: LlmBackend,
    prompts: PromptPair,
    cache: ResponseCache | None = None,
) -> SourceList:
    """Run the identification step (p1) and keep verbatim source spans.

    Spans the model invents that do not occur verbatim in the caption are
    dropped with a warning. Unparseable replies are retried at increasing
    temperature; if every attempt is unparseable, raises.
    """
    if not caption.strip():
        raise CfAudioError("caption is empty")
    prompt = prompts.render_p1(caption)
    parsed: list[SourceSpan] | None = None
    for retry, temperature in enumerate(_temperatures(IDENTIFY_BASE_TEMPERATURE)):
        response = _complete(backend, prompt, temperature, cache, retry)
        parsed = parse_sources_response(response)
        if parsed is not None:
            break
    if parsed is None:
        raise BackendResponseError(f"no parseable source list for caption {caption!r}")
    kept = []
    for span in parsed:
        if span.span in caption:
            kept.append(span)
        else:
            logger.warning("dropping non-verbatim span %r for caption %r", span.span, caption)
    return SourceList(tuple(kept))


def intervene(
    caption: str,
    sources: SourceList,
    backend: LlmBackend,
    prompts: PromptPair,
    cache: ResponseCache | None = None,
) -> CounterfactualRecord:
    """Run the intervention step (p2) and validate the result.

    Parse failures and validation failures (identity output, no source
    altered, empty output) are retried at increasing temperature. If no
    attempt validates, the returned record carries the failure reason
    instead of raising; backend transport failures still raise.
    """
    if not caption.strip():
        raise CfAudioError("caption is empty")
    prompt = prompts.render_p2(caption, sources)
    last_cf = ""
    last_reason: str | None = "unparseable response"
    for retry, temperature in enumerate(_temperatures(INTERVENE_BASE_TEMPERATURE)):
        response = _complete(backend, prompt, temperature, cache, retry)
        counterfactual = parse_counterfactual_response(response)
        if counterfactual is None:
            last_reason = "unparseable response"
            continue
        counterfactual = counterfactual.strip()
        passed, reason = validate_counterfactual(caption, counterfactual, sources)
        if passed:
            return CounterfactualRecord(
                caption=caption,
                sources=sources,
                counterfactual=counterfactual,
                generator="llm",
                model_id=backend.model_id,
                validation_passed=True,
            )
        last_cf, last_reason = counterfactual, reason
    return CounterfactualRecord(
        caption=caption,
        sources=sources,
        counterfactual=last_cf,
        generator="llm",
        model_id=backend.model_id,
        validation_passed=False,
        failure_reason=last_reason,
    )


# --------------------------------------------------------------------------
# deterministic rule oracle

DEFAULT_LEXICON: dict[str, tuple[str, ...]] = {
    # canonical whole-caption rewrites
    "a gun is loaded, then loaded by hand some more": (
        "a piano is played, then played by hand some more",
    ),
    "a few gunshots are fired at the target shooting range": (
        "a few fireworks light up the night sky at shooting range",
    ),
    "an adult male speaks and a crash occurs": (
        "an adult male speaks and a thunderstorm rumbles",
    ),
    "large group of people clapping": ("flock of birds chirping in unison",),
    "idling car, train blows horn and passes": ("dogs barking, train blows horn and passes",),
    "a crowd of people indoors talking": ("a group of cars honking on a busy street",),
    "adults and children are walking and talking": ("cars and trucks are honking and zooming",),
    "adults talking and some footsteps coming across": (
        "dogs barking and some footsteps coming across",
    ),
    # single-term swaps
    "gunshots": ("fireworks",),
    "clapping": ("birds chirping",),
    "crash": ("thunderstorm",),
    "crowd of people": ("group of cars",),
    "adults talking": ("dogs barking",),
    "talking": ("honking",),
    # synthetic corpus class terms map to every other class
    **{cls: tuple(c for c in CLASS_TERMS if c != cls) for cls in CLASS_TERMS},
}


def _finalize_text(text: str) -> str:
    text = text.strip()
    if text and text[0].islower():
        text = text[0].upper() + text[1:]
    if text and text[-1] not in ".!?":
        text += "."
    return text


def _lexicon_matches(caption: str, lexicon: dict[str, tuple[str, ...]]):
    """All lexicon terms present in the caption, longest-containment wins."""
    found = []
    for term in lexicon:
        m = re.search(rf"(?<!\w){re.escape(term)}(?!\w)", caption, re.IGNORECASE)
        if m:
            found.append((m.start(), m.end(), term))
    survivors = []
    for start, end, term in found:
        contained = any(
            (s <= start and end <= e and (e - s) > (end - start)) for s, e, _ in found
        )
        if not contained:
            survivors.append((start, end, term))
    survivors.sort()
    return survivors


def rule_oracle_counterfactual(
    caption: str,
    lexicon: dict[str, tuple[str, ...]] | None = None,
    seed: int = 0,
) -> CounterfactualRecord:
    """Deterministic lexicon-substitution counterfactual.

    Picks one matching lexicon term by seeded choice (terms contained inside
    a longer matching term are ignored) and replaces its first occurrence.
    When nothing matches, the first noun-like token is swapped for a seeded
    stock sound source. Pure function of (caption, lexicon, seed); output
    text is capitalized and terminated with a period.
    """
    if lexicon is None:
        lexicon = DEFAULT_LEXICON
    if not lexicon:
        raise CfAudioError("lexicon is empty")
    if not caption.strip():
        raise CfAudioError("caption is empty")

    rng = substream(seed, "oracle", caption)
    matches = _lexicon_matches(caption, lexicon)
    if matches:
        start, end, term = matches[int(rng.integers(0, len(matches)))]
        options = lexicon[term]
        replacement = options[int(rng.integers(0, len(options)))]
        rewritten = caption[:start] + replacement + caption[end:]
        span = caption[start:end]
    else:
        tokens = caption.split()
        target_idx = next(
            (i for i, tok in enumerate(tokens)
             if re.sub(r"\W", "", tok.lower()) not in _STOPWORDS and len(tok) > 2),
            0,
        )
        span = tokens[target_idx]
        tokens[target_idx] = FALLBACK_SOURCES[int(rng.integers(0, len(FALLBACK_SOURCES)))]
        rewritten = " ".join(tokens)

    counterfactual = _finalize_text(rewritten)
    sources = SourceList((SourceSpan(span=span),))
    passed, reason = validate_counterfactual(caption, counterfactual, sources)
    return CounterfactualRecord(
        caption=caption,
        sources=sources,
        counterfactual=counterfactual,
        generator="rule-oracle",
        model_id="rule-oracle",
        validation_passed=passed,
        failure_reason=reason,
    )


# --------------------------------------------------------------------------
# manifest augmentation


@dataclass
class AugmentConfig:
    generator: str = "rule-oracle"
    policy: str = "any"
    force: bool = False
    seed: int = 0
    lexicon: dict[str, tuple[str, ...]] | None = None
    backend: LlmBackend | None = None
    prompts: PromptPair | None = None
    cache: ResponseCache | None = None

    def __post_init__(self):
        if self.generator not in ("llm", "rule-oracle"):
            raise CfAudioError(f"unknown generator {self.generator!r}")
        if self.generator == "llm" and self.backend is None:
            raise CfAudioError("llm generator requires a backend")


def _generate_for_caption(caption: str, config: AugmentConfig) -> CounterfactualRecord:
    if config.generator == "rule-oracle":
        return rule_oracle_counterfactual(caption, config.lexicon, config.seed)
    prompts = config.prompts or PromptPair.default(config.policy)
    sources = identify_sources(caption, config.backend, prompts, config.cache)
    return intervene(caption, sources, config.backend, prompts, config.cache)


def augment_manifest(
    manifest: DatasetManifest, config: AugmentConfig
) -> tuple[DatasetManifest, dict]:
    """Fill in counterfactual captions for every entry of a manifest.

    Entries that already carry counterfactuals are left untouched unless
    ``force`` is set, so re-running is idempotent. An entry whose generation
    fails (backend error or validation failure on any caption) keeps an
    empty counterfactuals array and is listed in the returned sidecar
    report. Output entry order is manifest order.
    """
    new_entries: list[ManifestEntry] = []
    report = {"augmented": [], "skipped": [], "failed": []}
    for entry in manifest.entries:
        if entry.counterfactuals and not config.force:
            new_entries.append(entry)
            report["skipped"].append(entry.id)
            continue
        generated: list[str] = []
        failure: str | None = None
        for caption in entry.captions:
            try:
                record = _generate_for_caption(caption, config)
            except (BackendError, CfAudioError) as exc:
                failure = str(exc)
                break
            if not record.validation_passed:
                failure = record.failure_reason or "validation failed"
                break
            generated.append(record.counterfactual)
        if failure is None:
            new_entries.append(replace(entry, counterfactuals=tuple(generated)))
            report["augmented"].append(entry.id)
        else:
            new_entries.append(replace(entry, counterfactuals=()))
            report["failed"].append({"id": entry.id, "reason": failure})
            logger.warning("counterfactual generation failed for %s: %s", entry.id, failure)
    augmented = DatasetManifest(
        entries=tuple(new_entries),
        dataset_name=manifest.dataset_name,
        version=manifest.version,
        root=manifest.root,
    )
    return augmented, report
