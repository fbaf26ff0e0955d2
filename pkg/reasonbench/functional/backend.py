"""
Model backends.

Every model call in reasonbench goes through a BackendHandle: either a live
chat-completions endpoint (HttpChatBackend) or a deterministic scripted
replay (ScriptedBackend) used by the test-suite and by offline runs.
"""
import dataclasses
import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import backoff
import requests

from reasonbench.functional.errors import (
    BackendResponseError, BackendTransportError, ConfigError, ScriptMissError, ScriptParseError
)

logger = logging.getLogger(__name__)

THINK_OPEN = '<think>'
THINK_CLOSE = '</think>'

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DecodingStrategy(str, Enum):
    DIRECT_RESPONSE = 'direct_response'
    ADAPTIVE_REASONING = 'adaptive_reasoning'


class UsageSource(str, Enum):
    BACKEND_REPORTED = 'backend_reported'
    LOCAL_ESTIMATE = 'local_estimate'
    NOT_GENERATED = 'not_generated'


class BackendKind(str, Enum):
    HTTP_CHAT = 'http_chat'
    SCRIPTED = 'scripted'


class ScriptMode(str, Enum):
    KEY = 'key'
    SEQUENCE = 'sequence'


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.7
    top_p: float = 1.0
    top_k: Optional[int] = None
    max_tokens: int = 2048
    strategy: DecodingStrategy = DecodingStrategy.DIRECT_RESPONSE

    def __post_init__(self):
        object.__setattr__(self, 'strategy', DecodingStrategy(self.strategy))
        if self.temperature < 0:
            raise ValueError(f'temperature must be >= 0, got {self.temperature}')
        if not 0 < self.top_p <= 1:
            raise ValueError(f'top_p must be in (0, 1], got {self.top_p}')
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f'top_k must be a positive integer, got {self.top_k}')
        if self.max_tokens < 1:
            raise ValueError(f'max_tokens must be >= 1, got {self.max_tokens}')

    @property
    def adaptive(self) -> bool:
        return self.strategy is DecodingStrategy.ADAPTIVE_REASONING

    def replace(self, **changes) -> 'DecodingConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict:
        return {
            'temperature': self.temperature,
            'top_p': self.top_p,
            'top_k': self.top_k,
            'max_tokens': self.max_tokens,
            'strategy': self.strategy.value,
        }


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_content: str
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    agent_id: str = ''
    role: str = ''
    stage: str = ''
    task_id: str = ''

    def __post_init__(self):
        if not self.user_content or not self.user_content.strip():
            raise ValueError('CompletionRequest.user_content must be non-empty')

    def lookup_keys(self) -> List[str]:
        """
        Script keys this request answers to, most specific first.
        """
        candidates = []
        if self.task_id and self.agent_id and self.stage:
            candidates.append(f'{self.task_id}/{self.agent_id}/{self.stage}')
        if self.agent_id and self.stage:
            candidates.append(f'{self.agent_id}/{self.stage}')
        if self.role and self.stage:
            candidates.append(f'{self.role}/{self.stage}')
        candidates.extend(k for k in (self.agent_id, self.role) if k)
        candidates.append('*')
        return list(dict.fromkeys(candidates))

    @property
    def key(self) -> str:
        return self.lookup_keys()[0]

    def chat_messages(self) -> List[Dict]:
        messages = []
        if self.system_prompt:
            messages.append({'role': 'system', 'content': self.system_prompt})
        messages.append({'role': 'user', 'content': self.user_content})
        return messages

    def to_payload(self, model_name: str) -> Dict:
        payload = {
            'model': model_name,
            'messages': self.chat_messages(),
            'temperature': self.decoding.temperature,
            'top_p': self.decoding.top_p,
            'max_tokens': self.decoding.max_tokens,
        }
        if self.decoding.top_k is not None:
            payload['top_k'] = self.decoding.top_k
        return payload


@dataclass(frozen=True)
class CompletionResult:
    answer_text: str
    reasoning_text: Optional[str] = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    usage_source: UsageSource = UsageSource.LOCAL_ESTIMATE
    # share of completion_tokens spent on reasoning_text
    reasoning_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError('token counts must be non-negative')
        if not 0 <= self.reasoning_tokens <= self.completion_tokens:
            raise ValueError('reasoning_tokens must lie within completion_tokens')

    @property
    def answer_tokens(self) -> int:
        return self.completion_tokens - self.reasoning_tokens


def estimate_tokens(text: str) -> int:
    """
    Whitespace-and-punctuation token count, used when a backend omits usage.
    Every run of word characters is one token, every punctuation mark another.
    """
    if not text:
        return 0
    return len(_TOKEN_RE.findall(text))


def split_reasoning(text: str, open_tag: str = THINK_OPEN, close_tag: str = THINK_CLOSE) -> Tuple[Optional[str], str]:
    """
    Split a reply into (reasoning, answer) on the delimiter pair.
    The answer never contains either delimiter.
    """
    segment_re = re.compile(re.escape(open_tag) + r'(.*?)' + re.escape(close_tag), re.DOTALL)
    parts = [m.strip() for m in segment_re.findall(text)]
    answer = segment_re.sub('', text)

    # some servers strip the opening tag and only emit the closing one.
    if close_tag in answer:
        head, _, answer = answer.rpartition(close_tag)
        parts.insert(0, head.replace(close_tag, '').strip())
    # an unclosed segment means generation stopped mid-reasoning.
    if open_tag in answer:
        answer, _, tail = answer.partition(open_tag)
        parts.append(tail.replace(open_tag, '').strip())

    reasoning = '\n'.join(p for p in parts if p)
    return (reasoning or None), answer.strip()


def _apportion(total: int, reasoning: str, answer: str) -> int:
    r_est, a_est = estimate_tokens(reasoning), estimate_tokens(answer)
    if r_est + a_est == 0:
        return 0
    return min(total, round(total * r_est / (r_est + a_est)))


class BackendHandle(ABC):
    kind: BackendKind

    def __init__(self, name: str, model_name: str, delimiters: Tuple[str, str] = (THINK_OPEN, THINK_CLOSE)):
        self.name = name
        self.model_name = model_name
        self.delimiters = delimiters

    @property
    def backend_id(self) -> str:
        return f'{self.kind.value}:{self.name}:{self.model_name}'

    @property
    def order_sensitive(self) -> bool:
        """True when the reply to a call depends on the order of earlier calls."""
        return False

    @abstractmethod
    def complete(self, request: CompletionRequest) -> CompletionResult:
        ...

    def _finish(self, request: CompletionRequest, text: str, prompt_tokens: int, completion_tokens: int,
                usage_source: UsageSource, native_reasoning: Optional[str] = None,
                reasoning_tokens: Optional[int] = None) -> CompletionResult:
        reasoning, answer = split_reasoning(text, *self.delimiters)
        if native_reasoning and native_reasoning.strip():
            reasoning = '\n'.join(p for p in (native_reasoning.strip(), reasoning) if p)

        if not request.decoding.adaptive:
            if reasoning:
                logger.debug(f"{self.name}: dropping reasoning segment emitted under direct_response")
            reasoning = None

        if reasoning is None:
            r_tokens = 0
        elif reasoning_tokens is not None:
            r_tokens = min(reasoning_tokens, completion_tokens)
        else:
            r_tokens = _apportion(completion_tokens, reasoning, answer)

        return CompletionResult(
            answer_text=answer,
            reasoning_text=reasoning,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            usage_source=usage_source,
            reasoning_tokens=r_tokens,
        )

    def __repr__(self):
        return f'<{type(self).__name__} {self.backend_id}>'


def _log_backoff(details):
    logger.warning(f"chat backend back-off: attempt {details['tries']} failed, "
                   f"retrying in {details['wait']:.2f}s ({details.get('exception')})")


def _raise_transport_error(details):
    raise BackendTransportError(str(details.get('exception')), attempts=details['tries'])


class HttpChatBackend(BackendHandle):
    """
    Client for the open chat-completions wire format.

    Only transport failures (connection errors, timeouts, 429 and 5xx) are
    retried; a reply the model actually produced is never re-sampled.
    """
    kind = BackendKind.HTTP_CHAT

    def __init__(self, name, endpoint, model_name, auth_env=None, native_reasoning=False, timeout=120.0,
                 max_attempts=3, backoff_factor=1.0, session=None, delimiters=(THINK_OPEN, THINK_CLOSE)):
        if not endpoint or not model_name:
            raise ConfigError(f'backends.{name}', 'http_chat requires endpoint and model')
        super().__init__(name, model_name, delimiters)
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.native_reasoning = native_reasoning
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_factor = backoff_factor
        self.session = session or requests.Session()

    def _headers(self) -> Dict:
        headers = {'Content-Type': 'application/json'}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers['Authorization'] = f'Bearer {token}'
            else:
                logger.warning(f"{self.name}: environment variable {self.auth_env} is not set")
        return headers

    def _post(self, payload: Dict) -> Dict:
        def send():
            response = self.session.post(self.endpoint, json=payload, headers=self._headers(), timeout=self.timeout)
            if response.status_code == 429 or response.status_code >= 500:
                response.raise_for_status()
            if response.status_code >= 400:
                raise BackendResponseError(
                    f'{self.endpoint} returned {response.status_code}: {response.text[:200]}')
            try:
                return response.json()
            except ValueError as e:
                raise BackendResponseError(f'{self.endpoint} returned a non-JSON body: {e}')

        retrying = backoff.on_exception(
            backoff.expo, requests.RequestException,
            max_tries=self.max_attempts, factor=self.backoff_factor,
            on_backoff=_log_backoff, on_giveup=_raise_transport_error,
        )(send)
        return retrying()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        payload = request.to_payload(self.model_name)
        if self.native_reasoning:
            payload['chat_template_kwargs'] = {'enable_thinking': request.decoding.adaptive}

        body = self._post(payload)
        try:
            message = body['choices'][0]['message']
        except (KeyError, IndexError, TypeError):
            raise BackendResponseError(f'{self.endpoint} returned no choices[0].message')
        text = message.get('content') or ''
        native = message.get('reasoning_content') if self.native_reasoning else None

        usage = body.get('usage') or {}
        if usage.get('completion_tokens') is not None and usage.get('prompt_tokens') is not None:
            prompt_tokens = int(usage['prompt_tokens'])
            completion_tokens = int(usage['completion_tokens'])
            source = UsageSource.BACKEND_REPORTED
        else:
            logger.warning(f"{self.name}: response carried no usage, falling back to the local estimator")
            prompt_tokens = estimate_tokens(request.system_prompt) + estimate_tokens(request.user_content)
            completion_tokens = estimate_tokens(text) + estimate_tokens(native or '')
            source = UsageSource.LOCAL_ESTIMATE

        return self._finish(request, text, prompt_tokens, completion_tokens, source, native_reasoning=native)


@dataclass(frozen=True)
class ScriptEntry:
    reply: str
    key: Optional[str] = None
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None
    reasoning_tokens: Optional[int] = None
    fail: bool = False
    line_no: int = 0


@dataclass(frozen=True)
class LedgerEntry:
    index: int
    key: str
    request: CompletionRequest


class ScriptedBackend(BackendHandle):
    """
    Deterministic backend replaying a script.

    In key mode every call is a pure lookup on CompletionRequest.lookup_keys();
    in sequence mode entries are consumed in order whatever the request.
    Every call is appended to the ledger under a lock, so concurrent callers
    see a total order.
    """
    kind = BackendKind.SCRIPTED

    def __init__(self, name, entries, mode=ScriptMode.KEY, model_name=None, script_path=None,
                 delimiters=(THINK_OPEN, THINK_CLOSE)):
        super().__init__(name, model_name or name, delimiters)
        self.mode = ScriptMode(mode)
        self.script_path = script_path
        self._entries = list(entries)
        self._by_key = {e.key: e for e in self._entries if e.key is not None}
        self._cursor = 0
        self._lock = threading.Lock()
        self.ledger: List[LedgerEntry] = []

    def _select(self, request: CompletionRequest) -> Tuple[ScriptEntry, str]:
        if self.mode is ScriptMode.SEQUENCE:
            if self._cursor >= len(self._entries):
                raise ScriptMissError(f'{request.key} (sequence exhausted after {self._cursor} entries)')
            entry = self._entries[self._cursor]
            self._cursor += 1
            return entry, entry.key or request.key

        for key in request.lookup_keys():
            if key in self._by_key:
                return self._by_key[key], key
        raise ScriptMissError(request.key)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            entry, key = self._select(request)
            self.ledger.append(LedgerEntry(len(self.ledger), key, request))

        if entry.fail:
            raise BackendTransportError(f'{self.name}: scripted transport failure at {key!r}', attempts=1)

        if entry.completion_tokens is not None and entry.prompt_tokens is not None:
            prompt_tokens, completion_tokens = entry.prompt_tokens, entry.completion_tokens
            source = UsageSource.BACKEND_REPORTED
        else:
            prompt_tokens = entry.prompt_tokens if entry.prompt_tokens is not None else \
                estimate_tokens(request.system_prompt) + estimate_tokens(request.user_content)
            completion_tokens = entry.completion_tokens if entry.completion_tokens is not None else \
                estimate_tokens(entry.reply)
            source = UsageSource.LOCAL_ESTIMATE

        return self._finish(request, entry.reply, prompt_tokens, completion_tokens, source,
                            reasoning_tokens=entry.reasoning_tokens)

    @property
    def order_sensitive(self) -> bool:
        return self.mode is ScriptMode.SEQUENCE

    def requests_for(self, role=None, stage=None) -> List[CompletionRequest]:
        return [e.request for e in self.ledger
                if (role is None or e.request.role == role) and (stage is None or e.request.stage == stage)]

    def reset(self) -> None:
        with self._lock:
            self.ledger.clear()
            self._cursor = 0


def parallel_workers(backends, requested: int) -> int:
    """Worker count for concurrent calls; one when any backend must see its calls in order."""
    if any(b is not None and b.order_sensitive for b in backends):
        return 1
    return max(1, requested)


def _non_negative(record, name, path, line_no):
    value = record.get(name)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ScriptParseError(path, line_no, f'{name} must be a non-negative integer, got {value!r}')
    return value


def load_scripted_backend(script, name=None, mode=None, model_name=None) -> ScriptedBackend:
    """
    Load a line-delimited script: one JSON record {key, reply, prompt_tokens,
    completion_tokens} per line. An optional first record without 'reply'
    sets {"mode": ..., "model": ...}. Blank lines and '#' lines are skipped.
    """
    path = Path(script)
    header = {}
    entries = []
    first_seen = {}

    with open(path, encoding='utf-8') as fp:
        for line_no, line in enumerate(fp, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise ScriptParseError(path, line_no, f'invalid JSON: {e}')
            if not isinstance(record, dict):
                raise ScriptParseError(path, line_no, 'record must be a JSON object')

            if 'reply' not in record:
                if entries or header:
                    raise ScriptParseError(path, line_no, "record without 'reply' is only allowed as the header")
                header = record
                continue

            if not isinstance(record['reply'], str):
                raise ScriptParseError(path, line_no, 'reply must be a string')
            entries.append(ScriptEntry(
                reply=record['reply'],
                key=record.get('key'),
                prompt_tokens=_non_negative(record, 'prompt_tokens', path, line_no),
                completion_tokens=_non_negative(record, 'completion_tokens', path, line_no),
                reasoning_tokens=_non_negative(record, 'reasoning_tokens', path, line_no),
                fail=bool(record.get('fail', False)),
                line_no=line_no,
            ))

    try:
        script_mode = ScriptMode(mode or header.get('mode', ScriptMode.KEY.value))
    except ValueError:
        raise ScriptParseError(path, 1, f"unknown script mode {header.get('mode')!r}")

    if script_mode is ScriptMode.KEY:
        for entry in entries:
            if not entry.key:
                raise ScriptParseError(path, entry.line_no, 'key-mode entries need a key')
            if entry.key in first_seen:
                raise ScriptParseError(path, entry.line_no,
                                       f'duplicate key {entry.key!r} (first defined on line {first_seen[entry.key]})')
            first_seen[entry.key] = entry.line_no

    backend = ScriptedBackend(
        name=name or path.stem,
        entries=entries,
        mode=script_mode,
        model_name=model_name or header.get('model'),
        script_path=str(path),
    )
    logger.debug(f"loaded {len(entries)} scripted entries from {path} ({script_mode.value} mode)")
    return backend


def complete(request: CompletionRequest, backend: BackendHandle) -> CompletionResult:
    return backend.complete(request)
