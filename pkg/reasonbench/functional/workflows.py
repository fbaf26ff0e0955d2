"""
Reasoning paradigms as explicit message-passing state machines.

Each run_* function drives one paradigm over one task and returns a
Transcript. The final answer is always the last message, so the transcript
cost is the plain sum of message token counts.
"""
import logging
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import timedelta
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import isodate

from reasonbench.functional import prompts
from reasonbench.functional.backend import (
    BackendHandle, CompletionRequest, CompletionResult, DecodingConfig, DecodingStrategy, UsageSource,
    estimate_tokens, parallel_workers,
)
from reasonbench.functional.errors import (
    BackendError, ContractViolation, DegeneratePlanError, WorkflowFailure
)

logger = logging.getLogger(__name__)


class Domain(str, Enum):
    MATH = 'math'
    GENERAL = 'general'
    CODE = 'code'
    OPEN_ENDED = 'open_ended'


@dataclass(frozen=True)
class UnitTestSuite:
    """Independent test snippets run against a solution; each one passes unless it raises."""
    tests: Tuple[str, ...]
    setup: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'tests', tuple(self.tests))

    @classmethod
    def from_record(cls, record: Dict) -> 'UnitTestSuite':
        return cls(tests=tuple(record.get('tests', ())), setup=record.get('setup', ''))

    def to_record(self) -> Dict:
        return {'tests': list(self.tests), 'setup': self.setup}


@dataclass(frozen=True)
class TaskInstance:
    id: str
    domain: Domain
    input_x: str
    ground_truth: Union[str, UnitTestSuite]
    source_dataset: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'domain', Domain(self.domain))
        is_suite = isinstance(self.ground_truth, UnitTestSuite)
        if (self.domain is Domain.CODE) != is_suite:
            raise ValueError(f'task {self.id}: ground truth of a {self.domain.value} task must be '
                             f'{"a unit-test suite" if self.domain is Domain.CODE else "answer text"}')

    @classmethod
    def from_record(cls, record: Dict, source_dataset: str = '') -> 'TaskInstance':
        """Dataset record: {id, domain, input, ground_truth | test_suite}."""
        domain = Domain(record['domain'])
        if domain is Domain.CODE:
            ground_truth = UnitTestSuite.from_record(record['test_suite'])
        else:
            ground_truth = str(record.get('ground_truth', ''))
        return cls(id=str(record['id']), domain=domain, input_x=record['input'], ground_truth=ground_truth,
                   source_dataset=record.get('source', source_dataset))


class MessageKind(str, Enum):
    PLAN = 'plan'
    FEEDBACK = 'feedback'
    CANDIDATE_ANSWER = 'candidate_answer'
    REBUTTAL = 'rebuttal'
    VERDICT = 'verdict'
    REASONING = 'reasoning'
    FINAL = 'final'


@dataclass(frozen=True)
class Message:
    index_k: int
    agent_id: str
    role_name: str
    round_r: int
    kind: MessageKind
    content: str
    token_count: int
    usage_source: UsageSource
    # prompt tokens of the call that produced this message (first message of a call only)
    prompt_tokens: int = 0
    replayed: bool = False

    def to_record(self) -> Dict:
        return {
            'index': self.index_k,
            'agent_id': self.agent_id,
            'role': self.role_name,
            'round': self.round_r,
            'kind': self.kind.value,
            'content': self.content,
            'token_count': self.token_count,
            'usage_source': self.usage_source.value,
            'prompt_tokens': self.prompt_tokens,
            'replayed': self.replayed,
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'Message':
        return cls(
            index_k=record['index'], agent_id=record['agent_id'], role_name=record['role'],
            round_r=record['round'], kind=MessageKind(record['kind']), content=record['content'],
            token_count=record['token_count'], usage_source=UsageSource(record['usage_source']),
            prompt_tokens=record.get('prompt_tokens', 0), replayed=record.get('replayed', False),
        )


class Paradigm(str, Enum):
    SINGLE_DIRECT = 'single_direct'
    SINGLE_COT = 'single_cot'
    PLAN_EXECUTE = 'plan_execute'
    REFLECTION = 'reflection'
    INTERACTIVE_DEBATE = 'interactive_debate'
    ADVERSARIAL_DEBATE = 'adversarial_debate'


class AggregatorMode(str, Enum):
    LLM = 'llm'
    DETERMINISTIC_MAJORITY = 'deterministic_majority'


PARADIGM_ROLES = {
    Paradigm.SINGLE_DIRECT: ('solver',),
    Paradigm.SINGLE_COT: ('solver',),
    Paradigm.PLAN_EXECUTE: ('planner', 'executor'),
    Paradigm.REFLECTION: ('reasoner', 'reviser'),
    Paradigm.INTERACTIVE_DEBATE: ('debater', 'aggregator'),
    Paradigm.ADVERSARIAL_DEBATE: ('affirmative', 'negative', 'judge'),
}

PARADIGM_STAGES = {
    Paradigm.SINGLE_DIRECT: ('solve',),
    Paradigm.SINGLE_COT: ('solve',),
    Paradigm.PLAN_EXECUTE: ('plan', 'execute'),
    Paradigm.REFLECTION: ('initial', 'feedback', 'revise', 'revise_single'),
    Paradigm.INTERACTIVE_DEBATE: ('debate_initial', 'debate_update', 'aggregate'),
    Paradigm.ADVERSARIAL_DEBATE: ('affirmative_open', 'negative_open', 'affirmative_rebut', 'negative_rebut',
                                  'verdict'),
}


@dataclass(frozen=True)
class WorkflowConfig:
    paradigm: Paradigm
    n_debaters: int = 3
    rounds: int = 1
    strategy: DecodingStrategy = DecodingStrategy.DIRECT_RESPONSE
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    role_decoding: Mapping[str, DecodingConfig] = field(default_factory=dict)
    role_prompts: Mapping[str, str] = field(default_factory=dict)
    templates: Mapping[str, str] = field(default_factory=dict)
    aggregator_mode: AggregatorMode = AggregatorMode.LLM
    reflection_single_call: bool = False
    final_marker: str = prompts.FINAL_MARKER
    revision_marker: str = prompts.REVISION_MARKER
    name: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'paradigm', Paradigm(self.paradigm))
        object.__setattr__(self, 'strategy', DecodingStrategy(self.strategy))
        object.__setattr__(self, 'aggregator_mode', AggregatorMode(self.aggregator_mode))
        object.__setattr__(self, 'role_decoding', dict(self.role_decoding))
        object.__setattr__(self, 'role_prompts', dict(self.role_prompts))
        object.__setattr__(self, 'templates', dict(self.templates))

        where = f'workflows.{self.name or self.paradigm.value}'
        if self.paradigm is Paradigm.INTERACTIVE_DEBATE and self.n_debaters < 2:
            raise ContractViolation(f'{where}: interactive_debate requires at least 2 debaters')
        if self.rounds < 0:
            raise ContractViolation(f'{where}: rounds must be >= 0')
        for role in PARADIGM_ROLES[self.paradigm]:
            if not self.prompt_for(role).strip():
                raise ContractViolation(f"{where}: role '{role}' has no prompt")
        for stage, template in self.templates.items():
            prompts.check_template(stage, template, f'{where}.template.{stage}')

    @property
    def roles(self) -> Tuple[str, ...]:
        return PARADIGM_ROLES[self.paradigm]

    def decoding_for(self, role: str, agent_id: Optional[str] = None) -> DecodingConfig:
        decoding = self.role_decoding.get(agent_id) or self.role_decoding.get(role) \
            or self.decoding.replace(strategy=self.strategy)
        if self.paradigm is Paradigm.SINGLE_DIRECT:
            decoding = decoding.replace(strategy=DecodingStrategy.DIRECT_RESPONSE)
        elif self.paradigm is Paradigm.SINGLE_COT:
            decoding = decoding.replace(strategy=DecodingStrategy.ADAPTIVE_REASONING)
        return decoding

    def prompt_for(self, role: str, agent_id: Optional[str] = None) -> str:
        if agent_id and agent_id in self.role_prompts:
            return self.role_prompts[agent_id]
        return self.role_prompts.get(role, prompts.ROLE_PROMPTS.get(role, ''))

    def template(self, stage: str) -> str:
        return self.templates.get(stage, prompts.STAGE_TEMPLATES[stage])

    def snapshot(self) -> Dict:
        """Resolved configuration, embedded in every persisted transcript."""
        return {
            'name': self.name,
            'paradigm': self.paradigm.value,
            'n_debaters': self.n_debaters,
            'rounds': self.rounds,
            'strategy': self.strategy.value,
            'decoding': {role: self.decoding_for(role).to_dict() for role in self.roles},
            'aggregator_mode': self.aggregator_mode.value,
            'reflection_single_call': self.reflection_single_call,
            'final_marker': self.final_marker,
            'role_prompts': {role: self.prompt_for(role) for role in self.roles},
            'templates': {stage: self.template(stage) for stage in PARADIGM_STAGES[self.paradigm]},
        }


class TranscriptStatus(str, Enum):
    COMPLETE = 'complete'
    FAILED = 'failed'


@dataclass(frozen=True)
class Transcript:
    task_id: str
    workflow: Dict
    messages: Tuple[Message, ...]
    final_answer_y: str
    total_cost_C: int
    wall_time: timedelta
    status: TranscriptStatus = TranscriptStatus.COMPLETE
    flags: Tuple[str, ...] = ()
    failure: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.status is TranscriptStatus.COMPLETE

    def to_record(self) -> Dict:
        return {
            'task_id': self.task_id,
            'workflow': self.workflow,
            'messages': [m.to_record() for m in self.messages],
            'final_answer': self.final_answer_y,
            'total_cost': self.total_cost_C,
            'wall_time': isodate.duration_isoformat(self.wall_time),
            'status': self.status.value,
            'flags': list(self.flags),
            'failure': self.failure,
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'Transcript':
        return cls(
            task_id=record['task_id'],
            workflow=record['workflow'],
            messages=tuple(Message.from_record(m) for m in record['messages']),
            final_answer_y=record['final_answer'],
            total_cost_C=record['total_cost'],
            wall_time=isodate.parse_duration(record['wall_time']),
            status=TranscriptStatus(record.get('status', 'complete')),
            flags=tuple(record.get('flags', ())),
            failure=record.get('failure'),
        )


class TranscriptBuilder(object):
    """Accumulates messages for one run. Not thread-safe: one builder per execution context."""

    def __init__(self, task_id: str, cfg: WorkflowConfig):
        self.task_id = task_id
        self.cfg = cfg
        self.messages: List[Message] = []
        self.flags: List[str] = []
        self._started = time.perf_counter()

    def add(self, agent_id, role_name, round_r, kind, content, token_count, usage_source,
            prompt_tokens=0, replayed=False) -> Message:
        message = Message(
            index_k=len(self.messages) + 1,
            agent_id=agent_id,
            role_name=role_name,
            round_r=round_r,
            kind=MessageKind(kind),
            content=content,
            token_count=token_count,
            usage_source=UsageSource(usage_source),
            prompt_tokens=prompt_tokens,
            replayed=replayed,
        )
        self.messages.append(message)
        return message

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)

    def _build(self, final_answer, status, failure) -> Transcript:
        return Transcript(
            task_id=self.task_id,
            workflow=self.cfg.snapshot(),
            messages=tuple(self.messages),
            final_answer_y=final_answer,
            total_cost_C=sum(m.token_count for m in self.messages),
            wall_time=timedelta(seconds=time.perf_counter() - self._started),
            status=status,
            flags=tuple(self.flags),
            failure=failure,
        )

    def finalize(self, final_answer: Optional[str] = None) -> Transcript:
        if final_answer is None:
            final_answer = self.messages[-1].content if self.messages else ''
        return self._build(final_answer, TranscriptStatus.COMPLETE, None)

    def fail(self, stage: str, cause) -> Transcript:
        return self._build('', TranscriptStatus.FAILED, f'{stage}: {cause}')


@dataclass(frozen=True)
class Turn:
    """One agent call: who speaks, under which template, with what context."""
    backend: BackendHandle
    role: str
    stage: str
    kind: MessageKind
    round_r: int = 0
    agent_id: Optional[str] = None
    key: Optional[str] = None
    fields: Mapping[str, str] = field(default_factory=dict)
    decoding: Optional[DecodingConfig] = None


class _StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f'{stage}: {cause}')
        self.stage = stage
        self.cause = cause


class WorkflowSession(object):
    """Binds a task, a workflow config and a transcript builder for one run."""

    def __init__(self, task: TaskInstance, cfg: WorkflowConfig):
        self.task = task
        self.cfg = cfg
        self.builder = TranscriptBuilder(task.id, cfg)

    def request_for(self, turn: Turn) -> CompletionRequest:
        agent_id = turn.agent_id or turn.role
        return CompletionRequest(
            system_prompt=self.cfg.prompt_for(turn.role, agent_id),
            user_content=prompts.render(self.cfg.template(turn.stage), input=self.task.input_x, **turn.fields),
            decoding=turn.decoding or self.cfg.decoding_for(turn.role, agent_id),
            agent_id=agent_id,
            role=turn.role,
            stage=turn.key or turn.stage,
            task_id=self.task.id,
        )

    def call(self, turn: Turn) -> CompletionResult:
        try:
            return turn.backend.complete(self.request_for(turn))
        except BackendError as e:
            raise _StageError(f'{turn.agent_id or turn.role}/{turn.key or turn.stage}', e)

    def record(self, turn: Turn, result: CompletionResult, content: Optional[str] = None,
               kind: Optional[MessageKind] = None, token_count: Optional[int] = None) -> Message:
        agent_id = turn.agent_id or turn.role
        prompt_tokens = result.prompt_tokens
        if result.reasoning_text:
            self.builder.add(agent_id, turn.role, turn.round_r, MessageKind.REASONING, result.reasoning_text,
                             result.reasoning_tokens, result.usage_source, prompt_tokens=prompt_tokens)
            prompt_tokens = 0
        return self.builder.add(
            agent_id, turn.role, turn.round_r, kind or turn.kind,
            result.answer_text if content is None else content,
            result.answer_tokens if token_count is None else token_count,
            result.usage_source, prompt_tokens=prompt_tokens,
        )

    def speak(self, turn: Turn) -> str:
        return self.record(turn, self.call(turn)).content

    def speak_all(self, turns: Sequence[Turn]) -> List[str]:
        """
        Run independent turns concurrently, then record them in the given order.
        Nothing is recorded until every turn has returned (round barrier).
        Turns run one at a time, in order, when a backend replays by position.
        """
        workers = parallel_workers([t.backend for t in turns], len(turns))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.call, turn) for turn in turns]
            outcomes = []
            for future in futures:
                try:
                    outcomes.append(future.result())
                except _StageError as e:
                    outcomes.append(e)

        answers = []
        failure = None
        for turn, outcome in zip(turns, outcomes):
            if isinstance(outcome, _StageError):
                failure = failure or outcome
                continue
            answers.append(self.record(turn, outcome).content)
        if failure is not None:
            raise failure
        return answers

    def replay(self, agent_id, role, round_r, kind, content, token_count, usage_source=UsageSource.BACKEND_REPORTED,
               prompt_tokens=0) -> Message:
        """Record a message produced earlier (cached artifact) without calling any model."""
        return self.builder.add(agent_id, role, round_r, kind, content, token_count, usage_source,
                                prompt_tokens=prompt_tokens, replayed=True)


def run_stages(task: TaskInstance, cfg: WorkflowConfig, body) -> Transcript:
    session = WorkflowSession(task, cfg)
    try:
        final = body(session)
    except _StageError as e:
        partial = session.builder.fail(e.stage, e.cause)
        logger.warning(f"task {task.id}: {cfg.paradigm.value} failed at {e.stage}: {e.cause}")
        raise WorkflowFailure(task.id, e.stage, partial, e.cause) from e.cause
    return session.builder.finalize(final)


def _require(cfg: WorkflowConfig, *paradigms: Paradigm) -> None:
    if cfg.paradigm not in paradigms:
        raise ContractViolation(
            f"workflow '{cfg.name}' has paradigm {cfg.paradigm.value}, expected {[p.value for p in paradigms]}")


# answer handling.
def extract_final(text: str, marker: str = prompts.FINAL_MARKER) -> Optional[str]:
    """Text following the last final-answer marker (first non-empty line), or None."""
    matches = list(re.finditer(re.escape(marker), text, re.IGNORECASE)) if marker else []
    if not matches:
        return None
    tail = text[matches[-1].end():].strip()
    return tail.splitlines()[0].strip() if tail else None


def normalize_answer(text: str, marker: str = prompts.FINAL_MARKER) -> str:
    extracted = extract_final(text, marker)
    answer = text if extracted is None else extracted
    return ' '.join(answer.split()).casefold()


def aggregate_majority(candidates: Sequence[str], marker: str = prompts.FINAL_MARKER) -> Tuple[str, bool]:
    """
    Most frequent normalized answer and whether the maximum is shared.
    Ties go to the answer that occurs first.
    """
    if not candidates:
        raise ValueError('aggregate_majority needs at least one candidate')
    normalized = [normalize_answer(c, marker) for c in candidates]
    counts = Counter(normalized)
    top = max(counts.values())
    winners = [a for a in dict.fromkeys(normalized) if counts[a] == top]
    return winners[0], len(winners) > 1


def majority_representative(candidates: Sequence[str], answer: str, marker: str = prompts.FINAL_MARKER) -> str:
    for candidate in candidates:
        if normalize_answer(candidate, marker) == answer:
            return candidate
    return answer


def sync_peers(peer_answers: Sequence[Tuple[Union[int, str], str]]) -> str:
    if not peer_answers:
        raise ValueError('sync_peers: an agent must have at least one peer')
    return '\n'.join(f'Agent {agent_id} answered: {answer}'
                     for agent_id, answer in sorted(peer_answers, key=lambda p: p[0]))


# paradigms.
def run_single_model(task: TaskInstance, cfg: WorkflowConfig, backend: BackendHandle) -> Transcript:
    _require(cfg, Paradigm.SINGLE_DIRECT, Paradigm.SINGLE_COT)
    return run_stages(task, cfg, lambda s: s.speak(Turn(backend, 'solver', 'solve', MessageKind.FINAL)))


def execute_stage(s: WorkflowSession, executor_backend: BackendHandle, plan: str,
                  decoding: Optional[DecodingConfig] = None) -> str:
    return s.speak(Turn(executor_backend, 'executor', 'execute', MessageKind.FINAL,
                        fields={'plan': plan}, decoding=decoding))


def plan_stage(s: WorkflowSession, planner_backend: BackendHandle) -> str:
    plan = s.speak(Turn(planner_backend, 'planner', 'plan', MessageKind.PLAN))
    if not plan.strip():
        raise DegeneratePlanError(s.task.id, s.builder.fail('plan', 'degenerate plan'))
    return plan


def run_plan_execute(task: TaskInstance, cfg: WorkflowConfig, planner_backend: BackendHandle,
                     executor_backend: BackendHandle) -> Transcript:
    _require(cfg, Paradigm.PLAN_EXECUTE)
    return run_stages(task, cfg, lambda s: execute_stage(s, executor_backend, plan_stage(s, planner_backend)))


def initial_stage(s: WorkflowSession, reasoner_backend: BackendHandle) -> str:
    return s.speak(Turn(reasoner_backend, 'reasoner', 'initial', MessageKind.CANDIDATE_ANSWER))


def revise_stage(s: WorkflowSession, reviser_backend: BackendHandle, initial_answer: str) -> str:
    """Feedback on the initial answer, then the revision: two calls, or one in single-call mode."""
    if not s.cfg.reflection_single_call:
        feedback = s.speak(Turn(reviser_backend, 'reviser', 'feedback', MessageKind.FEEDBACK,
                                fields={'answer': initial_answer}))
        return s.speak(Turn(reviser_backend, 'reviser', 'revise', MessageKind.FINAL,
                            fields={'answer': initial_answer, 'feedback': feedback}))

    turn = Turn(reviser_backend, 'reviser', 'revise_single', MessageKind.FINAL, fields={'answer': initial_answer})
    result = s.call(turn)
    feedback, marker, revision = result.answer_text.partition(s.cfg.revision_marker)
    if not marker:
        s.builder.flag('revision_marker_missing')
        return s.record(turn, result).content

    feedback, revision = feedback.strip(), revision.strip()
    feedback_tokens = round(result.answer_tokens * estimate_tokens(feedback) /
                            max(1, estimate_tokens(feedback) + estimate_tokens(revision)))
    s.record(turn, result, content=feedback, kind=MessageKind.FEEDBACK, token_count=feedback_tokens)
    # the reasoning segment (if any) was recorded with the feedback message.
    return s.builder.add(turn.role, turn.role, 0, MessageKind.FINAL, revision,
                         result.answer_tokens - feedback_tokens, result.usage_source).content


def run_reflection(task: TaskInstance, cfg: WorkflowConfig, reasoner_backend: BackendHandle,
                   reviser_backend: BackendHandle) -> Transcript:
    _require(cfg, Paradigm.REFLECTION)
    return run_stages(task, cfg, lambda s: revise_stage(s, reviser_backend, initial_stage(s, reasoner_backend)))


def _expand_debaters(debater_backends: Sequence[BackendHandle], n: int) -> List[BackendHandle]:
    backends = list(debater_backends)
    if len(backends) == 1:
        return backends * n
    if len(backends) != n:
        raise ContractViolation(f'interactive_debate has {n} debaters but {len(backends)} backends')
    return backends


def debater_id(i: int) -> str:
    return f'debater-{i}'


def debate_rounds(s: WorkflowSession, debater_backends: Sequence[BackendHandle]) -> List[List[str]]:
    """
    Round 0 answers, then R update rounds. Round r only sees the peers'
    round r-1 answers; all answers of a round are collected before the next starts.
    """
    n = s.cfg.n_debaters
    backends = _expand_debaters(debater_backends, n)
    answers = [s.speak_all([
        Turn(backends[i - 1], 'debater', 'debate_initial', MessageKind.CANDIDATE_ANSWER,
             round_r=0, agent_id=debater_id(i), key='r0')
        for i in range(1, n + 1)
    ])]
    for r in range(1, s.cfg.rounds + 1):
        previous = answers[-1]
        answers.append(s.speak_all([
            Turn(backends[i - 1], 'debater', 'debate_update', MessageKind.CANDIDATE_ANSWER,
                 round_r=r, agent_id=debater_id(i), key=f'r{r}',
                 fields={'peers': sync_peers([(j, previous[j - 1]) for j in range(1, n + 1) if j != i])})
            for i in range(1, n + 1)
        ]))
    return answers


def format_candidates(final_answers: Sequence[str]) -> str:
    return '\n'.join(f'Agent {i} answered: {a}' for i, a in enumerate(final_answers, start=1))


def aggregate_stage(s: WorkflowSession, aggregator_backend: Optional[BackendHandle],
                    final_answers: Sequence[str]) -> str:
    marker = s.cfg.final_marker
    round_r = s.cfg.rounds

    def majority():
        answer, tie = aggregate_majority(final_answers, marker)
        if tie:
            s.builder.flag('majority_tie')
        return majority_representative(final_answers, answer, marker)

    if s.cfg.aggregator_mode is AggregatorMode.DETERMINISTIC_MAJORITY:
        answer = majority()
        s.builder.add('aggregator', 'aggregator', round_r, MessageKind.VERDICT, answer, 0,
                      UsageSource.NOT_GENERATED)
        return answer

    reply = s.speak(Turn(aggregator_backend, 'aggregator', 'aggregate', MessageKind.VERDICT, round_r=round_r,
                         fields={'candidates': format_candidates(final_answers)}))
    if extract_final(reply, marker):
        return reply
    logger.warning(f"task {s.task.id}: aggregator reply has no '{marker}' answer, falling back to majority vote")
    s.builder.flag('aggregator_fallback')
    answer = majority()
    s.builder.add('aggregator', 'aggregator', round_r, MessageKind.VERDICT, answer, 0, UsageSource.NOT_GENERATED)
    return answer


def run_interactive_debate(task: TaskInstance, cfg: WorkflowConfig, debater_backends: Sequence[BackendHandle],
                           aggregator_backend: Optional[BackendHandle]) -> Transcript:
    _require(cfg, Paradigm.INTERACTIVE_DEBATE)
    return run_stages(task, cfg,
                      lambda s: aggregate_stage(s, aggregator_backend, debate_rounds(s, debater_backends)[-1]))


def format_debate(exchanges: Sequence[Tuple[str, int, str]]) -> str:
    return '\n\n'.join(f'[{role.capitalize()}, round {r}]\n{text}' for role, r, text in exchanges)


def run_adversarial_debate(task: TaskInstance, cfg: WorkflowConfig, aff_backend: BackendHandle,
                           neg_backend: BackendHandle, judge_backend: BackendHandle) -> Transcript:
    """
    Affirmative and negative alternate, each answering the other's latest
    message; the judge reads the whole exchange.
    """
    _require(cfg, Paradigm.ADVERSARIAL_DEBATE)

    def body(s):
        aff = s.speak(Turn(aff_backend, 'affirmative', 'affirmative_open', MessageKind.CANDIDATE_ANSWER, key='r0'))
        neg = s.speak(Turn(neg_backend, 'negative', 'negative_open', MessageKind.REBUTTAL, key='r0',
                           fields={'opponent': aff}))
        exchanges = [('affirmative', 0, aff), ('negative', 0, neg)]
        for r in range(1, cfg.rounds + 1):
            aff = s.speak(Turn(aff_backend, 'affirmative', 'affirmative_rebut', MessageKind.REBUTTAL, round_r=r,
                               key=f'r{r}', fields={'opponent': neg}))
            neg = s.speak(Turn(neg_backend, 'negative', 'negative_rebut', MessageKind.REBUTTAL, round_r=r,
                               key=f'r{r}', fields={'opponent': aff}))
            exchanges += [('affirmative', r, aff), ('negative', r, neg)]
        return s.speak(Turn(judge_backend, 'judge', 'verdict', MessageKind.VERDICT, round_r=cfg.rounds,
                            fields={'transcript': format_debate(exchanges)}))

    return run_stages(task, cfg, body)


def run_workflow(task: TaskInstance, cfg: WorkflowConfig, backends: Mapping[str, BackendHandle]) -> Transcript:
    """Dispatch on the paradigm; `backends` maps role (or debater-i) to a backend."""

    def pick(role):
        if role not in backends:
            raise ContractViolation(f"workflow '{cfg.name}': no backend bound to role '{role}'")
        return backends[role]

    paradigm = cfg.paradigm
    if paradigm in (Paradigm.SINGLE_DIRECT, Paradigm.SINGLE_COT):
        return run_single_model(task, cfg, pick('solver'))
    if paradigm is Paradigm.PLAN_EXECUTE:
        return run_plan_execute(task, cfg, pick('planner'), pick('executor'))
    if paradigm is Paradigm.REFLECTION:
        return run_reflection(task, cfg, pick('reasoner'), pick('reviser'))
    if paradigm is Paradigm.INTERACTIVE_DEBATE:
        debaters = [backends.get(debater_id(i)) or pick('debater') for i in range(1, cfg.n_debaters + 1)]
        aggregator = backends.get('aggregator') if cfg.aggregator_mode is AggregatorMode.DETERMINISTIC_MAJORITY \
            else pick('aggregator')
        return run_interactive_debate(task, cfg, debaters, aggregator)
    return run_adversarial_debate(task, cfg, pick('affirmative'), pick('negative'), pick('judge'))


def expected_calls(cfg: WorkflowConfig) -> int:
    """Closed-form number of model calls one run of `cfg` makes."""
    n, r = cfg.n_debaters, cfg.rounds
    return {
        Paradigm.SINGLE_DIRECT: 1,
        Paradigm.SINGLE_COT: 1,
        Paradigm.PLAN_EXECUTE: 2,
        Paradigm.REFLECTION: 2 if cfg.reflection_single_call else 3,
        Paradigm.INTERACTIVE_DEBATE: n + n * r + (1 if cfg.aggregator_mode is AggregatorMode.LLM else 0),
        Paradigm.ADVERSARIAL_DEBATE: 2 + 2 * r + 1,
    }[cfg.paradigm]


@dataclass(frozen=True)
class CostBreakdown:
    total: int
    per_role: Dict[str, int]
    estimated_tokens: int

    @property
    def estimated_fraction(self) -> float:
        return float(Fraction(self.estimated_tokens, self.total)) if self.total else 0.0

    @property
    def uses_estimates(self) -> bool:
        return self.estimated_tokens > 0


def transcript_cost(t: Transcript) -> CostBreakdown:
    per_role: Dict[str, int] = {}
    estimated = 0
    for m in t.messages:
        per_role[m.role_name] = per_role.get(m.role_name, 0) + m.token_count
        if m.usage_source is UsageSource.LOCAL_ESTIMATE:
            estimated += m.token_count
    return CostBreakdown(
        total=sum(m.token_count for m in t.messages),
        per_role=dict(sorted(per_role.items())),
        estimated_tokens=estimated,
    )
