"""
Role isolation.

A reference backend generates every non-target artifact of a workflow once;
the artifacts are cached and replayed, and the evaluated model is substituted
into exactly one role. Planner isolation needs no cache: the executor runs on
the reference backend at temperature 0 instead.
"""
import csv
import dataclasses
import io
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import isodate
import pytz

from reasonbench.functional import records
from reasonbench.functional.analytics import format_table
from reasonbench.functional.backend import BackendHandle, parallel_workers
from reasonbench.functional.errors import CacheMissError, ConfigError, ContractViolation, WorkflowFailure
from reasonbench.functional.judging import Sandbox, score_task
from reasonbench.functional.workflows import (
    AggregatorMode, Message, MessageKind, Paradigm, TaskInstance, Transcript, WorkflowConfig, aggregate_stage,
    debate_rounds, debater_id, execute_stage, initial_stage, plan_stage, revise_stage, run_stages
)

logger = logging.getLogger(__name__)

TARGET_ROLES = {
    Paradigm.REFLECTION: 'reviser',
    Paradigm.INTERACTIVE_DEBATE: 'aggregator',
    Paradigm.PLAN_EXECUTE: 'planner',
}

DEFAULT_BENCHMARKS = {
    'reviser': 'humaneval',
    'aggregator': 'arc_challenge',
    'planner': 'gsm_hard',
}


@dataclass(frozen=True)
class RoleIsolationSpec:
    workflow_cfg: WorkflowConfig
    target_role: str
    reference_backend: BackendHandle
    evaluated_backend: BackendHandle
    benchmark: str = ''
    name: str = ''

    def __post_init__(self):
        where = f'roles.{self.name or self.workflow.value}'
        expected = TARGET_ROLES.get(self.workflow)
        if expected is None:
            raise ConfigError(f'{where}.workflow', f"role isolation does not support '{self.workflow.value}'")
        if self.target_role != expected:
            raise ConfigError(f'{where}.target_role',
                              f"'{self.target_role}' cannot be isolated in {self.workflow.value} (use '{expected}')")
        if self.workflow is Paradigm.INTERACTIVE_DEBATE \
                and self.workflow_cfg.aggregator_mode is not AggregatorMode.LLM:
            raise ConfigError(f'{where}.workflow', 'aggregator isolation needs aggregator_mode = llm')
        if not self.benchmark:
            object.__setattr__(self, 'benchmark', DEFAULT_BENCHMARKS[self.target_role])

    @property
    def workflow(self) -> Paradigm:
        return self.workflow_cfg.paradigm

    @property
    def workflow_name(self) -> str:
        return self.workflow_cfg.name or self.workflow.value

    @property
    def uses_cache(self) -> bool:
        return self.workflow in (Paradigm.REFLECTION, Paradigm.INTERACTIVE_DEBATE)

    def with_evaluated(self, backend: BackendHandle) -> 'RoleIsolationSpec':
        return dataclasses.replace(self, evaluated_backend=backend)

    def cached_roles(self) -> List[str]:
        """Producing-role keys every task of this spec needs in the cache."""
        if self.workflow is Paradigm.REFLECTION:
            return ['reasoner/r0']
        if self.workflow is Paradigm.INTERACTIVE_DEBATE:
            cfg = self.workflow_cfg
            return [f'{debater_id(i)}/r{r}' for r in range(cfg.rounds + 1) for i in range(1, cfg.n_debaters + 1)]
        return []


def producing_role(message: Message) -> str:
    key = f'{message.agent_id}/r{message.round_r}'
    return f'{key}/reasoning' if message.kind is MessageKind.REASONING else key


@dataclass(frozen=True)
class CachedArtifact:
    task_id: str
    workflow: str
    producing_role: str
    reference_backend_id: str
    message: Message
    created_at: datetime

    @property
    def cache_key(self) -> Tuple[str, str, str, str]:
        return self.task_id, self.workflow, self.producing_role, self.reference_backend_id

    @property
    def content(self) -> str:
        return self.message.content

    @property
    def token_count(self) -> int:
        return self.message.token_count

    def to_record(self) -> Dict:
        return {
            'task_id': self.task_id,
            'workflow': self.workflow,
            'producing_role': self.producing_role,
            'reference_backend': self.reference_backend_id,
            'created_at': isodate.datetime_isoformat(self.created_at),
            'message': self.message.to_record(),
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'CachedArtifact':
        return cls(
            task_id=record['task_id'],
            workflow=record['workflow'],
            producing_role=record['producing_role'],
            reference_backend_id=record['reference_backend'],
            message=Message.from_record(record['message']),
            created_at=isodate.parse_datetime(record['created_at']),
        )


class ArtifactCache(object):
    """
    Write-once artifact store, one line-delimited file per (workflow, role)
    under `root`. Existing files are loaded on construction.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._entries: Dict[Tuple[str, str, str, str], CachedArtifact] = {}
        if self.root.is_dir():
            for path in sorted(self.root.glob('*.jsonl')):
                for record in records.iter_jsonl(path):
                    artifact = CachedArtifact.from_record(record)
                    self._entries.setdefault(artifact.cache_key, artifact)

    def __len__(self):
        return len(self._entries)

    def _path(self, artifact: CachedArtifact) -> Path:
        return self.root / f'{artifact.workflow}__{artifact.message.role_name}.jsonl'

    def put(self, artifact: CachedArtifact) -> bool:
        """Store `artifact` unless its key is present. Returns whether it was written."""
        with self._lock:
            if artifact.cache_key in self._entries:
                return False
            path = self._path(artifact)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'a', encoding='utf-8') as fp:
                fp.write(records.dumps(artifact.to_record()) + '\n')
            self._entries[artifact.cache_key] = artifact
            return True

    def drop_task(self, task_id: str, spec: RoleIsolationSpec) -> int:
        """Remove every stored artifact of `task_id` under `spec`, rewriting the affected files."""
        ref = spec.reference_backend.backend_id
        with self._lock:
            stale = [k for k, a in self._entries.items()
                     if a.task_id == task_id and a.workflow == spec.workflow_name and a.reference_backend_id == ref]
            if not stale:
                return 0
            paths = {self._path(self._entries[k]) for k in stale}
            for key in stale:
                del self._entries[key]
            for path in sorted(paths):
                kept = [a.to_record() for a in self._entries.values() if self._path(a) == path]
                records.write_jsonl(path, kept)
        logger.info(f'task {task_id}: dropped {len(stale)} partial artifacts before regeneration')
        return len(stale)

    def get(self, task_id, workflow, producing_role, reference_backend_id) -> Optional[CachedArtifact]:
        return self._entries.get((task_id, workflow, producing_role, reference_backend_id))

    def require(self, task_id, workflow, producing_role, reference_backend_id) -> CachedArtifact:
        artifact = self.get(task_id, workflow, producing_role, reference_backend_id)
        if artifact is None:
            raise CacheMissError(f"({task_id}, {workflow}, {producing_role}, {reference_backend_id})")
        return artifact

    def has_task(self, task_id: str, spec: RoleIsolationSpec) -> bool:
        ref = spec.reference_backend.backend_id
        return all(self.get(task_id, spec.workflow_name, role, ref) for role in spec.cached_roles())

    def artifacts_for(self, task_id: str, spec: RoleIsolationSpec) -> List[CachedArtifact]:
        ref = spec.reference_backend.backend_id
        found = [a for a in self._entries.values()
                 if a.task_id == task_id and a.workflow == spec.workflow_name and a.reference_backend_id == ref]
        return sorted(found, key=lambda a: a.message.index_k)


@dataclass(frozen=True)
class CacheBuildSummary:
    built: int
    hits: int
    uncached: Tuple[str, ...]


def _reference_stages(spec: RoleIsolationSpec):
    ref = spec.reference_backend
    if spec.workflow is Paradigm.REFLECTION:
        return lambda s: initial_stage(s, ref)
    return lambda s: debate_rounds(s, [ref])[-1][-1]


def build_artifact_cache(tasks: Sequence[TaskInstance], spec: RoleIsolationSpec, cache: ArtifactCache,
                         workers: int = 1) -> CacheBuildSummary:
    """
    Generate the non-target artifacts of every task once with the reference
    backend. Tasks already cached are skipped; reference failures leave the
    task uncached.
    """
    if not spec.uses_cache:
        raise ConfigError(f'roles.{spec.name or spec.workflow.value}.workflow',
                          f'{spec.workflow.value} role isolation uses no artifact cache')

    def build(task):
        if cache.has_task(task.id, spec):
            return 'hit'
        cache.drop_task(task.id, spec)
        try:
            transcript = run_stages(task, spec.workflow_cfg, _reference_stages(spec))
        except WorkflowFailure as e:
            logger.warning(f'task {task.id}: reference generation failed, task left uncached: {e.cause}')
            return 'uncached'
        created_at = datetime.now(pytz.utc)
        for message in transcript.messages:
            cache.put(CachedArtifact(task.id, spec.workflow_name, producing_role(message),
                                     spec.reference_backend.backend_id, message, created_at))
        return 'built'

    with ThreadPoolExecutor(max_workers=parallel_workers([spec.reference_backend], workers)) as pool:
        outcomes = list(pool.map(build, tasks))
    summary = CacheBuildSummary(
        built=outcomes.count('built'),
        hits=outcomes.count('hit'),
        uncached=tuple(t.id for t, o in zip(tasks, outcomes) if o == 'uncached'),
    )
    logger.info(f'artifact cache for {spec.workflow_name}: {summary.built} built, {summary.hits} cached, '
                f'{len(summary.uncached)} uncached')
    return summary


def _replay(s, artifacts: Iterable[CachedArtifact]) -> List[str]:
    contents = []
    for artifact in artifacts:
        m = artifact.message
        s.replay(m.agent_id, m.role_name, m.round_r, m.kind, m.content, m.token_count, m.usage_source,
                 m.prompt_tokens)
        if m.kind is not MessageKind.REASONING:
            contents.append(m.content)
    return contents


def run_role_isolated(task: TaskInstance, spec: RoleIsolationSpec,
                      cache: Optional[ArtifactCache] = None) -> Transcript:
    evaluated, ref = spec.evaluated_backend, spec.reference_backend
    cfg = spec.workflow_cfg

    if spec.workflow is Paradigm.PLAN_EXECUTE:
        executor_decoding = cfg.decoding_for('executor').replace(temperature=0.0)
        return run_stages(task, cfg, lambda s: execute_stage(s, ref, plan_stage(s, evaluated), executor_decoding))

    if cache is None:
        raise ContractViolation(f'{spec.workflow.value} role isolation needs an artifact cache')
    required = [cache.require(task.id, spec.workflow_name, role, ref.backend_id) for role in spec.cached_roles()]
    artifacts = cache.artifacts_for(task.id, spec)

    if spec.workflow is Paradigm.REFLECTION:
        def body(s):
            _replay(s, artifacts)
            return revise_stage(s, evaluated, required[0].content)
    else:
        finals = required[-cfg.n_debaters:]

        def body(s):
            _replay(s, artifacts)
            return aggregate_stage(s, evaluated, [a.content for a in finals])

    return run_stages(task, cfg, body)


@dataclass(frozen=True)
class RoleComparisonRow:
    model: str
    backend_id: str
    target_role: str
    benchmark: str
    n_tasks: int
    n_skipped: int
    successes: int

    @property
    def success_rate(self) -> float:
        return float(Fraction(self.successes, self.n_tasks)) if self.n_tasks else 0.0


def compare_roles(models: Sequence[BackendHandle], spec: RoleIsolationSpec, tasks: Sequence[TaskInstance],
                  cache: Optional[ArtifactCache], judge: BackendHandle,
                  sandbox: Optional[Sandbox] = None) -> List[RoleComparisonRow]:
    """Success rate of each model in the target role over the same fixed context."""
    rows = []
    for model in models:
        model_spec = spec.with_evaluated(model)
        successes = scored = skipped = 0
        for task in tasks:
            if spec.uses_cache and not cache.has_task(task.id, spec):
                skipped += 1
                continue
            try:
                transcript = run_role_isolated(task, model_spec, cache)
            except WorkflowFailure as e:
                logger.warning(f'{model.name}: task {task.id} failed in role {spec.target_role}: {e.cause}')
                transcript = e.transcript
            successes += score_task(task, transcript, judge, sandbox).score
            scored += 1
        rows.append(RoleComparisonRow(model.name, model.backend_id, spec.target_role, spec.benchmark, scored,
                                      skipped, successes))
    return rows


COMPARISON_COLUMNS = ('model', 'target_role', 'benchmark', 'n_tasks', 'n_skipped', 'successes', 'success_rate')


def _comparison_cells(row: RoleComparisonRow) -> List[str]:
    return [row.model, row.target_role, row.benchmark, str(row.n_tasks), str(row.n_skipped), str(row.successes),
            f'{row.success_rate:.4f}']


def write_comparison(rows: Sequence[RoleComparisonRow], out_dir, name: str) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    text = format_table(COMPARISON_COLUMNS, [_comparison_cells(r) for r in rows])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(COMPARISON_COLUMNS)
    writer.writerows(_comparison_cells(r) for r in rows)
    return (records.write_text_atomic(out_dir / f'{name}.txt', text),
            records.write_text_atomic(out_dir / f'{name}.csv', buf.getvalue()))
