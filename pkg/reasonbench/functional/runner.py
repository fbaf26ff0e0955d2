"""
Batch orchestration: run a workflow over a dataset, score every task and
persist transcripts, verdicts and cost records.

A run directory holds one file per task under transcripts/, verdicts/ and
costs/; the transcript is written last and marks the task as done, so an
interrupted run resumes by skipping tasks whose three files exist.
Consolidated line-delimited files, reports and the run manifest are
rebuilt from the per-task files at the end of every run.
"""
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import isodate
import pytz
from munch import Munch

from reasonbench.functional import analytics, records
from reasonbench.functional.backend import parallel_workers
from reasonbench.functional.config import workflow_backends
from reasonbench.functional.errors import (
    BackendError, ConfigError, ContractViolation, JudgeReplyError, ReasonBenchError, SandboxError, WorkflowFailure
)
from reasonbench.functional.judging import Sandbox, SandboxLimits, TaskVerdict, score_task
from reasonbench.functional.mimebench import MimeReport, evaluate_dataset, load_items
from reasonbench.functional.roleiso import (
    ArtifactCache, RoleComparisonRow, RoleIsolationSpec, build_artifact_cache, compare_roles, write_comparison
)
from reasonbench.functional.workflows import Domain, TaskInstance, Transcript, run_workflow

logger = logging.getLogger(__name__)

RUN_MANIFEST = 'run.json'
_UNSAFE_RE = re.compile(r'[^A-Za-z0-9._-]')


def task_filename(task_id: str) -> str:
    return _UNSAFE_RE.sub('_', task_id) + '.json'


def load_dataset(path, name: str = '') -> List[TaskInstance]:
    tasks, seen = [], {}
    for record in records.iter_jsonl(path):
        try:
            task = TaskInstance.from_record(record, source_dataset=name)
        except (KeyError, ValueError) as e:
            raise ConfigError(f'datasets.{name}', f'bad task record {record.get("id", "?")!r}: {e}')
        filename = task_filename(task.id)
        if filename in seen:
            raise ConfigError(f'datasets.{name}', f'task id {task.id!r} collides with {seen[filename]!r}')
        seen[filename] = task.id
        tasks.append(task)
    return tasks


def make_sandbox(rbcfg: Munch) -> Sandbox:
    return Sandbox(SandboxLimits(rbcfg.sandbox_timeout, rbcfg.sandbox_memory), rbcfg.sandbox_workers)


class TaskStatus(str, Enum):
    SKIPPED = 'skipped'
    DONE = 'done'
    FAILED = 'failed'
    ERROR = 'error'


@dataclass
class RunSummary:
    run_dir: Path
    workflow: str
    dataset: str
    n_tasks: int = 0
    executed: int = 0
    skipped: int = 0
    failed: int = 0
    successes: int = 0
    errors: List[str] = field(default_factory=list)

    @property
    def exit_status(self) -> int:
        return 1 if self.errors else 0


class RunLayout(object):
    """Paths of one run directory."""

    def __init__(self, run_dir):
        self.root = Path(run_dir)
        self.transcripts = self.root / 'transcripts'
        self.verdicts = self.root / 'verdicts'
        self.costs = self.root / 'costs'
        self.report = self.root / 'report'
        self.manifest = self.root / RUN_MANIFEST

    def is_done(self, task_id: str) -> bool:
        name = task_filename(task_id)
        return all((d / name).is_file() for d in (self.transcripts, self.verdicts, self.costs))

    def persist(self, transcript: Transcript, verdict: TaskVerdict, cost: analytics.CostRecord) -> None:
        name = task_filename(transcript.task_id)
        records.write_text_atomic(self.verdicts / name, records.dumps(verdict.to_record()) + '\n')
        records.write_text_atomic(self.costs / name, records.dumps(cost.to_record()) + '\n')
        # written last: marks the task done.
        records.write_text_atomic(self.transcripts / name, records.dumps(transcript.to_record()) + '\n')

    def read(self, kind: str, task_id: str) -> Dict:
        with open(getattr(self, kind) / task_filename(task_id), encoding='utf-8') as fp:
            return json.loads(fp.read())

    def consolidate(self, tasks: Sequence[TaskInstance]) -> List[analytics.CostRecord]:
        done = [t for t in tasks if self.is_done(t.id)]
        for kind in ('transcripts', 'verdicts', 'costs'):
            records.write_jsonl(self.root / f'{kind}.jsonl', (self.read(kind, t.id) for t in done))
        return [analytics.CostRecord.from_record(self.read('costs', t.id)) for t in done]


def run_dir_for(rbcfg: Munch, workflow_name: str, dataset_name: str) -> Path:
    return Path(rbcfg.output_dir) / f'{workflow_name}__{dataset_name}'


def _write_reports(layout: RunLayout, cost_records: Sequence[analytics.CostRecord]) -> None:
    if not cost_records:
        return
    report = analytics.aggregate_run(cost_records)
    for fmt in analytics.ReportFormat:
        analytics.emit_report(report, fmt, layout.report)


def _write_manifest(layout: RunLayout, rbcfg: Munch, workflow_name: str, dataset_name: str,
                    summary: RunSummary) -> None:
    manifest = {
        'workflow': workflow_name,
        'dataset': dataset_name,
        'config': str(rbcfg.path),
        'dataset_path': str(rbcfg.datasets[dataset_name]),
        'judge': rbcfg.judge,
        'judge_backend': rbcfg.backends[rbcfg.judge].backend_id,
        'workflow_config': rbcfg.workflows[workflow_name].config.snapshot(),
        'bindings': dict(rbcfg.workflows[workflow_name].bindings),
        'seed': rbcfg.seed,
        'n_tasks': summary.n_tasks,
        'created_at': isodate.datetime_isoformat(datetime.now(pytz.utc)),
    }
    records.write_text_atomic(layout.manifest, json.dumps(manifest, indent=2, ensure_ascii=False) + '\n')


def _score(task, transcript, judge, sandbox, workflow_name) -> Tuple[TaskVerdict, analytics.CostRecord]:
    verdict = score_task(task, transcript, judge, sandbox)
    return verdict, analytics.CostRecord.from_transcript(transcript, verdict.score, workflow_name)


def run_benchmark(rbcfg: Munch, workflow_name: str, dataset_name: str,
                  sandbox: Optional[Sandbox] = None) -> RunSummary:
    """
    Run `workflow_name` over every task of `dataset_name`. Task failures are
    recorded as data; infrastructure errors are collected on the summary and
    make its exit status nonzero.
    """
    if workflow_name not in rbcfg.workflows:
        raise ConfigError('workflow', f"unknown '{workflow_name}'")
    if dataset_name not in rbcfg.datasets:
        raise ConfigError('dataset', f"unknown '{dataset_name}'")

    cfg = rbcfg.workflows[workflow_name].config
    backends = workflow_backends(rbcfg, workflow_name)
    judge = rbcfg.backends[rbcfg.judge]
    sandbox = sandbox or make_sandbox(rbcfg)
    tasks = load_dataset(rbcfg.datasets[dataset_name], dataset_name)
    open_ended = [t.id for t in tasks if t.domain is Domain.OPEN_ENDED]
    if open_ended:
        raise ConfigError(f'datasets.{dataset_name}', f'open_ended tasks belong to the mime pipeline: {open_ended}')

    layout = RunLayout(run_dir_for(rbcfg, workflow_name, dataset_name))
    summary = RunSummary(layout.root, workflow_name, dataset_name, n_tasks=len(tasks))

    order = list(tasks)
    random.Random(rbcfg.seed).shuffle(order)

    def execute(task):
        if layout.is_done(task.id):
            return TaskStatus.SKIPPED, None
        try:
            try:
                transcript = run_workflow(task, cfg, backends)
                status = TaskStatus.DONE
            except WorkflowFailure as e:
                transcript, status = e.transcript, TaskStatus.FAILED
            verdict, cost = _score(task, transcript, judge, sandbox, workflow_name)
            layout.persist(transcript, verdict, cost)
            return status, verdict.score
        except (BackendError, JudgeReplyError, SandboxError, ContractViolation, OSError) as e:
            logger.error(f'task {task.id}: {type(e).__name__}: {e}')
            return TaskStatus.ERROR, f'{task.id}: {e}'
        except Exception as e:
            logger.exception(f'task {task.id}: unexpected {type(e).__name__}: {e}')
            return TaskStatus.ERROR, f'{task.id}: {type(e).__name__}: {e}'

    workers = parallel_workers(list(backends.values()) + [judge], rbcfg.concurrency_limit)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(execute, order))

    for status, value in outcomes:
        if status is TaskStatus.SKIPPED:
            summary.skipped += 1
        elif status is TaskStatus.ERROR:
            summary.errors.append(value)
        else:
            summary.executed += 1
            summary.failed += status is TaskStatus.FAILED
            summary.successes += value

    try:
        _write_reports(layout, layout.consolidate(tasks))
        _write_manifest(layout, rbcfg, workflow_name, dataset_name, summary)
    except OSError as e:
        summary.errors.append(f'could not write run artifacts: {e}')

    logger.info(f'{workflow_name} on {dataset_name}: {summary.executed} executed ({summary.failed} failed), '
                f'{summary.skipped} resumed, {summary.successes} correct, {len(summary.errors)} errors')
    return summary


def rejudge_run(rbcfg: Munch, run_dir, sandbox: Optional[Sandbox] = None) -> RunSummary:
    """Re-score every persisted transcript of a run with the currently configured judge."""
    layout = RunLayout(run_dir)
    if not layout.manifest.is_file():
        raise ConfigError('judge.rejudge', f'{layout.root} has no {RUN_MANIFEST}')
    with open(layout.manifest, encoding='utf-8') as fp:
        manifest = json.load(fp)

    dataset_name = manifest['dataset']
    dataset_path = rbcfg.datasets.get(dataset_name) or Path(manifest['dataset_path'])
    tasks = load_dataset(dataset_path, dataset_name)
    judge = rbcfg.backends[rbcfg.judge]
    sandbox = sandbox or make_sandbox(rbcfg)
    summary = RunSummary(layout.root, manifest['workflow'], dataset_name, n_tasks=len(tasks))

    for task in tasks:
        if not (layout.transcripts / task_filename(task.id)).is_file():
            continue
        transcript = Transcript.from_record(layout.read('transcripts', task.id))
        try:
            verdict, cost = _score(task, transcript, judge, sandbox, manifest['workflow'])
            layout.persist(transcript, verdict, cost)
        except (BackendError, JudgeReplyError, SandboxError, OSError) as e:
            summary.errors.append(f'{task.id}: {e}')
            continue
        summary.executed += 1
        summary.failed += not transcript.complete
        summary.successes += verdict.score

    _write_reports(layout, layout.consolidate(tasks))
    return summary


def collect_cost_records(runs_dir) -> List[analytics.CostRecord]:
    """Cost records of every run below `runs_dir` (or of `runs_dir` itself)."""
    runs_dir = Path(runs_dir)
    paths = [runs_dir / 'costs.jsonl'] if (runs_dir / 'costs.jsonl').is_file() \
        else sorted(runs_dir.glob('*/costs.jsonl'))
    collected = []
    for path in paths:
        collected.extend(analytics.load_cost_records(path))
    return collected


def report_runs(runs_dir, fmt: analytics.ReportFormat, out_dir=None) -> List[Path]:
    cost_records = collect_cost_records(runs_dir)
    if not cost_records:
        raise ReasonBenchError(f'no cost records found under {runs_dir}')
    report = analytics.aggregate_run(cost_records)
    return analytics.emit_report(report, fmt, out_dir or Path(runs_dir) / 'report')


def build_role_spec(rbcfg: Munch, roles_name: str) -> RoleIsolationSpec:
    if roles_name not in rbcfg.roles:
        raise ConfigError('roles', f"unknown '{roles_name}'")
    section = rbcfg.roles[roles_name]
    return RoleIsolationSpec(
        workflow_cfg=rbcfg.workflows[section.workflow].config,
        target_role=section.target_role,
        reference_backend=rbcfg.backends[section.reference],
        evaluated_backend=rbcfg.backends[section.evaluated[0]],
        benchmark=section.benchmark,
        name=roles_name,
    )


def run_roles(rbcfg: Munch, roles_name: str, sandbox: Optional[Sandbox] = None) -> List[RoleComparisonRow]:
    spec = build_role_spec(rbcfg, roles_name)
    section = rbcfg.roles[roles_name]
    tasks = load_dataset(rbcfg.datasets[spec.benchmark], spec.benchmark)

    cache = None
    if spec.uses_cache:
        cache = ArtifactCache(section.cache_dir)
        build_artifact_cache(tasks, spec, cache, workers=rbcfg.concurrency_limit)

    models = [rbcfg.backends[name] for name in section.evaluated]
    rows = compare_roles(models, spec, tasks, cache, rbcfg.backends[rbcfg.judge], sandbox or make_sandbox(rbcfg))
    write_comparison(rows, Path(rbcfg.output_dir) / 'roles', roles_name)
    return rows


def run_mime(rbcfg: Munch, items_path=None) -> MimeReport:
    if rbcfg.mime is None:
        raise ConfigError('mime', 'your config file has no [mime] section')
    items_path = items_path or rbcfg.mime.items
    if items_path is None:
        raise ConfigError('mime.items', 'missing')
    items = load_items(items_path)
    report = evaluate_dataset(
        items,
        rbcfg.backends[rbcfg.mime.evaluated],
        rbcfg.backends[rbcfg.mime.criteria],
        rbcfg.backends[rbcfg.mime.judge],
        rbcfg.mime.weights,
        rbcfg.mime.workers,
    )
    report.write(Path(rbcfg.output_dir) / 'mime' / f'{Path(items_path).stem}.json')
    return report
