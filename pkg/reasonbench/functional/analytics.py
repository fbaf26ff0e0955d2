"""
Cost-accuracy analytics over persisted runs.

Everything here is a pure function of a list of CostRecords; means are kept
as Fractions and only rounded when a report is emitted.
"""
import csv
import io
import logging
import math
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import timedelta
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import isodate

from reasonbench.functional import records
from reasonbench.functional.errors import BinSpecError, ReasonBenchError
from reasonbench.functional.workflows import Transcript, transcript_cost

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ('workflow', 'task_id', 'query_length', 'total_tokens', 'success')
HISTOGRAM_COLUMNS = ('workflow', 'group', 'bin_lo', 'bin_hi', 'count')
SUMMARY_COLUMNS = ('workflow', 'n', 'successes', 'success_rate', 'mean_cost', 'cost_min', 'cost_max',
                   'estimated_fraction')

DEFAULT_BIN_COUNT = 10


@dataclass(frozen=True)
class CostRecord:
    task_id: str
    workflow: str
    total_tokens: int
    per_role_tokens: Dict[str, int]
    query_length_tokens: int
    success: int
    wall_time: timedelta = timedelta(0)
    estimated_tokens: int = 0

    def __post_init__(self):
        if self.total_tokens < 0 or self.query_length_tokens < 0:
            raise ValueError(f'cost record {self.task_id}: token counts must be non-negative')
        if self.success not in (0, 1):
            raise ValueError(f'cost record {self.task_id}: success must be 0 or 1')

    @classmethod
    def from_transcript(cls, transcript: Transcript, success: int, workflow: Optional[str] = None) -> 'CostRecord':
        cost = transcript_cost(transcript)
        first = transcript.messages[0] if transcript.messages else None
        return cls(
            task_id=transcript.task_id,
            workflow=workflow or transcript.workflow.get('name') or transcript.workflow['paradigm'],
            total_tokens=cost.total,
            per_role_tokens=cost.per_role,
            query_length_tokens=first.prompt_tokens if first else 0,
            success=int(success),
            wall_time=transcript.wall_time,
            estimated_tokens=cost.estimated_tokens,
        )

    def to_record(self) -> Dict:
        return {
            'task_id': self.task_id,
            'workflow': self.workflow,
            'total_tokens': self.total_tokens,
            'per_role_tokens': self.per_role_tokens,
            'query_length_tokens': self.query_length_tokens,
            'success': self.success,
            'wall_time': isodate.duration_isoformat(self.wall_time),
            'estimated_tokens': self.estimated_tokens,
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'CostRecord':
        return cls(
            task_id=record['task_id'],
            workflow=record['workflow'],
            total_tokens=record['total_tokens'],
            per_role_tokens=record.get('per_role_tokens', {}),
            query_length_tokens=record.get('query_length_tokens', 0),
            success=record['success'],
            wall_time=isodate.parse_duration(record.get('wall_time', 'PT0S')),
            estimated_tokens=record.get('estimated_tokens', 0),
        )


def load_cost_records(path) -> List[CostRecord]:
    return [CostRecord.from_record(r) for r in records.iter_jsonl(path)]


@dataclass(frozen=True)
class WorkflowSummary:
    workflow: str
    n: int
    successes: int
    total_cost: int
    cost_min: int
    cost_max: int
    estimated_tokens: int = 0

    @property
    def mean_cost(self) -> Fraction:
        return Fraction(self.total_cost, self.n)

    @property
    def success_rate(self) -> Fraction:
        return Fraction(self.successes, self.n)

    @property
    def estimated_fraction(self) -> Fraction:
        return Fraction(self.estimated_tokens, self.total_cost) if self.total_cost else Fraction(0)


@dataclass(frozen=True)
class Histogram:
    edges: Tuple[int, ...]
    counts: Tuple[int, ...]
    underflow: int = 0
    overflow: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow


class HistogramGroup(str, Enum):
    SUCCESS = 'success'
    FAIL = 'fail'
    ALL = 'all'


class ScatterPoint(NamedTuple):
    query_length: int
    total_tokens: int
    workflow: str
    success: int
    task_id: str


@dataclass(frozen=True)
class RunReport:
    summaries: Tuple[WorkflowSummary, ...]
    histograms: Dict[str, Dict[HistogramGroup, Histogram]] = field(default_factory=dict)
    scatter: Tuple[ScatterPoint, ...] = ()
    records: Tuple[CostRecord, ...] = ()

    @property
    def n(self) -> int:
        return sum(s.n for s in self.summaries)

    def summary(self, workflow: str) -> WorkflowSummary:
        for s in self.summaries:
            if s.workflow == workflow:
                return s
        raise KeyError(workflow)


def check_edges(edges: Sequence[float]) -> Tuple:
    edges = tuple(edges)
    if len(edges) < 2:
        raise BinSpecError(f'a binning needs at least 2 edges, got {len(edges)}')
    if any(lo >= hi for lo, hi in zip(edges, edges[1:])):
        raise BinSpecError(f'bin edges must be strictly increasing: {list(edges)}')
    return edges


def default_edges(records_: Sequence[CostRecord], n_bins: int = DEFAULT_BIN_COUNT) -> Tuple[int, ...]:
    """Equal-width integer bins from 0 covering the largest cost."""
    top = max((r.total_tokens for r in records_), default=0) + 1
    width = max(1, math.ceil(top / n_bins))
    return tuple(width * i for i in range(n_bins + 1))


def histogram(values: Sequence[int], edges: Sequence[float]) -> Histogram:
    edges = check_edges(edges)
    counts = [0] * (len(edges) - 1)
    underflow = overflow = 0
    for value in values:
        if value < edges[0]:
            underflow += 1
            continue
        index = bisect_right(edges, value) - 1
        if index >= len(counts):
            overflow += 1
        else:
            counts[index] += 1
    return Histogram(edges, tuple(counts), underflow, overflow)


def cost_distribution(records_: Sequence[CostRecord], split_by_success: bool = True,
                      bins: Optional[Sequence[float]] = None) -> Dict[HistogramGroup, Histogram]:
    """Histograms of total cost over half-open bins [lo, hi), split by task outcome if asked."""
    edges = check_edges(bins) if bins is not None else default_edges(records_)
    if not split_by_success:
        return {HistogramGroup.ALL: histogram([r.total_tokens for r in records_], edges)}
    return {
        HistogramGroup.SUCCESS: histogram([r.total_tokens for r in records_ if r.success], edges),
        HistogramGroup.FAIL: histogram([r.total_tokens for r in records_ if not r.success], edges),
    }


def scatter_query_cost(records_: Sequence[CostRecord]) -> List[ScatterPoint]:
    ordered = sorted(records_, key=lambda r: r.task_id)
    return [ScatterPoint(r.query_length_tokens, r.total_tokens, r.workflow, r.success, r.task_id) for r in ordered]


def aggregate_run(records_: Sequence[CostRecord], bins: Optional[Sequence[float]] = None) -> RunReport:
    if not records_:
        raise ReasonBenchError('aggregate_run needs at least one cost record')
    edges = check_edges(bins) if bins is not None else default_edges(records_)

    groups: Dict[str, List[CostRecord]] = OrderedDict()
    for r in sorted(records_, key=lambda r: (r.workflow, r.task_id)):
        groups.setdefault(r.workflow, []).append(r)

    summaries = tuple(
        WorkflowSummary(
            workflow=workflow,
            n=len(group),
            successes=sum(r.success for r in group),
            total_cost=sum(r.total_tokens for r in group),
            cost_min=min(r.total_tokens for r in group),
            cost_max=max(r.total_tokens for r in group),
            estimated_tokens=sum(r.estimated_tokens for r in group),
        )
        for workflow, group in groups.items()
    )
    return RunReport(
        summaries=summaries,
        histograms={workflow: cost_distribution(group, True, edges) for workflow, group in groups.items()},
        scatter=tuple(scatter_query_cost(records_)),
        records=tuple(r for group in groups.values() for r in group),
    )


# emission.
class ReportFormat(str, Enum):
    TABLE_TEXT = 'table_text'
    DELIMITED_DATA = 'delimited_data'


def format_table(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(columns)]

    def line(cells):
        return '  '.join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    out = [line(columns), line(['-' * w for w in widths])]
    out.extend(line(row) for row in rows)
    return '\n'.join(out) + '\n'


def _fmt_edge(edge) -> str:
    return f'{edge:g}' if isinstance(edge, float) else str(edge)


def _summary_cells(s: WorkflowSummary) -> List[str]:
    return [s.workflow, str(s.n), str(s.successes), f'{float(s.success_rate):.4f}', f'{float(s.mean_cost):.2f}',
            str(s.cost_min), str(s.cost_max), f'{float(s.estimated_fraction):.4f}']


def _histogram_rows(report: RunReport) -> List[List[str]]:
    rows = []
    for workflow in sorted(report.histograms):
        for group, h in report.histograms[workflow].items():
            rows.append([workflow, group.value, '-inf', _fmt_edge(h.edges[0]), str(h.underflow)])
            for lo, hi, count in zip(h.edges, h.edges[1:], h.counts):
                rows.append([workflow, group.value, _fmt_edge(lo), _fmt_edge(hi), str(count)])
            rows.append([workflow, group.value, _fmt_edge(h.edges[-1]), 'inf', str(h.overflow)])
    return rows


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(report: RunReport, fmt: ReportFormat, out_dir) -> List[Path]:
    """
    Write the report under `out_dir`: summary.txt for table_text, or
    records.csv, histogram.csv and summary.csv for delimited_data.
    """
    fmt = ReportFormat(fmt)
    out_dir = Path(out_dir)

    if fmt is ReportFormat.TABLE_TEXT:
        text = format_table(SUMMARY_COLUMNS, [_summary_cells(s) for s in report.summaries])
        text += '\ncost histograms (half-open bins)\n\n'
        text += format_table(HISTOGRAM_COLUMNS, _histogram_rows(report))
        return [records.write_text_atomic(out_dir / 'summary.txt', text)]

    record_rows = [[r.workflow, r.task_id, str(r.query_length_tokens), str(r.total_tokens), str(r.success)]
                   for r in report.records]
    return [
        records.write_text_atomic(out_dir / 'records.csv', _csv(RECORD_COLUMNS, record_rows)),
        records.write_text_atomic(out_dir / 'histogram.csv', _csv(HISTOGRAM_COLUMNS, _histogram_rows(report))),
        records.write_text_atomic(out_dir / 'summary.csv',
                                  _csv(SUMMARY_COLUMNS, [_summary_cells(s) for s in report.summaries])),
    ]
