"""
Open-ended main-idea benchmark.

For every item the evaluated model writes one correct option and three
distractors without seeing the expert references. A criteria model reads the
passage and the references and writes three criteria for the correct option
and three shared by all distractors. A zero-temperature judge then scores each
option under each criterion on fluency, confusability and accuracy (correct
option) or logical consistency (distractors); the item score is the sum of
the four per-option means, at most 40.
"""
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from reasonbench.functional import prompts, records
from reasonbench.functional.backend import BackendHandle, CompletionRequest, DecodingConfig, parallel_workers
from reasonbench.functional.errors import (
    ContractViolation, CriteriaError, OptionFormatError, OptionScoreError, ReasonBenchError
)
from reasonbench.functional.judging import judge_decoding

logger = logging.getLogger(__name__)

OPTION_LABELS = ('A', 'B', 'C', 'D')
CRITERIA_PER_SET = 3
MAX_ITEM_SCORE = 40.0

_OPTION_RE = re.compile(r'^\s*\(?([A-D])[).:：]\s*(.+?)\s*$')
_SCORE_RE = re.compile(r'^\s*\**([a-z_ ]+?)\**\s*[:=]\s*([0-9]+(?:\.[0-9]+)?)', re.IGNORECASE)


class CriterionKind(str, Enum):
    CORRECT_OPTION = 'correct_option'
    DISTRACTOR = 'distractor'

    @property
    def third_dimension(self) -> str:
        return 'accuracy' if self is CriterionKind.CORRECT_OPTION else 'logical_consistency'


@dataclass(frozen=True)
class ReferenceOption:
    text: str
    correct: bool


@dataclass(frozen=True)
class MimeItem:
    id: str
    passage_p: str
    prompt_q: str
    reference_options_R: Tuple[ReferenceOption, ...]
    constraints: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'reference_options_R', tuple(self.reference_options_R))
        if len(self.reference_options_R) != 4:
            raise ValueError(f'item {self.id}: expected 4 reference options, got {len(self.reference_options_R)}')
        n_correct = sum(1 for r in self.reference_options_R if r.correct)
        if n_correct != 1:
            raise ValueError(f'item {self.id}: expected exactly 1 correct reference option, got {n_correct}')
        if not self.passage_p.strip() or not self.prompt_q.strip():
            raise ValueError(f'item {self.id}: passage and question must be non-empty')

    @classmethod
    def from_record(cls, record: Dict) -> 'MimeItem':
        """Item record: {id, passage, question, references: [{text, correct}] x4, constraints?}."""
        return cls(
            id=str(record['id']),
            passage_p=record['passage'],
            prompt_q=record['question'],
            reference_options_R=tuple(ReferenceOption(r['text'], bool(r.get('correct', False)))
                                      for r in record['references']),
            constraints=record.get('constraints', ''),
        )

    def references_text(self) -> str:
        return '\n'.join(f"{label}. [{'correct' if r.correct else 'distractor'}] {r.text}"
                         for label, r in zip(OPTION_LABELS, self.reference_options_R))


def load_items(path) -> List[MimeItem]:
    return [MimeItem.from_record(r) for r in records.iter_jsonl(path)]


@dataclass(frozen=True)
class DimensionWeights:
    fluency: float = 4.0
    confusability: float = 3.0
    third: float = 3.0

    def __post_init__(self):
        if min(self.fluency, self.confusability, self.third) < 0:
            raise ValueError('dimension weights must be non-negative')
        if not math.isclose(self.fluency + self.confusability + self.third, 10.0):
            raise ValueError('dimension weights must sum to 10')


@dataclass(frozen=True)
class GeneratedOptions:
    item_id: str
    correct_o_star: str
    distractors: Tuple[str, ...]
    raw_reply: str
    reprompted: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'distractors', tuple(self.distractors))
        if len(self.distractors) != 3:
            raise ValueError(f'expected 3 distractors, got {len(self.distractors)}')
        if not all(o.strip() for o in (self.correct_o_star,) + self.distractors):
            raise ValueError('generated options must be non-empty')


@dataclass(frozen=True)
class CriteriaSet:
    item_id: str
    kind: CriterionKind
    criteria: Tuple[str, ...]
    generator_model: str

    def __post_init__(self):
        object.__setattr__(self, 'kind', CriterionKind(self.kind))
        object.__setattr__(self, 'criteria', tuple(self.criteria))
        if len(self.criteria) != CRITERIA_PER_SET:
            raise ValueError(f'a criteria set holds exactly {CRITERIA_PER_SET} criteria')

    @property
    def criterion_ids(self) -> Tuple[str, ...]:
        return tuple(f'{self.item_id}/{self.kind.value}/{k}' for k in range(1, len(self.criteria) + 1))


@dataclass(frozen=True)
class CriterionScore:
    criterion_id: str
    fluency: float
    confusability: float
    third: float
    total: float
    reprompted: bool = False


@dataclass(frozen=True)
class OptionScore:
    option_ref: str
    dimensions: Tuple[CriterionScore, ...]

    def __post_init__(self):
        object.__setattr__(self, 'dimensions', tuple(self.dimensions))
        if any(not 0 <= s <= 10 for s in self.per_criterion):
            raise ValueError(f'{self.option_ref}: criterion totals must lie in [0, 10]')

    @property
    def per_criterion(self) -> Tuple[float, ...]:
        return tuple(d.total for d in self.dimensions)

    @property
    def criterion_ids(self) -> Tuple[str, ...]:
        return tuple(d.criterion_id for d in self.dimensions)

    @property
    def mean(self) -> float:
        return math.fsum(self.per_criterion) / len(self.per_criterion)

    def to_record(self) -> Dict:
        return {
            'option': self.option_ref,
            'mean': self.mean,
            'per_criterion': [
                {'criterion': d.criterion_id, 'fluency': d.fluency, 'confusability': d.confusability,
                 'third': d.third, 'total': d.total} for d in self.dimensions
            ],
        }


@dataclass(frozen=True)
class ItemScore:
    item_id: str
    s_star: float
    s_distractors: Tuple[float, ...]
    options: Tuple[OptionScore, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 's_distractors', tuple(self.s_distractors))
        if len(self.s_distractors) != 3:
            raise ValueError('an item has exactly 3 distractor scores')
        if not 0 <= self.s_item <= MAX_ITEM_SCORE + 1e-9:
            raise ValueError(f'item {self.item_id}: score {self.s_item} outside [0, {MAX_ITEM_SCORE}]')

    @property
    def s_item(self) -> float:
        return math.fsum((self.s_star,) + self.s_distractors)

    def to_record(self) -> Dict:
        return {
            'id': self.item_id,
            's_item': self.s_item,
            's_star': self.s_star,
            's_distractors': list(self.s_distractors),
            'options': [o.to_record() for o in self.options],
        }


@dataclass(frozen=True)
class MimeReport:
    avg: float
    corr: float
    wrong: float
    n_scored: int
    n_unscorable: int
    items: Tuple[ItemScore, ...] = ()
    unscorable_ids: Tuple[str, ...] = field(default=())

    def to_record(self) -> Dict:
        return {
            'avg': self.avg,
            'corr': self.corr,
            'wrong': self.wrong,
            'n_scored': self.n_scored,
            'n_unscorable': self.n_unscorable,
            'unscorable': list(self.unscorable_ids),
            'items': [i.to_record() for i in self.items],
        }

    def write(self, path):
        return records.write_text_atomic(path, json.dumps(self.to_record(), indent=2, ensure_ascii=False) + '\n')


# option generation.
def parse_options(reply: str) -> Optional[Dict[str, str]]:
    """Labelled A-D lines; the first line per label wins. None if any label is missing."""
    options = {}
    for line in reply.splitlines():
        match = _OPTION_RE.match(line)
        if match and match.group(1) not in options and match.group(2).strip():
            options[match.group(1)] = match.group(2).strip()
    return options if len(options) == 4 else None


def _constraints_block(item: MimeItem) -> str:
    return f'Constraints: {item.constraints}\n\n' if item.constraints else ''


def generate_options(item: MimeItem, evaluated: BackendHandle,
                     decoding: Optional[DecodingConfig] = None) -> GeneratedOptions:
    reply = ''
    for attempt, stage in enumerate(('mime_generate', 'mime_generate_strict')):
        request = CompletionRequest(
            system_prompt=prompts.ROLE_PROMPTS['option_writer'],
            user_content=prompts.render(prompts.STAGE_TEMPLATES[stage], passage=item.passage_p,
                                        question=item.prompt_q, constraints=_constraints_block(item)),
            decoding=decoding or DecodingConfig(),
            agent_id='option_writer',
            role='option_writer',
            stage=stage,
            task_id=item.id,
        )
        reply = evaluated.complete(request).answer_text
        options = parse_options(reply)
        if options is not None:
            return GeneratedOptions(item.id, options['A'], (options['B'], options['C'], options['D']), reply,
                                    reprompted=attempt > 0)
        logger.warning(f'item {item.id}: option reply is missing some of the labels A-D')
    raise OptionFormatError(item.id, reply)


# criteria.
def generate_criteria(item: MimeItem, crit_backend: BackendHandle, kind: CriterionKind,
                      decoding: Optional[DecodingConfig] = None) -> CriteriaSet:
    kind = CriterionKind(kind)
    stage = f'criteria_{kind.value}'
    criteria = []
    for k in range(1, CRITERIA_PER_SET + 1):
        request = CompletionRequest(
            system_prompt=prompts.ROLE_PROMPTS['criteria_writer'],
            user_content=prompts.render(prompts.STAGE_TEMPLATES[stage], passage=item.passage_p,
                                        references=item.references_text()),
            decoding=decoding or DecodingConfig(),
            agent_id=f'criteria_writer-{k}',
            role='criteria_writer',
            stage=stage,
            task_id=item.id,
        )
        text = crit_backend.complete(request).answer_text.strip()
        if not text:
            logger.warning(f'item {item.id}: empty {kind.value} criterion {k}, regenerating')
            text = crit_backend.complete(request).answer_text.strip()
        if not text:
            raise CriteriaError(f'item {item.id}: {kind.value} criterion {k} is empty after a retry')
        criteria.append(text)
    return CriteriaSet(item.id, kind, tuple(criteria), crit_backend.model_name)


# judging.
def parse_option_scores(reply: str, weights: DimensionWeights = DimensionWeights()) -> Optional[Dict[str, float]]:
    """
    Dimension lines of a judge reply. None unless all four are present, each
    sub-score lies within its weight and the sub-scores add up to the total.
    """
    values = {}
    for line in reply.splitlines():
        match = _SCORE_RE.match(line)
        if not match:
            continue
        name = match.group(1).strip().lower().replace(' ', '_')
        if name in ('accuracy', 'logic', 'logical_consistency', 'accuracy_or_logic'):
            name = 'third'
        if name in ('fluency', 'confusability', 'third', 'total'):
            values.setdefault(name, float(match.group(2)))
    if len(values) != 4:
        return None
    if values['fluency'] > weights.fluency or values['confusability'] > weights.confusability \
            or values['third'] > weights.third or not 0 <= values['total'] <= 10:
        return None
    if abs(values['fluency'] + values['confusability'] + values['third'] - values['total']) > 1e-6:
        return None
    return values


def _judge_criterion(option: str, option_ref: str, criterion: str, criterion_id: str, kind: CriterionKind,
                     passage: str, judge: BackendHandle, weights: DimensionWeights, task_id: str,
                     k: int) -> CriterionScore:
    reply = ''
    for attempt, stage in enumerate(('option_judge', 'option_judge_strict')):
        request = CompletionRequest(
            system_prompt=prompts.ROLE_PROMPTS['option_grader'],
            user_content=prompts.render(
                prompts.STAGE_TEMPLATES[stage], passage=passage, criterion=criterion,
                option_kind=kind.value.replace('_', ' '), option=option, third=kind.third_dimension,
                w_fluency=f'{weights.fluency:g}', w_confusability=f'{weights.confusability:g}',
                w_third=f'{weights.third:g}',
            ),
            decoding=judge_decoding(),
            agent_id=f'{option_ref}/c{k}',
            role='option_grader',
            stage=stage,
            task_id=task_id,
        )
        reply = judge.complete(request).answer_text
        values = parse_option_scores(reply, weights)
        if values is not None:
            return CriterionScore(criterion_id, values['fluency'], values['confusability'], values['third'],
                                  values['total'], reprompted=attempt > 0)
        logger.warning(f'{task_id}: scores for {option_ref} under {criterion_id} are malformed')
    raise OptionScoreError(f'{task_id}: scores for {option_ref} under {criterion_id} unusable after a re-prompt',
                           reply)


def score_option(option: str, criteria: CriteriaSet, judge: BackendHandle, passage: str = '',
                 option_ref: str = 'correct', weights: DimensionWeights = DimensionWeights()) -> OptionScore:
    return OptionScore(option_ref, tuple(
        _judge_criterion(option, option_ref, criterion, criterion_id, criteria.kind, passage, judge, weights,
                         criteria.item_id, k)
        for k, (criterion, criterion_id) in enumerate(zip(criteria.criteria, criteria.criterion_ids), start=1)
    ))


def score_item(opts: GeneratedOptions, c_star: CriteriaSet, c_minus: CriteriaSet, judge: BackendHandle,
               passage: str = '', weights: DimensionWeights = DimensionWeights(), workers: int = 4) -> ItemScore:
    """Twelve judge calls: four options, each under its three criteria."""
    if c_star.kind is not CriterionKind.CORRECT_OPTION or c_minus.kind is not CriterionKind.DISTRACTOR:
        raise ContractViolation(f'item {opts.item_id}: criteria kinds do not match their options')

    jobs = [(opts.correct_o_star, c_star, 'correct')]
    jobs += [(d, c_minus, f'distractor-{i}') for i, d in enumerate(opts.distractors, start=1)]
    with ThreadPoolExecutor(max_workers=parallel_workers([judge], workers)) as pool:
        futures = [pool.submit(score_option, option, criteria, judge, passage, ref, weights)
                   for option, criteria, ref in jobs]
        scores = [f.result() for f in futures]
    return ItemScore(opts.item_id, scores[0].mean, tuple(s.mean for s in scores[1:]), tuple(scores))


# dataset.
def aggregate_item_scores(item_scores: Sequence[ItemScore], unscorable_ids: Sequence[str] = ()) -> MimeReport:
    if not item_scores:
        raise ReasonBenchError('mime evaluation has no scorable items')
    n = len(item_scores)
    return MimeReport(
        avg=math.fsum(i.s_item for i in item_scores) / n,
        corr=math.fsum(i.s_star for i in item_scores) / n,
        wrong=math.fsum(s for i in item_scores for s in i.s_distractors) / (3 * n),
        n_scored=n,
        n_unscorable=len(unscorable_ids),
        items=tuple(item_scores),
        unscorable_ids=tuple(unscorable_ids),
    )


def evaluate_item(item: MimeItem, evaluated: BackendHandle, crit_backend: BackendHandle, judge: BackendHandle,
                  weights: DimensionWeights = DimensionWeights(), workers: int = 4) -> ItemScore:
    opts = generate_options(item, evaluated)
    c_star = generate_criteria(item, crit_backend, CriterionKind.CORRECT_OPTION)
    c_minus = generate_criteria(item, crit_backend, CriterionKind.DISTRACTOR)
    return score_item(opts, c_star, c_minus, judge, item.passage_p, weights, workers)


def evaluate_dataset(items: Sequence[MimeItem], evaluated: BackendHandle, crit_backend: BackendHandle,
                     judge: BackendHandle, weights: DimensionWeights = DimensionWeights(),
                     workers: int = 4) -> MimeReport:
    scored, unscorable = [], []
    for item in items:
        try:
            scored.append(evaluate_item(item, evaluated, crit_backend, judge, weights, workers))
        except OptionFormatError as e:
            logger.warning(f'{e}; item excluded from the means')
            unscorable.append(item.id)
    report = aggregate_item_scores(scored, unscorable)
    logger.info(f'mime: avg {report.avg:.2f}, corr {report.corr:.2f}, wrong {report.wrong:.2f} '
                f'({report.n_scored} scored, {report.n_unscorable} unscorable)')
    return report
