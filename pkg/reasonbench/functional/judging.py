"""
Closed-form scoring.

Math and general tasks are scored by a zero-temperature judge deciding
whether the output is equivalent to the reference answer. Code tasks are
scored by extracting the solution and running the task's unit tests in a
child process.
"""
import json
import logging
import re
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional

from reasonbench.functional import prompts
from reasonbench.functional.backend import (
    BackendHandle, CompletionRequest, DecodingConfig, DecodingStrategy
)
from reasonbench.functional.errors import ContractViolation, JudgeReplyError, SandboxError
from reasonbench.functional.workflows import Domain, TaskInstance, Transcript, UnitTestSuite

logger = logging.getLogger(__name__)

JUDGE_DECODING = DecodingConfig(temperature=0.0, max_tokens=512, strategy=DecodingStrategy.DIRECT_RESPONSE)

_FENCE_RE = re.compile(r'```[^\n`]*\n(.*?)```', re.DOTALL)
_VERDICTS = {'CORRECT': 1, 'INCORRECT': 0}


def judge_decoding(decoding: Optional[DecodingConfig] = None) -> DecodingConfig:
    """Judge calls always run at temperature 0 and without reasoning, whatever the config says."""
    return (decoding or JUDGE_DECODING).replace(temperature=0.0, strategy=DecodingStrategy.DIRECT_RESPONSE)


@dataclass(frozen=True)
class JudgeVerdict:
    score: int
    rationale: str
    judge_model: str
    judge_temperature: float = 0.0
    raw_reply: str = ''
    reprompted: bool = False

    def __post_init__(self):
        if self.score not in (0, 1):
            raise ValueError(f'judge score must be 0 or 1, got {self.score}')
        if self.judge_temperature != 0:
            raise ValueError(f'judge temperature must be 0, got {self.judge_temperature}')

    def to_record(self) -> Dict:
        return {
            'score': self.score,
            'rationale': self.rationale,
            'judge_model': self.judge_model,
            'judge_temperature': self.judge_temperature,
            'reprompted': self.reprompted,
        }


def parse_verdict(reply: str) -> Optional[int]:
    lines = [line.strip() for line in reply.strip().splitlines() if line.strip()]
    if not lines:
        return None
    return _VERDICTS.get(lines[-1].strip('*_`.!: ').upper())


def judge_equivalence(model_output: str, ground_truth: str, judge: BackendHandle, task_id: str = '',
                      decoding: Optional[DecodingConfig] = None) -> JudgeVerdict:
    decoding = judge_decoding(decoding)
    reply = ''
    for attempt, stage in enumerate(('equivalence', 'equivalence_strict')):
        request = CompletionRequest(
            system_prompt=prompts.ROLE_PROMPTS['grader'],
            user_content=prompts.render(prompts.STAGE_TEMPLATES[stage], ground_truth=ground_truth,
                                        output=model_output or '(empty output)'),
            decoding=decoding,
            agent_id='grader',
            role='grader',
            stage=stage,
            task_id=task_id,
        )
        reply = judge.complete(request).answer_text
        score = parse_verdict(reply)
        if score is not None:
            lines = reply.strip().splitlines()
            return JudgeVerdict(
                score=score,
                rationale='\n'.join(lines[:-1]).strip(),
                judge_model=judge.model_name,
                judge_temperature=decoding.temperature,
                raw_reply=reply,
                reprompted=attempt > 0,
            )
        logger.warning(f"task {task_id}: judge reply has no CORRECT/INCORRECT verdict line"
                       + (', re-prompting' if attempt == 0 else ''))
    raise JudgeReplyError(f'task {task_id}: judge reply unparsable after a strict re-prompt', reply)


# code extraction.
class ExtractionPath(str, Enum):
    RULE_BASED = 'rule_based'
    JUDGE_FALLBACK = 'judge_fallback'


@dataclass(frozen=True)
class ExtractedCode:
    code: Optional[str]
    path: Optional[ExtractionPath]

    @property
    def needs_fallback(self) -> bool:
        return self.code is None


NEEDS_FALLBACK = ExtractedCode(None, None)


def extract_code(model_output: str) -> ExtractedCode:
    """The last fenced block wins; no usable block means the judge extractor has to try."""
    blocks = _FENCE_RE.findall(model_output or '')
    if blocks and blocks[-1].strip():
        return ExtractedCode(blocks[-1].strip('\n'), ExtractionPath.RULE_BASED)
    return NEEDS_FALLBACK


def extract_code_with_judge(model_output: str, judge: BackendHandle, task_id: str = '') -> ExtractedCode:
    request = CompletionRequest(
        system_prompt=prompts.ROLE_PROMPTS['code_extractor'],
        user_content=prompts.render(prompts.STAGE_TEMPLATES['extract_code'], output=model_output or '(empty)'),
        decoding=judge_decoding(),
        agent_id='code_extractor',
        role='code_extractor',
        stage='extract_code',
        task_id=task_id,
    )
    reply = judge.complete(request).answer_text.strip()
    if not reply or reply.upper() == 'NONE':
        return ExtractedCode(None, ExtractionPath.JUDGE_FALLBACK)
    fenced = extract_code(reply)
    return ExtractedCode(fenced.code if fenced.code is not None else reply, ExtractionPath.JUDGE_FALLBACK)


# sandbox.
_RESULT_MARKER = '@@reasonbench-result@@'

_HARNESS = f'''\
import json
import socket
import sys

with open(sys.argv[1], encoding="utf-8") as fp:
    payload = json.load(fp)

try:
    import resource
    memory = payload["memory_bytes"]
    resource.setrlimit(resource.RLIMIT_AS, (memory, memory))
    cpu = payload["cpu_seconds"]
    resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu))
except (ImportError, ValueError, OSError):
    pass


def _no_network(*args, **kwargs):
    raise OSError("network access is disabled")


socket.socket = _no_network
socket.create_connection = _no_network
socket.getaddrinfo = _no_network

namespace = {{"__name__": "__solution__"}}
passed = 0
loaded = True
try:
    exec(compile(payload["setup"] + "\\n" + payload["code"], "<solution>", "exec"), namespace)
except BaseException as e:
    loaded = False
    print(f"solution failed to load: {{e!r}}", file=sys.stderr)

if loaded:
    for index, test in enumerate(payload["tests"]):
        try:
            exec(compile(test, f"<test {{index}}>", "exec"), dict(namespace))
            passed += 1
        except BaseException as e:
            print(f"test {{index}} failed: {{e!r}}", file=sys.stderr)

sys.stdout.flush()
print("{_RESULT_MARKER}" + json.dumps({{"loaded": loaded, "passed": passed}}))
'''


@dataclass(frozen=True)
class SandboxLimits:
    wall_time: float = 10.0
    memory_mb: int = 512

    def __post_init__(self):
        if self.wall_time <= 0:
            raise ValueError(f'sandbox wall time must be positive, got {self.wall_time}')
        if self.memory_mb < 64:
            raise ValueError(f'sandbox memory must be at least 64 MB, got {self.memory_mb}')


@dataclass(frozen=True)
class CodeEvalResult:
    extracted: bool
    extraction_path: Optional[ExtractionPath] = None
    tests_total: int = 0
    tests_passed: int = 0
    timeout: bool = False
    detail: str = ''

    def __post_init__(self):
        if not 0 <= self.tests_passed <= self.tests_total:
            raise ValueError('tests_passed must lie within [0, tests_total]')

    @property
    def score(self) -> int:
        return int(self.tests_passed == self.tests_total and self.tests_total > 0 and not self.timeout)

    def to_record(self) -> Dict:
        return {
            'extracted': self.extracted,
            'extraction_path': self.extraction_path.value if self.extraction_path else None,
            'tests_total': self.tests_total,
            'tests_passed': self.tests_passed,
            'timeout': self.timeout,
            'score': self.score,
            'detail': self.detail,
        }


class Sandbox(object):
    """
    Runs a solution and its unit tests in an isolated child interpreter with
    wall-time, memory and CPU limits and no network. At most `max_workers`
    children run at once.
    """

    def __init__(self, limits: Optional[SandboxLimits] = None, max_workers: int = 4):
        if max_workers < 1:
            raise ValueError('sandbox needs at least one worker')
        self.limits = limits or SandboxLimits()
        self._slots = threading.BoundedSemaphore(max_workers)

    def run(self, code: str, suite: UnitTestSuite, limits: Optional[SandboxLimits] = None) -> CodeEvalResult:
        if not suite.tests:
            raise ContractViolation('run_unit_tests needs a non-empty test suite')
        limits = limits or self.limits
        total = len(suite.tests)

        with self._slots, tempfile.TemporaryDirectory(prefix='reasonbench-sandbox-') as workdir:
            harness = Path(workdir, 'harness.py')
            harness.write_text(_HARNESS, encoding='utf-8')
            payload = Path(workdir, 'payload.json')
            payload.write_text(json.dumps({
                'code': code,
                'setup': suite.setup,
                'tests': list(suite.tests),
                'memory_bytes': limits.memory_mb * 1024 * 1024,
                'cpu_seconds': int(limits.wall_time) + 1,
            }), encoding='utf-8')

            try:
                proc = subprocess.run(
                    [sys.executable, '-I', str(harness), str(payload)],
                    cwd=workdir, stdin=subprocess.DEVNULL, capture_output=True, text=True,
                    timeout=limits.wall_time,
                )
            except subprocess.TimeoutExpired:
                logger.debug(f'sandbox run exceeded {limits.wall_time}s')
                return CodeEvalResult(True, tests_total=total, timeout=True, detail='wall-time limit exceeded')
            except OSError as e:
                raise SandboxError(f'could not start the sandbox interpreter: {e}')

        for line in reversed(proc.stdout.splitlines()):
            if line.startswith(_RESULT_MARKER):
                outcome = json.loads(line[len(_RESULT_MARKER):])
                return CodeEvalResult(True, tests_total=total, tests_passed=min(outcome['passed'], total),
                                      detail=proc.stderr[-2000:])
        # killed by a resource limit before reporting.
        return CodeEvalResult(True, tests_total=total, detail=f'exit status {proc.returncode}: '
                                                              f'{proc.stderr[-2000:]}')


def run_unit_tests(code: str, suite: UnitTestSuite, limits: Optional[SandboxLimits] = None,
                   sandbox: Optional[Sandbox] = None) -> CodeEvalResult:
    return (sandbox or Sandbox(limits)).run(code, suite, limits)


def evaluate_code(model_output: str, suite: UnitTestSuite, judge: BackendHandle, sandbox: Sandbox,
                  task_id: str = '') -> CodeEvalResult:
    extracted = extract_code(model_output)
    if extracted.needs_fallback:
        logger.info(f'task {task_id}: no fenced code block, asking the judge to extract the solution')
        extracted = extract_code_with_judge(model_output, judge, task_id)
    if extracted.code is None:
        return CodeEvalResult(False, ExtractionPath.JUDGE_FALLBACK, tests_total=len(suite.tests),
                              detail='no code found')
    result = sandbox.run(extracted.code, suite)
    return CodeEvalResult(True, extracted.path, result.tests_total, result.tests_passed, result.timeout,
                          result.detail)


@dataclass(frozen=True)
class TaskVerdict:
    task_id: str
    domain: Domain
    score: int
    judge: Optional[JudgeVerdict] = None
    code: Optional[CodeEvalResult] = None
    note: str = ''

    def to_record(self) -> Dict:
        return {
            'task_id': self.task_id,
            'domain': self.domain.value,
            'score': self.score,
            'judge': self.judge.to_record() if self.judge else None,
            'code': self.code.to_record() if self.code else None,
            'note': self.note,
        }


def score_task(task: TaskInstance, transcript: Transcript, judge: BackendHandle,
               sandbox: Optional[Sandbox] = None) -> TaskVerdict:
    if task.domain is Domain.OPEN_ENDED:
        raise ContractViolation(f'task {task.id}: open_ended tasks are scored by the mime pipeline')
    if not transcript.complete:
        return TaskVerdict(task.id, task.domain, 0, note=f'workflow failed: {transcript.failure}')

    if task.domain is Domain.CODE:
        code = evaluate_code(transcript.final_answer_y, task.ground_truth, judge, sandbox or Sandbox(), task.id)
        return TaskVerdict(task.id, task.domain, code.score, code=code)

    verdict = judge_equivalence(transcript.final_answer_y, task.ground_truth, judge, task.id)
    return TaskVerdict(task.id, task.domain, verdict.score, judge=verdict)
