import json
import logging
import os
import random
import string
import time
import unittest
from pathlib import Path

from reasonbench.functional.backend import ScriptedBackend, ScriptEntry, ScriptMode
from reasonbench.functional.workflows import Domain, TaskInstance, UnitTestSuite, WorkflowConfig

logger = logging.getLogger(__name__)

PACKAGE_PATH = Path(os.path.abspath(__file__)).parent.parent
FIXTURES_PATH = Path(PACKAGE_PATH, 'fixtures')
SCRIPTS_PATH = Path(FIXTURES_PATH, 'scripts')
DATASETS_PATH = Path(FIXTURES_PATH, 'datasets')


def assert_raises(exc_class, callable_obj, *args, **kwargs):
    """
    Like unittest.TestCase.assertRaises, but returns the exception.
    """
    try:
        callable_obj(*args, **kwargs)
    except exc_class as e:
        return e
    else:
        if hasattr(exc_class, '__name__'):
            exc_name = exc_class.__name__
        else:
            exc_name = str(exc_class)
        raise AssertionError("%s not raised" % exc_name)


def scripted(replies, name='scripted', mode=ScriptMode.KEY, model_name=None, tokens=None):
    """
    In-memory scripted backend. `replies` maps key -> reply text (key mode)
    or is a list of replies (sequence mode). `tokens` maps key -> (prompt, completion).
    """
    tokens = tokens or {}
    if isinstance(replies, dict):
        entries = []
        for key, reply in replies.items():
            prompt_tokens, completion_tokens = tokens.get(key, (10, 5))
            entries.append(ScriptEntry(reply=reply, key=key, prompt_tokens=prompt_tokens,
                                       completion_tokens=completion_tokens))
    else:
        entries = [ScriptEntry(reply=r, prompt_tokens=10, completion_tokens=5) for r in replies]
    return ScriptedBackend(name, entries, mode=mode, model_name=model_name)


class JitteredBackend(ScriptedBackend):
    """Scripted backend answering after a random delay of up to `max_delay` seconds."""

    def __init__(self, *args, max_delay=0.01, **kwargs):
        super().__init__(*args, **kwargs)
        self.max_delay = max_delay

    def complete(self, request):
        time.sleep(random.uniform(0, self.max_delay))
        return super().complete(request)


def write_script(path, entries, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(header)] if header is not None else []
    lines.extend(e if isinstance(e, str) else json.dumps(e) for e in entries)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def write_config(tmp_path, text, name='reasonbench.conf'):
    """Config file under tmp_path; `{fixtures}` in the text expands to the shipped fixtures directory."""
    path = Path(tmp_path, name)
    path.write_text(text.replace('{fixtures}', str(FIXTURES_PATH)), encoding='utf-8')
    return path


def make_task(task_id='t-1', domain=Domain.MATH, input_x='What is 48 + 24?', ground_truth='72'):
    return TaskInstance(id=task_id, domain=domain, input_x=input_x, ground_truth=ground_truth)


def make_code_task(task_id='c-1', tests=('assert add(1, 2) == 3', 'assert add(0, 0) == 0')):
    return TaskInstance(id=task_id, domain=Domain.CODE, input_x='Write add(a, b).',
                        ground_truth=UnitTestSuite(tests=tests))


def gen_rand_string(size, chars=string.ascii_uppercase + string.digits):
    return ''.join(random.choice(chars) for _ in range(size))


class TestBaseClass(object):

    @classmethod
    def setup_class(cls) -> None:
        cls.logger = logger
        cls.assertion = unittest.TestCase()
        cls.eq = cls.assertion.assertEqual
        cls.almost_eq = cls.assertion.assertAlmostEqual

    @classmethod
    def teardown_class(cls) -> None:
        pass

    @staticmethod
    def workflow(paradigm, **kwargs) -> WorkflowConfig:
        kwargs.setdefault('name', paradigm if isinstance(paradigm, str) else paradigm.value)
        return WorkflowConfig(paradigm=paradigm, **kwargs)

    @staticmethod
    def kinds(transcript):
        return [m.kind.value for m in transcript.messages]

    @staticmethod
    def agents(transcript):
        return [m.agent_id for m in transcript.messages]

    @staticmethod
    def read_json(path):
        with open(path, encoding='utf-8') as fp:
            return json.load(fp)

    @staticmethod
    def read_lines(path):
        with open(path, encoding='utf-8') as fp:
            return [json.loads(line) for line in fp if line.strip()]

    @staticmethod
    def tree_bytes(root, exclude=()):
        """Relative path -> bytes of every file below root, minus the excluded names."""
        root = Path(root)
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob('*'))
                if p.is_file() and p.name not in exclude}
