"""
Line-delimited record files.

Records are written with a fixed field order (dict insertion order) so two
runs producing the same data produce the same bytes.
"""
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, Iterator


def dumps(record: Dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(', ', ': '))


def iter_jsonl(path) -> Iterator[Dict]:
    with open(path, encoding='utf-8') as fp:
        for line_no, line in enumerate(fp, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                yield json.loads(line)
            except ValueError as e:
                raise ValueError(f'{path}:{line_no}: invalid JSON record: {e}')


def write_jsonl(path, records: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_text_atomic(path, ''.join(dumps(r) + '\n' for r in records))


def write_text_atomic(path, text: str) -> Path:
    """Write via a temp file and rename, so readers never see half a record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
