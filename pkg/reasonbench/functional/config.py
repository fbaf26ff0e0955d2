import logging
import os
import re
from configparser import DuplicateOptionError, DuplicateSectionError, Error as ParserError, RawConfigParser
from pathlib import Path
from typing import Dict, Optional

from munch import Munch

from reasonbench.functional import prompts
from reasonbench.functional.backend import (
    THINK_CLOSE, THINK_OPEN, BackendHandle, BackendKind, DecodingConfig, DecodingStrategy, HttpChatBackend,
    load_scripted_backend
)
from reasonbench.functional.errors import ConfigError, ContractViolation, ScriptParseError
from reasonbench.functional.mimebench import DimensionWeights
from reasonbench.functional.roleiso import DEFAULT_BENCHMARKS, TARGET_ROLES
from reasonbench.functional.workflows import AggregatorMode, Paradigm, WorkflowConfig, debater_id

logger = logging.getLogger(__name__)

_SECTION_RE = re.compile(r'^(backend|workflow|dataset|roles)\s+(\S+)$')
_PLURAL = {'backend': 'backends', 'workflow': 'workflows', 'dataset': 'datasets', 'roles': 'roles'}
_DECODING_KEYS = ('temperature', 'top_p', 'top_k', 'max_tokens')
_CREDENTIAL_KEYS = ('api_key', 'token', 'password', 'secret')


def _field_of_section(section: str) -> str:
    match = _SECTION_RE.match(section)
    return f'{_PLURAL[match.group(1)]}.{match.group(2)}' if match else section


def _get(cfg: RawConfigParser, section: str, option: str, field: str, default=None, required=False):
    if cfg.has_option(section, option):
        value = cfg.get(section, option).strip()
        if value:
            return value
    if required:
        raise ConfigError(f'{field}.{option}', 'missing')
    return default


def _get_number(cfg, section, option, field, default, kind=int, minimum=None):
    raw = _get(cfg, section, option, field)
    if raw is None:
        return default
    try:
        value = kind(raw)
    except ValueError:
        raise ConfigError(f'{field}.{option}', f'expected a number, got {raw!r}')
    if minimum is not None and value < minimum:
        raise ConfigError(f'{field}.{option}', f'must be >= {minimum}, got {value}')
    return value


def _get_bool(cfg, section, option, field, default=False) -> bool:
    if not cfg.has_option(section, option):
        return default
    try:
        return cfg.getboolean(section, option)
    except ValueError:
        raise ConfigError(f'{field}.{option}', f'expected a boolean, got {cfg.get(section, option)!r}')


def _resolve(base_dir: Path, value: str) -> Path:
    path = Path(os.path.expanduser(value))
    return path if path.is_absolute() else (base_dir / path)


def _named_sections(cfg: RawConfigParser, kind: str) -> Dict[str, str]:
    found = {}
    for section in cfg.sections():
        match = _SECTION_RE.match(section)
        if match and match.group(1) == kind:
            found[match.group(2)] = section
    return found


def _add_run_section(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add run section to RBCFG"""
    if not cfg.has_section('run'):
        raise ConfigError('run', 'your config file is missing the [run] section')

    rbcfg.judge = _get(cfg, 'run', 'judge', 'run', required=True)
    rbcfg.concurrency_limit = _get_number(cfg, 'run', 'concurrency_limit', 'run', 1, minimum=1)
    rbcfg.output_dir = _resolve(rbcfg.base_dir, _get(cfg, 'run', 'output_dir', 'run', 'runs'))
    rbcfg.seed = _get_number(cfg, 'run', 'seed', 'run', 0)
    rbcfg.sandbox_timeout = _get_number(cfg, 'run', 'sandbox_timeout', 'run', 10.0, kind=float, minimum=0.1)
    rbcfg.sandbox_memory = _get_number(cfg, 'run', 'sandbox_memory', 'run', 512, minimum=64)
    rbcfg.sandbox_workers = _get_number(cfg, 'run', 'sandbox_workers', 'run', 4, minimum=1)


def _build_backend(name: str, cfg: RawConfigParser, section: str, base_dir: Path) -> BackendHandle:
    field = f'backends.{name}'
    for option in _CREDENTIAL_KEYS:
        if cfg.has_option(section, option):
            raise ConfigError(f'{field}.{option}', 'credentials are read from the environment; use auth_env')

    raw_kind = _get(cfg, section, 'kind', field, required=True)
    try:
        kind = BackendKind(raw_kind)
    except ValueError:
        raise ConfigError(f'{field}.kind', f"unknown backend kind '{raw_kind}'")

    delimiters = (THINK_OPEN, THINK_CLOSE)
    raw_delimiters = _get(cfg, section, 'reasoning_delimiters', field)
    if raw_delimiters:
        parts = raw_delimiters.split()
        if len(parts) != 2:
            raise ConfigError(f'{field}.reasoning_delimiters', 'expected an opening and a closing delimiter')
        delimiters = tuple(parts)

    if kind is BackendKind.SCRIPTED:
        script = _resolve(base_dir, _get(cfg, section, 'script', field, required=True))
        if not script.is_file():
            raise ConfigError(f'{field}.script', f'no such file {script}')
        try:
            backend = load_scripted_backend(script, name=name, mode=_get(cfg, section, 'mode', field),
                                            model_name=_get(cfg, section, 'model', field))
        except ScriptParseError as e:
            raise ConfigError(f'{field}.script', str(e))
        backend.delimiters = delimiters
        return backend

    return HttpChatBackend(
        name=name,
        endpoint=_get(cfg, section, 'endpoint', field, required=True),
        model_name=_get(cfg, section, 'model', field, required=True),
        auth_env=_get(cfg, section, 'auth_env', field),
        native_reasoning=_get_bool(cfg, section, 'native_reasoning', field),
        timeout=_get_number(cfg, section, 'timeout', field, 120.0, kind=float, minimum=1),
        max_attempts=_get_number(cfg, section, 'max_attempts', field, 3, minimum=1),
        backoff_factor=_get_number(cfg, section, 'backoff_factor', field, 1.0, kind=float, minimum=0),
        delimiters=delimiters,
    )


def _add_backend_sections(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add backend sections to RBCFG"""
    rbcfg.backends = Munch()
    for name, section in _named_sections(cfg, 'backend').items():
        rbcfg.backends[name] = _build_backend(name, cfg, section, rbcfg.base_dir)
    if rbcfg.judge not in rbcfg.backends:
        raise ConfigError('run.judge', f"unknown '{rbcfg.judge}'")


def _decoding(cfg, section, field, suffix, base: DecodingConfig) -> Optional[DecodingConfig]:
    """Decoding options with the given suffix ('' or '.<role>') applied on top of `base`."""
    changes = {}
    for key in _DECODING_KEYS:
        option = f'{key}{suffix}'
        kind = float if key in ('temperature', 'top_p') else int
        value = _get_number(cfg, section, option, field, None, kind=kind)
        if value is not None:
            changes[key] = value
    strategy = _get(cfg, section, f'strategy{suffix}', field)
    if strategy is not None:
        changes['strategy'] = _strategy(strategy, f'{field}.strategy{suffix}')
    if not changes:
        return None
    try:
        return base.replace(**changes)
    except ValueError as e:
        raise ConfigError(f'{field}{suffix}', str(e))


def _strategy(value: str, field: str) -> DecodingStrategy:
    try:
        return DecodingStrategy(value)
    except ValueError:
        raise ConfigError(field, f"unknown strategy '{value}'")


def _build_workflow(name: str, cfg: RawConfigParser, section: str, backends: Munch) -> Munch:
    field = f'workflows.{name}'
    raw_paradigm = _get(cfg, section, 'paradigm', field, required=True)
    try:
        paradigm = Paradigm(raw_paradigm)
    except ValueError:
        raise ConfigError(f'{field}.paradigm', f"unknown paradigm '{raw_paradigm}'")

    strategy = _strategy(_get(cfg, section, 'strategy', field, DecodingStrategy.DIRECT_RESPONSE.value),
                         f'{field}.strategy')
    base = _decoding(cfg, section, field, '', DecodingConfig(strategy=strategy)) or DecodingConfig(strategy=strategy)

    options = cfg.options(section)
    role_decoding, role_prompts, templates, bindings = {}, {}, {}, {}
    for option in options:
        head, _, target = option.partition('.')
        if not target:
            continue
        if head == 'prompt':
            role_prompts[target] = cfg.get(section, option)
        elif head == 'template':
            templates[target] = cfg.get(section, option)
        elif head == 'backend':
            bindings[target] = cfg.get(section, option).strip()
        elif head in _DECODING_KEYS + ('strategy',) and target not in role_decoding:
            role_decoding[target] = _decoding(cfg, section, field, f'.{target}', base)

    raw_mode = _get(cfg, section, 'aggregator_mode', field, AggregatorMode.LLM.value)
    try:
        aggregator_mode = AggregatorMode(raw_mode)
    except ValueError:
        raise ConfigError(f'{field}.aggregator_mode', f"unknown aggregator mode '{raw_mode}'")

    try:
        workflow = WorkflowConfig(
            paradigm=paradigm,
            n_debaters=_get_number(cfg, section, 'n_debaters', field, 3, minimum=1),
            rounds=_get_number(cfg, section, 'rounds', field, 1, minimum=0),
            strategy=strategy,
            decoding=base,
            role_decoding=role_decoding,
            role_prompts=role_prompts,
            templates=templates,
            aggregator_mode=aggregator_mode,
            reflection_single_call=_get_bool(cfg, section, 'reflection_single_call', field),
            final_marker=_get(cfg, section, 'final_marker', field, prompts.FINAL_MARKER),
            revision_marker=_get(cfg, section, 'revision_marker', field, prompts.REVISION_MARKER),
            name=name,
        )
    except ContractViolation as e:
        raise ConfigError(field, str(e))

    default = _get(cfg, section, 'backend', field)
    needed = list(workflow.roles)
    if paradigm is Paradigm.INTERACTIVE_DEBATE:
        needed += [debater_id(i) for i in range(1, workflow.n_debaters + 1) if debater_id(i) in bindings]
        if aggregator_mode is AggregatorMode.DETERMINISTIC_MAJORITY and 'aggregator' not in bindings \
                and default is None:
            needed.remove('aggregator')

    resolved = {}
    for role in needed:
        backend_name = bindings.get(role, default)
        option = f'backend.{role}' if role in bindings else 'backend'
        if backend_name is None:
            raise ConfigError(f'{field}.{option}', f"no backend bound to role '{role}'")
        if backend_name not in backends:
            raise ConfigError(f'{field}.{option}', f"unknown '{backend_name}'")
        resolved[role] = backend_name
    for role in bindings:
        if role not in resolved:
            raise ConfigError(f'{field}.backend.{role}', f"'{role}' is not a role of {paradigm.value}")

    return Munch(config=workflow, bindings=resolved)


def _add_workflow_sections(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add workflow sections to RBCFG"""
    rbcfg.workflows = Munch()
    for name, section in _named_sections(cfg, 'workflow').items():
        rbcfg.workflows[name] = _build_workflow(name, cfg, section, rbcfg.backends)


def _add_dataset_sections(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add dataset sections to RBCFG"""
    rbcfg.datasets = Munch()
    for name, section in _named_sections(cfg, 'dataset').items():
        path = _resolve(rbcfg.base_dir, _get(cfg, section, 'path', f'datasets.{name}', required=True))
        if not path.is_file():
            raise ConfigError(f'datasets.{name}.path', f'no such file {path}')
        rbcfg.datasets[name] = path


def _add_roles_sections(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add role-isolation sections to RBCFG"""
    rbcfg.roles = Munch()
    for name, section in _named_sections(cfg, 'roles').items():
        field = f'roles.{name}'
        workflow_name = _get(cfg, section, 'workflow', field, required=True)
        if workflow_name not in rbcfg.workflows:
            raise ConfigError(f'{field}.workflow', f"unknown '{workflow_name}'")
        paradigm = rbcfg.workflows[workflow_name].config.paradigm
        if paradigm not in TARGET_ROLES:
            raise ConfigError(f'{field}.workflow', f"role isolation does not support '{paradigm.value}'")

        target_role = _get(cfg, section, 'target_role', field, TARGET_ROLES[paradigm])
        if target_role != TARGET_ROLES[paradigm]:
            raise ConfigError(f'{field}.target_role', f"'{target_role}' cannot be isolated in {paradigm.value}")

        reference = _get(cfg, section, 'reference', field, required=True)
        evaluated = [e.strip() for e in _get(cfg, section, 'evaluated', field, required=True).split(',') if e.strip()]
        for option, backend_name in [('reference', reference)] + [('evaluated', e) for e in evaluated]:
            if backend_name not in rbcfg.backends:
                raise ConfigError(f'{field}.{option}', f"unknown '{backend_name}'")

        benchmark = _get(cfg, section, 'benchmark', field, DEFAULT_BENCHMARKS[target_role])
        if benchmark not in rbcfg.datasets:
            raise ConfigError(f'{field}.benchmark', f"unknown dataset '{benchmark}'")

        rbcfg.roles[name] = Munch(
            workflow=workflow_name,
            target_role=target_role,
            reference=reference,
            evaluated=evaluated,
            benchmark=benchmark,
            cache_dir=_resolve(rbcfg.base_dir, _get(cfg, section, 'cache_dir', field,
                                                    str(Path(rbcfg.output_dir, 'role_cache')))),
        )


def _add_mime_section(rbcfg: Munch, cfg: RawConfigParser) -> None:
    """Add mime section to RBCFG"""
    rbcfg.mime = None
    if not cfg.has_section('mime'):
        return

    mime = Munch()
    for option in ('evaluated', 'criteria', 'judge'):
        backend_name = _get(cfg, 'mime', option, 'mime', rbcfg.judge if option == 'judge' else None,
                            required=option != 'judge')
        if backend_name not in rbcfg.backends:
            raise ConfigError(f'mime.{option}', f"unknown '{backend_name}'")
        mime[option] = backend_name

    items = _get(cfg, 'mime', 'items', 'mime')
    mime.items = _resolve(rbcfg.base_dir, items) if items else None
    try:
        mime.weights = DimensionWeights(
            fluency=_get_number(cfg, 'mime', 'w_fluency', 'mime', 4.0, kind=float),
            confusability=_get_number(cfg, 'mime', 'w_confusability', 'mime', 3.0, kind=float),
            third=_get_number(cfg, 'mime', 'w_third', 'mime', 3.0, kind=float),
        )
    except ValueError as e:
        raise ConfigError('mime.weights', str(e))
    mime.workers = _get_number(cfg, 'mime', 'workers', 'mime', 4, minimum=1)
    rbcfg.mime = mime


def load_config(path) -> Munch:
    """
    Read a run config into a Munch. Every reference is resolved eagerly;
    a problem raises ConfigError naming the offending field.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError('config', f'no such file {path}')

    cfg = RawConfigParser(strict=True)
    try:
        with open(path, encoding='utf-8') as fp:
            cfg.read_file(fp)
    except DuplicateSectionError as e:
        raise ConfigError(_field_of_section(e.section), f'duplicate definition (line {e.lineno})')
    except DuplicateOptionError as e:
        raise ConfigError(f'{_field_of_section(e.section)}.{e.option}', f'duplicate option (line {e.lineno})')
    except ParserError as e:
        raise ConfigError('config', str(e))

    for section in cfg.sections():
        if section not in ('run', 'mime') and not _SECTION_RE.match(section):
            raise ConfigError(section, 'unknown section')

    rbcfg = Munch(path=path.resolve(), base_dir=path.resolve().parent)
    _add_run_section(rbcfg, cfg)
    _add_backend_sections(rbcfg, cfg)
    _add_workflow_sections(rbcfg, cfg)
    _add_dataset_sections(rbcfg, cfg)
    _add_roles_sections(rbcfg, cfg)
    _add_mime_section(rbcfg, cfg)
    logger.debug(f'loaded {path}: {len(rbcfg.backends)} backends, {len(rbcfg.workflows)} workflows, '
                 f'{len(rbcfg.datasets)} datasets')
    return rbcfg


def workflow_backends(rbcfg: Munch, workflow_name: str) -> Dict[str, BackendHandle]:
    """Role (or debater-i) -> backend handle for a configured workflow."""
    if workflow_name not in rbcfg.workflows:
        raise ConfigError('workflow', f"unknown '{workflow_name}'")
    return {role: rbcfg.backends[name] for role, name in rbcfg.workflows[workflow_name].bindings.items()}
