import argparse
import logging
import os
import sys
from pathlib import Path

from reasonbench import __version__
from reasonbench.functional import analytics
from reasonbench.functional.config import load_config
from reasonbench.functional.errors import ConfigError, ReasonBenchError
from reasonbench.functional.judging import Sandbox, SandboxLimits
from reasonbench.functional.runner import rejudge_run, report_runs, run_benchmark, run_mime, run_roles

BASE_PATH = Path(os.path.abspath(__file__)).parent
CFG_PATH = Path(BASE_PATH, 'reasonbench.conf')

LOG_FORMAT = '%(asctime)s (%(filename)-16s:%(lineno)-3s) %(levelname)-8s %(message)s'

EXIT_OK = 0
EXIT_INFRASTRUCTURE = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)

_REPORT_FORMATS = {'table': analytics.ReportFormat.TABLE_TEXT, 'data': analytics.ReportFormat.DELIMITED_DATA}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='reasonbench', description='Run and score LLM reasoning workflows.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=str(CFG_PATH), help='run config (ini), defaults to the shipped one')
    common.add_argument('--sandbox-timeout', type=float, help='wall-time limit per sandboxed test run, seconds')
    common.add_argument('--sandbox-memory', type=int, help='memory limit per sandboxed test run, MB')

    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help='run a workflow over a dataset and score it')
    run.add_argument('--workflow', required=True)
    run.add_argument('--dataset', required=True)

    judge = sub.add_parser('judge', parents=[common], help='re-score a finished run')
    judge.add_argument('--rejudge', required=True, metavar='DIR', help='run directory holding run.json')

    roles = sub.add_parser('roles', parents=[common], help='compare models in one isolated workflow role')
    roles.add_argument('--spec', required=True, help='name of a [roles <name>] section')

    mime = sub.add_parser('mime', parents=[common], help='score option generation on main-idea items')
    mime.add_argument('--items', help='item file, defaults to [mime] items')

    report = sub.add_parser('report', help='cost/accuracy report over finished runs')
    report.add_argument('--runs', required=True, metavar='DIR')
    report.add_argument('--format', choices=sorted(_REPORT_FORMATS), default='table')
    report.add_argument('--out', help='output directory, defaults to DIR/report')
    return parser


def _sandbox(args, rbcfg) -> Sandbox:
    limits = SandboxLimits(
        wall_time=args.sandbox_timeout or rbcfg.sandbox_timeout,
        memory_mb=args.sandbox_memory or rbcfg.sandbox_memory,
    )
    return Sandbox(limits, rbcfg.sandbox_workers)


def _dispatch(args) -> int:
    if args.command == 'report':
        for path in report_runs(args.runs, _REPORT_FORMATS[args.format], args.out):
            print(path)
        return EXIT_OK

    rbcfg = load_config(args.config)
    sandbox = _sandbox(args, rbcfg)

    if args.command == 'run':
        summary = run_benchmark(rbcfg, args.workflow, args.dataset, sandbox)
        print(f'{summary.run_dir}: {summary.successes}/{summary.n_tasks} correct, '
              f'{summary.executed} executed, {summary.skipped} resumed, {summary.failed} failed')
        for error in summary.errors:
            print(f'error: {error}', file=sys.stderr)
        return EXIT_INFRASTRUCTURE if summary.exit_status else EXIT_OK

    if args.command == 'judge':
        summary = rejudge_run(rbcfg, args.rejudge, sandbox)
        print(f'{summary.run_dir}: {summary.successes}/{summary.executed} correct after re-judging')
        return EXIT_INFRASTRUCTURE if summary.exit_status else EXIT_OK

    if args.command == 'roles':
        for row in run_roles(rbcfg, args.spec, sandbox):
            print(f'{row.model:<24} {row.target_role:<12} {row.benchmark:<16} {row.success_rate:.4f} '
                  f'({row.successes}/{row.n_tasks}, {row.n_skipped} skipped)')
        return EXIT_OK

    report = run_mime(rbcfg, args.items)
    print(f'avg {report.avg:.2f}  corr {report.corr:.2f}  wrong {report.wrong:.2f}  '
          f'({report.n_scored} scored, {report.n_unscorable} unscorable)')
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return _dispatch(args)
    except ConfigError as e:
        logger.error(f'config error: {e}')
        return EXIT_CONFIG
    except (ReasonBenchError, OSError, ValueError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_INFRASTRUCTURE


if __name__ == '__main__':
    sys.exit(main())
