import os
from datetime import datetime
from pathlib import Path
from typing import Any

import pytest
import pytz
from munch import Munch
from py.xml import html

from reasonbench.functional.config import load_config
from reasonbench.functional.errors import ConfigError

# -------------------------------------------- DO NOT MODIFY ------------------------------------------------ #
CONFTEST_PATH = Path(os.path.abspath(__file__)).parent  # will return abs path of conftest.py
CFG_PATH = Path(CONFTEST_PATH, 'reasonbench.conf')
# -------------------------------------------- DO NOT MODIFY ------------------------------------------------ #


@pytest.fixture(scope="session")
def rbcfg_global_unique(pytestconfig: Any) -> Munch:
    """
        Read reasonbench.conf, every backend in it is constructed once per session.
        fixture rbcfg_global_unique is global unique in the package, do not redefine.
    """
    cfg_path = pytestconfig.getoption('--rbcfg')
    if not Path(cfg_path).is_file():
        raise RuntimeError(
            """
            To run tests, please confirm that reasonbench.conf was provided.\n
            You can use --rbcfg to configure it, or you can put it into the reasonbench directory.
            """
        )
    try:
        return load_config(cfg_path)
    except ConfigError as e:
        raise RuntimeError(f'{cfg_path}: {e}')


def pytest_addoption(parser: Any) -> None:
    group = parser.getgroup("reasonbench", "ReasonBench")
    group.addoption(
        "--rbcfg",
        default=str(CFG_PATH),
        help="reasonbench.conf path, defaults to reasonbench/reasonbench.conf.",
    )


# -------------------------------------------- Enhancing report start -------------------------- #
REPORT_TITLE = "ReasonBench Test Report"


def pytest_html_report_title(report):
    """ Called before adding the title to the report """
    report.title = REPORT_TITLE


def pytest_html_results_summary(prefix, summary, postfix):
    """ Called before adding the summary section to the report """
    prefix.extend([html.p(f"Config: {CFG_PATH}")])


def pytest_html_results_table_header(cells):
    """ Called after building results table header. """
    cells.insert(2, html.th('TestCase Description'))
    cells.insert(1, html.th('Start Time', class_='sortable time', col='time'))
    cells.pop()


def pytest_html_results_table_row(report, cells):
    """ Called after building results table row. """
    cells.insert(2, html.td(report.description))
    cells.insert(1, html.td(datetime.now(pytz.utc).strftime('%Y-%m-%d %H:%M:%S'), class_='col-time'))
    cells.pop()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    function = getattr(item, 'function', None)
    report.description = (function.__doc__ or '').strip() if function else ''  # case docs
