from pathlib import Path

import pytest
from munch import Munch

from reasonbench.functional.config import load_config
from reasonbench.functional.judging import Sandbox, SandboxLimits
from reasonbench.tests import logger


@pytest.fixture(scope="session", autouse=True)
def setup_and_teardown_package_level(rbcfg_global_unique: Munch) -> None:
    """
    This function will be ran only once.
    """
    logger.info(" Setup package --- started ")
    logger.info(f" config {rbcfg_global_unique.path}: {sorted(rbcfg_global_unique.workflows)}")
    logger.info(" Setup package --- ended ")

    yield

    logger.info(" Teardown package --- done ")


@pytest.fixture
def rbcfg(pytestconfig, tmp_path) -> Munch:
    """
    A fresh copy of the run config (fresh scripted ledgers) writing below tmp_path.
    """
    cfg = load_config(pytestconfig.getoption('--rbcfg'))
    cfg.output_dir = Path(tmp_path, 'runs')
    for section in cfg.roles.values():
        section.cache_dir = Path(tmp_path, 'runs', 'role_cache')
    return cfg


@pytest.fixture(scope="session")
def sandbox() -> Sandbox:
    return Sandbox(SandboxLimits(wall_time=10.0, memory_mb=512), max_workers=2)
