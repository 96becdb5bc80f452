import time

import pytest

from triretrieval import cli
from triretrieval.config import load_config

DESK_CONFIG = "configs/desk.yaml"

_criteria: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or rep.failed):
        num, title = marker.args
        _criteria.append((str(num), title, "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status in sorted(_criteria, key=lambda c: int(c[0])):
        terminalreporter.write_line(f"[{status}] criterion {num}: {title}")


@pytest.fixture(scope="session")
def desk_config(pytestconfig):
    return load_config(pytestconfig.rootpath / DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_run(desk_config, tmp_path_factory):
    """One full S->I->T training run on the default synthetic dataset."""
    out = tmp_path_factory.mktemp("desk_run")
    start = time.perf_counter()
    model, reports = cli.cmd_train(desk_config, out)
    elapsed = time.perf_counter() - start
    cli.cmd_synth(desk_config, out / "manifest.jsonl")
    return {"out": out, "model": model, "reports": reports, "seconds": elapsed}
