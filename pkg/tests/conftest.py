import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chainlens.backend import OracleBackend, Session

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_session(backend=None, truths=None, **kwargs) -> Session:
    kwargs.setdefault("sleep", lambda s: None)
    return Session(backend if backend is not None else OracleBackend(truths or {}), **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_tone(h=12, w=16, split=None):
    """Image whose left part is red and right part blue."""
    split = w // 2 if split is None else split
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:, :split] = (220, 30, 30)
    img[:, split:] = (30, 30, 220)
    return img


# -- acceptance report ---------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion the test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (report.when == "call" or report.failed):
        return
    number, text = mark.args
    entry = _CRITERIA.setdefault(number, {"text": text, "ok": True, "measured": []})
    entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        entry["measured"] += [value for key, value in item.user_properties if key == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        measured = f"  [{'; '.join(entry['measured'])}]" if entry["measured"] else ""
        terminalreporter.write_line(f"{'PASS' if entry['ok'] else 'FAIL'}  {number:>2}  {entry['text']}{measured}")
