import pytest
import torch

_AC_RESULTS: dict[str, tuple[str, str]] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    # Bit-identical comparisons assume one fixed reduction order.
    torch.set_num_threads(1)
    yield


def pytest_runtest_logreport(report):
    cid = getattr(report, "ac_id", None)
    if cid is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        prev = _AC_RESULTS.get(cid, (None, ""))[0]
        outcome = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _AC_RESULTS[cid] = (outcome, report.ac_title)
    elif report.skipped and report.when == "setup":
        _AC_RESULTS[cid] = ("SKIP", report.ac_title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep = outcome.get_result()
        rep.ac_id, rep.ac_title = marker.args[0], marker.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_AC_RESULTS, key=lambda c: int(c[2:])):
        outcome, title = _AC_RESULTS[cid]
        terminalreporter.write_line(f"{cid:<5} {outcome:<5} {title}")
