"""Shared fixtures plus a terminal summary for the acceptance suite."""

import pytest

from fastcall.embedding import HashedNgramVectorizer
from fastcall.ner import EntityDictionary

_acceptance_results: dict[str, tuple[str, dict]] = {}


@pytest.fixture(scope="session")
def vectorizer():
    return HashedNgramVectorizer()


@pytest.fixture
def music_dictionary():
    return EntityDictionary(
        entries={
            "Jay Chou": "artist",
            "Fenghuang Legend": "artist",
            "Fragrance of Rice": "song",
            "Listen to Mom": "song",
            "jazz": "genre",
            "rock": "genre",
        },
        type_priority=("song", "artist", "genre", "movie"),
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and "test_acceptance" in item.nodeid:
        _acceptance_results[item.nodeid] = (report.outcome, dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid in sorted(_acceptance_results):
        outcome, props = _acceptance_results[nodeid]
        name = nodeid.split("::")[-1]
        status = "PASS" if outcome == "passed" else "FAIL"
        detail = props.get("detail")
        terminalreporter.write_line(f"{name}: {status}" + (f"  [{detail}]" if detail else ""))
