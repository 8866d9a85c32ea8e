import dataclasses

import pytest

from recprefill.placement import ItemPlacer
from recprefill.semlib import build_library
from recprefill.workload import SynthConfig, synthesize_trace

SMALL = SynthConfig(n_items=2000, n_users=300, n_requests=400, n_clusters=40, vocab_size=500,
                    reviews_per_user=6)


@pytest.fixture(scope="session")
def small_world():
    catalog, corpus, trace, world = synthesize_trace(SMALL, 3, return_world=True)
    return catalog, corpus, trace, world


@pytest.fixture(scope="session")
def small_plan(small_world):
    catalog, corpus, trace, _ = small_world
    return ItemPlacer(k=8).fit(corpus, catalog=catalog, trace=trace).plan_


@pytest.fixture(scope="session")
def small_library(small_world):
    _, corpus, _, _ = small_world
    return build_library(corpus, 100_000, base_position=SMALL.instruction_tokens)


@pytest.fixture(scope="session")
def default_world():
    catalog, corpus, trace = synthesize_trace(SynthConfig(), 7)
    return catalog, corpus, trace


@pytest.fixture(scope="session")
def clustered_world():
    catalog, corpus, trace = synthesize_trace(dataclasses.replace(SynthConfig(), secondary_share=0.0), 7)
    return catalog, corpus, trace


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
