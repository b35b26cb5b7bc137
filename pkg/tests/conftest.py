from pathlib import Path

import pytest

from eproxy.arch import MINI_SPACE
from eproxy.bench import TabularBench
from eproxy.proxy import ProxyConfig, evaluate_many, proxy_task

DATA = Path(__file__).parent / "data"
BENCH_PATH = DATA / "mini_bench_s0.json"


@pytest.fixture(scope="session")
def bench() -> TabularBench:
    return TabularBench.load(BENCH_PATH)


class ScoreTables:
    """Eproxy scores over the whole mini space, memoised per config."""

    def __init__(self):
        self._cache = {}

    def get(self, cfg: ProxyConfig) -> dict[str, float]:
        key = cfg.to_json()
        if key not in self._cache:
            x, y = proxy_task(cfg, MINI_SPACE)
            res = evaluate_many(list(MINI_SPACE.enumerate()), cfg, x, y, MINI_SPACE)
            self._cache[key] = {r.arch: r.adjusted_score for r in res}
        return self._cache[key]


@pytest.fixture(scope="session")
def score_tables() -> ScoreTables:
    return ScoreTables()


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n}: FAIL (not run or errored)"))
