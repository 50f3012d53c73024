import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
RESULTS: dict = {}
CRITERIA = {
    1: "numeric core gradients",
    2: "KL suite",
    3: "DPO closed forms",
    4: "pruning arithmetic",
    5: "beam-search oracle",
    6: "selector properties",
    7: "preference construction",
    8: "training sanity",
    9: "ablation ordering",
    10: "pruning-rate sweep",
    11: "FLOPs accounting",
    12: "determinism and persistence",
}


@pytest.fixture
def record():
    def _record(n: int, passed: bool, detail: str = "") -> None:
        RESULTS[n] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in RESULTS:
            ok, detail = RESULTS[n]
            line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}"
        else:
            line, detail = f"criterion {n:2d} NOT RUN  {name}", ""
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
