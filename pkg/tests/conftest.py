import pytest

CRITERIA = {
    1: "memory footprint",
    2: "operator oracle equivalence",
    3: "gradient correctness",
    4: "augmentation soundness",
    5: "toy training efficacy",
    6: "kernel interpretability",
    7: "separable speed advantage",
    8: "protocol and metrics",
    9: "reproducibility",
}

_results = {}


@pytest.fixture
def acceptance():
    """``acceptance(id, ok, detail)`` records one criterion verdict for the summary."""

    def record(cid, ok, detail):
        prev = _results.get(cid)
        # a criterion split over several tests passes only if every part does
        if prev is not None:
            ok, detail = prev[0] and ok, prev[1] + "; " + detail
        _results[cid] = (bool(ok), detail)
        print(f"criterion {cid} {'PASS' if ok else 'FAIL'}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for cid, name in CRITERIA.items():
        if cid in _results:
            ok, detail = _results[cid]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {cid}. {name}: not evaluated")
