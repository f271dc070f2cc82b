import pytest

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(cid: int, ok: bool, detail: str) -> bool:
        prev = ACCEPTANCE.get(cid)
        if prev is not None:  # criteria checked by several tests combine
            ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
        ACCEPTANCE[cid] = (ok, detail)
        print(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record
