import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance criterion outcome; the summary prints one line per criterion."""

    def record(number: int, title: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = ", ".join(k for k, v in checks.items() if not v)
        ACCEPTANCE[number] = (title, ok, detail + (f" | failed: {failed}" if failed else ""))
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        print("\n" + line)
        assert ok, line + f" | failed: {failed}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
                                    + (f" ({detail})" if detail else ""))
