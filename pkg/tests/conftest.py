"""Shared hooks: the acceptance suite records one verdict per criterion here."""

RESULTS: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    RESULTS.setdefault(criterion, []).append((bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(RESULTS):
        parts = RESULTS[n]
        ok = all(p[0] for p in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: " + "; ".join(p[1] for p in parts))
