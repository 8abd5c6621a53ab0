import contextlib
import time

import pytest


class _Criterion:
    def __init__(self, request):
        self.request = request

    @contextlib.contextmanager
    def __call__(self, number: int, title: str):
        notes = []
        t0 = time.perf_counter()
        ok = False
        try:
            yield notes
            ok = True
        finally:
            elapsed = time.perf_counter() - t0
            tag = "PASS" if ok else "FAIL"
            detail = "; ".join(notes)
            line = f"[{tag}] criterion {number:>2}: {title} ({elapsed:.1f}s){': ' + detail if detail else ''}"
            print(line)
            self.request.node.user_properties.append(("acceptance", (number, line)))


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    return _Criterion(request)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
