import os

# Pin BLAS threading before numpy loads anywhere so numeric results are
# byte-reproducible across runs.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

_CRITERION_LINES = []


def record_criterion(num, ok, detail):
    """Queue a one-line verdict for the end-of-run summary and assert it."""
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    _CRITERION_LINES.append((num, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)
