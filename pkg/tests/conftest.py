"""Shared test plumbing: single-threaded numerics and the acceptance report."""
import os

# Pin the BLAS backends to one thread before numpy first loads.  The suite
# stays deterministic across machines and the wall-clock budgets asserted in
# test_acceptance.py are honest single-core numbers.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

_ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Remember a PASS/FAIL line and echo it immediately (visible with -s)."""
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    # The acceptance verdicts get their own section so they survive output
    # capture no matter how the run went.
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
