import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
if str(TESTS_DIR) not in sys.path:
    sys.path.insert(0, str(TESTS_DIR))

EXAMPLES = TESTS_DIR.parent / "examples"

GOOD_EXAMPLES = sorted(p.name for p in EXAMPLES.glob("*.lcp")
                       if not p.name.startswith("bad_"))
BAD_EXAMPLES = sorted(p.name for p in EXAMPLES.glob("bad_*.lcp"))


@pytest.fixture(scope="session")
def load_program():
    """Parse and typecheck an example by file name, with caching."""
    from locpar import syntax as S
    from locpar.typecheck import typecheck_program

    cache = {}

    def _load(name: str):
        if name not in cache:
            src = (EXAMPLES / name).read_text()
            cache[name] = typecheck_program(S.parse_program(src))
        return cache[name]

    return _load


@pytest.fixture(scope="session")
def canonical():
    """Flatten a run result to a schedule-independent comparison key."""
    from locpar import syntax as S
    from locpar import layout as L
    from locpar.cli import _main_tycon

    def _canon(tp, value, store):
        if isinstance(value, S.IntLit):
            return ("int", value.value)
        return ("tree", L.flatten_value(value.loc, _main_tycon(tp),
                                        store, tp.decls))

    return _canon


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from _acceptance_log import CRITERIA, RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        status, note = RESULTS.get(num, ("FAIL", "test did not run"))
        line = f"criterion {num}: {status} - {CRITERIA[num]}"
        if note:
            line += f" [{note}]"
        terminalreporter.write_line(line)
