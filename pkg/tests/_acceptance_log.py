"""Shared scoreboard for the acceptance suite.

Each acceptance test records PASS/FAIL here; the conftest terminal-summary
hook prints one line per criterion after the run.
"""

CRITERIA = {
    1: "sequential golden heap and rule trace",
    2: "parallel golden heap with indirection",
    3: "schedule determinism (1000 seeds x 10+ programs)",
    4: "bounded-exhaustive interleavings, well-formed at every state",
    5: "incremental end tracking matches fresh end-witness scans",
    6: "fragmentation accounting (extra regions == continuation allocations)",
    7: "directional layout slowdown (fragmented vs packed, 2^20 leaves)",
    8: "pointer-elimination arithmetic for 4-leaf packed blocks",
    9: "rejection corpus (aliasing / double write / field order)",
}

RESULTS: dict[int, tuple[str, str]] = {}


def record(num: int, status: str, note: str = "") -> None:
    RESULTS[num] = (status, note)
