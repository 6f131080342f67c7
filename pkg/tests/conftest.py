import random

import pytest

from memfail.trace import MINUTE, CeEvent, CellAddress, DimmId, DimmMeta, ErrorBitmap, UeEvent


def random_events(rng: random.Random, n_dimms: int, n_events: int, span_min: int = 20_000,
                  ue_prob: float = 0.05, small_space: bool = True, dq_width: int = 4):
    """Random CE/UE mix over a few DIMMs; a small address space forces collisions."""
    dimms = [DimmId(f"s{i // 2}", 0, i % 2, 0) for i in range(n_dimms)]
    mask = (1 << dq_width) - 1
    events = []
    for _ in range(n_events):
        d = rng.choice(dimms)
        ts = rng.randrange(span_min) * MINUTE
        if rng.random() < ue_prob:
            events.append(UeEvent(ts, d))
            continue
        if small_space:
            cell = CellAddress(rng.randrange(2), rng.randrange(3), rng.randrange(2), rng.randrange(2),
                               rng.randrange(4), rng.randrange(4))
        else:
            cell = CellAddress(rng.randrange(2), rng.randrange(18), rng.randrange(4), rng.randrange(4),
                               rng.randrange(65536), rng.randrange(1024))
        value = 0
        while not value:
            for _ in range(rng.randint(1, 3)):
                value |= (rng.getrandbits(8) & mask) << (8 * rng.randrange(8))
        events.append(CeEvent(ts, d, cell, ErrorBitmap(value, dq_width), rng.choice((1, 1, 1, 2))))
    meta = [DimmMeta(d, "A", "x4" if dq_width == 4 else "x8", 2933, "1y", "purley") for d in dimms]
    return events, meta


@pytest.fixture
def rng():
    return random.Random(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
