from __future__ import annotations

import numpy as np
import pytest

from trafficbilevel.network import parse_tntp


def tntp_network(n_nodes, links):
    """TNTP link text; ``links`` holds (tail, head, capacity, fftt, b)."""
    lines = [f"<NUMBER OF NODES> {n_nodes}", f"<NUMBER OF LINKS> {len(links)}", "<END OF METADATA>"]
    for tail, head, cap, fftt, b in links:
        lines.append(f"{tail} {head} {cap} {fftt} {fftt} {b} 4 0 0 1 ;")
    return "\n".join(lines) + "\n"


def tntp_trips(demand):
    """TNTP trips text from a dict ``{(o, d): flow}``."""
    lines = ["<NUMBER OF ZONES> 0", "<END OF METADATA>"]
    origins = sorted({o for o, _ in demand})
    for o in origins:
        lines.append(f"Origin {o}")
        lines.append(" ".join(f"{d} : {q};" for (oo, d), q in sorted(demand.items()) if oo == o))
    return "\n".join(lines) + "\n"


DIAMOND_LINKS = [(1, 2, 1.0, 1.0, 0.15), (2, 4, 1.0, 2.0, 0.15), (1, 3, 1.0, 2.0, 0.15), (3, 4, 1.0, 3.0, 0.15)]


@pytest.fixture
def diamond():
    """Two two-link routes from node 1 to node 4 with free-flow sums 3 and 5."""
    return parse_tntp(tntp_network(4, DIAMOND_LINKS), tntp_trips({(1, 4): 10.0}), "link,d,u\n")


def central_diff(fun, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def rel_err(a, b) -> float:
    """Norm-relative error of ``a`` against the reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Record one acceptance line and fail the calling test if the criterion does not hold."""
    ACCEPTANCE_LINES.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, f"criterion {number} failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
