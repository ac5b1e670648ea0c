import numpy as np
import pytest

from elmpc.info_metrics import SampleTriple, TripleHistogram


def np_entropy(columns) -> float:
    """Entropy in bits of the joint of the given integer columns, via np.unique."""
    stacked = np.column_stack(columns)
    _, counts = np.unique(stacked, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def np_metrics(s, a, sn) -> dict:
    """Reference metrics computed straight from sample arrays."""
    h_s, h_a, h_sn = np_entropy([s]), np_entropy([a]), np_entropy([sn])
    h_sa, h_asn, h_ssn = np_entropy([s, a]), np_entropy([a, sn]), np_entropy([s, sn])
    h_sasn = np_entropy([s, a, sn])
    return {
        "psi": h_sa + h_sn - h_sasn,
        "asymmetry": (h_a + h_sn - h_asn) - (h_s + h_a - h_sa),
        "memory": h_s + h_sn - h_ssn,
        "h_sa": h_sa,
        "h_s_next": h_sn,
    }


def fill(hist: TripleHistogram, s, a, sn) -> TripleHistogram:
    for i, (x, y, z) in enumerate(zip(s, a, sn)):
        hist.push(SampleTriple(int(x), int(y), int(z), i))
    return hist


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
