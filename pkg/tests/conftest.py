import numpy as np
import pytest

from causal_recourse.scm import scm_from_json


def chain_doc(std=1.0):
    """X1 = U1, X2 = 0.5 * X1 + U2."""
    return {
        "name": "chain",
        "nodes": ["X1", "X2"],
        "edges": [["X1", "X2"]],
        "mechanisms": {
            "X1": {"type": "linear"},
            "X2": {"type": "linear", "coefficients": {"X1": 0.5}},
        },
        "noise": {"X1": {"dist": "normal", "std": std}, "X2": {"dist": "normal", "std": std}},
    }


def toy3_doc():
    """A -> B -> C with a non-linear middle mechanism and A -> C."""
    return {
        "name": "toy3",
        "nodes": ["A", "B", "C"],
        "edges": [["A", "B"], ["B", "C"], ["A", "C"]],
        "mechanisms": {
            "A": {"type": "linear"},
            "B": {"type": "logistic", "scale": 2.0, "coefficients": {"A": 1.5}},
            "C": {"type": "linear", "intercept": 0.3, "coefficients": {"A": -0.4, "B": 0.8}},
        },
        "noise": {n: {"dist": "normal", "std": 1.0} for n in "ABC"},
    }


@pytest.fixture
def chain():
    return scm_from_json(chain_doc())


@pytest.fixture
def toy3():
    return scm_from_json(toy3_doc())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------ acceptance summary lines

ACCEPTANCE_LINES: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, ok: bool, detail: str):
    """Store one checked part of an acceptance criterion for the summary."""
    ACCEPTANCE_LINES.setdefault(number, []).append((bool(ok), detail))
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        parts = ACCEPTANCE_LINES[n]
        ok = all(p for p, _ in parts)
        detail = "; ".join(("" if p else "[failed] ") + d for p, d in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
