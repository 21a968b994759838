"""Shared fixtures.

Every forward-backward table built anywhere in the suite is checked for
the normalization invariant: sum_j xi_t(j) must equal the evidence at all t
to 1e-9 relative. The check hooks the table class itself, so it covers
decoders reached through any import path.
"""

from dataclasses import dataclass

import numpy as np
import pytest

import semimarkov.decode as dec

NORMALIZATION_TOL = 1e-9

_SESSION = {"n": 0, "max": 0.0, "bad": []}
_CURRENT: list = []


@dataclass(frozen=True)
class _CheckedTables(dec.ForwardBackwardTables):
    def __post_init__(self):
        spread = self.normalization_spread()
        _CURRENT.append(spread)


@pytest.fixture(autouse=True)
def normalization_invariant(request, monkeypatch):
    monkeypatch.setattr(dec, "ForwardBackwardTables", _CheckedTables)
    _CURRENT.clear()
    yield
    spreads = list(_CURRENT)
    _SESSION["n"] += len(spreads)
    if spreads:
        worst = max(spreads)
        _SESSION["max"] = max(_SESSION["max"], worst)
        if worst > NORMALIZATION_TOL:
            _SESSION["bad"].append(request.node.nodeid)
            pytest.fail(f"normalization spread {worst:.3g} exceeds {NORMALIZATION_TOL:g}")


def normalization_session_stats() -> dict:
    return dict(_SESSION)


_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record one acceptance criterion: acceptance(n, ok, detail)."""

    def record(n: int, ok: bool, detail: str):
        _ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            ok, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}")
    s = _SESSION
    status = "PASS" if not s["bad"] else "FAIL"
    terminalreporter.write_line(
        f"[AC4 session-wide] {status}: {s['n']} forward-backward tables decoded, "
        f"max normalization spread {s['max']:.2e} (tol {NORMALIZATION_TOL:g})")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
