import re

import numpy as np
import pytest

from pidm_warmstart.pidm import PidmArch
from pidm_warmstart.warmstart import WarmstartArch

SMALL_PIDM = PidmArch(embed=8, encoder_hidden=(8,), backbone_hidden=(16, 8), decoder_hidden=(8,))
SMALL_WARM = WarmstartArch(intention_hidden=(8,), synthesizer_hidden=(12, 8), vanilla_hidden=(16, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; printed at the end of the session
ACCEPTANCE_RESULTS = {}
N_CRITERIA = 11


@pytest.fixture
def record():
    def rec(n, ok, detail=""):
        ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
        return ok
    return rec


def _criterion(nodeid):
    m = re.search(r"test_c(\d+)_", nodeid)
    return int(m.group(1)) if m else None


def pytest_terminal_summary(terminalreporter):
    stats = terminalreporter.stats
    deselected = {_criterion(getattr(i, "nodeid", "")) for i in stats.get("deselected", [])}
    ran = {_criterion(r.nodeid) for key in ("passed", "failed", "error") for r in stats.get(key, [])}
    ran.discard(None)
    if not ran and not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE_RESULTS:
            ok, detail = ACCEPTANCE_RESULTS[n]
            line = f"{'PASS' if ok else 'FAIL'}  {detail}"
        elif n in deselected or n not in ran:
            line = "NOT RUN (deselected)"
        else:
            line = "FAIL  errored before recording a result"
        terminalreporter.write_line(f"criterion {n:2d}: {line}")
