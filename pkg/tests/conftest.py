import numpy as np
import pytest

from msra.config import SystemConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def small_wb(**kw) -> SystemConfig:
    base = dict(M=8, N_s=32, N_T=32, N_p=32, N_zc=61, N_sc_p=61, tau=2, upsilon=4, N_c=8, N_sc_d=32,
                mode="WB", n_active=3, snr_db=20.0, stop_rule="projected", xi_scale=2.5)
    base.update(kw)
    return SystemConfig(**base)


def small_nb(**kw) -> SystemConfig:
    base = dict(M=8, N_s=32, N_T=32, N_p=32, N_zc=31, N_sc_p=32, tau=1, upsilon=4, N_c=8, N_sc_d=16,
                mode="NB", n_active=3, snr_db=20.0, single_stage=True, stop_rule="projected")
    base.update(kw)
    return SystemConfig(**base)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
