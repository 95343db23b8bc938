import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    from hpss_uda import _kernels as K

    before = K.get_backend()
    K.set_backend(request.param)
    yield request.param
    K.set_backend(before)


def pytest_report_header(config):
    return f"HPSS_UDA_BACKEND={os.environ.get('HPSS_UDA_BACKEND', 'numba (default)')}"


def pytest_configure(config):
    config._acceptance = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
