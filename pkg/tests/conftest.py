import numpy as np
import pytest

from branching_clt import ModelSpec, OUParams

OU = OUParams(1.0, 1.0, 1)


@pytest.fixture(scope="session")
def ou():
    return OU


@pytest.fixture(scope="session")
def small_model():
    # alpha = 0.6, A = 1.6: lambda_1 = -0.6, lambda_2 = 0.4
    return ModelSpec(OU, 1.0, [0.2, 0.0, 0.8])


@pytest.fixture(scope="session")
def yule():
    # pure birth at rate 2: lambda_1 = -2 = 2 lambda_2
    return ModelSpec(OU, 2.0, [0.0, 0.0, 1.0])


@pytest.fixture(scope="session")
def binary4():
    # pure birth at rate 4: lambda_1 = -4, lambda_2 = -3, lambda_3 = -2
    return ModelSpec(OU, 4.0, [0.0, 0.0, 1.0])


def se_mean(x):
    x = np.asarray(x, dtype=float)
    return x.std(ddof=1) / np.sqrt(x.size)


_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("summary", "")
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _ACCEPTANCE:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")
