import numpy as np
import pytest

from fdrl.config import TrainConfig
from fdrl.datasets import SynthSpec, generate_synthetic
from fdrl.model import FDRLModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return FDRLModel.init(d_in=6, d=4, classes=3, heads=2, seed=3)


@pytest.fixture
def small_config():
    return TrainConfig(d_in=6, d=4, classes=3, heads=2)


@pytest.fixture(scope="session")
def tiny_synth():
    """120 records, d_in=16: enough for smoke-level training runs."""
    spec = SynthSpec(samples=120, classes=3, d_in=16, shared_dim=4, private_dim_a=4, private_dim_t=4)
    return generate_synthetic(spec, seed=5)


# -- acceptance summary -----------------------------------------------------

_ACCEPTANCE = {}


def pytest_collection_modifyitems(items):
    for item in items:
        label = getattr(getattr(item, "function", None), "acceptance", None)
        if label:
            item.user_properties.append(("acceptance", label))


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("acceptance")
    if not label:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[label] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(_ACCEPTANCE.items()):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
