import numpy as np
import pytest
import torch

from aligncr.data.synth import SynthConfig, make_sample


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def small_sample():
    """A 60x60 optical / 18x18 SAR quartet."""
    return make_sample(5, 0, 2, "fixture_000", SynthConfig(size=60, misalign_max=3.0))


@pytest.fixture
def tiny_dataset(tmp_path_factory):
    from aligncr.data.synth import synth_generate

    root = tmp_path_factory.mktemp("tiny")
    synth_generate(SynthConfig(n_train=8, n_test=2), 11, root, force=True)
    return root


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            num = int(rep.nodeid.split("test_criterion_")[1][:2])
            detail = dict(rep.user_properties).get("detail", "")
            rows.append((num, "PASS" if outcome == "passed" else "FAIL", detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
