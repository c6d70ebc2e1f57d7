import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ftir_carenet.spectra import SynthConfig, synth_dataset

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# desk scale: 64 biofingerprint channels, raw axis trimmed at 2000 cm-1
DESK = dict(bio_points=64, raw_hi=2000.0)


@pytest.fixture(scope="session")
def desk_dataset():
    return synth_dataset(SynthConfig(n_samples=3, tissue_fraction=0.75, **DESK), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
