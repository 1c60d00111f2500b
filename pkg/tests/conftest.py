import sys
from pathlib import Path

import pytest

from caad.data import SynthConfig, synth_tabular

sys.path.insert(0, str(Path(__file__).parent))

SMALL = dict(n_normal=600, n_anomaly=60, n_test_normal=200, n_test_known=100, n_test_novel=100, dim=8)
# compact normals far from every anomaly cluster: training has an easy, unambiguous target
SEPARATED = dict(n_normal=2000, n_anomaly=200, normal_offset=0.5, normal_scale=0.5,
                 anomaly_distance=8.0, anomaly_scale=1.0)
FAST_TRAIN = dict(stage1_epochs=4, stage2_epochs=4, stage3_epochs=2)


@pytest.fixture(scope="session")
def small_data():
    return synth_tabular(SynthConfig(**SMALL, seed=0))


@pytest.fixture(scope="session")
def separated_data():
    return synth_tabular(SynthConfig(**SEPARATED, seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
