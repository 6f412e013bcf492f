import numpy as np
import pytest

from matembed.synthdata import SynthConfig, generate
from matembed.trainer import apply_split, split_by_object

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SMALL = SynthConfig(
    n_materials=16, n_objects=24, parts_per_object=3, n_env=2, n_shapes=2,
    d_lat=6, d_in=8, seed=3, unseen_parts_per_object=1,
)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    generate(SMALL, out)
    return out


@pytest.fixture
def small_manifest(small_dataset_dir):
    from matembed.synthdata import load_manifest

    manifest = load_manifest(small_dataset_dir / "manifest.json")
    apply_split(manifest, split_by_object(manifest, 0.25, seed=0))
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
