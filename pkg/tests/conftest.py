import tempfile
from collections.abc import Generator
from pathlib import Path

import attrs
import pytest

from dscml_lab.config import EvalConfig, ExperimentConfig, PseudoLabelConfig
from dscml_lab.dataset import Dataset, generate_dataset
from dscml_lab.verify import tiny_config as miniature_config

TINY_TOML = """\
variant = "dscml+cmal"

[data]
height = 12
width = 16
num_points = 24
num_classes = 3
source_train = 2
target_train = 2
target_val = 1
target_test = 1

[model]
feature_dim = 4
patch_size = 3
hidden_2d = [4]
hidden_3d = [6]
disc_hidden = [5]

[optim]
max_iters = 4
batch_size = 2

[pl]
iterations = 2

[eval]
every = 2
log_every = 1
"""


@pytest.fixture(scope="session")
def tiny_config() -> ExperimentConfig:
    """A miniature dscml+cmal experiment: 12x16 images, 24 points, 3 classes, 4 iterations.

    Evaluates every 2 iterations and logs every iteration; the same values as TINY_TOML.
    """
    return attrs.evolve(
        miniature_config(),
        pl=PseudoLabelConfig(iterations=2),
        eval=EvalConfig(every=2, log_every=1),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config: ExperimentConfig) -> Dataset:
    """Generate the miniature dataset once per session.

    Tests that read sealed labels must use `fresh_dataset` instead, since the
    vault counts reads.
    """
    return generate_dataset(tiny_config.data)


@pytest.fixture
def fresh_dataset(tiny_config: ExperimentConfig) -> Dataset:
    """A miniature dataset with an untouched label vault."""
    return generate_dataset(tiny_config.data)


@pytest.fixture
def temp_dir() -> Generator[Path]:
    """Create a temporary directory for run outputs."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def tiny_toml(temp_dir: Path) -> Path:
    """Write the miniature configuration as a TOML file."""
    path = temp_dir / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path
