import pytest

from infogeo.config import TrainConfig
from infogeo.synthgen import SceneSpec, generate_dataset, load_dataset


def small_config(**kw) -> TrainConfig:
    """A model small enough to train in well under a second on the 32x32 views."""
    base = dict(n_slots=3, r=1, iters=1, slot_dim=8, channels=8, decoder_hidden=8, patch=8,
                d_depth=4, n_rows=2, batch_size=4, epochs=2, train_variants=2)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(SceneSpec(), 16, 5, root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return load_dataset(small_dataset_dir)
