import pytest
import torch

from wmhseg.augment import SynthConfig, synth_generate


@pytest.fixture(scope="session", autouse=True)
def single_threaded_torch():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """12 synthetic 32px slices, single rater; shared across tests."""
    root = tmp_path_factory.mktemp("desk_data")
    config = SynthConfig(
        n_patients=3,
        slices_per_patient=4,
        image_size=32,
        lesion_count_range=(1, 3),
        lesion_radius_range=(2.0, 5.0),
        seed=3,
    )
    return synth_generate(config, root)
