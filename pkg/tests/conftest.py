import numpy as np
import pytest
import torch

from sketchreid.data import SyntheticSpec, generate_synthetic, load_splits

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 meta-train + 7 episode identities (2 held out), 32 x 16 images."""
    spec = SyntheticSpec(n_identities=19, images_per_identity_per_modality=4, height=32, width=16,
                         seed=3, n_episode_identities=7, n_eval_identities=2)
    root = tmp_path_factory.mktemp("small_corpus")
    manifest = generate_synthetic(spec, root)
    return manifest


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    return load_splits(small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
