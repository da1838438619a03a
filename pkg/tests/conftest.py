import numpy as np
import pytest

from n2n import runtime

# keep runs reproducible and avoid oversubscription in CI containers
runtime.configure_torch_threads()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small shared corpus: 5 subjects at the minimum volume size."""
    from n2n import phantom

    root = tmp_path_factory.mktemp("corpus")
    return phantom.generate_corpus(seed=7, n_subjects=5, size=(16, 64, 64), out_dir=root)


@pytest.fixture(scope="session")
def tiny_slices(tmp_path_factory, tiny_corpus):
    from n2n import phantom

    out = tmp_path_factory.mktemp("slices")
    return phantom.slice_corpus(tiny_corpus, out, size=256)
