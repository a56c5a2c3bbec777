import numpy as np
import pytest

from resnetcrowd import autograd as ag
from resnetcrowd.data import SynthSpec, prepare_sample, synth_generate
from resnetcrowd.model import ResnetCrowdConfig

TINY = ResnetCrowdConfig(input_width=32, input_height=18)


@pytest.fixture(autouse=True)
def _clear_faults():
    yield
    ag.FAULTS.clear()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Ten small synthetic scenes prepared at 32x18, with every density level present twice."""
    root = tmp_path_factory.mktemp("tiny")
    manifest = synth_generate(SynthSpec(num_images=10, seed=3, width=160, height=90), root)
    samples = [prepare_sample(s, root, TINY.input_resolution) for s in manifest.samples]
    return manifest, samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Command-line overrides that shrink every stage of the pipeline to a few seconds.
TINY_FLAGS = [
    "--synth-images", "10", "--synth-width", "160", "--synth-height", "90",
    "--input-width", "32", "--input-height", "18",
    "--epochs", "2", "--batch-size", "5", "--folds", "2", "--checkpoint-every", "0", "-q",
]


def run_cli(*argv):
    from resnetcrowd.cli import main

    # -q is a top-level flag; keep it ahead of the subcommand
    args = [str(a) for a in argv]
    return main(["-q", *[a for a in args if a != "-q"]])
