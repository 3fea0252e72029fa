import numpy as np
import pytest
import torch

torch.set_num_threads(1)  # fixed reduction order keeps runs bit-reproducible


@pytest.fixture(scope="session")
def tiny_spec():
    from splitmask.shapesynth import DatasetSpec

    return DatasetSpec(samples_per_split={"train": 24, "val": 10}, seed=11)


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    from splitmask.shapesynth import generate_split

    return generate_split(tiny_spec, "train")


@pytest.fixture(scope="session")
def tiny_val(tiny_spec):
    from splitmask.shapesynth import generate_split

    return generate_split(tiny_spec, "val")


@pytest.fixture(scope="session")
def small_model():
    from splitmask.pipeline import PipelineConfig, PipelineModel

    return PipelineModel(PipelineConfig(), seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def study():
    """The full before/after experiment (trains 3 models); shared by the
    acceptance criteria and the trained-model behavior tests."""
    from study import run_study

    return run_study()
