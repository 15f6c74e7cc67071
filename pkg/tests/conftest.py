import pytest

from kgattack.kge import ARCHITECTURES, default_config, train
from kgattack.synthetic import generate


@pytest.fixture(scope="session")
def synth_kg():
    return generate()


@pytest.fixture(scope="session")
def clean_models(synth_kg):
    return {arch: train(synth_kg, default_config(arch)) for arch in ARCHITECTURES}
