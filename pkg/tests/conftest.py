import pathlib

import pytest

from quadstack.model import reference_model

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def model():
    return reference_model()


@pytest.fixture(scope="session")
def data_dir():
    return DATA
