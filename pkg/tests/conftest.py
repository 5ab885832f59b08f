import numpy as np
import pytest

from memnav.config import HyperParams
from memnav.simulator import bundled_scene_path, load_bundled_scene
from memnav.questions import load_questions


@pytest.fixture
def hp():
    return HyperParams.desk_profile()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_sofas():
    return load_bundled_scene("two_sofas")


@pytest.fixture(scope="session")
def box_room():
    return load_bundled_scene("box_room")


def questions_for(name):
    path = bundled_scene_path(name).parent / f"{name}.questions.yaml"
    return load_questions(path)


@pytest.fixture(scope="session")
def two_sofas_questions():
    return questions_for("two_sofas")


def unit_vectors(rng, n, dim):
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = v.astype(np.float32)
    out /= np.linalg.norm(out, axis=1, keepdims=True).astype(np.float32)
    return out
