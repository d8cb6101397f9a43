import numpy as np
import pytest

from rmaff_ps.core import LightSet, Rng, degenerate_normals
from rmaff_ps.dataset_io import save_dataset
from rmaff_ps.render import Bump, Material, SceneSpec, render_scene, ring_lights
from rmaff_ps.settings import tiny_config


@pytest.fixture(autouse=True)
def reset_degenerate_counter():
    degenerate_normals.reset()
    yield
    degenerate_normals.reset()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return Rng(1234)


def lambert_spec(size: int = 16, channels: int = 3, **overrides) -> SceneSpec:
    """One soft bump, uniform diffuse material, no noise, no cast shadows"""
    fields = dict(
        width=size,
        height=size,
        channels=channels,
        bumps=[Bump(center=(size / 2 - 0.5, size / 2 - 0.5), amplitude=size / 6, radii=(size / 4, size / 3), rotation=20.0)],
        base=Material(albedo=[0.7, 0.5, 0.3][:channels] if channels == 3 else [0.6]),
        noise_sigma=0.0,
        cast_shadows=False,
        seed=7,
    )
    fields.update(overrides)
    return SceneSpec(**fields)


@pytest.fixture
def lambert_scene():
    """(stack, gt) of a noiseless Lambertian scene under eight ring lights"""
    return render_scene(lambert_spec(), ring_lights(8, 30.0))


@pytest.fixture
def four_lights():
    dirs = np.array([[0.0, 0.0, 1.0], [0.5, 0.0, 0.8660254037844386], [0.0, 0.5, 0.8660254037844386], [-0.3, -0.4, np.sqrt(0.75)]])
    return LightSet.uniform(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))


@pytest.fixture
def dataset_dir(tmp_path, lambert_scene):
    stack, gt = lambert_scene
    return save_dataset(tmp_path / "scene", stack, gt)
