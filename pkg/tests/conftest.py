import numpy as np
import pytest
import torch

from dancediff.denoiser import Denoiser, preset
from dancediff.skeleton import MotionSequence, Skeleton, axis_angle_to_matrix, desk_skeleton, matrix_to_rot6d


def tiny_skeleton() -> Skeleton:
    # root with two leg joints; each leg joint doubles as heel and toe
    return Skeleton(("root", "l_leg", "r_leg"), (-1, 0, 0),
                    np.array([[0.0, 0.0, 0.0], [0.1, 0.0, -0.4], [-0.1, 0.0, -0.4]]),
                    (1, 2, 1, 2), {0, 1, 2})


def random_rot6d(rng, shape, scale=np.pi):
    aa = rng.uniform(-1, 1, shape + (3,)) * scale / np.sqrt(3)
    return matrix_to_rot6d(axis_angle_to_matrix(aa))


def random_motion(rng, F=12, J=9, fps=30.0, scale=1.0) -> MotionSequence:
    return MotionSequence(fps, rng.normal(0, 0.3, (F, 3)) + [0, 0, 0.9],
                          random_rot6d(rng, (F, J), scale), rng.integers(0, 2, (F, 4)).astype(float))


def tiny_model(dtype=torch.float64, seed=0, **overrides) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(preset("tiny", **overrides)).to(dtype).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    return desk_skeleton()


@pytest.fixture
def tiny_skel():
    return tiny_skeleton()
