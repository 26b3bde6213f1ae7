import numpy as np
import pytest

from depthmvd.gauss_ot import Gaussian3
from depthmvd.geometry import CameraIntrinsics, Pose


def rand_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rand_pose(rng, trans_scale=2.0):
    return Pose(rand_rotation(rng), rng.normal(scale=trans_scale, size=3))


def rand_spd(rng, dim=3, ev_lo=0.05, ev_hi=0.5):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    ev = rng.uniform(ev_lo, ev_hi, dim)
    return (q * ev) @ q.T


def rand_gaussian3(rng, mean_scale=1.0, ev_lo=0.05, ev_hi=0.5):
    return Gaussian3(
        rng.normal(scale=mean_scale, size=3),
        rand_spd(rng, 3, ev_lo, ev_hi),
        weight=float(rng.uniform(0.5, 5.0)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)


@pytest.fixture
def intrinsics224():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=112.0, cy=112.0, width=224, height=224)
