import math

import numpy as np
import pytest

from plidarbox.boxes import Box3D
from plidarbox.camera import CameraIntrinsics
from plidarbox.synth import Scene, SceneObject


@pytest.fixture
def kitti_intr():
    return CameraIntrinsics(fx=721.5, fy=721.5, cx=621.0, cy=187.5)


@pytest.fixture
def simple_intr():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0)


def make_car_box(x=1.0, z=14.0, theta=0.5, h=1.4, w=1.6, l=4.0, ground_y=1.65):
    """A car-sized box resting on the ground plane."""
    return Box3D(x=x, y=ground_y - h / 2.0, z=z, h=h, w=w, l=l, theta=theta)


def single_box_scene(**kwargs):
    return Scene(objects=[SceneObject(make_car_box(**kwargs))])


def random_boxes(rng, n, z_range=(5.0, 40.0)):
    """Generic random boxes for IoU property tests."""
    boxes = []
    for _ in range(n):
        boxes.append(
            Box3D(
                x=rng.uniform(-10, 10),
                y=rng.uniform(-2, 2),
                z=rng.uniform(*z_range),
                h=rng.uniform(0.5, 2.5),
                w=rng.uniform(0.5, 2.5),
                l=rng.uniform(1.0, 5.0),
                theta=rng.uniform(-math.pi, math.pi),
            )
        )
    return boxes
