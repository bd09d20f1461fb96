"""Shared builders for hand-constructed scenes used across the test modules."""

import math

import pytest

from simulation.scene import (
    Camera,
    ForceApplication,
    MagnitudeBand,
    RigidBodySpec,
    SceneSpec,
    Vec3,
    Wall,
)


def _camera(size: int = 64) -> Camera:
    return Camera(
        eye=Vec3(0.1, 0.1, 1.6),
        target=Vec3(2.0, 2.0, 0.4),
        focal_px=(size / 2.0) / math.tan(math.radians(35.0)),
        image_width=size,
        image_height=size,
    )


@pytest.fixture
def make_body():
    def build(body_id, position, half=(0.2, 0.2, 0.2), category="box", yaw=0.0, is_static=False):
        return RigidBodySpec(
            id=body_id,
            category=category,
            half_extents=Vec3(*half),
            position=Vec3(*position),
            yaw=yaw,
            is_static=is_static,
        )

    return build


@pytest.fixture
def make_scene():
    def build(bodies, walls=(), camera=None, room=(4.0, 4.0), seed=0, size=64):
        return SceneSpec(
            bodies=tuple(bodies),
            floor_height=0.0,
            walls=tuple(walls),
            camera=camera or _camera(size),
            seed=seed,
            room_size=room,
        )

    return build


@pytest.fixture
def make_wall():
    def build(normal, offset, lateral=(-10.0, 10.0), height=2.5):
        return Wall(normal=Vec3(*normal), offset=offset, lateral=lateral, height=height)

    return build


@pytest.fixture
def make_force():
    def build(body_id, force, point=(0.0, 0.0, 0.0), pixel=(32.0, 32.0), band=MagnitudeBand.MEDIUM):
        return ForceApplication(
            body_id=body_id,
            impact_point_3d=Vec3(*point),
            impact_point_2d=pixel,
            force=Vec3(*force),
            magnitude_band=band,
        )

    return build
