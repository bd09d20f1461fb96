"""
Scene, camera and force types plus procedural scene generation.

A scene is a rectangular room (floor plane, 2-4 walls) holding yawed boxes,
seen by a pinhole camera standing in one corner. Generation and force
sampling are pure functions of their seeds.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from simulation import geometry
from simulation.settings import env_float, env_int

logger = logging.getLogger(__name__)

CONTACT_TOLERANCE = 1e-6


class GenerationError(ValueError):
    """Placement failed after the configured number of attempts."""


class SamplingError(ValueError):
    """No camera-visible surface point could be found on the target body."""


class ProjectionError(ValueError):
    """Point lies on or behind the camera plane."""


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    @classmethod
    def of(cls, values) -> "Vec3":
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class CategoryPrior:
    half_extents: tuple[float, float, float]
    color: tuple[float, float, float]
    is_static: bool = False
    can_support: bool = False
    stackable: bool = False


# Per-category size priors (meters) and base colours for the renderer.
CATEGORY_PRIORS: dict[str, CategoryPrior] = {
    "chair": CategoryPrior((0.25, 0.25, 0.45), (0.80, 0.30, 0.20)),
    "table": CategoryPrior((0.60, 0.40, 0.375), (0.55, 0.35, 0.15), can_support=True),
    "desk": CategoryPrior((0.60, 0.35, 0.375), (0.70, 0.60, 0.25), can_support=True),
    "pillow": CategoryPrior((0.25, 0.18, 0.07), (0.90, 0.80, 0.55), stackable=True),
    "sofa": CategoryPrior((0.90, 0.45, 0.40), (0.30, 0.45, 0.75)),
    "bed": CategoryPrior((1.00, 0.80, 0.30), (0.60, 0.50, 0.80), can_support=True),
    "box": CategoryPrior((0.20, 0.20, 0.20), (0.75, 0.55, 0.35), stackable=True),
    "garbage_bin": CategoryPrior((0.15, 0.15, 0.25), (0.25, 0.60, 0.30)),
    "shelf": CategoryPrior((0.40, 0.20, 0.60), (0.45, 0.25, 0.10), can_support=True),
    "lamp": CategoryPrior((0.12, 0.12, 0.30), (0.95, 0.90, 0.20), stackable=True),
    "cabinet": CategoryPrior(
        (0.45, 0.30, 0.45), (0.50, 0.50, 0.55), is_static=True, can_support=True
    ),
    "toilet": CategoryPrior((0.20, 0.30, 0.40), (0.85, 0.85, 0.95), is_static=True),
    "fridge": CategoryPrior((0.40, 0.35, 0.90), (0.70, 0.80, 0.85), is_static=True),
}

CATEGORIES = tuple(CATEGORY_PRIORS)
MOVABLE_CATEGORIES = tuple(c for c, p in CATEGORY_PRIORS.items() if not p.is_static)
STATIC_CATEGORIES = tuple(c for c, p in CATEGORY_PRIORS.items() if p.is_static)


class MagnitudeBand(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


@dataclass(frozen=True)
class BandConfig:
    small: tuple[float, float] = (2.0, 6.0)
    medium: tuple[float, float] = (6.0, 14.0)
    large: tuple[float, float] = (14.0, 30.0)

    def range(self, band: MagnitudeBand) -> tuple[float, float]:
        return getattr(self, MagnitudeBand(band).value)

    @property
    def f_max(self) -> float:
        return self.large[1]

    def to_dict(self) -> dict:
        return {"small": list(self.small), "medium": list(self.medium), "large": list(self.large)}


@dataclass(frozen=True)
class SceneGenConfig:
    room_size_range: tuple[float, float] = (3.5, 6.0)
    wall_height: float = 2.5
    body_count_range: tuple[int, int] = (2, 6)
    static_probability: float = 0.15
    stack_probability: float = 0.35
    camera_height: float = 1.6
    camera_inset: float = 0.1
    target_height: float = 0.4
    fov_degrees: float = 70.0
    image_width: int = 64
    image_height: int = 64
    floor_height: float = 0.0
    size_jitter: float = 0.15
    camera_clearance: float = 0.3
    near_plane: float = 0.1
    max_placement_attempts: int = 1000

    @classmethod
    def from_env(cls, **overrides) -> "SceneGenConfig":
        size = env_int("IMAGE_SIZE", cls.image_width)
        values = dict(
            image_width=size,
            image_height=size,
            static_probability=env_float("STATIC_PROBABILITY", cls.static_probability),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class RigidBodySpec:
    id: int
    category: str
    half_extents: Vec3
    position: Vec3
    yaw: float
    is_static: bool
    mass: float = 1.0

    @property
    def center(self) -> np.ndarray:
        return self.position.array()

    @property
    def half(self) -> np.ndarray:
        return self.half_extents.array()

    @property
    def top(self) -> float:
        return self.position.z + self.half_extents.z

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "half_extents": list(self.half_extents),
            "position": list(self.position),
            "yaw": self.yaw,
            "is_static": self.is_static,
            "mass": self.mass,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidBodySpec":
        return cls(
            id=int(d["id"]),
            category=d["category"],
            half_extents=Vec3.of(d["half_extents"]),
            position=Vec3.of(d["position"]),
            yaw=float(d["yaw"]),
            is_static=bool(d["is_static"]),
            mass=float(d["mass"]),
        )


@dataclass(frozen=True)
class Wall:
    """Vertical half-plane n·p >= offset, bounded laterally and in height."""

    normal: Vec3
    offset: float
    lateral: tuple[float, float]
    height: float

    @property
    def tangent(self) -> np.ndarray:
        return np.array([-self.normal.y, self.normal.x, 0.0])

    def to_dict(self) -> dict:
        return {
            "normal": list(self.normal),
            "offset": self.offset,
            "lateral": list(self.lateral),
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Wall":
        return cls(
            normal=Vec3.of(d["normal"]),
            offset=float(d["offset"]),
            lateral=(float(d["lateral"][0]), float(d["lateral"][1])),
            height=float(d["height"]),
        )


@dataclass(frozen=True)
class Camera:
    eye: Vec3
    target: Vec3
    focal_px: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.eye == self.target:
            raise ValueError("camera eye and target coincide")
        if self.focal_px <= 0:
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the camera frame."""
        forward = self.target.array() - self.eye.array()
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, geometry.UP)
        if np.linalg.norm(right) < 1e-12:
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.image_width / 2.0, self.image_height / 2.0

    def to_dict(self) -> dict:
        return {
            "eye": list(self.eye),
            "target": list(self.target),
            "focal_px": self.focal_px,
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            eye=Vec3.of(d["eye"]),
            target=Vec3.of(d["target"]),
            focal_px=float(d["focal_px"]),
            image_width=int(d["image_width"]),
            image_height=int(d["image_height"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    bodies: tuple[RigidBodySpec, ...]
    floor_height: float
    walls: tuple[Wall, ...]
    camera: Camera
    seed: int
    room_size: tuple[float, float] = (0.0, 0.0)

    def body(self, body_id: int) -> RigidBodySpec:
        for b in self.bodies:
            if b.id == body_id:
                return b
        raise KeyError(f"no body with id {body_id}")

    def body_index(self, body_id: int) -> int:
        for i, b in enumerate(self.bodies):
            if b.id == body_id:
                return i
        raise KeyError(f"no body with id {body_id}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "floor_height": self.floor_height,
            "room_size": list(self.room_size),
            "camera": self.camera.to_dict(),
            "walls": [w.to_dict() for w in self.walls],
            "bodies": [b.to_dict() for b in self.bodies],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            bodies=tuple(RigidBodySpec.from_dict(b) for b in d["bodies"]),
            floor_height=float(d["floor_height"]),
            walls=tuple(Wall.from_dict(w) for w in d["walls"]),
            camera=Camera.from_dict(d["camera"]),
            seed=int(d["seed"]),
            room_size=(float(d["room_size"][0]), float(d["room_size"][1])),
        )


@dataclass(frozen=True)
class ForceApplication:
    body_id: int
    impact_point_3d: Vec3
    impact_point_2d: tuple[float, float]
    force: Vec3
    magnitude_band: MagnitudeBand = field(default=MagnitudeBand.MEDIUM)

    @property
    def magnitude(self) -> float:
        return self.force.norm()

    @property
    def azimuth(self) -> float:
        """World-frame direction of the horizontal force in [0, 2π)."""
        return math.atan2(self.force.y, self.force.x) % (2.0 * math.pi)

    def to_dict(self) -> dict:
        return {
            "body_id": self.body_id,
            "impact_point_3d": list(self.impact_point_3d),
            "impact_point_2d": list(self.impact_point_2d),
            "force": list(self.force),
            "magnitude_band": MagnitudeBand(self.magnitude_band).value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForceApplication":
        return cls(
            body_id=int(d["body_id"]),
            impact_point_3d=Vec3.of(d["impact_point_3d"]),
            impact_point_2d=(float(d["impact_point_2d"][0]), float(d["impact_point_2d"][1])),
            force=Vec3.of(d["force"]),
            magnitude_band=MagnitudeBand(d["magnitude_band"]),
        )


def project(camera: Camera, point) -> tuple[float, float]:
    """Pinhole projection to continuous pixel coordinates (u right, v down)."""
    right, up, forward = camera.basis()
    d = np.asarray(point, dtype=float) - camera.eye.array()
    depth = d @ forward
    if depth <= 0.0:
        raise ProjectionError(f"point {tuple(point)} is behind the camera")
    cu, cv = camera.principal_point
    u = cu + camera.focal_px * (d @ right) / depth
    v = cv - camera.focal_px * (d @ up) / depth
    return float(u), float(v)


def unproject(camera: Camera, u: float, v: float, depth: float) -> Vec3:
    """Point on the pixel's ray at the given camera-frame depth."""
    right, up, forward = camera.basis()
    cu, cv = camera.principal_point
    x = (u - cu) * depth / camera.focal_px
    y = -(v - cv) * depth / camera.focal_px
    return Vec3.of(camera.eye.array() + x * right + y * up + depth * forward)


def camera_depth(camera: Camera, point) -> float:
    _, _, forward = camera.basis()
    return float((np.asarray(point, dtype=float) - camera.eye.array()) @ forward)


def _make_walls(rng: np.random.Generator, lx: float, ly: float, config: SceneGenConfig):
    # (normal, offset, segment endpoints) for the four sides of the room
    sides = [
        ((1.0, 0.0, 0.0), 0.0, ((0.0, 0.0), (0.0, ly))),
        ((-1.0, 0.0, 0.0), -lx, ((lx, 0.0), (lx, ly))),
        ((0.0, 1.0, 0.0), 0.0, ((0.0, 0.0), (lx, 0.0))),
        ((0.0, -1.0, 0.0), -ly, ((0.0, ly), (lx, ly))),
    ]
    count = int(rng.integers(2, 5))
    chosen = sorted(int(i) for i in rng.choice(4, size=count, replace=False))
    walls = []
    for i in chosen:
        normal, offset, (p0, p1) = sides[i]
        tangent = np.array([-normal[1], normal[0]])
        a, b = float(np.dot(p0, tangent)), float(np.dot(p1, tangent))
        walls.append(
            Wall(
                normal=Vec3(*normal),
                offset=offset,
                lateral=(min(a, b), max(a, b)),
                height=config.wall_height,
            )
        )
    return tuple(walls)


def _make_camera(rng: np.random.Generator, lx: float, ly: float, config: SceneGenConfig) -> Camera:
    inset = config.camera_inset
    corners = [(inset, inset), (lx - inset, inset), (lx - inset, ly - inset), (inset, ly - inset)]
    cx, cy = corners[int(rng.integers(4))]
    focal = (config.image_width / 2.0) / math.tan(math.radians(config.fov_degrees) / 2.0)
    return Camera(
        eye=Vec3(cx, cy, config.floor_height + config.camera_height),
        target=Vec3(lx / 2.0, ly / 2.0, config.floor_height + config.target_height),
        focal_px=focal,
        image_width=config.image_width,
        image_height=config.image_height,
    )


def _fits(
    center: np.ndarray,
    half: np.ndarray,
    yaw: float,
    placed: list[RigidBodySpec],
    room: tuple[float, float],
    camera: Camera,
    config: SceneGenConfig,
) -> bool:
    corners = geometry.box_corners(center, half, yaw)
    if corners[:, 0].min() < 0.0 or corners[:, 0].max() > room[0]:
        return False
    if corners[:, 1].min() < 0.0 or corners[:, 1].max() > room[1]:
        return False

    _, _, forward = camera.basis()
    if ((corners - camera.eye.array()) @ forward).min() <= config.near_plane:
        return False
    eye_local = geometry.to_local(camera.eye.array(), center, yaw)
    gap = np.maximum(np.abs(eye_local[:2]) - half[:2], 0.0)
    if np.hypot(*gap) < config.camera_clearance:
        return False

    for other in placed:
        depth, _ = geometry.box_overlap(center, half, yaw, other.center, other.half, other.yaw)
        if depth > CONTACT_TOLERANCE:
            return False
    return True


def _place_body(
    rng: np.random.Generator,
    body_id: int,
    placed: list[RigidBodySpec],
    room: tuple[float, float],
    camera: Camera,
    config: SceneGenConfig,
) -> RigidBodySpec:
    is_static = bool(rng.random() < config.static_probability)
    pool = STATIC_CATEGORIES if is_static else MOVABLE_CATEGORIES
    category = pool[int(rng.integers(len(pool)))]
    prior = CATEGORY_PRIORS[category]
    jitter = config.size_jitter
    half = np.array(prior.half_extents) * rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    yaw = float(rng.uniform(0.0, 2.0 * math.pi))

    supports = []
    if prior.stackable:
        supports = [b for b in placed if CATEGORY_PRIORS[b.category].can_support]

    for _ in range(config.max_placement_attempts):
        if supports and rng.random() < config.stack_probability:
            support = supports[int(rng.integers(len(supports)))]
            offset = rng.uniform(-0.8, 0.8, size=2) * support.half[:2]
            xy = geometry.to_world([offset[0], offset[1], 0.0], support.center, support.yaw)
            center = np.array([xy[0], xy[1], support.top + half[2]])
        else:
            xy = rng.uniform((0.0, 0.0), room)
            center = np.array([xy[0], xy[1], config.floor_height + half[2]])
        if _fits(center, half, yaw, placed, room, camera, config):
            return RigidBodySpec(
                id=body_id,
                category=category,
                half_extents=Vec3.of(half),
                position=Vec3.of(center),
                yaw=yaw,
                is_static=is_static,
            )
    raise GenerationError(
        f"could not place body {body_id} ({category}) after "
        f"{config.max_placement_attempts} attempts"
    )


def generate_scene(seed: int, config: SceneGenConfig | None = None) -> SceneSpec:
    """Build a non-interpenetrating room scene; identical inputs give identical scenes."""
    config = config or SceneGenConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.room_size_range
    lx, ly = (float(v) for v in rng.uniform(lo, hi, size=2))
    walls = _make_walls(rng, lx, ly, config)
    camera = _make_camera(rng, lx, ly, config)

    n_lo, n_hi = config.body_count_range
    n_bodies = int(rng.integers(n_lo, n_hi + 1))
    bodies: list[RigidBodySpec] = []
    for body_id in range(n_bodies):
        bodies.append(_place_body(rng, body_id, bodies, (lx, ly), camera, config))

    logger.debug("scene seed=%d: %d bodies, %d walls", seed, len(bodies), len(walls))
    return SceneSpec(
        bodies=tuple(bodies),
        floor_height=config.floor_height,
        walls=walls,
        camera=camera,
        seed=int(seed),
        room_size=(lx, ly),
    )


# local face axis, sign; the bottom face never carries an impact point
_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0))


def _visible_faces(body: RigidBodySpec, camera: Camera) -> list[tuple[int, float, float]]:
    half = body.half
    eye_local = geometry.to_local(camera.eye.array(), body.center, body.yaw)
    faces = []
    for axis, sign in _FACES:
        # front-facing iff the eye lies outside the face's supporting plane
        if sign * eye_local[axis] > half[axis]:
            others = [a for a in range(3) if a != axis]
            area = 4.0 * half[others[0]] * half[others[1]]
            faces.append((axis, sign, area))
    return faces


def _occluded(scene: SceneSpec, body_id: int, point: np.ndarray) -> bool:
    eye = scene.camera.eye.array()
    ray = point - eye
    dist = float(np.linalg.norm(ray))
    direction = (ray / dist)[None, :]
    for other in scene.bodies:
        if other.id == body_id:
            continue
        t, _ = geometry.ray_box(eye, direction, other.center, other.half, other.yaw)
        if t[0] < dist - 1e-6:
            return True
    return False


def sample_force(
    scene: SceneSpec,
    body_id: int,
    rng_seed: int,
    bands: BandConfig | None = None,
    band: MagnitudeBand | None = None,
    azimuth: float | None = None,
    max_attempts: int = 200,
) -> ForceApplication:
    """
    Random horizontal force applied at a camera-visible surface point.

    band and azimuth may be pinned by the caller to re-apply the same
    direction with another magnitude.
    """
    bands = bands or BandConfig()
    try:
        body = scene.body(body_id)
    except KeyError as e:
        raise SamplingError(str(e)) from e

    rng = np.random.default_rng(rng_seed)
    drawn_band = list(MagnitudeBand)[int(rng.integers(3))]
    drawn_azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    band = MagnitudeBand(band) if band is not None else drawn_band
    azimuth = drawn_azimuth if azimuth is None else float(azimuth)
    lo, hi = bands.range(band)
    magnitude = float(rng.uniform(lo, hi))

    faces = _visible_faces(body, scene.camera)
    if not faces:
        raise SamplingError(f"body {body_id} shows no face to the camera")
    areas = np.array([f[2] for f in faces])
    half = body.half
    width, height = scene.camera.image_width, scene.camera.image_height

    for _ in range(max_attempts):
        axis, sign, _ = faces[int(rng.choice(len(faces), p=areas / areas.sum()))]
        local = rng.uniform(-half, half)
        local[axis] = sign * half[axis]
        point = geometry.to_world(local, body.center, body.yaw)
        try:
            u, v = project(scene.camera, point)
        except ProjectionError:
            continue
        if not (0.0 <= u <= width - 1 and 0.0 <= v <= height - 1):
            continue
        if _occluded(scene, body_id, point):
            continue
        force = Vec3(magnitude * math.cos(azimuth), magnitude * math.sin(azimuth), 0.0)
        return ForceApplication(
            body_id=body_id,
            impact_point_3d=Vec3.of(point),
            impact_point_2d=(u, v),
            force=force,
            magnitude_band=band,
        )
    raise SamplingError(f"no visible surface point on body {body_id} after {max_attempts} tries")
