"""
Network inputs from a scene and a force: ray-cast RGB (+ optional inverse
depth), the Gaussian bounding-box mask, and the colour-wheel force image.

Tensors are channels-first (C, H, W) with values in [0, 1]. Pixel (row j,
column i) samples the camera ray through continuous image point (u=i, v=j).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.ndimage import gaussian_filter

from simulation import geometry
from simulation.quantize import VelocitySequence
from simulation.scene import (
    CATEGORY_PRIORS,
    BandConfig,
    ForceApplication,
    ProjectionError,
    SceneSpec,
    project,
)
from simulation.settings import env_bool

logger = logging.getLogger(__name__)

FLOOR_COLOR = np.array([0.55, 0.50, 0.45])
WALL_COLOR = np.array([0.85, 0.83, 0.78])
SKY_COLOR = np.array([0.60, 0.75, 0.90])
LIGHT_DIR = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.3
MASK_TRUNCATE = 8.0


class EncodingError(ValueError):
    """Inputs cannot be encoded (mask or impact point outside the image)."""


@dataclass(frozen=True)
class EncodeOptions:
    with_depth: bool = False
    mask_sigma: float = 5.0
    force_sigma: float = 5.0
    f_max: float = field(default_factory=lambda: BandConfig().f_max)
    # distance (m) that maps to inverse depth 1.0
    depth_scale: float = 0.5

    @classmethod
    def from_env(cls, **overrides) -> "EncodeOptions":
        values = dict(with_depth=env_bool("DEPTH", False))
        values.update(overrides)
        return cls(**values)

    @property
    def channels(self) -> int:
        return 5 if self.with_depth else 4

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EncodedSample:
    rgbm: np.ndarray  # (4 or 5, H, W): R, G, B, mask[, depth]
    force_image: np.ndarray  # (3, H, W)
    label: VelocitySequence | None
    meta: dict = field(default_factory=dict)


def pixel_rays(scene: SceneSpec) -> np.ndarray:
    """Unit world-frame ray directions, shape (H*W, 3), row-major over pixels."""
    cam = scene.camera
    right, up, forward = cam.basis()
    cu, cv = cam.principal_point
    jj, ii = np.meshgrid(np.arange(cam.image_height), np.arange(cam.image_width), indexing="ij")
    x = (ii.ravel() - cu) / cam.focal_px
    y = -(jj.ravel() - cv) / cam.focal_px
    dirs = x[:, None] * right + y[:, None] * up + forward
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _shade(color: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lambert = np.maximum(normals @ LIGHT_DIR, 0.0)
    return color * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]


def render_scene(scene: SceneSpec, with_depth: bool = False, depth_scale: float = 0.5) -> np.ndarray:
    """Ray-cast boxes, floor and walls; returns (3 or 4, H, W)."""
    cam = scene.camera
    eye = cam.eye.array()
    dirs = pixel_rays(scene)
    n = len(dirs)

    t_best = np.full(n, np.inf)
    rgb = np.tile(SKY_COLOR, (n, 1))

    def take(t: np.ndarray, colors: np.ndarray) -> None:
        closer = t < t_best
        t_best[closer] = t[closer]
        rgb[closer] = colors[closer]

    t_floor = geometry.ray_plane(eye, dirs, geometry.UP, scene.floor_height)
    take(t_floor, _shade(FLOOR_COLOR, np.tile(geometry.UP, (n, 1))))

    for wall in scene.walls:
        normal = wall.normal.array()
        t = geometry.ray_plane(eye, dirs, normal, wall.offset)
        with np.errstate(invalid="ignore"):
            hit = eye + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        lateral = hit @ wall.tangent
        lo, hi = wall.lateral
        inside = (
            (lateral >= lo) & (lateral <= hi)
            & (hit[:, 2] >= scene.floor_height) & (hit[:, 2] <= scene.floor_height + wall.height)
        )
        t = np.where(inside, t, np.inf)
        take(t, _shade(WALL_COLOR, np.tile(normal, (n, 1))))

    for body in scene.bodies:
        t, normals = geometry.ray_box(eye, dirs, body.center, body.half, body.yaw)
        color = np.array(CATEGORY_PRIORS[body.category].color)
        take(t, _shade(color, normals))

    channels = [rgb.T.reshape(3, cam.image_height, cam.image_width)]
    if with_depth:
        with np.errstate(divide="ignore"):
            inv = np.where(np.isfinite(t_best), np.clip(depth_scale / t_best, 0.0, 1.0), 0.0)
        channels.append(inv.reshape(1, cam.image_height, cam.image_width))
    return np.clip(np.concatenate(channels, axis=0), 0.0, 1.0)


def make_mask(bbox: tuple[float, float, float, float], width: int, height: int, sigma: float) -> np.ndarray:
    """
    Binary bounding-box image blurred by an isotropic Gaussian, peak-normalised.

    bbox is (u_min, v_min, u_max, v_max) in continuous pixel coordinates;
    pixels whose centres fall inside are set.
    """
    u0, v0, u1, v1 = bbox
    cols = np.arange(width)
    rows = np.arange(height)
    in_cols = (cols >= u0) & (cols <= u1)
    in_rows = (rows >= v0) & (rows <= v1)
    if not in_cols.any() or not in_rows.any():
        raise EncodingError(f"bounding box {bbox} does not intersect a {width}x{height} image")
    binary = np.outer(in_rows, in_cols).astype(float)
    blurred = gaussian_filter(binary, sigma=sigma, mode="nearest", truncate=MASK_TRUNCATE)
    return (blurred / blurred.max())[None, :, :]


def wheel_color(azimuth: float, magnitude: float, f_max: float) -> np.ndarray:
    hue = (azimuth / (2.0 * np.pi)) % 1.0
    saturation = min(magnitude / f_max, 1.0)
    return hsv_to_rgb(np.array([hue, saturation, 1.0]))


def make_force_image(force: ForceApplication, width: int, height: int, sigma: float, f_max: float) -> np.ndarray:
    u, v = force.impact_point_2d
    if not (0.0 <= u <= width - 1 and 0.0 <= v <= height - 1):
        raise EncodingError(f"impact point ({u:.2f}, {v:.2f}) lies outside the image")
    color = wheel_color(force.azimuth, force.magnitude, f_max)
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    falloff = np.exp(-((ii - u) ** 2 + (jj - v) ** 2) / (2.0 * sigma**2))
    return color[:, None, None] * falloff[None, :, :]


def target_bbox(scene: SceneSpec, body_id: int) -> tuple[float, float, float, float]:
    body = scene.body(body_id)
    corners = geometry.box_corners(body.center, body.half, body.yaw)
    try:
        uv = np.array([project(scene.camera, c) for c in corners])
    except ProjectionError as e:
        raise EncodingError(f"body {body_id} is partly behind the camera") from e
    return float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max())


def encode_sample(
    scene: SceneSpec,
    force: ForceApplication,
    label: VelocitySequence | None = None,
    options: EncodeOptions | None = None,
) -> EncodedSample:
    options = options or EncodeOptions()
    cam = scene.camera
    image = render_scene(scene, with_depth=options.with_depth, depth_scale=options.depth_scale)
    mask = make_mask(target_bbox(scene, force.body_id), cam.image_width, cam.image_height, options.mask_sigma)
    channels = [image[:3], mask]
    if options.with_depth:
        channels.append(image[3:])
    force_image = make_force_image(force, cam.image_width, cam.image_height, options.force_sigma, options.f_max)
    return EncodedSample(
        rgbm=np.concatenate(channels, axis=0),
        force_image=force_image,
        label=label,
        meta={"scene_seed": scene.seed, "body_id": force.body_id, "force": list(force.force)},
    )
