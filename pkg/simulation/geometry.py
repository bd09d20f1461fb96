"""
Box geometry shared by scene generation, the simulator and the renderer.

Boxes are axis-aligned in their own frame and rotated about the vertical
axis by a yaw angle. All functions take plain numpy arrays.
"""

import numpy as np

UP = np.array([0.0, 0.0, 1.0])
RAY_EPS = 1e-9


def yaw_axes(yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """World-frame unit vectors of a box's local x and y axes."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([c, s, 0.0]), np.array([-s, c, 0.0])


def to_local(points: np.ndarray, center: np.ndarray, yaw: float) -> np.ndarray:
    ux, uy = yaw_axes(yaw)
    d = np.asarray(points, dtype=float) - center
    return np.stack([d @ ux, d @ uy, d[..., 2]], axis=-1)


def to_world(local: np.ndarray, center: np.ndarray, yaw: float) -> np.ndarray:
    ux, uy = yaw_axes(yaw)
    local = np.asarray(local, dtype=float)
    return (
        center
        + local[..., 0:1] * ux
        + local[..., 1:2] * uy
        + local[..., 2:3] * UP
    )


def box_corners(center: np.ndarray, half: np.ndarray, yaw: float) -> np.ndarray:
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=float,
    )
    return to_world(signs * half, center, yaw)


def support_radius(half: np.ndarray, yaw: float, axis: np.ndarray) -> float:
    """Half-width of the box's projection onto a unit axis."""
    ux, uy = yaw_axes(yaw)
    return (
        half[0] * abs(axis @ ux) + half[1] * abs(axis @ uy) + half[2] * abs(axis[2])
    )


def box_overlap(
    center_a: np.ndarray,
    half_a: np.ndarray,
    yaw_a: float,
    center_b: np.ndarray,
    half_b: np.ndarray,
    yaw_b: float,
) -> tuple[float, np.ndarray]:
    """
    Separating-axis test for two yawed boxes.

    Returns (depth, normal): depth is the smallest overlap over the candidate
    axes (positive means interpenetration, negative is the separation gap),
    normal points from box A towards box B along that axis.
    """
    ax_a, ay_a = yaw_axes(yaw_a)
    ax_b, ay_b = yaw_axes(yaw_b)
    delta = center_b - center_a
    best_depth = np.inf
    best_axis = UP
    for axis in (UP, ax_a, ay_a, ax_b, ay_b):
        depth = (
            support_radius(half_a, yaw_a, axis)
            + support_radius(half_b, yaw_b, axis)
            - abs(delta @ axis)
        )
        if depth < best_depth:
            best_depth = depth
            best_axis = axis if delta @ axis >= 0.0 else -axis
    return float(best_depth), best_axis


def box_plane_penetration(
    center: np.ndarray, half: np.ndarray, yaw: float, normal: np.ndarray, offset: float
) -> float:
    """Depth of the box behind the plane n·p = offset (positive = penetrating)."""
    return float(offset - (normal @ center - support_radius(half, yaw, normal)))


def ray_box(
    origin: np.ndarray,
    dirs: np.ndarray,
    center: np.ndarray,
    half: np.ndarray,
    yaw: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Slab intersection of rays (shared origin, dirs shaped (M, 3)) with a box.

    Returns hit distances (inf on miss) and world-frame face normals.
    """
    ux, uy = yaw_axes(yaw)
    basis = np.stack([ux, uy, UP])  # rows = local axes
    o = basis @ (origin - center)
    d = dirs @ basis.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    parallel = d == 0.0
    inside = np.abs(o) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2)
    t_far = np.maximum(t1, t2)
    t_enter = t_near.max(axis=1)
    t_exit = t_far.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > RAY_EPS)
    t = np.where(hit, t_enter, np.inf)

    face_axis = t_near.argmax(axis=1)
    local_normal = np.zeros_like(d)
    rows = np.arange(len(d))
    local_normal[rows, face_axis] = -np.sign(d[rows, face_axis])
    return t, local_normal @ basis


def ray_plane(
    origin: np.ndarray, dirs: np.ndarray, normal: np.ndarray, offset: float
) -> np.ndarray:
    """Distances along rays to the plane n·p = offset, hit from the front only."""
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - normal @ origin) / denom
    return np.where((denom < 0.0) & (t > RAY_EPS), t, np.inf)
