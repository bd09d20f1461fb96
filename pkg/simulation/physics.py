"""
Translation-only rigid-box simulator.

Boxes keep their yaw. Each macro-step of dt seconds is split into substeps of
semi-implicit Euler: gravity, contact detection, a sequential-impulse velocity
solve (restitution + Coulomb friction), position update, then positional
projection out of any remaining penetration.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from simulation import geometry
from simulation.scene import ForceApplication, SceneSpec, Vec3
from simulation.settings import env_float, env_int

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    substeps: int = 10
    gravity: float = 9.81
    friction_mu: float = 0.5
    restitution: float = 0.2
    # approach speeds below this do not bounce
    bounce_threshold: float = 0.5
    stop_speed: float = 0.05
    max_macro_steps: int = 32
    sample_stride: int = 6
    contact_margin: float = 1e-3
    velocity_iterations: int = 8
    position_iterations: int = 4
    position_slop: float = 1e-4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        if not 0.0 <= self.restitution < 1.0:
            raise ValueError(f"restitution must be in [0, 1), got {self.restitution}")
        if self.max_macro_steps < 0 or self.sample_stride < 1:
            raise ValueError("max_macro_steps must be >= 0 and sample_stride >= 1")

    @classmethod
    def from_env(cls, **overrides) -> "SimConfig":
        values = dict(
            dt=env_float("SIM_DT", cls.dt),
            substeps=env_int("SIM_SUBSTEPS", cls.substeps),
            friction_mu=env_float("FRICTION", cls.friction_mu),
            restitution=env_float("RESTITUTION", cls.restitution),
            stop_speed=env_float("STOP_SPEED", cls.stop_speed),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class BodyState:
    position: Vec3
    velocity: Vec3

    @property
    def speed(self) -> float:
        return self.velocity.norm()


@dataclass(frozen=True)
class SimTrace:
    target_id: int
    states: list[BodyState]
    stable_step: int | None
    converged: bool
    final_positions: tuple[Vec3, ...] = field(default=())


@dataclass
class _Contact:
    a: int
    b: int  # -1 for the floor and walls
    normal: np.ndarray  # pushes a away from b
    gap: float
    target_vn: float = 0.0
    jn: float = 0.0
    jt: np.ndarray = field(default_factory=lambda: np.zeros(3))


def is_stable(state: BodyState, cfg: SimConfig) -> bool:
    return state.speed < cfg.stop_speed


def mechanical_energy(state: BodyState, cfg: SimConfig, floor_height: float, mass: float = 1.0) -> float:
    """Kinetic plus gravitational potential energy relative to the floor."""
    return 0.5 * mass * state.speed**2 + mass * cfg.gravity * (state.position.z - floor_height)


class _World:
    def __init__(self, scene: SceneSpec, target: int, cfg: SimConfig):
        self.cfg = cfg
        self.floor = scene.floor_height
        self.walls = [
            (w.normal.array(), w.offset, w.tangent, w.lateral, w.height) for w in scene.walls
        ]
        self.pos = np.array([b.center for b in scene.bodies], dtype=float).reshape(-1, 3)
        self.vel = np.zeros_like(self.pos)
        self.half = np.array([b.half for b in scene.bodies], dtype=float).reshape(-1, 3)
        self.yaw = [b.yaw for b in scene.bodies]
        self.inv_mass = np.array([0.0 if b.is_static else 1.0 / b.mass for b in scene.bodies])
        self.radius = np.linalg.norm(self.half, axis=1)
        self.awake = np.zeros(len(scene.bodies), dtype=bool)
        self.awake[target] = True

    def _effective_inv_mass(self, i: int) -> float:
        return self.inv_mass[i] if (i >= 0 and self.awake[i]) else 0.0

    def _contacts(self, margin: float) -> list[_Contact]:
        contacts = []
        n = len(self.pos)
        up = geometry.UP
        for i in np.flatnonzero(self.awake):
            c, h, yaw = self.pos[i], self.half[i], self.yaw[i]
            gap = (c[2] - h[2]) - self.floor
            if gap <= margin:
                contacts.append(_Contact(int(i), -1, up, gap))
            for normal, offset, tangent, (lo, hi), height in self.walls:
                if c[2] - h[2] >= self.floor + height:
                    continue
                r_t = geometry.support_radius(h, yaw, tangent)
                lateral = tangent @ c
                if lateral + r_t < lo or lateral - r_t > hi:
                    continue
                gap = -geometry.box_plane_penetration(c, h, yaw, normal, offset)
                if gap <= margin:
                    contacts.append(_Contact(int(i), -1, normal, gap))

        for i in range(n):
            for j in range(i + 1, n):
                if not (self.awake[i] or self.awake[j]):
                    continue
                if self.inv_mass[i] == 0.0 and self.inv_mass[j] == 0.0:
                    continue
                d = self.pos[j] - self.pos[i]
                if d @ d > (self.radius[i] + self.radius[j] + margin) ** 2:
                    continue
                depth, normal = geometry.box_overlap(
                    self.pos[i], self.half[i], self.yaw[i],
                    self.pos[j], self.half[j], self.yaw[j],
                )
                if -depth <= margin:
                    # normal from box_overlap points i -> j; store it as pushing j away from i
                    contacts.append(_Contact(j, i, normal, -depth))
        return contacts

    def _wake(self, contacts: list[_Contact]) -> None:
        for c in contacts:
            for body in (c.a, c.b):
                if body >= 0 and self.inv_mass[body] > 0.0 and not self.awake[body]:
                    self.awake[body] = True
                    logger.debug("body %d woken by contact", body)

    def _relative_velocity(self, c: _Contact) -> np.ndarray:
        v = self.vel[c.a].copy()
        if c.b >= 0:
            v -= self.vel[c.b]
        return v

    def _solve_velocities(self, contacts: list[_Contact]) -> None:
        cfg = self.cfg
        for c in contacts:
            vn0 = self._relative_velocity(c) @ c.normal
            c.target_vn = -cfg.restitution * vn0 if vn0 < -cfg.bounce_threshold else 0.0

        for _ in range(cfg.velocity_iterations):
            for c in contacts:
                ia, ib = self._effective_inv_mass(c.a), self._effective_inv_mass(c.b)
                k = ia + ib
                if k == 0.0:
                    continue
                vn = self._relative_velocity(c) @ c.normal
                jn = max(c.jn + (c.target_vn - vn) / k, 0.0)
                dj = jn - c.jn
                c.jn = jn
                self._apply(c, dj * c.normal, ia, ib)

                vrel = self._relative_velocity(c)
                vt = vrel - (vrel @ c.normal) * c.normal
                jt = c.jt - vt / k
                limit = cfg.friction_mu * c.jn
                norm = math.sqrt(jt @ jt)
                if norm > limit:
                    jt *= limit / norm
                self._apply(c, jt - c.jt, ia, ib)
                c.jt = jt

    def _apply(self, c: _Contact, impulse: np.ndarray, ia: float, ib: float) -> None:
        self.vel[c.a] += ia * impulse
        if c.b >= 0:
            self.vel[c.b] -= ib * impulse

    def _project_positions(self) -> None:
        cfg = self.cfg
        for _ in range(cfg.position_iterations):
            moved = False
            for c in self._contacts(0.0):
                depth = -c.gap - cfg.position_slop
                if depth <= 0.0:
                    continue
                ia, ib = self._effective_inv_mass(c.a), self._effective_inv_mass(c.b)
                k = ia + ib
                if k == 0.0:
                    continue
                self.pos[c.a] += (ia / k) * depth * c.normal
                if c.b >= 0:
                    self.pos[c.b] -= (ib / k) * depth * c.normal
                moved = True
            if not moved:
                break

    def substep(self, h: float) -> None:
        cfg = self.cfg
        self.vel[self.awake & (self.inv_mass > 0.0), 2] -= cfg.gravity * h
        contacts = self._contacts(cfg.contact_margin)
        self._wake(contacts)
        self._solve_velocities(contacts)
        movers = self.awake & (self.inv_mass > 0.0)
        self.pos[movers] += self.vel[movers] * h
        self._project_positions()

    def state(self, i: int) -> BodyState:
        return BodyState(position=Vec3.of(self.pos[i]), velocity=Vec3.of(self.vel[i]))


def simulate(scene: SceneSpec, force: ForceApplication, cfg: SimConfig | None = None) -> SimTrace:
    """
    Apply force·dt as an impulse to the target and integrate until it settles.

    states[k] is the target after macro-step k. The run stops at the first
    stable macro-step or after max_macro_steps.
    """
    cfg = cfg or SimConfig()
    target = scene.body_index(force.body_id)
    body = scene.bodies[target]
    if body.is_static:
        state = BodyState(position=body.position, velocity=Vec3(0.0, 0.0, 0.0))
        return SimTrace(
            target_id=force.body_id,
            states=[state],
            stable_step=0,
            converged=True,
            final_positions=tuple(b.position for b in scene.bodies),
        )

    world = _World(scene, target, cfg)
    world.vel[target] += force.force.array() * cfg.dt / body.mass
    h = cfg.dt / cfg.substeps

    states: list[BodyState] = []
    stable_step = None
    for k in range(cfg.max_macro_steps + 1):
        for _ in range(cfg.substeps):
            world.substep(h)
        state = world.state(target)
        states.append(state)
        if not np.all(np.isfinite(world.pos)):
            logger.warning("non-finite state in scene %d at macro-step %d", scene.seed, k)
            break
        if is_stable(state, cfg):
            stable_step = k
            break

    converged = stable_step is not None
    if not converged:
        logger.debug("scene %d body %d did not settle", scene.seed, force.body_id)
    return SimTrace(
        target_id=force.body_id,
        states=states,
        stable_step=stable_step,
        converged=converged,
        final_positions=tuple(Vec3.of(p) for p in world.pos),
    )


def penetration_depth(scene: SceneSpec, body_id: int, position: Vec3) -> float:
    """Deepest penetration of a body at the given position into the floor or walls."""
    body = scene.body(body_id)
    c, h = position.array(), body.half
    worst = scene.floor_height - (c[2] - h[2])
    for wall in scene.walls:
        r_t = geometry.support_radius(h, body.yaw, wall.tangent)
        lateral = wall.tangent @ c
        lo, hi = wall.lateral
        if lateral + r_t < lo or lateral - r_t > hi:
            continue
        if c[2] - h[2] >= scene.floor_height + wall.height:
            continue
        worst = max(
            worst,
            geometry.box_plane_penetration(c, h, body.yaw, wall.normal.array(), wall.offset),
        )
    return max(worst, 0.0)
