"""Deterministic 2-D rigid-body dynamics for three interaction domains.

Balls of fixed radius move inside a closed square box. Depending on the
domain they interact through pairwise Hooke springs (``springs``), elastic
contact impulses (``elastic``), or inelastic contact impulses with
per-object restitution (``inelastic``).

Unit conventions: lengths are in pixels and time is measured in frames
(one frame = one captured state at the nominal 120 fps sampling rate), so
velocities are px/frame and ``WorldConfig.dt`` defaults to 1.0. Every
operation is pure and consumes no randomness; identical inputs give
bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

__all__ = [
    "Domain",
    "Wall",
    "WorldConfig",
    "ObjectProperties",
    "Trajectory",
    "spring_force",
    "resolve_ball_collision",
    "resolve_wall_collision",
    "simulate",
    "simulate_batch",
    "system_energy",
]

# Distance below which two centers count as coincident (degenerate normal).
_COINCIDENT_EPS = 1e-9
# Allowed residual penetration after positional correction, px.
POSITION_SLACK = 0.1


class Domain(str, Enum):
    SPRINGS = "springs"
    ELASTIC = "elastic"
    INELASTIC = "inelastic"

    @property
    def has_contacts(self) -> bool:
        """Ball-ball contact impulses are resolved (springs pass through)."""
        return self is not Domain.SPRINGS


class Wall(IntEnum):
    """Wall identifiers; negative so they can share the partner slot of a
    collision event with ball indices (which are >= 0)."""

    LEFT = -1
    RIGHT = -2
    BOTTOM = -3
    TOP = -4


@dataclass(frozen=True)
class WorldConfig:
    domain: Domain
    box_size: float = 512.0
    radius: float = 50.0
    dt: float = 1.0
    equilibrium_dist: float = 150.0
    substeps: int = 4

    def __post_init__(self):
        if self.box_size <= 4 * self.radius:
            raise ValueError("box_size must exceed 4 * radius")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass
class ObjectProperties:
    """Per-object ground-truth latents, one entry per ball."""

    mass: np.ndarray
    charge: np.ndarray
    cor: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        self.charge = np.asarray(self.charge, dtype=np.float64)
        self.cor = np.asarray(self.cor, dtype=np.float64)
        if not (self.mass.shape == self.charge.shape == self.cor.shape):
            raise ValueError("mass, charge, cor must have matching shapes")
        if np.any(self.mass <= 0):
            raise ValueError("mass must be positive")
        if np.any(self.charge <= 0):
            raise ValueError("spring charge must be positive")
        if np.any((self.cor < 0) | (self.cor > 1)):
            raise ValueError("cor must lie in [0, 1]")

    @property
    def n_objects(self) -> int:
        return self.mass.shape[-1]


@dataclass
class Trajectory:
    """States over time plus deduplicated collision events.

    ``frames`` has shape (n_steps + 1, N, 4) with rows (x, y, vx, vy);
    ``frames[0]`` is the initial state. Each event is ``(step, i, j)``
    where ``step`` in 1..n_steps is the frame interval during which the
    contact began, ``i`` is a ball index and ``j`` is either another ball
    index or a negative ``Wall`` code.
    """

    frames: np.ndarray
    events: list = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return self.frames.shape[1]

    @property
    def n_steps(self) -> int:
        return self.frames.shape[0] - 1


def spring_force(charge_i, charge_j, pos_i, pos_j, cfg: WorldConfig) -> np.ndarray:
    """Hooke force on ball i from the spring joining i and j.

    The spring constant is the product of the two charges; the force is
    attractive beyond the equilibrium distance and repulsive inside it.
    """
    pos_i = np.asarray(pos_i, dtype=np.float64)
    pos_j = np.asarray(pos_j, dtype=np.float64)
    diff = pos_j - pos_i
    dist = float(np.hypot(diff[0], diff[1]))
    if dist < _COINCIDENT_EPS:
        raise ValueError("spring force undefined for coincident positions")
    k = float(charge_i) * float(charge_j)
    return k * (dist - cfg.equilibrium_dist) / dist * diff


def _impulse_terms(d_pos, vel_i, vel_j, mass_i, mass_j, cor_i, cor_j):
    """Shared contact math, broadcastable over leading dimensions.

    ``d_pos`` points from i to j. Returns (dist, normal, approach speed,
    restitution, impulse magnitude); the impulse is only meaningful where
    the approach speed is positive.
    """
    dist = np.sqrt(np.sum(d_pos * d_pos, axis=-1))
    safe = np.maximum(dist, _COINCIDENT_EPS)
    normal = d_pos / safe[..., None]
    v_approach = np.sum((vel_i - vel_j) * normal, axis=-1)
    e = np.maximum(cor_i, cor_j)
    j_mag = (1.0 + e) * v_approach / (1.0 / mass_i + 1.0 / mass_j)
    return dist, normal, v_approach, e, j_mag


def resolve_ball_collision(pos_i, vel_i, pos_j, vel_j, props: ObjectProperties,
                           i: int, j: int, cfg: WorldConfig):
    """Impulse resolution of a single ball-ball contact.

    Restitution is the maximum of the two balls' CORs. Tangential velocity
    components are untouched and momentum is conserved exactly. Overlap is
    removed by shifting both balls along the contact normal in inverse
    proportion to their masses. A separating or non-overlapping pair is
    returned unchanged.
    """
    pos_i = np.array(pos_i, dtype=np.float64)
    pos_j = np.array(pos_j, dtype=np.float64)
    vel_i = np.array(vel_i, dtype=np.float64)
    vel_j = np.array(vel_j, dtype=np.float64)
    m_i, m_j = float(props.mass[i]), float(props.mass[j])
    dist, normal, v_approach, _, j_mag = _impulse_terms(
        pos_j - pos_i, vel_i, vel_j, m_i, m_j, props.cor[i], props.cor[j])
    if dist > 2 * cfg.radius or v_approach <= 0:
        return pos_i, vel_i, pos_j, vel_j
    vel_i = vel_i - (j_mag / m_i) * normal
    vel_j = vel_j + (j_mag / m_j) * normal
    overlap = 2 * cfg.radius - dist
    inv_i, inv_j = 1.0 / m_i, 1.0 / m_j
    pos_i = pos_i - normal * (overlap * inv_i / (inv_i + inv_j))
    pos_j = pos_j + normal * (overlap * inv_j / (inv_i + inv_j))
    return pos_i, vel_i, pos_j, vel_j


def resolve_wall_collision(pos, vel, cor: float, wall: Wall, cfg: WorldConfig):
    """Reflect a ball off one of the four box walls using its own COR.

    No-op unless the ball penetrates the wall while moving into it.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    axis = 0 if wall in (Wall.LEFT, Wall.RIGHT) else 1
    low = wall in (Wall.LEFT, Wall.BOTTOM)
    r = cfg.radius
    if low:
        if pos[axis] < r and vel[axis] < 0:
            vel[axis] = -cor * vel[axis]
            pos[axis] = r
    else:
        lim = cfg.box_size - r
        if pos[axis] > lim and vel[axis] > 0:
            vel[axis] = -cor * vel[axis]
            pos[axis] = lim
    return pos, vel


def _spring_accel(pos, charge, mass, cfg: WorldConfig):
    """Net spring acceleration, shape (B, N, 2)."""
    diff = pos[:, None, :, :] - pos[:, :, None, :]  # diff[b, i, j] = p_j - p_i
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.maximum(dist, _COINCIDENT_EPS)
    k = charge[:, :, None] * charge[:, None, :]
    coef = k * (dist - cfg.equilibrium_dist) / safe
    n = pos.shape[1]
    coef[:, np.arange(n), np.arange(n)] = 0.0
    force = np.sum(coef[..., None] * diff, axis=2)
    return force / mass[..., None]


class _ContactTracker:
    """Rising-edge event dedup: one event per contact episode, emitted on
    the first impulse (or wall reflection) of the episode. The fired flag
    clears only once the contact separates for at least one substep."""

    def __init__(self, batch, n_pairs, n_objects):
        self.bb_fired = np.zeros((batch, n_pairs), dtype=bool)
        self.wall_fired = np.zeros((batch, n_objects, 4), dtype=bool)


def _step_contacts(pos, vel, mass, cor, cfg, pairs, tracker, events, step):
    """Impulse + positional pass for ball-ball contacts (one substep)."""
    two_r = 2 * cfg.radius
    any_overlap = False
    for p_idx, (a, b) in enumerate(pairs):
        d_pos = pos[:, b] - pos[:, a]
        dist, normal, v_approach, _, j_mag = _impulse_terms(
            d_pos, vel[:, a], vel[:, b], mass[:, a], mass[:, b],
            cor[:, a], cor[:, b])
        overlap = dist < two_r
        if not overlap.any():
            tracker.bb_fired[:, p_idx] = False
            continue
        any_overlap = True
        hit = overlap & (v_approach > 0)
        if hit.any():
            dv_a = (j_mag / mass[:, a])[:, None] * normal
            dv_b = (j_mag / mass[:, b])[:, None] * normal
            vel[:, a] = np.where(hit[:, None], vel[:, a] - dv_a, vel[:, a])
            vel[:, b] = np.where(hit[:, None], vel[:, b] + dv_b, vel[:, b])
            fresh = hit & ~tracker.bb_fired[:, p_idx]
            for row in np.nonzero(fresh)[0]:
                events[row].append((step, a, b))
            tracker.bb_fired[:, p_idx] |= hit
        tracker.bb_fired[:, p_idx] &= overlap
    return any_overlap


def _separate_pairs(pos, mass, cfg, pairs):
    """Positional de-penetration, split by inverse mass."""
    two_r = 2 * cfg.radius
    for a, b in pairs:
        d_pos = pos[:, b] - pos[:, a]
        dist = np.sqrt(np.sum(d_pos * d_pos, axis=-1))
        overlap = np.maximum(two_r - dist, 0.0)
        mask = overlap > 0
        if not mask.any():
            continue
        safe = np.maximum(dist, _COINCIDENT_EPS)
        normal = d_pos / safe[..., None]
        inv_a = 1.0 / mass[:, a]
        inv_b = 1.0 / mass[:, b]
        share_a = (overlap * inv_a / (inv_a + inv_b)) * mask
        share_b = (overlap * inv_b / (inv_a + inv_b)) * mask
        pos[:, a] -= share_a[:, None] * normal
        pos[:, b] += share_b[:, None] * normal


_WALLS = ((Wall.LEFT, 0, True), (Wall.RIGHT, 0, False),
          (Wall.BOTTOM, 1, True), (Wall.TOP, 1, False))


def _step_walls(pos, vel, cor, cfg, tracker, events, step):
    """Reflect and clamp against all four walls (one substep)."""
    r = cfg.radius
    hi = cfg.box_size - r
    for wall, axis, low in _WALLS:
        if low:
            touch = pos[:, :, axis] < r
            moving_in = vel[:, :, axis] < 0
        else:
            touch = pos[:, :, axis] > hi
            moving_in = vel[:, :, axis] > 0
        w_slot = -int(wall) - 1
        if touch.any():
            hit = touch & moving_in
            vel[:, :, axis] = np.where(hit, -cor * vel[:, :, axis],
                                       vel[:, :, axis])
            fresh = hit & ~tracker.wall_fired[:, :, w_slot]
            for row, obj in zip(*np.nonzero(fresh)):
                events[row].append((step, int(obj), int(wall)))
            tracker.wall_fired[:, :, w_slot] |= hit
            if low:
                pos[:, :, axis] = np.maximum(pos[:, :, axis], r)
            else:
                pos[:, :, axis] = np.minimum(pos[:, :, axis], hi)
        tracker.wall_fired[:, :, w_slot] &= touch


def simulate_batch(pos, vel, props: ObjectProperties, cfg: WorldConfig,
                   n_steps: int):
    """Advance a batch of systems ``n_steps`` frames.

    ``pos`` and ``vel`` have shape (B, N, 2); property arrays are either
    (N,) shared across the batch or (B, N). Returns ``(frames, events)``
    with frames of shape (B, n_steps + 1, N, 4) and one event list per
    batch row. Per-sample results are identical to running each sample
    alone: batching is purely a throughput device.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[-1] != 2:
        raise ValueError("pos must have shape (B, N, 2)")
    batch, n, _ = pos.shape
    mass = np.broadcast_to(props.mass, (batch, n)).astype(np.float64)
    charge = np.broadcast_to(props.charge, (batch, n)).astype(np.float64)
    cor = np.broadcast_to(props.cor, (batch, n)).astype(np.float64)

    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    _check_initial_state(pos, cfg)

    h = cfg.dt / cfg.substeps
    frames = np.empty((batch, n_steps + 1, n, 4), dtype=np.float64)
    frames[:, 0, :, :2] = pos
    frames[:, 0, :, 2:] = vel
    events = [[] for _ in range(batch)]
    tracker = _ContactTracker(batch, len(pairs), n)
    contacts = cfg.domain.has_contacts

    for step in range(1, n_steps + 1):
        for _ in range(cfg.substeps):
            if cfg.domain is Domain.SPRINGS:
                vel += h * _spring_accel(pos, charge, mass, cfg)
            pos += h * vel
            if contacts:
                touched = _step_contacts(pos, vel, mass, cor, cfg, pairs,
                                         tracker, events, step)
                if touched:
                    _separate_pairs(pos, mass, cfg, pairs)
                    _separate_pairs(pos, mass, cfg, pairs)
            _step_walls(pos, vel, cor, cfg, tracker, events, step)
        frames[:, step, :, :2] = pos
        frames[:, step, :, 2:] = vel
    return frames, events


def simulate(init_pos, init_vel, props: ObjectProperties, cfg: WorldConfig,
             n_steps: int) -> Trajectory:
    """Simulate a single system for ``n_steps`` frames."""
    frames, events = simulate_batch(np.asarray(init_pos)[None],
                                    np.asarray(init_vel)[None], props, cfg,
                                    n_steps)
    return Trajectory(frames=frames[0], events=events[0])


def _check_initial_state(pos, cfg):
    r = cfg.radius
    if np.any(pos < r - 1e-9) or np.any(pos > cfg.box_size - r + 1e-9):
        raise ValueError("initial positions must lie inside the box")
    n = pos.shape[1]
    for a in range(n):
        for b in range(a + 1, n):
            d = np.sqrt(np.sum((pos[:, a] - pos[:, b]) ** 2, axis=-1))
            if np.any(d < 2 * r - 1e-9):
                raise ValueError("initial positions overlap")


def system_energy(pos, vel, props: ObjectProperties, cfg: WorldConfig):
    """Kinetic plus (springs domain) pairwise spring potential energy.

    Accepts (N, 2) or batched (..., N, 2) arrays and reduces over the
    trailing object/coordinate axes.
    """
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    ke = 0.5 * np.sum(props.mass * np.sum(vel * vel, axis=-1), axis=-1)
    if cfg.domain is not Domain.SPRINGS:
        return ke
    diff = pos[..., None, :, :] - pos[..., :, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    k = props.charge[..., :, None] * props.charge[..., None, :]
    stretch = dist - cfg.equilibrium_dist
    pe_all = 0.5 * k * stretch * stretch
    n = pos.shape[-2]
    iu = np.triu_indices(n, k=1)
    pe = np.sum(pe_all[..., iu[0], iu[1]], axis=-1)
    return ke + pe
