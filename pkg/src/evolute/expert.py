"""Scripted demonstrator standing in for human players.

Patrols a fixed ring of waypoints, swerves around obstacles picking the
side with more clearance (a seeded coin breaks symmetric ties, which makes
the demonstration steering distribution bimodal at head-on obstacles), and
fires opportunistically whenever an enemy crosses the weapon cone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from . import sim
from .sim import ActionPair, SimConfig, WorldState
from .trajectories import Trajectory, trajectory_from_arrays

RING_RADIUS_FRAC = 0.32
WAYPOINT_DWELL_SECONDS = 6.0
AVOID_RADIUS = 22.0            # react to obstacle surfaces closer than this
AVOID_FORWARD_COS = 0.17       # only obstacles within ~80 deg of heading matter
WALL_MARGIN = 25.0
STEER_GAIN = 0.9               # proportional steering on heading error (rad)
SYMMETRY_SIN = 0.10            # |sin(bearing)| below this counts as dead ahead
SECONDARY_MIN_RANGE = 25.0

_STREAM_COIN = 10
_STREAM_NOISE = 11
_STREAM_EPISODES = 12


@dataclass(frozen=True)
class ExpertConfig:
    waypoint_count: int = 8
    aim_tolerance: float = 0.1
    avoid_gain: float = 1.2
    noise_std: float = 0.0

    def __post_init__(self):
        if self.waypoint_count < 2:
            raise ConfigError(f"field waypoint_count: must be >= 2, got {self.waypoint_count}")
        if self.aim_tolerance <= 0:
            raise ConfigError(f"field aim_tolerance: must be > 0, got {self.aim_tolerance}")
        if self.noise_std < 0:
            raise ConfigError(f"field noise_std: must be >= 0, got {self.noise_std}")


def ring_waypoints(arena_size: float, count: int) -> tuple[tuple[float, float], ...]:
    """Patrol ring through the player spawn, traversed counterclockwise."""
    cx = cy = arena_size / 2.0
    radius = RING_RADIUS_FRAC * arena_size
    start = -math.pi / 2.0   # spawn sits at the southern point of the ring
    return tuple(
        (cx + radius * math.cos(start + 2.0 * math.pi * k / count),
         cy + radius * math.sin(start + 2.0 * math.pi * k / count))
        for k in range(count)
    )


def _signed_angle(from_vec: tuple[float, float], to_vec: tuple[float, float]) -> float:
    cross = from_vec[0] * to_vec[1] - from_vec[1] * to_vec[0]
    dot = from_vec[0] * to_vec[0] + from_vec[1] * to_vec[1]
    return math.atan2(cross, dot)


def _tie_coin(seed: int, obstacle_index: int) -> float:
    rng = sim.derived_rng(seed, _STREAM_COIN, obstacle_index)
    return 1.0 if rng.integers(2) == 1 else -1.0


def current_waypoint(state: WorldState, cfg: ExpertConfig) -> tuple[float, float]:
    # Schedule starts at ring index 1: the vehicle spawns on waypoint 0.
    waypoints = ring_waypoints(state.config.arena_size, cfg.waypoint_count)
    dwell_ticks = max(1, int(round(WAYPOINT_DWELL_SECONDS * state.config.tick_rate)))
    index = (state.tick // dwell_ticks + 1) % cfg.waypoint_count
    return waypoints[index]


def _blocked_ahead(state: WorldState) -> bool:
    # Wide cone (about 120 degrees each side): the escape turn must swing the
    # nose well past perpendicular, or the waypoint pull rams straight back in.
    player = state.player
    px, py = player.position
    hx, hy = player.heading
    for ox, oy, orad in state.obstacles:
        rel = (ox - px, oy - py)
        dist = math.hypot(*rel)
        if dist == 0.0:
            return True
        surface = dist - orad - sim.VEHICLE_RADIUS
        cos_bearing = (rel[0] * hx + rel[1] * hy) / dist
        if surface < 3.0 and cos_bearing > -0.5:
            return True
    arena = state.config.arena_size
    ahead = (px + hx * 4.0, py + hy * 4.0)
    return not (sim.VEHICLE_RADIUS <= ahead[0] <= arena - sim.VEHICLE_RADIUS
                and sim.VEHICLE_RADIUS <= ahead[1] <= arena - sim.VEHICLE_RADIUS)


def expert_action(state: WorldState, cfg: ExpertConfig) -> ActionPair:
    player = state.player
    px, py = player.position
    heading = player.heading

    target = current_waypoint(state, cfg)
    to_target = (target[0] - px, target[1] - py)
    err = _signed_angle(heading, to_target)
    steer_offset = max(-0.5, min(0.5, STEER_GAIN * err))

    # Obstacle repulsion: steer away from the threatening side; a seeded coin
    # decides when the obstacle is dead ahead.
    avoid_offset = 0.0
    max_threat = 0.0
    for index, (ox, oy, orad) in enumerate(state.obstacles):
        rel = (ox - px, oy - py)
        dist = math.hypot(*rel)
        surface = dist - orad - sim.VEHICLE_RADIUS
        if surface >= AVOID_RADIUS or dist == 0.0:
            continue
        cos_bearing = (rel[0] * heading[0] + rel[1] * heading[1]) / dist
        if cos_bearing < AVOID_FORWARD_COS:
            continue
        threat = (1.0 - max(surface, 0.0) / AVOID_RADIUS) ** 2
        sin_bearing = (heading[0] * rel[1] - heading[1] * rel[0]) / dist
        if abs(sin_bearing) < SYMMETRY_SIN:
            side = _tie_coin(state.config.seed, index)
        else:
            side = 1.0 if sin_bearing > 0 else -1.0
        # Obstacle on the left (positive side) pushes a right turn and vice versa.
        avoid_offset -= side * cfg.avoid_gain * threat
        max_threat = max(max_threat, threat)

    # Wall repulsion: when close to a wall and heading outward, bend toward center.
    arena = state.config.arena_size
    wall_dist = min(px, py, arena - px, arena - py)
    if wall_dist < WALL_MARGIN:
        center = (arena / 2.0 - px, arena / 2.0 - py)
        outward = -(center[0] * heading[0] + center[1] * heading[1])
        if outward > 0:
            err_center = _signed_angle(heading, center)
            strength = (1.0 - wall_dist / WALL_MARGIN)
            avoid_offset += max(-0.6, min(0.6, 1.2 * err_center)) * strength
            max_threat = max(max_threat, strength)

    # Close threats win over the waypoint pull.
    steering = min(1.0, max(0.0, 0.5 + steer_offset * (1.0 - max_threat) + avoid_offset))
    throttle = max(0.3, 1.0 - 0.6 * max_threat)

    # Pinned with something right in front: stop pushing and commit to a
    # full-lock turn in place until the nose clears. Zero throttle while
    # turning, so a deliberate recovery never reads as a fatal crash. The
    # side is seeded by the (frozen) position so the turn direction stays
    # consistent across the whole pinning event.
    if player.speed < 0.25 and _blocked_ahead(state):
        key = int(px * 8.0) * 65536 + int(py * 8.0)
        side = _tie_coin(state.config.seed, key)
        steering = 0.5 + 0.5 * side
        throttle = 0.0

    fire_primary = 0
    fire_secondary = 0
    for enemy in state.enemies:
        hit, dist = sim._enemy_in_cone(player, enemy)
        if enemy.alive and hit:
            fire_primary = 1
            if state.secondary_ammo > 0 and dist > SECONDARY_MIN_RANGE:
                fire_secondary = 1
            break

    if cfg.noise_std > 0:
        rng = sim.derived_rng(state.config.seed, _STREAM_NOISE, state.tick)
        throttle += rng.normal(0.0, cfg.noise_std)
        steering += rng.normal(0.0, cfg.noise_std)

    return ActionPair(throttle=throttle, steering=steering,
                      fire_primary=fire_primary, fire_secondary=fire_secondary)


def episode_seed(seed: int, episode: int) -> int:
    words = np.random.SeedSequence(
        entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(_STREAM_EPISODES, episode)
    ).generate_state(2, dtype=np.uint64)
    return int(words[0])


def run_expert_episode(sim_cfg: SimConfig, cfg: ExpertConfig, episode_id: int,
                       ep_seed: int) -> Trajectory:
    config = replace(sim_cfg, seed=ep_seed)
    state = sim.reset(config)
    observations: list[np.ndarray] = []
    continuous: list[tuple[float, float]] = []
    discrete: list[tuple[int, int]] = []
    while True:
        obs = sim.observe(state)
        action = expert_action(state, cfg)
        observations.append(obs.flatten())
        continuous.append(action.continuous)
        discrete.append(action.discrete)
        state, events = sim.step(state, action)
        if events.episode_over:
            break
    return trajectory_from_arrays(
        episode_id=episode_id,
        sim_config=config,
        observations=np.stack(observations),
        continuous=np.asarray(continuous, dtype=np.float32),
        discrete=np.asarray(discrete, dtype=np.float32),
        source="scripted",
        seed=ep_seed,
    )


def generate_dataset(n_episodes: int, sim_cfg: SimConfig, cfg: ExpertConfig,
                     seed: int) -> list[Trajectory]:
    """Run the expert for n_episodes with per-episode derived seeds."""
    if n_episodes < 1:
        raise ConfigError(f"field n_episodes: must be >= 1, got {n_episodes}")
    return [
        run_expert_episode(sim_cfg, cfg, episode_id=i, ep_seed=episode_seed(seed, i))
        for i in range(n_episodes)
    ]
