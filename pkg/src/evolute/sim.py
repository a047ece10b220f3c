"""Deterministic top-down 2D driving-and-shooting arena.

Pure state-transition functions over immutable world snapshots: identical
(config, action sequence) pairs produce bit-identical trajectories. The
player drives a bicycle-lite vehicle among circular obstacles and patrolling
enemies, firing a hitscan primary and a projectile secondary. Episodes end
on a tick limit or when the vehicle is pinned ("fatal crash").
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SimulationError

# Vehicle kinematics, one discrete update per tick of length dt:
#   speed   <- clip(speed + (throttle*ACCEL - DRAG*speed)*dt, 0, V_MAX)
#   heading <- rotate(heading, (steering - 0.5) * 2 * OMEGA_MAX * dt)
#   pos     <- pos + heading * speed * dt
ACCEL = 6.0          # m/s^2 at full throttle
DRAG = 0.5           # 1/s
V_MAX = 12.0         # m/s
OMEGA_MAX = 1.5      # rad/s at full steering deflection

VEHICLE_RADIUS = 1.5

# Sensors. Depth rays clip at SENSOR_RANGE; the occupancy window is a
# SENSOR_RANGE-sided square centered on the vehicle. Enemies appear as
# inflated blips so they register on a coarse grid; cell values encode
# what occupies them (enemy wins where both overlap).
SENSOR_RANGE = 50.0
ENEMY_SENSOR_RADIUS = 5.0
OCC_OBSTACLE = 0.5
OCC_ENEMY = 1.0
TELEMETRY_DIM = 6

# "Cannot move anymore": pinned below STUCK_SPEED while still trying to
# drive (throttle above STUCK_THROTTLE) for STUCK_SECONDS straight.
STUCK_SPEED = 0.2
STUCK_THROTTLE = 0.1
STUCK_SECONDS = 3.0

PRIMARY_RANGE = 40.0
PRIMARY_HALF_ANGLE = math.radians(15.0)
PRIMARY_COOLDOWN = 0.5
PRIMARY_DAMAGE = 1
ENEMY_HP = 3
SECONDARY_AMMO = 3
SECONDARY_SPEED = 30.0
SECONDARY_DAMAGE = 3
PROJECTILE_LIFETIME = 2.5
ENEMY_SPEED = 5.0
ENEMY_WAYPOINT_COUNT = 5
ENEMY_WAYPOINT_TOLERANCE = 3.0
ENEMY_RESPAWN_SECONDS = 5.0

PLAYER_SPAWN_FRAC = (0.5, 0.18)   # on the patrol ring used by the scripted expert

# SeedSequence spawn keys: independent deterministic RNG streams per purpose.
_STREAM_LAYOUT = 0
_STREAM_RESPAWN = 1


def _entropy(seed: int) -> int:
    return seed & 0xFFFFFFFFFFFFFFFF


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose-key) without shared state."""
    return np.random.default_rng(np.random.SeedSequence(entropy=_entropy(seed), spawn_key=key))


@dataclass(frozen=True)
class SimConfig:
    arena_size: float = 200.0
    tick_rate: float = 20.0
    episode_length: float = 120.0
    n_obstacles: int = 12
    n_enemies: int = 3
    n_rays: int = 32
    grid_res: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.arena_size <= 0:
            raise ConfigError(f"field arena_size: must be > 0, got {self.arena_size}")
        if self.tick_rate <= 0:
            raise ConfigError(f"field tick_rate: must be > 0, got {self.tick_rate}")
        if self.episode_length <= 0:
            raise ConfigError(f"field episode_length: must be > 0, got {self.episode_length}")
        if self.n_obstacles < 0:
            raise ConfigError(f"field n_obstacles: must be >= 0, got {self.n_obstacles}")
        if self.n_enemies < 0:
            raise ConfigError(f"field n_enemies: must be >= 0, got {self.n_enemies}")
        if self.n_rays < 4:
            raise ConfigError(f"field n_rays: must be >= 4, got {self.n_rays}")
        if self.grid_res < 4:
            raise ConfigError(f"field grid_res: must be >= 4, got {self.grid_res}")

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def max_ticks(self) -> int:
        return int(round(self.episode_length * self.tick_rate))

    def as_dict(self) -> dict:
        return {
            "arena_size": self.arena_size,
            "tick_rate": self.tick_rate,
            "episode_length": self.episode_length,
            "n_obstacles": self.n_obstacles,
            "n_enemies": self.n_enemies,
            "n_rays": self.n_rays,
            "grid_res": self.grid_res,
            "seed": self.seed,
        }

    def content_hash(self) -> str:
        """Identifies the arena geometry and timing; the per-episode seed is
        tracked separately, so episodes of one dataset hash identically."""
        fields = {k: v for k, v in self.as_dict().items() if k != "seed"}
        text = "\n".join(f"{k}={fields[k]!r}" for k in sorted(fields))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureLayout:
    """Shape of the flattened observation vector; models are layout-agnostic."""

    n_rays: int
    grid_res: int
    telemetry_dim: int = TELEMETRY_DIM

    @classmethod
    def from_config(cls, config: SimConfig) -> "FeatureLayout":
        return cls(n_rays=config.n_rays, grid_res=config.grid_res)

    @property
    def obs_dim(self) -> int:
        return self.n_rays + self.grid_res * self.grid_res + self.telemetry_dim

    @property
    def depth_slice(self) -> slice:
        return slice(0, self.n_rays)

    @property
    def occupancy_slice(self) -> slice:
        return slice(self.n_rays, self.n_rays + self.grid_res * self.grid_res)

    @property
    def telemetry_slice(self) -> slice:
        return slice(self.n_rays + self.grid_res * self.grid_res, self.obs_dim)

    def as_dict(self) -> dict:
        return {"n_rays": self.n_rays, "grid_res": self.grid_res, "telemetry_dim": self.telemetry_dim}


@dataclass(frozen=True)
class VehicleState:
    position: tuple[float, float]
    heading: tuple[float, float]   # unit vector
    speed: float = 0.0
    alive: bool = True
    stuck_timer: float = 0.0


@dataclass(frozen=True)
class EnemyState:
    position: tuple[float, float]
    heading: tuple[float, float]
    waypoints: tuple[tuple[float, float], ...]
    waypoint_index: int = 0
    hp: int = ENEMY_HP
    alive: bool = True
    respawn_timer: float = 0.0


@dataclass(frozen=True)
class Projectile:
    position: tuple[float, float]
    velocity: tuple[float, float]
    owner: str = "player"
    age: float = 0.0


@dataclass(frozen=True)
class ActionPair:
    """Controller action: continuous (throttle, steering) in [0,1], binary fire bits.

    Continuous components are clipped at construction; steering 0.5 is
    straight ahead. Discrete components must be exactly 0 or 1.
    """

    throttle: float = 0.0
    steering: float = 0.5
    fire_primary: int = 0
    fire_secondary: int = 0

    def __post_init__(self):
        object.__setattr__(self, "throttle", min(1.0, max(0.0, float(self.throttle))))
        object.__setattr__(self, "steering", min(1.0, max(0.0, float(self.steering))))
        for name in ("fire_primary", "fire_secondary"):
            value = getattr(self, name)
            if value not in (0, 1):
                raise ConfigError(f"field {name}: must be exactly 0 or 1, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def continuous(self) -> tuple[float, float]:
        return (self.throttle, self.steering)

    @property
    def discrete(self) -> tuple[int, int]:
        return (self.fire_primary, self.fire_secondary)


@dataclass(frozen=True)
class StepEvents:
    kill: bool = False
    crashed: bool = False
    episode_over: bool = False
    reason: str = "none"   # none | timeout | fatal_crash


@dataclass(frozen=True)
class Observation:
    """Agent-visible state: depth rays, egocentric occupancy, raw telemetry."""

    depth_rays: np.ndarray        # (n_rays,) float32 in [0,1]
    occupancy: np.ndarray         # (grid_res, grid_res) float32 in [0,1]
    telemetry: np.ndarray         # (6,) float32: x, y, d_x, d_y, speed, ammo

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.depth_rays, self.occupancy.reshape(-1), self.telemetry]
        ).astype(np.float32)


def unflatten_observation(flat: np.ndarray, layout: FeatureLayout) -> Observation:
    flat = np.asarray(flat, dtype=np.float32)
    g = layout.grid_res
    return Observation(
        depth_rays=flat[layout.depth_slice].copy(),
        occupancy=flat[layout.occupancy_slice].reshape(g, g).copy(),
        telemetry=flat[layout.telemetry_slice].copy(),
    )


@dataclass(frozen=True)
class WorldState:
    config: SimConfig
    player: VehicleState
    enemies: tuple[EnemyState, ...]
    obstacles: tuple[tuple[float, float, float], ...]   # (x, y, radius)
    projectiles: tuple[Projectile, ...] = ()
    tick: int = 0
    kills_scored: int = 0
    secondary_ammo: int = SECONDARY_AMMO
    primary_cooldown: float = 0.0
    respawn_count: int = 0


DRIVING_BAND_FRAC = 0.32   # radius of the main driving circuit around center


def _place_obstacles(config: SimConfig, rng: np.random.Generator,
                     spawn: tuple[float, float]) -> tuple[tuple[float, float, float], ...]:
    arena = config.arena_size
    lo, hi = 0.12 * arena, 0.88 * arena
    cx = cy = arena / 2.0
    band_radius = DRIVING_BAND_FRAC * arena
    placed: list[tuple[float, float, float]] = []
    attempts = 0
    while len(placed) < config.n_obstacles:
        attempts += 1
        if attempts > 400 * max(1, config.n_obstacles):
            raise SimulationError(
                f"could not place {config.n_obstacles} obstacles in arena of size {arena}"
            )
        # Alternate between the driving band (where head-on encounters force
        # real avoidance decisions) and the open field.
        if len(placed) % 2 == 0:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            radius = band_radius + rng.uniform(-8.0, 8.0)
            x = cx + radius * math.cos(angle)
            y = cy + radius * math.sin(angle)
        else:
            x = rng.uniform(lo, hi)
            y = rng.uniform(lo, hi)
        r = rng.uniform(4.0, 8.0)
        if not (lo <= x <= hi and lo <= y <= hi):
            continue
        if math.hypot(x - spawn[0], y - spawn[1]) < 18.0 + r:
            continue
        # Keep corridors wide enough to drive through; impassable pockets
        # would doom even a well-steered vehicle.
        if any(math.hypot(x - ox, y - oy) < r + orad + 10.0 for ox, oy, orad in placed):
            continue
        placed.append((x, y, r))
    return tuple(placed)


def _spawn_enemy(config: SimConfig, rng: np.random.Generator,
                 avoid: tuple[float, float]) -> EnemyState:
    arena = config.arena_size
    lo, hi = 0.15 * arena, 0.85 * arena
    while True:
        pos = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        if math.hypot(pos[0] - avoid[0], pos[1] - avoid[1]) >= 30.0:
            break
    waypoints = tuple(
        (rng.uniform(lo, hi), rng.uniform(lo, hi)) for _ in range(ENEMY_WAYPOINT_COUNT)
    )
    dx = waypoints[0][0] - pos[0]
    dy = waypoints[0][1] - pos[1]
    norm = math.hypot(dx, dy)
    heading = (dx / norm, dy / norm) if norm > 0 else (1.0, 0.0)
    return EnemyState(position=pos, heading=heading, waypoints=waypoints)


def reset(config: SimConfig) -> WorldState:
    """Build the deterministic initial world for a config: seeded obstacle and
    enemy placement, player at the fixed spawn, at rest, tick 0."""
    rng = derived_rng(config.seed, _STREAM_LAYOUT)
    spawn = (PLAYER_SPAWN_FRAC[0] * config.arena_size, PLAYER_SPAWN_FRAC[1] * config.arena_size)
    obstacles = _place_obstacles(config, rng, spawn)
    enemies = tuple(_spawn_enemy(config, rng, spawn) for _ in range(config.n_enemies))
    player = VehicleState(position=spawn, heading=(1.0, 0.0))
    return WorldState(config=config, player=player, enemies=enemies, obstacles=obstacles)


def _rotate(vec: tuple[float, float], angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return (c * vec[0] - s * vec[1], s * vec[0] + c * vec[1])


def _advance_enemy(enemy: EnemyState, dt: float) -> EnemyState:
    target = enemy.waypoints[enemy.waypoint_index]
    dx = target[0] - enemy.position[0]
    dy = target[1] - enemy.position[1]
    dist = math.hypot(dx, dy)
    index = enemy.waypoint_index
    if dist < ENEMY_WAYPOINT_TOLERANCE:
        index = (index + 1) % len(enemy.waypoints)
        target = enemy.waypoints[index]
        dx = target[0] - enemy.position[0]
        dy = target[1] - enemy.position[1]
        dist = math.hypot(dx, dy)
    if dist > 0:
        heading = (dx / dist, dy / dist)
    else:
        heading = enemy.heading
    step_len = min(ENEMY_SPEED * dt, dist)
    pos = (enemy.position[0] + heading[0] * step_len, enemy.position[1] + heading[1] * step_len)
    return replace(enemy, position=pos, heading=heading, waypoint_index=index)


def _respawn_position(config: SimConfig, respawn_count: int) -> tuple[float, float]:
    rng = derived_rng(config.seed, _STREAM_RESPAWN, respawn_count)
    lo, hi = 0.15 * config.arena_size, 0.85 * config.arena_size
    return (rng.uniform(lo, hi), rng.uniform(lo, hi))


def _enemy_in_cone(player: VehicleState, enemy: EnemyState) -> tuple[bool, float]:
    dx = enemy.position[0] - player.position[0]
    dy = enemy.position[1] - player.position[1]
    dist = math.hypot(dx, dy)
    if dist == 0.0 or dist > PRIMARY_RANGE:
        return False, dist
    cos_bearing = (dx * player.heading[0] + dy * player.heading[1]) / dist
    return cos_bearing >= math.cos(PRIMARY_HALF_ANGLE), dist


def step(state: WorldState, action: ActionPair) -> tuple[WorldState, StepEvents]:
    """Advance the world one tick. Raises if the episode already ended."""
    config = state.config
    if not state.player.alive:
        raise SimulationError("invalid transition: player crashed, episode is over")
    if state.tick >= config.max_ticks:
        raise SimulationError("invalid transition: tick limit reached, episode is over")

    dt = config.dt
    player = state.player

    # Kinematics: new speed and heading first, then the position update.
    speed = min(V_MAX, max(0.0, player.speed + (action.throttle * ACCEL - DRAG * player.speed) * dt))
    heading = _rotate(player.heading, (action.steering - 0.5) * 2.0 * OMEGA_MAX * dt)
    norm = math.hypot(*heading)
    heading = (heading[0] / norm, heading[1] / norm)
    candidate = (player.position[0] + heading[0] * speed * dt,
                 player.position[1] + heading[1] * speed * dt)

    blocked = any(
        math.hypot(candidate[0] - ox, candidate[1] - oy) < orad + VEHICLE_RADIUS
        for ox, oy, orad in state.obstacles
    )
    if blocked:
        new_pos = player.position
        speed = 0.0
    else:
        lo, hi = VEHICLE_RADIUS, config.arena_size - VEHICLE_RADIUS
        clamped = (min(hi, max(lo, candidate[0])), min(hi, max(lo, candidate[1])))
        if clamped != candidate:
            # Wall contact: actual speed is whatever displacement survived the clamp.
            moved = math.hypot(clamped[0] - player.position[0], clamped[1] - player.position[1])
            speed = min(V_MAX, moved / dt)
        new_pos = clamped

    enemies = list(state.enemies)
    kills = 0
    cooldown = max(0.0, state.primary_cooldown - dt)
    ammo = state.secondary_ammo
    projectiles = list(state.projectiles)

    # Primary: instant hitscan against the nearest enemy in the cone.
    if action.fire_primary and cooldown == 0.0:
        best = None
        best_dist = math.inf
        mover = VehicleState(position=new_pos, heading=heading, speed=speed)
        for i, enemy in enumerate(enemies):
            if not enemy.alive:
                continue
            hit, dist = _enemy_in_cone(mover, enemy)
            if hit and dist < best_dist:
                best, best_dist = i, dist
        if best is not None:
            cooldown = PRIMARY_COOLDOWN
            enemy = enemies[best]
            hp = enemy.hp - PRIMARY_DAMAGE
            if hp <= 0:
                enemies[best] = replace(enemy, hp=0, alive=False,
                                        respawn_timer=ENEMY_RESPAWN_SECONDS)
                kills += 1
            else:
                enemies[best] = replace(enemy, hp=hp)

    # Secondary: spawn a projectile, consuming ammo.
    if action.fire_secondary and ammo > 0:
        ammo -= 1
        projectiles.append(Projectile(
            position=new_pos,
            velocity=(heading[0] * SECONDARY_SPEED, heading[1] * SECONDARY_SPEED),
        ))

    # Advance projectiles and resolve enemy hits.
    surviving: list[Projectile] = []
    for proj in projectiles:
        pos = (proj.position[0] + proj.velocity[0] * dt, proj.position[1] + proj.velocity[1] * dt)
        age = proj.age + dt
        if age > PROJECTILE_LIFETIME:
            continue
        if not (0.0 <= pos[0] <= config.arena_size and 0.0 <= pos[1] <= config.arena_size):
            continue
        hit_index = None
        for i, enemy in enumerate(enemies):
            if enemy.alive and math.hypot(pos[0] - enemy.position[0], pos[1] - enemy.position[1]) <= VEHICLE_RADIUS:
                hit_index = i
                break
        if hit_index is not None:
            enemy = enemies[hit_index]
            hp = enemy.hp - SECONDARY_DAMAGE
            if hp <= 0:
                enemies[hit_index] = replace(enemy, hp=0, alive=False,
                                             respawn_timer=ENEMY_RESPAWN_SECONDS)
                kills += 1
            else:
                enemies[hit_index] = replace(enemy, hp=hp)
            continue
        surviving.append(Projectile(position=pos, velocity=proj.velocity, owner=proj.owner, age=age))

    # Enemy motion and respawns.
    respawn_count = state.respawn_count
    for i, enemy in enumerate(enemies):
        if enemy.alive:
            enemies[i] = _advance_enemy(enemy, dt)
        else:
            timer = enemy.respawn_timer - dt
            if timer <= 0.0:
                pos = _respawn_position(config, respawn_count)
                respawn_count += 1
                nearest = min(
                    range(len(enemy.waypoints)),
                    key=lambda k: math.hypot(enemy.waypoints[k][0] - pos[0],
                                             enemy.waypoints[k][1] - pos[1]),
                )
                enemies[i] = replace(enemy, position=pos, hp=ENEMY_HP, alive=True,
                                     respawn_timer=0.0, waypoint_index=nearest)
            else:
                enemies[i] = replace(enemy, respawn_timer=timer)

    # Stuck detection on post-collision speed. Half-tick tolerance so the
    # 3 s window is exactly 3 * tick_rate accruals despite float summation.
    if speed < STUCK_SPEED and action.throttle > STUCK_THROTTLE:
        stuck_timer = player.stuck_timer + dt
    else:
        stuck_timer = 0.0
    crashed = stuck_timer >= STUCK_SECONDS - dt * 0.5

    tick = state.tick + 1
    timed_out = tick >= config.max_ticks
    if crashed:
        reason = "fatal_crash"
    elif timed_out:
        reason = "timeout"
    else:
        reason = "none"

    new_state = WorldState(
        config=config,
        player=VehicleState(position=new_pos, heading=heading, speed=speed,
                            alive=not crashed, stuck_timer=stuck_timer),
        enemies=tuple(enemies),
        obstacles=state.obstacles,
        projectiles=tuple(surviving),
        tick=tick,
        kills_scored=state.kills_scored + kills,
        secondary_ammo=ammo,
        primary_cooldown=cooldown,
        respawn_count=respawn_count,
    )
    events = StepEvents(kill=kills > 0, crashed=crashed,
                        episode_over=crashed or timed_out, reason=reason)
    return new_state, events


def _sensor_circles(state: WorldState) -> np.ndarray:
    """(m, 4) rows of x, y, radius, occupancy value for everything the sensors see."""
    rows = [(ox, oy, orad, OCC_OBSTACLE) for ox, oy, orad in state.obstacles]
    rows += [
        (e.position[0], e.position[1], ENEMY_SENSOR_RADIUS, OCC_ENEMY)
        for e in state.enemies if e.alive
    ]
    if not rows:
        return np.zeros((0, 4))
    return np.asarray(rows, dtype=np.float64)


def _depth_rays(state: WorldState, circles: np.ndarray) -> np.ndarray:
    config = state.config
    px, py = state.player.position
    base = math.atan2(state.player.heading[1], state.player.heading[0])
    angles = base + 2.0 * math.pi * np.arange(config.n_rays) / config.n_rays
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)   # (n, 2)

    dist = np.full(config.n_rays, np.inf)

    if circles.shape[0] > 0:
        # Ray-circle intersection, first positive root, per ray x circle.
        rel = circles[None, :, :2] - np.array([px, py])[None, None, :]    # (n, m, 2)
        proj = dirs[:, None, 0] * rel[:, :, 0] + dirs[:, None, 1] * rel[:, :, 1]
        closest_sq = (rel ** 2).sum(axis=2) - proj ** 2
        radius_sq = circles[None, :, 2] ** 2
        disc = radius_sq - closest_sq
        valid = disc >= 0.0
        root = np.sqrt(np.where(valid, disc, 0.0))
        t_near = proj - root
        t_far = proj + root
        t_hit = np.where(t_near > 0.0, t_near, np.where(t_far > 0.0, 0.0, np.inf))
        t_hit = np.where(valid, t_hit, np.inf)
        dist = np.minimum(dist, t_hit.min(axis=1))

    # Arena walls at x=0, x=A, y=0, y=A.
    arena = config.arena_size
    with np.errstate(divide="ignore"):
        for axis, bound in ((0, 0.0), (0, arena), (1, 0.0), (1, arena)):
            origin = px if axis == 0 else py
            t = (bound - origin) / dirs[:, axis]
            t = np.where(t > 0.0, t, np.inf)
            dist = np.minimum(dist, t)

    return (np.clip(dist, 0.0, SENSOR_RANGE) / SENSOR_RANGE).astype(np.float32)


def _occupancy(state: WorldState, circles: np.ndarray) -> np.ndarray:
    g = state.config.grid_res
    window = SENSOR_RANGE
    grid = np.zeros((g, g), dtype=np.float32)
    if circles.shape[0] == 0:
        return grid
    # Egocentric cell centers: axis 0 forward (u), axis 1 leftward (v).
    coords = (np.arange(g) + 0.5) / g * window - window / 2.0
    u, v = np.meshgrid(coords, coords, indexing="ij")
    hx, hy = state.player.heading
    px, py = state.player.position
    wx = px + u * hx + v * -hy
    wy = py + u * hy + v * hx
    for cx, cy, cr, value in circles:
        mask = (wx - cx) ** 2 + (wy - cy) ** 2 <= cr ** 2
        np.maximum(grid, np.where(mask, np.float32(value), np.float32(0.0)), out=grid)
    return grid


def observe(state: WorldState) -> Observation:
    """Render the player's sensors for the current state."""
    if not state.player.alive:
        raise SimulationError("cannot observe: player crashed, episode is over")
    circles = _sensor_circles(state)
    telemetry = np.array(
        [state.player.position[0], state.player.position[1],
         state.player.heading[0], state.player.heading[1],
         state.player.speed, float(state.secondary_ammo)],
        dtype=np.float32,
    )
    return Observation(
        depth_rays=_depth_rays(state, circles),
        occupancy=_occupancy(state, circles),
        telemetry=telemetry,
    )
