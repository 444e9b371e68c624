"""A small first-person 2-D room with ray-cast 1-D colour observations.

Every function operates on a batch of independent rooms (:class:`EnvState`
with a leading env axis) so that data collection, detection batches and PPO
rollouts vectorise. The single-env helpers ``reset``/``step`` wrap a batch of
one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numba
import numpy as np

FORWARD, ROTATE_LEFT, ROTATE_RIGHT = 0, 1, 2
N_ACTIONS = 3
EDIBLE_REWARD = 10.0

RED = (1.0, 0.0, 0.0)
GREEN = (0.0, 1.0, 0.0)
BLUE = (0.0, 0.0, 1.0)
VARIANT_COLORS = {1: RED, 2: GREEN, 3: BLUE}

WALL_COLOR = (0.5, 0.5, 0.5)
BACKGROUND = (0.0, 0.0, 0.0)
# light blue: still a blue obstacle, but told apart from pure-blue edibles by its red
# and green channels, which survive distance shading
OBSTACLE_BLUE = (0.5, 0.7, 1.0)
FIXED_COLORS = ((0.9, 0.9, 0.2), (0.9, 0.5, 0.1), (0.6, 0.2, 0.7))
# (x0, y0, x1, y1)
FIXED_RECTS = ((3.0, 7.0, 7.0, 9.0), (13.0, 11.0, 16.0, 14.0), (8.0, 15.0, 11.0, 18.0))

MAX_PLACEMENT_ATTEMPTS = 10_000


class PlacementError(RuntimeError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    variant_id: int = 1
    room_size: tuple[float, float] = (20.0, 20.0)
    n_blue_obstacles: int = 10
    n_edibles: int = 10
    fixed_obstacles: tuple[tuple[float, float, float, float], ...] = FIXED_RECTS
    edible_color: tuple[float, float, float] | None = None
    episode_len: int = 500
    rng_seed: int = 0
    width: int = 64
    fov_deg: float = 90.0
    max_range: float | None = None
    agent_radius: float = 0.5
    item_radius: float = 0.5
    step_size: float = 0.5
    turn_deg: float = 12.0
    spawn: tuple[float, float, float] = (10.0, 3.0, np.pi / 2)

    def __post_init__(self):
        if self.variant_id not in VARIANT_COLORS:
            raise ValueError(f"variant_id must be one of {sorted(VARIANT_COLORS)}")
        if self.edible_color is None:
            object.__setattr__(self, "edible_color", VARIANT_COLORS[self.variant_id])
        if len(self.fixed_obstacles) != len(FIXED_COLORS):
            raise ValueError("exactly three fixed obstacles are supported")

    @property
    def view_range(self) -> float:
        if self.max_range is not None:
            return self.max_range
        return float(np.hypot(*self.room_size))

    @property
    def n_circles(self) -> int:
        return self.n_blue_obstacles + self.n_edibles

    def with_variant(self, variant_id: int) -> "WorldConfig":
        return replace(self, variant_id=variant_id, edible_color=None)

    # plain-text key=value form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "fixed_obstacles":
                v = "; ".join(",".join(repr(float(c)) for c in r) for r in v)
            elif isinstance(v, tuple):
                v = ",".join(repr(float(c)) for c in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WorldConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown world config key {key!r}")
            kw[key] = _parse_value(key, val)
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "WorldConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(key: str, val: str):
    if val.lower() == "none":
        return None
    if key == "fixed_obstacles":
        return tuple(tuple(float(c) for c in r.split(",")) for r in val.split(";"))
    if key in ("room_size", "edible_color", "spawn"):
        return tuple(float(c) for c in val.split(","))
    if key in ("variant_id", "n_blue_obstacles", "n_edibles", "episode_len", "rng_seed", "width"):
        return int(val)
    return float(val)


def variant(variant_id: int, **overrides) -> WorldConfig:
    return WorldConfig(variant_id=variant_id, **overrides)


@dataclass
class EnvState:
    """Batch of rooms. Arrays carry a leading env axis of size ``n``."""

    config: WorldConfig
    pos: np.ndarray        # [n, 2]
    heading: np.ndarray    # [n]
    centers: np.ndarray    # [n, n_circles, 2]; blue obstacles first, then edibles
    alive: np.ndarray      # [n, n_edibles] bool
    t: np.ndarray          # [n] int
    collected: np.ndarray = field(default=None)  # [n] int

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @property
    def done(self) -> np.ndarray:
        return self.t >= self.config.episode_len


# ---------------------------------------------------------------------------
# geometry helpers


def _circle_hits_rect(p: np.ndarray, r: float, rects: np.ndarray) -> np.ndarray:
    """p: [..., 2]; rects: [R, 4]. True where a disc of radius r overlaps any rect."""
    cx = np.clip(p[..., None, 0], rects[:, 0], rects[:, 2])
    cy = np.clip(p[..., None, 1], rects[:, 1], rects[:, 3])
    d2 = (p[..., None, 0] - cx) ** 2 + (p[..., None, 1] - cy) ** 2
    return np.any(d2 < r * r, axis=-1)


def _place_items(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    W, H = config.room_size
    r = config.item_radius
    rects = np.asarray(config.fixed_obstacles)
    spawn = np.asarray(config.spawn[:2])
    keep_clear = config.agent_radius + r + 1.0
    placed: list[np.ndarray] = []
    attempts = 0
    while len(placed) < config.n_circles:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(f"could not place {config.n_circles} items after "
                                 f"{MAX_PLACEMENT_ATTEMPTS} attempts; room too crowded")
        p = rng.uniform((r, r), (W - r, H - r))
        if _circle_hits_rect(p, r, rects):
            continue
        if np.hypot(*(p - spawn)) < keep_clear:
            continue
        if placed and np.min(np.hypot(*(np.asarray(placed) - p).T)) < 2 * r + 0.1:
            continue
        placed.append(p)
    return np.asarray(placed)


def episode_rng(config: WorldConfig, episode_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.rng_seed, episode_seed]))


# ---------------------------------------------------------------------------
# reset / step / render


def reset_batch(config: WorldConfig, episode_seeds) -> tuple[EnvState, np.ndarray]:
    seeds = [int(s) for s in np.atleast_1d(episode_seeds)]
    centers = np.stack([_place_items(config, episode_rng(config, s)) for s in seeds])
    n = len(seeds)
    env = EnvState(
        config=config,
        pos=np.tile(np.asarray(config.spawn[:2], dtype=float), (n, 1)),
        heading=np.full(n, float(config.spawn[2])),
        centers=centers,
        alive=np.ones((n, config.n_edibles), dtype=bool),
        t=np.zeros(n, dtype=np.int64),
        collected=np.zeros(n, dtype=np.int64),
    )
    return env, render_raycast(env)


def reset(config: WorldConfig, episode_seed: int) -> tuple[EnvState, np.ndarray]:
    env, obs = reset_batch(config, [episode_seed])
    return env, obs[0]


def reset_envs(env: EnvState, mask: np.ndarray, episode_seeds) -> None:
    """Re-initialise the rooms selected by ``mask`` in place."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return
    fresh, _ = reset_batch(env.config, episode_seeds)
    env.pos[idx] = fresh.pos
    env.heading[idx] = fresh.heading
    env.centers[idx] = fresh.centers
    env.alive[idx] = True
    env.t[idx] = 0
    env.collected[idx] = 0


def _blocked(env: EnvState, new_pos: np.ndarray) -> np.ndarray:
    c = env.config
    r = c.agent_radius
    W, H = c.room_size
    out = (new_pos[:, 0] < r) | (new_pos[:, 0] > W - r) | (new_pos[:, 1] < r) | (new_pos[:, 1] > H - r)
    out |= _circle_hits_rect(new_pos, r, np.asarray(c.fixed_obstacles))
    obst = env.centers[:, : c.n_blue_obstacles]
    d2 = np.sum((obst - new_pos[:, None, :]) ** 2, axis=-1)
    out |= np.any(d2 < (r + c.item_radius) ** 2, axis=-1)
    return out


def step_batch(env: EnvState, actions, render: bool = True) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Advance every room by one action. Returns (obs [n,W,3], reward [n], done [n]).

    With ``render=False`` the observation is skipped and returned as None.
    """
    actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (env.n,))
    if np.any(env.done):
        raise EpisodeDone("step called on a finished episode; reset first")
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ValueError(f"actions must be in [0, {N_ACTIONS})")
    c = env.config
    dtheta = np.deg2rad(c.turn_deg)
    env.heading = env.heading + np.where(actions == ROTATE_LEFT, dtheta, 0.0) \
        - np.where(actions == ROTATE_RIGHT, dtheta, 0.0)
    fwd = actions == FORWARD
    if np.any(fwd):
        move = c.step_size * np.stack([np.cos(env.heading), np.sin(env.heading)], axis=1)
        new_pos = env.pos + move
        ok = fwd & ~_blocked(env, new_pos)
        env.pos = np.where(ok[:, None], new_pos, env.pos)
    ed = env.centers[:, c.n_blue_obstacles:]
    d2 = np.sum((ed - env.pos[:, None, :]) ** 2, axis=-1)
    eaten = env.alive & (d2 < (c.agent_radius + c.item_radius) ** 2)
    env.alive &= ~eaten
    n_eaten = eaten.sum(axis=1)
    env.collected += n_eaten
    env.t += 1
    obs = render_raycast(env) if render else None
    return obs, EDIBLE_REWARD * n_eaten, env.done.copy()


def step(env: EnvState, action: int) -> tuple[np.ndarray, float, bool]:
    obs, rew, done = step_batch(env, [action])
    return obs[0], float(rew[0]), bool(done[0])


def ray_angles(config: WorldConfig, heading: np.ndarray) -> np.ndarray:
    """[n, W] ray angles; pixel 0 is the leftmost ray."""
    fov = np.deg2rad(config.fov_deg)
    offsets = fov / 2 - (np.arange(config.width) + 0.5) * fov / config.width
    return heading[:, None] + offsets[None, :]


def ray_distances(env: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Distance to every entity along every ray.

    Returns (dist [n, W, E], colors [n, E, 3]) with entity order: room walls,
    three fixed rectangles, blue obstacles, edibles. Misses are +inf.
    """
    c = env.config
    ang = ray_angles(c, env.heading)
    dx, dy = np.cos(ang), np.sin(ang)                     # [n, W]
    ox, oy = env.pos[:, 0:1], env.pos[:, 1:2]              # [n, 1]
    tiny = 1e-12
    sdx = np.where(np.abs(dx) < tiny, tiny, dx)
    sdy = np.where(np.abs(dy) < tiny, tiny, dy)
    W, H = c.room_size

    # room walls: exit distance of the enclosing box
    tx = np.where(sdx > 0, (W - ox) / sdx, (0.0 - ox) / sdx)
    ty = np.where(sdy > 0, (H - oy) / sdy, (0.0 - oy) / sdy)
    t_wall = np.minimum(tx, ty)[..., None]

    # fixed rectangles, slab test
    rects = np.asarray(c.fixed_obstacles)
    x0, y0, x1, y1 = (rects[:, i] for i in range(4))
    ax = (x0 - ox[..., None]) / sdx[..., None]
    bx = (x1 - ox[..., None]) / sdx[..., None]
    ay = (y0 - oy[..., None]) / sdy[..., None]
    by = (y1 - oy[..., None]) / sdy[..., None]
    tnear = np.maximum(np.minimum(ax, bx), np.minimum(ay, by))
    tfar = np.minimum(np.maximum(ax, bx), np.maximum(ay, by))
    t_rect = np.where((tnear <= tfar) & (tnear > 0), tnear, np.inf)

    # discs
    oc_x = env.centers[:, None, :, 0] - ox[..., None]      # [n, 1, C]
    oc_y = env.centers[:, None, :, 1] - oy[..., None]
    b = oc_x * dx[..., None] + oc_y * dy[..., None]       # [n, W, C]
    disc = b * b - (oc_x ** 2 + oc_y ** 2 - c.item_radius ** 2)
    t_circ = b - np.sqrt(np.maximum(disc, 0.0))
    alive = np.concatenate([np.ones((env.n, c.n_blue_obstacles), bool), env.alive], axis=1)
    t_circ = np.where((disc >= 0) & (t_circ > 0) & alive[:, None, :], t_circ, np.inf)

    dist = np.concatenate([t_wall, t_rect, t_circ], axis=-1)
    palette = _palette(c)
    return dist, np.broadcast_to(palette, (env.n, *palette.shape))


def render_raycast(env: EnvState, idx: np.ndarray | None = None) -> np.ndarray:
    """[n, W, 3] observation in [0, 1]: nearest hit colour scaled by distance.

    ``idx`` restricts rendering to a subset of the rooms.
    """
    c = env.config
    pos, heading, centers, alive = env.pos, env.heading, env.centers, env.alive
    if idx is not None:
        pos, heading, centers, alive = pos[idx], heading[idx], centers[idx], alive[idx]
    ang = ray_angles(c, heading)
    palette = _palette(c)
    return _render_kernel(pos, ang, centers, alive, np.asarray(c.fixed_obstacles, dtype=float),
                          float(c.room_size[0]), float(c.room_size[1]), float(c.item_radius),
                          int(c.n_blue_obstacles), float(c.view_range), palette, np.asarray(BACKGROUND))


def render_reference(env: EnvState) -> np.ndarray:
    """Pure-numpy twin of :func:`render_raycast`, used to cross-check the kernel."""
    c = env.config
    dist, colors = ray_distances(env)
    nearest = np.argmin(dist, axis=-1)
    d = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
    rgb = colors[0][nearest]
    shade = np.maximum(0.2, 1.0 - d / c.view_range)
    hit = d <= c.view_range
    obs = np.where(hit[..., None], rgb * shade[..., None], np.asarray(BACKGROUND))
    return np.clip(obs, 0.0, 1.0)


def _palette(c: WorldConfig) -> np.ndarray:
    return np.array([WALL_COLOR, *FIXED_COLORS]
                    + [OBSTACLE_BLUE] * c.n_blue_obstacles + [c.edible_color] * c.n_edibles)


@numba.njit(cache=True)
def _render_kernel(pos, ang, centers, alive, rects, W, H, radius, n_obst, view_range, palette, background):
    n, width = ang.shape
    n_circ = centers.shape[1]
    out = np.empty((n, width, 3))
    tiny = 1e-12
    r2 = radius * radius
    for e in range(n):
        ox = pos[e, 0]
        oy = pos[e, 1]
        for w in range(width):
            dx = np.cos(ang[e, w])
            dy = np.sin(ang[e, w])
            sdx = dx if abs(dx) >= tiny else tiny
            sdy = dy if abs(dy) >= tiny else tiny
            tx = (W - ox) / sdx if sdx > 0 else (0.0 - ox) / sdx
            ty = (H - oy) / sdy if sdy > 0 else (0.0 - oy) / sdy
            best = min(tx, ty)
            ent = 0
            for r in range(rects.shape[0]):
                ax = (rects[r, 0] - ox) / sdx
                bx = (rects[r, 2] - ox) / sdx
                ay = (rects[r, 1] - oy) / sdy
                by = (rects[r, 3] - oy) / sdy
                tnear = max(min(ax, bx), min(ay, by))
                tfar = min(max(ax, bx), max(ay, by))
                if tnear <= tfar and tnear > 0 and tnear < best:
                    best = tnear
                    ent = 1 + r
            for k in range(n_circ):
                if k >= n_obst and not alive[e, k - n_obst]:
                    continue
                ocx = centers[e, k, 0] - ox
                ocy = centers[e, k, 1] - oy
                b = ocx * dx + ocy * dy
                disc = b * b - (ocx * ocx + ocy * ocy - r2)
                if disc < 0:
                    continue
                t = b - np.sqrt(disc)
                if t > 0 and t < best:
                    best = t
                    ent = 1 + rects.shape[0] + k
            if best <= view_range:
                shade = max(0.2, 1.0 - best / view_range)
                for ch in range(3):
                    out[e, w, ch] = min(max(palette[ent, ch] * shade, 0.0), 1.0)
            else:
                for ch in range(3):
                    out[e, w, ch] = background[ch]
    return out


def nearest_entity(env: EnvState) -> np.ndarray:
    """Index of the entity each ray sees (same order as :func:`ray_distances`), -1 for none."""
    dist, _ = ray_distances(env)
    idx = np.argmin(dist, axis=-1)
    d = np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0]
    return np.where(d <= env.config.view_range, idx, -1)


# ---------------------------------------------------------------------------
# random-policy data collection


@dataclass
class EpisodeLog:
    observations: list
    actions: list
    rewards: list

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


def rollout_random(config: WorldConfig, episode_seeds, rng: np.random.Generator,
                   keep_obs: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Uniform-random policy on a batch of fresh rooms.

    Returns (obs [n, T, W, 3] or None, returns [n]). Observations are those
    seen *before* each action.
    """
    env, obs = reset_batch(config, episode_seeds)
    T = config.episode_len
    frames = np.empty((env.n, T, config.width, 3)) if keep_obs else None
    returns = np.zeros(env.n)
    for t in range(T):
        if keep_obs:
            frames[:, t] = obs
        obs, rew, _ = step_batch(env, rng.integers(0, N_ACTIONS, size=env.n))
        returns += rew
    return frames, returns


def collect_random(config: WorldConfig, n_episodes: int, seed: int = 0,
                   chunk: int = 64) -> np.ndarray:
    """``n_episodes * episode_len`` random-policy states, episode-major order."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    ss = np.random.SeedSequence([config.rng_seed, seed, 0xC011EC7])
    layout_seed, action_seed = ss.generate_state(2)
    rng = np.random.default_rng(action_seed)
    out = np.empty((n_episodes * config.episode_len, config.width, 3))
    for start in range(0, n_episodes, chunk):
        ids = np.arange(start, min(start + chunk, n_episodes))
        frames, _ = rollout_random(config, int(layout_seed) * 1_000_003 + ids, rng)
        out[start * config.episode_len:(ids[-1] + 1) * config.episode_len] = frames.reshape(-1, config.width, 3)
    return out


# ---------------------------------------------------------------------------
# dataset file: "RSRL", u32 count, u32 width, u32 channels, f32 payload


def save_dataset(path: str | Path, states: np.ndarray) -> None:
    states = np.asarray(states)
    n, w, ch = states.shape
    with open(path, "wb") as fh:
        fh.write(b"RSRL")
        fh.write(np.array([n, w, ch], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(states, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"RSRL":
            raise ValueError(f"{path}: not a dataset file")
        n, w, ch = np.frombuffer(fh.read(12), dtype="<u4")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * w * ch:
        raise ValueError(f"{path}: payload has {data.size} values, header says {n * w * ch}")
    return data.reshape(int(n), int(w), int(ch)).astype(np.float64)
