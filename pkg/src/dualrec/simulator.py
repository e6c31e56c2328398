"""Synthetic world: users, creators, items and the daily loop that joins them.

Users carry latent taste vectors and a two-state Markov visit process;
creators post with a probability that rises with the interactions they
received the day before. Items inherit their creator's topic and quality.

Latent layout (``d_z`` coordinates): the leading ``d_z - 2`` are taste, then
one coordinate where items hold quality and users hold a constant 1, and one
where users hold their interaction propensity and items a constant 1. So the
affinity ``z_u . w_i`` is taste match + item quality + user propensity.

All per-event randomness comes from a counter-based hash of
``(seed, stream, day, ids...)`` so outcomes do not depend on evaluation order.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol

import numpy as np

from dualrec.core import CREATOR_VISIBLE_IDX, N_BINARY, N_CHANNELS

logger = logging.getLogger(__name__)

SOURCES = ("user_side", "dualrec/two_tower", "dualrec/i2i2u", "dualrec/i2u2u")
SOURCE_CODE = {s: k for k, s in enumerate(SOURCES)}

# hash stream tags
_VISIT, _POST, _FEEDBACK, _NOISE, _ITEM = 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# counter-based randomness
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def hash_uniform(*keys) -> np.ndarray:
    """Uniform [0, 1) values determined by the integer key arrays (broadcast)."""
    with np.errstate(over="ignore"):
        h = np.zeros(np.broadcast(*[np.asarray(k) for k in keys]).shape, dtype=np.uint64)
        for k in keys:
            h = _mix(h + _GOLD + np.asarray(k).astype(np.int64).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def hash_normal(*keys) -> np.ndarray:
    """Standard normals via Box-Muller over two hashed uniforms."""
    u1 = hash_uniform(*keys, 0)
    u2 = hash_uniform(*keys, 1)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class WorldConfig:
    n_users: int = 10_000
    n_creators: int = 1_000
    items_per_post: int = 1
    d_z: int = 16
    content_dim: int = 128
    # visits
    visit_rate: float = 0.3
    visit_concentration: float = 2.0
    rho: float = 0.6
    weekday_amplitude: float = 0.1
    burn_in_days: int = 30
    # latent structure
    taste_scale: float = 1.0
    item_taste_noise: float = 0.6
    creator_quality_sd: float = 0.5
    item_quality_sd: float = 0.8
    propensity_sd: float = 0.5
    content_noise: float = 0.5
    feedback_noise: float = 0.3
    # like, comment, follow, share, profile_visit, effective_view
    channel_bias: tuple = (-5.5, -7.0, -7.5, -7.5, -6.5, -3.0)
    watch_scale: float = 15.0
    watch_sigma: float = 0.5
    # creator incentive
    p0: float = 0.1
    gamma: float = 0.2
    s_star: float = 20.0
    seed: int = 0

    def validate(self) -> "WorldConfig":
        for name in ("n_users", "n_creators", "items_per_post", "burn_in_days", "content_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_z < 3:
            raise ConfigError("d_z must be >= 3 (taste plus quality and propensity slots)")
        for name in ("visit_rate", "p0", "weekday_amplitude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.p0 + self.gamma > 1.0 or self.gamma < 0:
            raise ConfigError("p0 + gamma must stay within [0, 1]")
        if self.s_star <= 0 or self.visit_concentration <= 0:
            raise ConfigError("s_star and visit_concentration must be positive")
        if len(self.channel_bias) != N_BINARY:
            raise ConfigError(f"channel_bias needs {N_BINARY} entries")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_bias"] = list(self.channel_bias)
        return d


def creator_post_prob(config: WorldConfig, received) -> np.ndarray:
    """p = min(1, p0 + gamma * min(received, s*) / s*)."""
    r = np.maximum(np.asarray(received, dtype=float), 0.0)
    return np.minimum(1.0, config.p0 + config.gamma * np.minimum(r, config.s_star) / config.s_star)


# ---------------------------------------------------------------------------
# world state
# ---------------------------------------------------------------------------


class ItemTable:
    """Growable column store for items; ids are dense and assigned in order."""

    _cols = {
        "creator": np.int64,
        "day": np.int64,
        "arm": np.int64,
        "exposures": np.int64,
        "positives": np.int64,
        "interactions": np.int64,
    }

    def __init__(self, d_z: int, content_dim: int):
        self.n = 0
        self._cap = 0
        self.d_z = d_z
        self.content_dim = content_dim
        self._data = {k: np.zeros(0, dtype=t) for k, t in self._cols.items()}
        self._w = np.zeros((0, d_z))
        self._content = np.zeros((0, content_dim))

    def _reserve(self, n: int) -> None:
        if n <= self._cap:
            return
        cap = max(n, 2 * self._cap, 256)
        for k, v in self._data.items():
            new = np.zeros(cap, dtype=v.dtype)
            new[: self.n] = v[: self.n]
            self._data[k] = new
        for name in ("_w", "_content"):
            old = getattr(self, name)
            new = np.zeros((cap, old.shape[1]))
            new[: self.n] = old[: self.n]
            setattr(self, name, new)
        self._cap = cap

    def append(self, creator, day: int, arm, w, content) -> np.ndarray:
        k = len(creator)
        self._reserve(self.n + k)
        ids = np.arange(self.n, self.n + k)
        self._data["creator"][ids] = creator
        self._data["day"][ids] = day
        self._data["arm"][ids] = arm
        self._w[ids] = w
        self._content[ids] = content
        self.n += k
        return ids

    def __len__(self) -> int:
        return self.n

    def __getattr__(self, name):
        data = self.__dict__.get("_data")
        if data is not None and name in data:
            return data[name][: self.n]
        raise AttributeError(name)

    @property
    def w(self) -> np.ndarray:
        return self._w[: self.n]

    @property
    def content(self) -> np.ndarray:
        return self._content[: self.n]


@dataclass
class World:
    config: WorldConfig
    user_z: np.ndarray
    user_pi: np.ndarray
    visits: np.ndarray  # (users, burn_in + days) bool
    creator_topic: np.ndarray
    creator_quality: np.ndarray
    content_proj: np.ndarray
    items: ItemTable
    user_arm: np.ndarray
    creator_arm: np.ndarray
    received_yesterday: np.ndarray
    cum_interactions: np.ndarray  # (users,) creator-visible actions so far
    interaction_history: list = field(default_factory=list)  # per-day cumulative snapshots
    day: int = 0
    seen: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_z)

    @property
    def n_creators(self) -> int:
        return len(self.creator_topic)

    @property
    def d_z(self) -> int:
        return self.user_z.shape[1]

    def visit_column(self, day: int) -> int:
        return self.config.burn_in_days + day

    def visit_matrix(self, upto_day: int) -> np.ndarray:
        """Visit bits from burn-in start through ``upto_day`` inclusive."""
        return self.visits[:, : self.visit_column(upto_day) + 1]

    def interaction_matrix(self, upto_day: int) -> np.ndarray:
        """Cumulative interaction counts aligned with ``visit_matrix``."""
        n_cols = self.visit_column(upto_day) + 1
        out = np.zeros((self.n_users, n_cols))
        for d, snap in enumerate(self.interaction_history[: upto_day + 1]):
            out[:, self.visit_column(d)] = snap
        return out

    def weekday(self, day: int) -> int:
        return (self.visit_column(day)) % 7

    def affinity(self, users, items) -> np.ndarray:
        return np.einsum("nd,nd->n", self.user_z[users], self.items.w[items])

    def mark_seen(self, users, items) -> None:
        need = len(self.items)
        if self.seen is None or self.seen.shape[1] < need:
            cap = max(need, 2 * (0 if self.seen is None else self.seen.shape[1]), 1024)
            grown = np.zeros((self.n_users, cap), dtype=bool)
            if self.seen is not None:
                grown[:, : self.seen.shape[1]] = self.seen
            self.seen = grown
        self.seen[users, items] = True

    def seen_block(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if self.seen is None:
            return np.zeros((len(users), len(items)), dtype=bool)
        out = np.zeros((len(users), len(items)), dtype=bool)
        inside = items < self.seen.shape[1]
        out[:, inside] = self.seen[np.ix_(users, items[inside])]
        return out


def _visit_prob(config: WorldConfig, pi: np.ndarray, prev: np.ndarray, weekday: int) -> np.ndarray:
    base = np.where(prev, pi + config.rho * (1.0 - pi), pi * (1.0 - config.rho))
    mod = 1.0 + config.weekday_amplitude * np.sin(2.0 * np.pi * weekday / 7.0)
    return np.clip(base * mod, 0.0, 1.0)


def init_population(config: WorldConfig) -> World:
    """Fresh world with ``burn_in_days`` of visit history and no items yet."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d_t = config.d_z - 2
    # per-coordinate sd so that a user-topic dot product has sd taste_scale
    s = np.sqrt(config.taste_scale) / d_t**0.25
    user_z = np.zeros((config.n_users, config.d_z))
    user_z[:, :d_t] = rng.normal(0, s, (config.n_users, d_t))
    user_z[:, d_t] = 1.0
    user_z[:, d_t + 1] = rng.normal(0, config.propensity_sd, config.n_users)
    a = config.visit_rate * config.visit_concentration
    b = (1.0 - config.visit_rate) * config.visit_concentration
    pi = rng.beta(a, b, config.n_users) if 0 < config.visit_rate < 1 else np.full(config.n_users, config.visit_rate)
    topic = rng.normal(0, s, (config.n_creators, d_t))
    quality = rng.normal(0, config.creator_quality_sd, config.n_creators)
    proj = rng.normal(0, 1.0 / np.sqrt(d_t + 1), (config.content_dim, d_t + 1))

    visits = np.zeros((config.n_users, config.burn_in_days + 64), dtype=bool)
    state = rng.random(config.n_users) < pi
    for t in range(config.burn_in_days):
        p = _visit_prob(config, pi, state, t % 7)
        state = hash_uniform(config.seed, _VISIT, t - config.burn_in_days, np.arange(config.n_users)) < p
        visits[:, t] = state
    world = World(
        config=config,
        user_z=user_z,
        user_pi=pi,
        visits=visits,
        creator_topic=topic,
        creator_quality=quality,
        content_proj=proj,
        items=ItemTable(config.d_z, config.content_dim),
        user_arm=np.zeros(config.n_users, dtype=np.int64),
        creator_arm=np.zeros(config.n_creators, dtype=np.int64),
        received_yesterday=np.zeros(config.n_creators),
        cum_interactions=np.zeros(config.n_users),
    )
    return world


def set_diversion(world: World, user_arm, creator_arm) -> None:
    world.user_arm = np.asarray(user_arm, dtype=np.int64)
    world.creator_arm = np.asarray(creator_arm, dtype=np.int64)


# ---------------------------------------------------------------------------
# daily processes
# ---------------------------------------------------------------------------


def sample_uploads(world: World, day: int) -> np.ndarray:
    """Create today's items; returns their ids."""
    cfg = world.config
    p = creator_post_prob(cfg, world.received_yesterday)
    creators = np.arange(world.n_creators)
    posting = creators[hash_uniform(cfg.seed, _POST, day, creators) < p]
    creator = np.repeat(posting, cfg.items_per_post)
    k = len(creator)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    ids = np.arange(len(world.items), len(world.items) + k)
    d_t = world.d_z - 2
    dims = np.arange(world.d_z + cfg.content_dim)
    noise = hash_normal(cfg.seed, _ITEM, ids[:, None], dims[None, :])
    w = np.zeros((k, world.d_z))
    s = np.sqrt(cfg.taste_scale) / d_t**0.25
    w[:, :d_t] = world.creator_topic[creator] + cfg.item_taste_noise * s * noise[:, :d_t]
    w[:, d_t] = world.creator_quality[creator] + cfg.item_quality_sd * noise[:, d_t]
    w[:, d_t + 1] = 1.0
    latent = w[:, : d_t + 1]
    content = latent @ world.content_proj.T + cfg.content_noise * noise[:, world.d_z :]
    return world.items.append(creator, day, world.creator_arm[creator], w, content)


def sample_visits(world: World, day: int) -> np.ndarray:
    """Advance the visit chain to ``day``; returns visiting user ids."""
    cfg = world.config
    col = world.visit_column(day)
    if col >= world.visits.shape[1]:
        grown = np.zeros((world.n_users, 2 * world.visits.shape[1]), dtype=bool)
        grown[:, : world.visits.shape[1]] = world.visits
        world.visits = grown
    prev = world.visits[:, col - 1]
    p = _visit_prob(cfg, world.user_pi, prev, world.weekday(day))
    users = np.arange(world.n_users)
    today = hash_uniform(cfg.seed, _VISIT, day, users) < p
    world.visits[:, col] = today
    return users[today]


def generate_feedback(world: World, users, items, day: int) -> np.ndarray:
    """(n, 7) feedback rows; binary channel m fires with sigmoid(z.w + b_m + noise)."""
    cfg = world.config
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = len(users)
    out = np.zeros((n, N_CHANNELS))
    if n == 0:
        return out
    a = world.affinity(users, items)
    if cfg.feedback_noise > 0:
        a = a + cfg.feedback_noise * hash_normal(cfg.seed, _NOISE, day, users, items)
    bias = np.asarray(cfg.channel_bias, dtype=float)
    for m in range(N_BINARY):
        u = hash_uniform(cfg.seed, _FEEDBACK, day, users, items, m)
        out[:, m] = u < sigmoid(a + bias[m])
    z = hash_normal(cfg.seed, _FEEDBACK, day, users, items, N_BINARY)
    out[:, N_BINARY] = np.minimum(cfg.watch_scale * np.exp(0.5 * a + cfg.watch_sigma * z), 600.0)
    return out


def channel_probabilities(world: World, users, items) -> np.ndarray:
    """Noise-free firing probabilities of the binary channels."""
    a = world.affinity(np.asarray(users), np.asarray(items))
    return sigmoid(a[:, None] + np.asarray(world.config.channel_bias)[None, :])


# ---------------------------------------------------------------------------
# day orchestration
# ---------------------------------------------------------------------------


@dataclass
class ExposureBatch:
    users: np.ndarray
    items: np.ndarray
    ranks: np.ndarray
    sources: np.ndarray  # codes into SOURCES
    feedback: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "ExposureBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), np.zeros((0, N_CHANNELS)))

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class MatchBatch:
    users: np.ndarray
    items: np.ndarray
    sources: np.ndarray  # codes into SOURCES

    @classmethod
    def empty(cls) -> "MatchBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())


class Engine(Protocol):
    arm: int

    def serve(self, world: World, day: int, visitors: np.ndarray) -> ExposureBatch: ...

    def observe(self, world: World, day: int, batch: ExposureBatch) -> None: ...

    def end_of_day(self, world: World, day: int, uploads: np.ndarray) -> MatchBatch: ...


@dataclass
class DayLog:
    day: int
    uploads: np.ndarray
    visitors: np.ndarray
    exposures: ExposureBatch
    exposure_arm: np.ndarray
    matches: MatchBatch
    match_arm: np.ndarray
    lam: dict = field(default_factory=dict)


def _concat_exposures(parts: list[ExposureBatch]) -> ExposureBatch:
    if not parts:
        return ExposureBatch.empty()
    return ExposureBatch(
        np.concatenate([p.users for p in parts]),
        np.concatenate([p.items for p in parts]),
        np.concatenate([p.ranks for p in parts]),
        np.concatenate([p.sources for p in parts]),
    )


def step_day(world: World, engines: Mapping[int, Engine]) -> DayLog:
    """Advance one day.

    Order: uploads, visits, serving (using matches made the evening before),
    feedback, creator tallies, then each engine's end-of-day work, which
    refreshes availability and matches today's uploads for tomorrow.
    """
    day = world.day
    uploads = sample_uploads(world, day)
    visitors = sample_visits(world, day)

    parts, arms = [], []
    for arm, engine in sorted(engines.items()):
        vis = visitors[world.user_arm[visitors] == arm]
        batch = engine.serve(world, day, vis)
        if len(batch):
            creators = world.items.creator[batch.items]
            if np.any(world.creator_arm[creators] != arm):
                raise RuntimeError(f"arm {arm} exposed an item from another arm")
        parts.append(batch)
        arms.append(np.full(len(batch), arm, dtype=np.int64))
    expo = _concat_exposures(parts)
    expo_arm = np.concatenate(arms) if arms else np.zeros(0, dtype=np.int64)
    expo.feedback = generate_feedback(world, expo.users, expo.items, day)

    # tallies
    visible = expo.feedback[:, CREATOR_VISIBLE_IDX].sum(axis=1)
    positive = expo.feedback[:, :N_BINARY].any(axis=1)
    it = world.items
    np.add.at(it._data["exposures"], expo.items, 1)
    np.add.at(it._data["positives"], expo.items, positive.astype(np.int64))
    np.add.at(it._data["interactions"], expo.items, visible.astype(np.int64))
    received = np.zeros(world.n_creators)
    np.add.at(received, it.creator[expo.items], visible)
    world.received_yesterday = received
    np.add.at(world.cum_interactions, expo.users, visible)
    world.interaction_history.append(world.cum_interactions.copy())
    world.mark_seen(expo.users, expo.items)

    for arm, engine in sorted(engines.items()):
        sel = expo_arm == arm
        engine.observe(
            world,
            day,
            ExposureBatch(expo.users[sel], expo.items[sel], expo.ranks[sel], expo.sources[sel], expo.feedback[sel]),
        )

    m_parts, m_arms, lam = [], [], {}
    for arm, engine in sorted(engines.items()):
        arm_uploads = uploads[it.arm[uploads] == arm]
        mb = engine.end_of_day(world, day, arm_uploads)
        m_parts.append(mb)
        m_arms.append(np.full(len(mb.users), arm, dtype=np.int64))
        if hasattr(engine, "lam"):
            lam[arm] = engine.lam
    matches = MatchBatch(
        np.concatenate([m.users for m in m_parts]) if m_parts else np.zeros(0, dtype=np.int64),
        np.concatenate([m.items for m in m_parts]) if m_parts else np.zeros(0, dtype=np.int64),
        np.concatenate([m.sources for m in m_parts]) if m_parts else np.zeros(0, dtype=np.int64),
    )
    log = DayLog(
        day=day,
        uploads=uploads,
        visitors=visitors,
        exposures=expo,
        exposure_arm=expo_arm,
        matches=matches,
        match_arm=np.concatenate(m_arms) if m_arms else np.zeros(0, dtype=np.int64),
        lam=lam,
    )
    world.day += 1
    return log
