"""Side features for the prediction models, kept as running aggregates.

User features pool the content of items the user engaged with. Item features
are the content vector plus optional extras: the pooled profile of users who
engaged with the item, and the same pool and engagement rate over the item's
content neighbours (so brand-new items still get audience information).

Aggregates are updated after each day's feedback; ``snapshot`` freezes the
state at a day boundary so training samples never see their own labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 10


def _grow(a: np.ndarray, n: int) -> np.ndarray:
    if n <= len(a):
        return a
    new = np.zeros((max(n, 2 * len(a), 16),) + a.shape[1:], dtype=a.dtype)
    new[: len(a)] = a
    return new


def content_neighbors(query: np.ndarray, pool: np.ndarray, pool_ids: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` pool ids by cosine for each query row, padded with -1.

    Only positive similarities count. Ties break towards the smaller id.
    """
    out = np.full((len(query), k), -1, dtype=np.int64)
    if len(pool) == 0 or len(query) == 0 or k == 0:
        return out
    qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
    pn = pool / np.maximum(np.linalg.norm(pool, axis=1, keepdims=True), 1e-12)
    sims = qn @ pn.T
    kk = min(k, len(pool_ids))
    for r in range(len(query)):
        s = sims[r]
        order = np.lexsort((pool_ids, -s))[:kk]
        order = order[s[order] > 0]
        out[r, : len(order)] = pool_ids[order]
    return out


@dataclass
class FeatureSnapshot:
    """Frozen feature state at the start of ``day``."""

    day: int
    user_pool: np.ndarray
    user_stats: np.ndarray
    item_content: np.ndarray
    item_audience: np.ndarray
    item_stats: np.ndarray
    item_neighbors: np.ndarray

    @property
    def content_dim(self) -> int:
        return self.item_content.shape[1]

    @property
    def user_dim(self) -> int:
        return self.content_dim + 3

    @property
    def item_dim(self) -> int:
        return 3 * self.content_dim + 5

    def user_features(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        n = len(users)
        return np.hstack([self.user_pool[users], self.user_stats[users], np.ones((n, 1))])

    def item_features(self, items, extra: bool = True) -> np.ndarray:
        """Item rows; with ``extra`` off the audience-derived blocks are zero."""
        items = np.asarray(items, dtype=np.int64)
        n, d = len(items), self.content_dim
        out = np.zeros((n, self.item_dim))
        out[:, :d] = self.item_content[items]
        out[:, -1] = 1.0
        if not extra or n == 0:
            return out
        out[:, d : 2 * d] = self.item_audience[items]
        out[:, 2 * d : 2 * d + 2] = self.item_stats[items]
        nb = self.item_neighbors[items]
        valid = nb >= 0
        cnt = valid.sum(axis=1)
        safe = np.where(valid, nb, 0)
        w = valid[..., None].astype(float)
        has = cnt > 0
        denom = np.maximum(cnt, 1)[:, None]
        out[:, 2 * d + 2 : 3 * d + 2] = (self.item_audience[safe] * w).sum(axis=1) / denom
        out[:, 3 * d + 2 : 3 * d + 4] = (self.item_stats[safe] * w).sum(axis=1) / denom
        out[~has, 2 * d + 2 : 3 * d + 4] = 0.0
        return out


class FeatureState:
    """Mutable aggregates over users and items, indexed by dense integer id."""

    def __init__(self, n_users: int, content_dim: int, n_neighbors: int = DEFAULT_NEIGHBORS):
        self.content_dim = content_dim
        self.n_neighbors = n_neighbors
        self.n_items = 0
        self.user_sum = np.zeros((n_users, content_dim))
        self.user_pos = np.zeros(n_users)
        self.user_expo = np.zeros(n_users)
        self.user_inter = np.zeros(n_users)
        self.item_content = np.zeros((0, content_dim))
        self.item_aud_sum = np.zeros((0, content_dim))
        self.item_pos = np.zeros(0)
        self.item_expo = np.zeros(0)
        self.item_neighbors = np.zeros((0, n_neighbors), dtype=np.int64)

    def add_items(self, item_ids, content: np.ndarray, neighbors: np.ndarray | None = None) -> None:
        """Register items with dense ids; ``neighbors`` rows are padded with -1."""
        item_ids = np.asarray(item_ids, dtype=np.int64)
        if len(item_ids) == 0:
            return
        n = int(item_ids.max()) + 1
        for name in ("item_content", "item_aud_sum", "item_pos", "item_expo"):
            setattr(self, name, _grow(getattr(self, name), n))
        if len(self.item_neighbors) < n:
            grown = np.full((len(self.item_content), self.n_neighbors), -1, dtype=np.int64)
            grown[: len(self.item_neighbors)] = self.item_neighbors
            self.item_neighbors = grown
        self.item_content[item_ids] = content
        if neighbors is not None:
            self.item_neighbors[item_ids] = neighbors[:, : self.n_neighbors]
        self.n_items = max(self.n_items, n)

    def observe(self, users, items, positive, interactions) -> None:
        """Fold one day's exposures in. ``interactions`` counts creator-visible actions."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        positive = np.asarray(positive, dtype=bool)
        # item audience uses the user profile before today's update
        profile = self.user_profile(users[positive])
        np.add.at(self.item_aud_sum, items[positive], profile)
        np.add.at(self.item_pos, items[positive], 1.0)
        np.add.at(self.item_expo, items, 1.0)
        np.add.at(self.user_sum, users[positive], self.item_content[items[positive]])
        np.add.at(self.user_pos, users[positive], 1.0)
        np.add.at(self.user_expo, users, 1.0)
        np.add.at(self.user_inter, users, np.asarray(interactions, dtype=float))

    def user_profile(self, users) -> np.ndarray:
        return self.user_sum[users] / np.maximum(self.user_pos[users], 1.0)[:, None]

    def snapshot(self, day: int) -> FeatureSnapshot:
        n = self.n_items
        expo = self.item_expo[:n]
        user_stats = np.stack(
            [np.log1p(self.user_expo), self.user_pos / np.maximum(self.user_expo, 1.0)], axis=1
        )
        item_stats = np.stack([np.log1p(expo), self.item_pos[:n] / np.maximum(expo, 1.0)], axis=1)
        audience = self.item_aud_sum[:n] / np.maximum(self.item_pos[:n], 1.0)[:, None]
        all_users = np.arange(len(self.user_sum))
        return FeatureSnapshot(
            day=day,
            user_pool=self.user_profile(all_users),
            user_stats=user_stats,
            item_content=self.item_content[:n].copy(),
            item_audience=audience,
            item_stats=item_stats,
            item_neighbors=self.item_neighbors[:n].copy(),
        )


def featurize(snapshot: FeatureSnapshot, users, items, use_extra_features: bool = True):
    """(user rows, item rows) for aligned ``users``/``items`` arrays."""
    return snapshot.user_features(users), snapshot.item_features(items, use_extra_features)
