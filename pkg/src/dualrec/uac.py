"""User availability: who can receive creator-side matches today.

A user is available when predicted active for the day and holding fewer than
``Q`` matched items. The store keeps the matching sets and the available set
in step under one lock so that no reader ever sees a user above capacity.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from dualrec.similarity import topk_desc

logger = logging.getLogger(__name__)

DEFAULT_Q = 10
DEFAULT_TAU = 0.5
HISTORY_DAYS = 30


class AvailabilityError(ValueError):
    """A user was assigned while outside the available set."""


class InsufficientHistory(ValueError):
    pass


# ---------------------------------------------------------------------------
# activity prediction
# ---------------------------------------------------------------------------


def activity_features(visits: np.ndarray, interactions: np.ndarray | None, day: int, weekday: int) -> np.ndarray:
    """Rows for predicting a visit on ``day + 1`` from data up to ``day``.

    ``visits`` is (users, days) with column ``t`` = visited on day ``t``;
    ``interactions`` holds cumulative interaction counts with the same layout.
    ``weekday`` is the day of week of ``day + 1``.
    """
    lo = day - HISTORY_DAYS + 1
    if lo < 0:
        raise InsufficientHistory(f"need {HISTORY_DAYS} days of history before day {day}")
    n = visits.shape[0]
    out = np.zeros((n, HISTORY_DAYS + 8))
    out[:, :HISTORY_DAYS] = visits[:, lo : day + 1]
    out[:, HISTORY_DAYS + weekday % 7] = 1.0
    if interactions is not None:
        out[:, -1] = np.log1p(interactions[:, day])
    return out


@dataclass
class ActivityModel:
    classifier: LogisticRegression
    tau: float = DEFAULT_TAU

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return self.classifier.predict_proba(features)[:, 1]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.predict_proba(features) >= self.tau


def train_activity_model(
    visits: np.ndarray,
    interactions: np.ndarray | None = None,
    weekday_of: Callable[[int], int] = lambda t: t % 7,
    tau: float = DEFAULT_TAU,
    max_rows: int = 200_000,
    seed: int = 0,
    C: float = 1.0,
) -> ActivityModel:
    """Logistic regression on (features at day t, visited at t + 1) pairs."""
    visits = np.asarray(visits)
    n_users, n_days = visits.shape
    if n_users == 0 or n_days < HISTORY_DAYS + 1:
        raise InsufficientHistory(f"need at least {HISTORY_DAYS + 1} days of visit history, got {n_days}")
    X, y = [], []
    for t in range(HISTORY_DAYS - 1, n_days - 1):
        X.append(activity_features(visits, interactions, t, weekday_of(t + 1)))
        y.append(visits[:, t + 1])
    X = np.vstack(X)
    y = np.concatenate(y).astype(int)
    if len(y) > max_rows:
        keep = np.sort(np.random.default_rng(seed).choice(len(y), max_rows, replace=False))
        X, y = X[keep], y[keep]
    if len(np.unique(y)) < 2:
        # degenerate history: a constant predictor still has to be expressible
        X = np.vstack([X, np.zeros((1, X.shape[1]))])
        y = np.concatenate([y, [1 - y[0]]])
    clf = LogisticRegression(C=C, max_iter=500)
    clf.fit(X, y)
    return ActivityModel(clf, tau)


# ---------------------------------------------------------------------------
# available user store
# ---------------------------------------------------------------------------


class AvailableUserStore:
    """Activity flags ``a_u``, matching sets ``D_u`` and capacity ``Q``.

    ``enforce_capacity=False`` turns the cap off (matching sets grow without
    bound); it exists to measure what the cap prevents.
    """

    def __init__(self, users: Sequence[int], Q: int = DEFAULT_Q, enforce_capacity: bool = True):
        if Q < 1:
            raise ValueError("Q must be >= 1")
        self.ids = np.array(sorted({int(u) for u in users}), dtype=np.int64)
        self._pos = {int(u): k for k, u in enumerate(self.ids)}
        self.Q = Q
        self.enforce_capacity = enforce_capacity
        self.day = -1
        self._lock = threading.RLock()
        self._active = np.zeros(len(self.ids), dtype=bool)
        self._count = np.zeros(len(self.ids), dtype=np.int64)
        self._avail = np.zeros(len(self.ids), dtype=bool)
        self._matched: list[dict[int, tuple[float, str]]] = [{} for _ in self.ids]

    def __len__(self) -> int:
        return len(self.ids)

    def _p(self, u) -> int:
        try:
            return self._pos[int(u)]
        except KeyError:
            raise AvailabilityError(f"user {u} is not managed by this store") from None

    def set_activity(self, active, day: int | None = None) -> None:
        """Replace all activity flags and clear every matching set."""
        active = np.asarray(active, dtype=bool)
        if active.shape != self._active.shape:
            raise ValueError("activity vector does not match the user count")
        with self._lock:
            self._active = active.copy()
            self._count[:] = 0
            self._matched = [{} for _ in self.ids]
            self._avail = self._active.copy()
            if day is not None:
                self.day = day

    def recompute_available(self) -> np.ndarray:
        """Available mask evaluated from raw state (the reference definition)."""
        with self._lock:
            counts = np.array([len(d) for d in self._matched], dtype=np.int64)
            if not self.enforce_capacity:
                return self._active.copy()
            return self._active & (counts < self.Q)

    def available_mask(self) -> np.ndarray:
        with self._lock:
            return self._avail.copy()

    def available(self) -> np.ndarray:
        with self._lock:
            return self.ids[self._avail]

    def is_available(self, u) -> bool:
        with self._lock:
            return bool(self._avail[self._p(u)])

    def active(self, u) -> bool:
        return bool(self._active[self._p(u)])

    def matched(self, u) -> list[int]:
        with self._lock:
            return list(self._matched[self._p(u)])

    def matched_with_scores(self, u) -> dict[int, tuple[float, str]]:
        with self._lock:
            return dict(self._matched[self._p(u)])

    def size(self, u) -> int:
        return int(self._count[self._p(u)])

    def sizes(self) -> np.ndarray:
        with self._lock:
            return self._count.copy()

    def _add(self, k: int, item: int, score: float, source: str) -> None:
        d = self._matched[k]
        if item in d:
            return
        d[item] = (score, source)
        self._count[k] += 1
        if self.enforce_capacity and self._count[k] >= self.Q:
            self._avail[k] = False

    def assign(self, item: int, users, scores=None, sources=None) -> list[int]:
        """Add ``item`` to every ``D_u``; all users must be available.

        Raises AvailabilityError (and changes nothing) if any user is not.
        """
        users = [int(u) for u in users]
        scores = [0.0] * len(users) if scores is None else list(scores)
        sources = [""] * len(users) if sources is None else list(sources)
        with self._lock:
            ks = [self._p(u) for u in users]
            bad = [u for u, k in zip(users, ks) if not self._avail[k]]
            if bad:
                raise AvailabilityError(f"users {bad[:5]} are not available for item {item}")
            for k, s, src in zip(ks, scores, sources):
                self._add(k, int(item), float(s), src)
        return users

    def assign_ranked(self, item: int, ranked, scores, sources, L: int) -> list[int]:
        """Walk a ranked list, skipping users that became unavailable, until ``L`` are assigned."""
        out = []
        with self._lock:
            for u, s, src in zip(ranked, scores, sources):
                if len(out) >= L:
                    break
                k = self._pos.get(int(u))
                if k is None or not self._avail[k]:
                    continue
                if int(item) in self._matched[k]:
                    continue
                self._add(k, int(item), float(s), src)
                out.append(int(u))
        return out

    def to_jsonl(self, path: str | Path) -> None:
        with self._lock, open(path, "w") as fh:
            for k, u in enumerate(self.ids):
                rec = {"day": self.day, "user_id": int(u), "a_u": int(self._active[k]), "D_u": list(self._matched[k])}
                fh.write(json.dumps(rec) + "\n")


def refresh_daily(
    store: AvailableUserStore,
    model: ActivityModel | None,
    features: np.ndarray | None = None,
    day: int | None = None,
) -> AvailableUserStore:
    """Recompute every ``a_u`` for the coming day and empty all matching sets.

    With ``model=None`` every user counts as active (availability then only
    reflects capacity).
    """
    if model is None:
        active = np.ones(len(store), dtype=bool)
    else:
        active = model.predict(features)
    store.set_activity(active, day)
    logger.debug("refresh day=%s active=%d/%d", day, int(active.sum()), len(store))
    return store


def assign(store: AvailableUserStore, item: int, users) -> AvailableUserStore:
    store.assign(item, users)
    return store


# ---------------------------------------------------------------------------
# per-item matching driver
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    item_id: int
    users: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.users)


def merge_candidates(retrieved: Mapping[str, Sequence[int]]) -> tuple[np.ndarray, list[str]]:
    """Union of retrieval outputs; each user keeps the first source that found it."""
    seen: dict[int, str] = {}
    for source, users in retrieved.items():
        for u in users:
            seen.setdefault(int(u), source)
    ids = np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))
    return ids, list(seen.values())


def dualrec_recommend(
    store: AvailableUserStore,
    item_id: int,
    L: int,
    retrieve: Callable[[int, np.ndarray], Mapping[str, Sequence[int]]],
    score: Callable[[int, np.ndarray], np.ndarray],
) -> MatchResult:
    """Match one item to up to ``L`` users drawn from the available set.

    ``retrieve(item, available_ids)`` returns per-source candidate lists that
    must already be restricted to ``available_ids``; ``score(item, users)``
    returns creator-side scores.
    """
    avail = store.available()
    if len(avail) == 0:
        return MatchResult(item_id)
    cands, sources = merge_candidates(retrieve(item_id, avail))
    if len(cands) == 0:
        return MatchResult(item_id)
    inside = np.isin(cands, avail)
    if not np.all(inside):
        raise AvailabilityError(f"retrieval returned {int((~inside).sum())} unavailable users")
    g = np.asarray(score(item_id, cands), dtype=float)
    order = topk_desc(g, cands, len(cands))
    src = [sources[k] for k in order]
    assigned = store.assign_ranked(item_id, cands[order], g[order], src, L)
    lookup = {int(cands[k]): (float(g[k]), sources[k]) for k in order}
    return MatchResult(
        item_id,
        assigned,
        [lookup[u][0] for u in assigned],
        [lookup[u][1] for u in assigned],
    )
