"""Serve-time merge of creator-side matches into user-side ranking.

When user ``u`` visits, items in the matching set ``D_u`` compete with the
user-side candidates under ``f' = f + lambda * g``; every other item keeps
``f``. An exposure counts as DualRec's only when the item is absent from the
top-K over user-side candidates alone, i.e. the cache retrieval or the boost
is what put it on the slate. The DualRec share is monotone in ``lambda``.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dualrec.similarity import topk_desc
from dualrec.uac import AvailableUserStore

logger = logging.getLogger(__name__)

USER_SIDE = "user_side"
DUALREC_PREFIX = "dualrec/"
DEFAULT_QUOTA = 0.02


class ScoringError(ValueError):
    pass


@dataclass
class ServePolicy:
    lam: float = 1.0
    K: int = 10
    q_dual: float = DEFAULT_QUOTA

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0.0 <= self.q_dual <= 1.0:
            raise ValueError(f"q_dual must lie in [0, 1], got {self.q_dual}")
        if self.K < 1:
            raise ValueError("K must be >= 1")


class ResultCache:
    """Read view of the store's matching sets minus items already served today."""

    def __init__(self, store: AvailableUserStore):
        self.store = store
        self._consumed: dict[int, set[int]] = {}
        self._day = store.day
        self._lock = threading.Lock()

    def _sync(self) -> None:
        if self.store.day != self._day:
            self._consumed = {}
            self._day = self.store.day

    def view(self, u: int) -> dict[int, tuple[float, str]]:
        """item -> (g, retrieval source) for today's unserved matches of ``u``."""
        with self._lock:
            self._sync()
            done = self._consumed.get(int(u), ())
            return {i: v for i, v in self.store.matched_with_scores(u).items() if i not in done}

    def consume(self, u: int, items: Sequence[int]) -> None:
        with self._lock:
            self._sync()
            self._consumed.setdefault(int(u), set()).update(int(i) for i in items)


def combined_scores(items, f_scores, g_scores: Mapping[int, float], matched, lam: float) -> np.ndarray:
    """f' = f + lam * g for items in ``matched``; other scores unchanged."""
    f = np.asarray(f_scores, dtype=float)
    out = f.copy()
    matched = set(int(i) for i in matched)
    for k, i in enumerate(items):
        i = int(i)
        if i in matched:
            if i not in g_scores:
                raise ScoringError(f"matched item {i} has no creator-side score")
            out[k] = f[k] + lam * g_scores[i]
    return out


@dataclass
class Slate:
    user_id: int
    items: list[int] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def serve_user_request(
    u: int,
    K: int,
    user_side_items,
    user_side_f,
    cache: ResultCache | None,
    policy: ServePolicy,
    matched_f: Mapping[int, float] | None = None,
) -> Slate:
    """Top-K slate for a visiting user.

    ``matched_f`` gives the user-side score ``f`` of the user's matched items
    (needed when they are not among the user-side candidates).
    """
    items = np.asarray(user_side_items, dtype=np.int64)
    f = np.asarray(user_side_f, dtype=float)
    base = items[topk_desc(f, items, K)] if len(items) else items
    matches = cache.view(u) if cache is not None else {}
    if not matches:
        pos = topk_desc(f, items, K) if len(items) else np.zeros(0, dtype=np.int64)
        return Slate(u, items[pos].tolist(), [USER_SIDE] * len(pos), f[pos].tolist())

    extra = [i for i in matches if i not in set(items.tolist())]
    if extra:
        if matched_f is None or any(i not in matched_f for i in extra):
            raise ScoringError("user-side scores missing for matched items")
        items = np.concatenate([items, np.array(extra, dtype=np.int64)])
        f = np.concatenate([f, [matched_f[i] for i in extra]])
    g = {i: v[0] for i, v in matches.items()}
    fp = combined_scores(items, f, g, matches.keys(), policy.lam)
    pos = topk_desc(fp, items, K)
    chosen = items[pos]
    base_set = set(base.tolist())
    sources = []
    served = []
    for i in chosen.tolist():
        if i in matches:
            served.append(i)
            if i not in base_set:
                sources.append(DUALREC_PREFIX + matches[i][1])
                continue
        sources.append(USER_SIDE)
    if cache is not None and served:
        cache.consume(u, served)
    return Slate(u, chosen.tolist(), sources, fp[pos].tolist())


def is_dualrec(source: str) -> bool:
    return source.startswith(DUALREC_PREFIX)


@dataclass
class LambdaController:
    """Multiplicative controller steering the DualRec exposure share to ``target``.

    ``lam <- lam * exp(gain * (target - share) / target)``, clipped to
    ``[lam_min, lam_max]``.
    """

    target: float = DEFAULT_QUOTA
    lam: float = 1.0
    gain: float = 0.5
    lam_min: float = 1e-4
    lam_max: float = 1e4
    history: list[tuple[float, float]] = field(default_factory=list)

    def update(self, share: float) -> float:
        self.history.append((self.lam, share))
        if self.target <= 0:
            self.lam = self.lam_min
            return self.lam
        step = self.gain * (self.target - share) / self.target
        step = max(min(step, 2.0), -2.0)
        self.lam = float(min(max(self.lam * math.exp(step), self.lam_min), self.lam_max))
        return self.lam
