"""Identifiers, feedback vectors, the interaction log and positive histories.

Every other module reads user/item histories from an :class:`InteractionLog`.
The log is columnar (numpy buffers) so that the simulator can append tens of
thousands of exposures per day without building one Python object per record.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

CHANNELS = (
    "like",
    "comment",
    "follow",
    "share",
    "profile_visit",
    "effective_view",
    "watch_time",
)
N_CHANNELS = len(CHANNELS)
BINARY_CHANNELS = CHANNELS[:6]
N_BINARY = len(BINARY_CHANNELS)
WATCH_TIME = CHANNELS.index("watch_time")
# channels a creator can see on their own item
CREATOR_VISIBLE = ("like", "comment", "follow", "share", "profile_visit")
CREATOR_VISIBLE_IDX = np.array([CHANNELS.index(c) for c in CREATOR_VISIBLE])

DEFAULT_HISTORY_CAP = 200


class IdentityError(KeyError):
    """Unknown user, item or creator id."""


class LogOrderError(ValueError):
    """A record would break the (day, insertion order) ordering of the log."""


def feedback_vector(**channels: float) -> np.ndarray:
    """Build a length-M feedback vector from named channels (missing = 0)."""
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise ValueError(f"unknown feedback channels: {sorted(unknown)}")
    fb = np.zeros(N_CHANNELS)
    for name, value in channels.items():
        fb[CHANNELS.index(name)] = value
    validate_feedback(fb)
    return fb


def validate_feedback(fb: np.ndarray) -> None:
    fb = np.asarray(fb, dtype=float)
    if fb.shape[-1] != N_CHANNELS:
        raise ValueError(f"feedback must have {N_CHANNELS} channels, got {fb.shape[-1]}")
    binary = fb[..., :N_BINARY]
    if not np.all((binary == 0) | (binary == 1)):
        raise ValueError("binary feedback channels must be 0 or 1")
    wt = fb[..., WATCH_TIME]
    if not np.all(np.isfinite(wt)) or np.any(wt < 0):
        raise ValueError("watch_time must be finite and non-negative")


def positive_mask(feedback: np.ndarray) -> np.ndarray:
    """Positive = any binary channel fired. Watch time alone never counts."""
    return np.asarray(feedback)[..., :N_BINARY].max(axis=-1) > 0


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    day: int
    feedback: tuple[float, ...]
    exposed: bool = True

    @property
    def positive(self) -> bool:
        return bool(positive_mask(np.asarray(self.feedback)))

    def to_json(self) -> dict:
        return {
            "user_id": int(self.user_id),
            "item_id": int(self.item_id),
            "day": int(self.day),
            "feedback": {c: _jsonable(v) for c, v in zip(CHANNELS, self.feedback)},
            "exposed": bool(self.exposed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Interaction":
        fb = feedback_vector(**obj.get("feedback", {}))
        return cls(
            user_id=int(obj["user_id"]),
            item_id=int(obj["item_id"]),
            day=int(obj["day"]),
            feedback=tuple(float(v) for v in fb),
            exposed=bool(obj.get("exposed", True)),
        )


def _jsonable(v: float):
    v = float(v)
    return int(v) if v.is_integer() else v


class PositiveHistory:
    """Ordered distinct positive partners per user and per item.

    Both directions are stored in full (first-seen order); :meth:`user` and
    :meth:`item` return the most recent ``cap`` entries. Storing the full
    relation keeps ``(u, i) in H_user[u] <=> u in H_item[i]`` exact even when
    one side is long enough to be truncated in its view.
    """

    def __init__(self, cap: int = DEFAULT_HISTORY_CAP):
        if cap < 1:
            raise ValueError("history cap must be >= 1")
        self.cap = cap
        self._by_user: dict[int, dict[int, None]] = {}
        self._by_item: dict[int, dict[int, None]] = {}

    def add(self, user_id: int, item_id: int) -> bool:
        items = self._by_user.setdefault(user_id, {})
        if item_id in items:
            return False
        items[item_id] = None
        self._by_item.setdefault(item_id, {})[user_id] = None
        return True

    def user(self, user_id: int) -> list[int]:
        return _tail(self._by_user.get(user_id), self.cap)

    def item(self, item_id: int) -> list[int]:
        return _tail(self._by_item.get(item_id), self.cap)

    def user_full(self, user_id: int) -> list[int]:
        return list(self._by_user.get(user_id, ()))

    def item_full(self, item_id: int) -> list[int]:
        return list(self._by_item.get(item_id, ()))

    def users(self) -> list[int]:
        return list(self._by_user)

    def items(self) -> list[int]:
        return list(self._by_item)

    def pairs(self) -> Iterator[tuple[int, int]]:
        for u, items in self._by_user.items():
            for i in items:
                yield u, i

    def copy(self) -> "PositiveHistory":
        other = PositiveHistory(self.cap)
        other._by_user = {u: dict(d) for u, d in self._by_user.items()}
        other._by_item = {i: dict(d) for i, d in self._by_item.items()}
        return other


def _tail(ordered: dict | None, cap: int) -> list[int]:
    if not ordered:
        return []
    keys = list(ordered)
    return keys[-cap:] if len(keys) > cap else keys


class _Buffer:
    """Growable numpy column."""

    def __init__(self, dtype, width: int | None = None):
        shape = (64,) if width is None else (64, width)
        self.data = np.zeros(shape, dtype=dtype)
        self.n = 0

    def extend(self, values: np.ndarray) -> None:
        k = len(values)
        need = self.n + k
        if need > len(self.data):
            cap = max(need, 2 * len(self.data))
            grown = np.zeros((cap,) + self.data.shape[1:], dtype=self.data.dtype)
            grown[: self.n] = self.data[: self.n]
            self.data = grown
        self.data[self.n : need] = values
        self.n = need


class InteractionLog:
    """Append-only log of (user, item, day, feedback, exposed) records.

    Users and items must be registered before they appear in a record; items
    carry their creator id and upload day. Appends are serialized by a lock;
    column accessors return copies so readers never see half-applied batches.
    """

    def __init__(self, history_cap: int = DEFAULT_HISTORY_CAP):
        self._lock = threading.RLock()
        self._users: set[int] = set()
        self._item_creator: dict[int, int] = {}
        self._item_day: dict[int, int] = {}
        self._user = _Buffer(np.int64)
        self._item = _Buffer(np.int64)
        self._day = _Buffer(np.int64)
        self._fb = _Buffer(np.float64, N_CHANNELS)
        self._exposed = _Buffer(np.bool_)
        self.history = PositiveHistory(history_cap)
        self._last_day = None

    # -- registry ---------------------------------------------------------
    def add_user(self, user_id: int) -> None:
        with self._lock:
            self._users.add(int(user_id))

    def add_users(self, user_ids: Iterable[int]) -> None:
        with self._lock:
            self._users.update(int(u) for u in user_ids)

    def add_item(self, item_id: int, creator_id: int, day: int) -> None:
        item_id, creator_id = int(item_id), int(creator_id)
        with self._lock:
            known = self._item_creator.get(item_id)
            if known is not None and known != creator_id:
                raise IdentityError(f"item {item_id} already belongs to creator {known}")
            self._item_creator[item_id] = creator_id
            self._item_day.setdefault(item_id, int(day))

    def has_user(self, user_id: int) -> bool:
        return int(user_id) in self._users

    def has_item(self, item_id: int) -> bool:
        return int(item_id) in self._item_creator

    def creator_of(self, item_id: int) -> int:
        try:
            return self._item_creator[int(item_id)]
        except KeyError:
            raise IdentityError(f"unknown item {item_id}") from None

    def upload_day(self, item_id: int) -> int:
        try:
            return self._item_day[int(item_id)]
        except KeyError:
            raise IdentityError(f"unknown item {item_id}") from None

    @property
    def users(self) -> list[int]:
        return sorted(self._users)

    @property
    def items(self) -> list[int]:
        return sorted(self._item_creator)

    # -- appends ----------------------------------------------------------
    def record(self, rec: Interaction) -> "InteractionLog":
        self.extend(
            np.array([rec.user_id]),
            np.array([rec.item_id]),
            rec.day,
            np.asarray(rec.feedback, dtype=float)[None, :],
            np.array([rec.exposed]),
        )
        return self

    def extend(self, user_ids, item_ids, day: int, feedback, exposed=None) -> None:
        """Append a batch of records that share one day."""
        user_ids = np.asarray(user_ids, dtype=np.int64).ravel()
        item_ids = np.asarray(item_ids, dtype=np.int64).ravel()
        feedback = np.asarray(feedback, dtype=float).reshape(len(user_ids), N_CHANNELS)
        if exposed is None:
            exposed = np.ones(len(user_ids), dtype=bool)
        exposed = np.asarray(exposed, dtype=bool).ravel()
        if not (len(user_ids) == len(item_ids) == len(exposed)):
            raise ValueError("column lengths differ")
        validate_feedback(feedback)
        day = int(day)
        with self._lock:
            if self._last_day is not None and day < self._last_day:
                raise LogOrderError(f"day {day} precedes last logged day {self._last_day}")
            for u in np.unique(user_ids):
                if int(u) not in self._users:
                    raise IdentityError(f"unknown user {int(u)}")
            for i in np.unique(item_ids):
                up = self._item_day.get(int(i))
                if up is None:
                    raise IdentityError(f"unknown item {int(i)}")
                if up > day:
                    raise LogOrderError(f"item {int(i)} uploaded on day {up}, after record day {day}")
            self._user.extend(user_ids)
            self._item.extend(item_ids)
            self._day.extend(np.full(len(user_ids), day, dtype=np.int64))
            self._fb.extend(feedback)
            self._exposed.extend(exposed)
            pos = positive_mask(feedback)
            for u, i in zip(user_ids[pos].tolist(), item_ids[pos].tolist()):
                self.history.add(u, i)
            if len(user_ids):
                self._last_day = day

    def __len__(self) -> int:
        return self._user.n

    # -- reads ------------------------------------------------------------
    def columns(self) -> dict[str, np.ndarray]:
        with self._lock:
            n = self._user.n
            return {
                "user_id": self._user.data[:n].copy(),
                "item_id": self._item.data[:n].copy(),
                "day": self._day.data[:n].copy(),
                "feedback": self._fb.data[:n].copy(),
                "exposed": self._exposed.data[:n].copy(),
            }

    def records(self) -> Iterator[Interaction]:
        cols = self.columns()
        for k in range(len(cols["user_id"])):
            yield Interaction(
                int(cols["user_id"][k]),
                int(cols["item_id"][k]),
                int(cols["day"][k]),
                tuple(float(v) for v in cols["feedback"][k]),
                bool(cols["exposed"][k]),
            )

    def positive_history_user(self, user_id: int) -> list[int]:
        if int(user_id) not in self._users:
            raise IdentityError(f"unknown user {user_id}")
        with self._lock:
            return self.history.user(int(user_id))

    def positive_history_item(self, item_id: int) -> list[int]:
        if int(item_id) not in self._item_creator:
            raise IdentityError(f"unknown item {item_id}")
        with self._lock:
            return self.history.item(int(item_id))

    def transpose(self) -> "InteractionLog":
        """Role-swapped copy: items become users and users become items.

        Each former user becomes an item created by a creator with the same
        id, uploaded at the earliest day. Used to check mirror properties.
        """
        cols = self.columns()
        t = InteractionLog(self.history.cap)
        t.add_users(self._item_creator)
        first_day = int(cols["day"].min()) if len(cols["day"]) else 0
        for u in self._users:
            t.add_item(u, u, first_day)
        days = cols["day"]
        for d in np.unique(days):
            m = days == d
            t.extend(cols["item_id"][m], cols["user_id"][m], int(d), cols["feedback"][m], cols["exposed"][m])
        return t

    # -- json lines -------------------------------------------------------
    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec.to_json()) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, history_cap: int = DEFAULT_HISTORY_CAP) -> "InteractionLog":
        """Load a log; users and items are registered on first sight."""
        log = cls(history_cap)
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = Interaction.from_json(json.loads(line))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad interaction record: {exc}") from exc
                if not log.has_user(rec.user_id):
                    log.add_user(rec.user_id)
                if not log.has_item(rec.item_id):
                    log.add_item(rec.item_id, -1, rec.day)
                log.record(rec)
        return log


def record_interaction(log: InteractionLog, record: Interaction) -> InteractionLog:
    return log.record(record)


def positive_history_user(log: InteractionLog, user_id: int) -> list[int]:
    return log.positive_history_user(user_id)


def positive_history_item(log: InteractionLog, item_id: int) -> list[int]:
    return log.positive_history_item(item_id)
