"""User-user and item-item similarity services.

CF similarity is cosine over binary incidence vectors built from positive
histories; content similarity is cosine over content embeddings. The item
service merges the two with ``max(cf, content_weight * content)`` so that
items nobody has interacted with yet are still served by content.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .core import InteractionLog, PositiveHistory

logger = logging.getLogger(__name__)

DEFAULT_K_SIM = 50
DEFAULT_CONTENT_WEIGHT = 0.8
DEFAULT_CONTENT_DIM = 128

Neighbors = tuple[tuple[int, float], ...]


def topk_desc(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-k scores, ties broken by ascending id.

    Exact: boundary ties are resolved by id, not by whatever
    ``argpartition`` happened to pick.
    """
    n = len(scores)
    if k <= 0 or n == 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]


@dataclass(frozen=True)
class SimilarityIndex:
    kind: str
    neighbors: Mapping[int, Neighbors]
    k_sim: int = DEFAULT_K_SIM

    def __post_init__(self):
        if self.kind not in ("user", "item"):
            raise ValueError(f"kind must be 'user' or 'item', got {self.kind!r}")

    def similar(self, entity_id: int, k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        return list(self.neighbors.get(int(entity_id), ())[:k])

    def __contains__(self, entity_id) -> bool:
        return int(entity_id) in self.neighbors

    def __len__(self) -> int:
        return len(self.neighbors)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for eid in sorted(self.neighbors):
                nb = [[int(j), float(s)] for j, s in self.neighbors[eid]]
                fh.write(json.dumps({"id": int(eid), "neighbors": nb}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, kind: str, k_sim: int = DEFAULT_K_SIM) -> "SimilarityIndex":
        neighbors = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    neighbors[int(obj["id"])] = tuple((int(j), float(s)) for j, s in obj["neighbors"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad similarity record: {exc}") from exc
        return cls(kind, neighbors, k_sim)


def _history_of(source) -> PositiveHistory:
    return source.history if isinstance(source, InteractionLog) else source


def incidence(pairs: Iterable[tuple[int, int]]) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Binary CSR matrix (rows x cols) plus the sorted row/col id arrays."""
    pairs = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    row_ids, r = np.unique(pairs[:, 0], return_inverse=True)
    col_ids, c = np.unique(pairs[:, 1], return_inverse=True)
    mat = sp.csr_matrix(
        (np.ones(len(pairs)), (r.ravel(), c.ravel())), shape=(len(row_ids), len(col_ids))
    )
    mat.sum_duplicates()
    mat.data[:] = 1.0
    return mat, row_ids, col_ids


def build_cf_similarity(log, kind: str, k_sim: int = DEFAULT_K_SIM, block: int = 512) -> SimilarityIndex:
    """Cosine similarity over co-interaction incidence vectors.

    ``kind="item"`` compares items by the users who interacted positively with
    them; ``kind="user"`` compares users by their positive items. Pairs with
    no overlap are omitted, so entities without positives get empty lists.
    """
    hist = _history_of(log)
    if kind == "item":
        pairs = ((i, u) for i in hist.items() for u in hist.item(i))
    elif kind == "user":
        pairs = ((u, i) for u in hist.users() for i in hist.user(u))
    else:
        raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")
    mat, ids, _ = incidence(pairs)
    neighbors: dict[int, Neighbors] = {}
    if mat.shape[0] == 0:
        return SimilarityIndex(kind, neighbors, k_sim)
    counts = np.asarray(mat.sum(axis=1)).ravel()
    mat_t = mat.T.tocsr()
    for start in range(0, mat.shape[0], block):
        stop = min(start + block, mat.shape[0])
        co = (mat[start:stop] @ mat_t).tocsr()
        for r in range(stop - start):
            row = start + r
            lo, hi = co.indptr[r], co.indptr[r + 1]
            cols, overlap = co.indices[lo:hi], co.data[lo:hi]
            keep = cols != row
            cols, overlap = cols[keep], overlap[keep]
            # c / sqrt(a*b): exactly 1.0 for identical sets, exactly symmetric
            score = overlap / np.sqrt(counts[row] * counts[cols])
            top = topk_desc(score, ids[cols], k_sim)
            neighbors[int(ids[row])] = tuple(
                (int(ids[cols[t]]), float(score[t])) for t in top
            )
    # entities with positives but no overlapping partner still appear, with []
    for eid in ids:
        neighbors.setdefault(int(eid), ())
    return SimilarityIndex(kind, neighbors, k_sim)


@dataclass
class ContentEmbedding:
    """Item content vectors (one row per id, fixed dimension)."""

    ids: np.ndarray
    vectors: np.ndarray
    _pos: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.ids):
            raise ValueError("content vectors must be a (n_items, d_c) matrix aligned with ids")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("content vectors must be finite")
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    @classmethod
    def from_dict(cls, emb: Mapping[int, Sequence[float]]) -> "ContentEmbedding":
        ids = sorted(emb)
        dims = {len(emb[i]) for i in ids}
        if len(dims) > 1:
            raise ValueError(f"content vectors have mixed dimensions {sorted(dims)}")
        return cls(np.array(ids), np.array([emb[i] for i in ids], dtype=float).reshape(len(ids), -1))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._pos

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, item_id: int) -> np.ndarray:
        return self.vectors[self._pos[int(item_id)]]

    def rows(self, item_ids) -> np.ndarray:
        return np.array([self._pos[int(i)] for i in item_ids], dtype=np.int64)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for i, vec in zip(self.ids, self.vectors):
                w.writerow([int(i)] + [repr(float(v)) for v in vec])

    @classmethod
    def from_csv(cls, path: str | Path, dim: int | None = None) -> "ContentEmbedding":
        ids, rows = [], []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row:
                    continue
                try:
                    ids.append(int(row[0]))
                    rows.append([float(v) for v in row[1:]])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad embedding row: {exc}") from exc
                if dim is not None and len(rows[-1]) != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(rows[-1])}")
        if len({len(r) for r in rows}) > 1:
            raise ValueError(f"{path}: rows have mixed dimensions")
        return cls(np.array(ids), np.array(rows).reshape(len(ids), -1))


def build_content_similarity(
    embeddings: ContentEmbedding | Mapping[int, Sequence[float]],
    k_sim: int = DEFAULT_K_SIM,
    dim: int | None = None,
    block: int = 1024,
) -> SimilarityIndex:
    """Item index over content cosine; only positive scores are kept."""
    if not isinstance(embeddings, ContentEmbedding):
        embeddings = ContentEmbedding.from_dict(embeddings)
    if dim is not None and len(embeddings) and embeddings.dim != dim:
        raise ValueError(f"content dimension {embeddings.dim} != expected {dim}")
    ids = embeddings.ids
    x = embeddings.vectors
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    neighbors: dict[int, Neighbors] = {}
    for start in range(0, len(ids), block):
        stop = min(start + block, len(ids))
        sims = xn[start:stop] @ xn.T
        for r in range(stop - start):
            row = sims[r]
            row[start + r] = 0.0
            cols = np.flatnonzero(row > 0)
            top = topk_desc(row[cols], ids[cols], k_sim)
            neighbors[int(ids[start + r])] = tuple(
                (int(ids[cols[t]]), float(min(row[cols[t]], 1.0))) for t in top
            )
    return SimilarityIndex("item", neighbors, k_sim)


class ItemSimilarityService:
    """S^I: the one item-similarity service shared by u2i2i and i2i2u."""

    def __init__(
        self,
        cf: SimilarityIndex | None = None,
        content: SimilarityIndex | None = None,
        content_weight: float = DEFAULT_CONTENT_WEIGHT,
        k_sim: int = DEFAULT_K_SIM,
    ):
        for idx in (cf, content):
            if idx is not None and idx.kind != "item":
                raise ValueError("item similarity service needs item-kind indices")
        self.cf = cf
        self.content = content
        self.content_weight = content_weight
        self.k_sim = k_sim
        self._merged = self._merge()

    def _merge(self) -> dict[int, Neighbors]:
        if self.content is None:
            return dict(self.cf.neighbors) if self.cf is not None else {}
        cf = self.cf.neighbors if self.cf is not None else {}
        merged = {}
        for eid in set(cf) | set(self.content.neighbors):
            scores: dict[int, float] = {}
            for j, s in cf.get(eid, ()):
                scores[j] = s
            for j, s in self.content.neighbors.get(eid, ()):
                w = self.content_weight * s
                if w > scores.get(j, 0.0):
                    scores[j] = w
            nb = sorted(scores.items(), key=lambda js: (-js[1], js[0]))[: self.k_sim]
            merged[eid] = tuple(nb)
        return merged

    @property
    def neighbors(self) -> Mapping[int, Neighbors]:
        return self._merged

    def similar_items(self, item_id: int, k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        return list(self._merged.get(int(item_id), ())[:k])

    __call__ = similar_items


class UserSimilarityService:
    """S^U: the one user-similarity service shared by u2u2i and i2u2u."""

    def __init__(self, index: SimilarityIndex | None = None):
        if index is not None and index.kind != "user":
            raise ValueError("user similarity service needs a user-kind index")
        self.index = index

    @property
    def neighbors(self) -> Mapping[int, Neighbors]:
        return self.index.neighbors if self.index is not None else {}

    def similar_users(self, user_id: int, k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.index is None:
            return []
        return self.index.similar(user_id, k)

    __call__ = similar_users


def similar_items(service: ItemSimilarityService, item_id: int, k: int) -> list[tuple[int, float]]:
    return service.similar_items(item_id, k)


def similar_users(service: UserSimilarityService, user_id: int, k: int) -> list[tuple[int, float]]:
    return service.similar_users(user_id, k)
