"""Similarity-based and two-tower retrieval, for both request directions.

User-side requests (a user asking for items) use ``u2u2i``/``u2i2i`` and an
item-kind inner-product index; creator-side requests (an item asking for
users) use the mirrored ``i2i2u``/``i2u2u`` and a user-kind index built from
the same two-tower model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Container, Iterable, Mapping, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .core import InteractionLog, PositiveHistory, positive_mask
from .similarity import ItemSimilarityService, UserSimilarityService, topk_desc

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 500
DEFAULT_L = 200

CHECKPOINT_FORMAT = "dualrec.checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# similarity-based retrieval
# ---------------------------------------------------------------------------


def _recency(seq: Sequence[int]) -> list[tuple[int, float]]:
    """(entity, weight) with weight 1/(1+r), r = 0 for the most recent entry."""
    n = len(seq)
    return [(e, 1.0 / (n - k)) for k, e in enumerate(seq)]


def _two_hop(
    seeds: Iterable[tuple[int, float]],
    expand: Callable[[int], Iterable[tuple[int, float]]],
    exclude: Container,
    k: int,
    allowed: Container | None = None,
) -> list[int]:
    best: dict[int, float] = {}
    for seed, w in seeds:
        for target, v in expand(seed):
            if target in exclude or (allowed is not None and target not in allowed):
                continue
            s = w * v
            if s > best.get(target, -1.0):
                best[target] = s
    ranked = sorted(best.items(), key=lambda t: (-t[1], t[0]))
    return [t for t, _ in ranked[:k]]


class SimilarityRetriever:
    """Equations for the four two-hop retrievals over shared services.

    Candidates are scored by ``similarity x recency`` (max over paths),
    deduplicated, stripped of the requester's own history, and truncated to
    ``k`` with ties broken by ascending id.
    """

    def __init__(
        self,
        history: PositiveHistory | InteractionLog,
        item_sim: ItemSimilarityService,
        user_sim: UserSimilarityService,
        k_sim: int = 50,
    ):
        self.history = history.history if isinstance(history, InteractionLog) else history
        self.item_sim = item_sim
        self.user_sim = user_sim
        self.k_sim = k_sim

    def _h_user(self, u):
        return _recency(self.history.user(u))

    def _h_item(self, i):
        return _recency(self.history.item(i))

    def u2u2i(self, user_id: int, k: int = DEFAULT_CANDIDATES, allowed=None) -> list[int]:
        own = set(self.history.user(user_id))
        return _two_hop(
            self.user_sim.similar_users(user_id, self.k_sim), self._h_user, own, k, allowed
        )

    def u2i2i(self, user_id: int, k: int = DEFAULT_CANDIDATES, allowed=None) -> list[int]:
        own = set(self.history.user(user_id))
        return _two_hop(
            self._h_user(user_id), lambda i: self.item_sim.similar_items(i, self.k_sim), own, k, allowed
        )

    def i2i2u(self, item_id: int, k: int = DEFAULT_CANDIDATES, allowed=None) -> list[int]:
        own = set(self.history.item(item_id))
        return _two_hop(
            self.item_sim.similar_items(item_id, self.k_sim), self._h_item, own, k, allowed
        )

    def i2u2u(self, item_id: int, k: int = DEFAULT_CANDIDATES, allowed=None) -> list[int]:
        own = set(self.history.item(item_id))
        return _two_hop(
            self._h_item(item_id), lambda u: self.user_sim.similar_users(u, self.k_sim), own, k, allowed
        )


# ---------------------------------------------------------------------------
# two-tower model
# ---------------------------------------------------------------------------


def _as_matrix(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 2 and len(a) == n else a.reshape(n, -1)


class FeatureTable:
    """Dense side features keyed by entity id; unknown ids map to zeros."""

    def __init__(self, ids: Sequence[int], matrix: np.ndarray):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.matrix = _as_matrix(matrix, len(self.ids))
        self._pos = {int(e): k for k, e in enumerate(self.ids)}

    @classmethod
    def empty(cls, dim: int) -> "FeatureTable":
        return cls([], np.zeros((0, dim)))

    @classmethod
    def from_dict(cls, feats: Mapping[int, Sequence[float]]) -> "FeatureTable":
        ids = sorted(feats)
        return cls(ids, np.array([feats[e] for e in ids], dtype=float))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def rows(self, ids) -> np.ndarray:
        out = np.zeros((len(ids), self.dim))
        for k, e in enumerate(ids):
            p = self._pos.get(int(e))
            if p is not None:
                out[k] = self.matrix[p]
        return out


@dataclass
class TwoTowerConfig:
    d_e: int = 32
    learning_rate: float = 0.05
    negative_ratio: int = 4
    epochs: int = 5
    batch_size: int = 1024
    l2: float = 1e-4
    init_scale: float = 0.1
    seed: int = 0


class _Vocab:
    """id -> row map; row 0 is the shared unknown-id token."""

    def __init__(self, ids: Iterable[int]):
        self.ids = np.array(sorted({int(e) for e in ids}), dtype=np.int64)
        self._row = {int(e): k + 1 for k, e in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids) + 1

    def rows(self, ids) -> np.ndarray:
        get = self._row.get
        return np.fromiter((get(int(e), 0) for e in ids), dtype=np.int64, count=len(ids))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def two_tower_loss_grad(params: Mapping[str, np.ndarray], batch: Mapping[str, np.ndarray], l2: float):
    """Mean binary cross-entropy of sigmoid(e_u . e_i) and its gradients.

    ``e_u = user_emb[u_row] + user_proj @ x_u`` and likewise for items. The L2
    term covers the projections and the id rows touched by the batch.
    """
    ur, ir = batch["u_row"], batch["i_row"]
    xu, xi, y = batch["x_u"], batch["x_i"], batch["y"]
    U, I = params["user_emb"], params["item_emb"]
    Pu, Pi = params["user_proj"], params["item_proj"]
    n = len(y)
    eu = U[ur] + xu @ Pu.T
    ei = I[ir] + xi @ Pi.T
    z = np.einsum("bd,bd->b", eu, ei)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    loss += 0.5 * l2 * (np.sum(Pu**2) + np.sum(Pi**2))
    loss += 0.5 * l2 * (np.sum(U[ur] ** 2) + np.sum(I[ir] ** 2)) / n
    g = (_sigmoid(z) - y) / n
    d_eu = g[:, None] * ei
    d_ei = g[:, None] * eu
    gU = np.zeros_like(U)
    gI = np.zeros_like(I)
    np.add.at(gU, ur, d_eu + l2 * U[ur] / n)
    np.add.at(gI, ir, d_ei + l2 * I[ir] / n)
    grads = {
        "user_emb": gU,
        "item_emb": gI,
        "user_proj": d_eu.T @ xu + l2 * Pu,
        "item_proj": d_ei.T @ xi + l2 * Pi,
    }
    return float(loss), grads


class Adagrad:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float, eps: float = 1e-8):
        self.lr = lr
        self.eps = eps
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.acc[k] += g * g
            params[k] -= self.lr * g / (np.sqrt(self.acc[k]) + self.eps)


@dataclass
class TwoTowerModel:
    """User tower and item tower sharing an embedding space of size ``d_e``.

    ``score(u, i) = e_u . e_i`` with no bias term. Ids unseen at training time
    use the unknown-id row, so cold items are embedded from content alone.
    """

    config: TwoTowerConfig
    user_vocab: _Vocab
    item_vocab: _Vocab
    params: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    @property
    def d_e(self) -> int:
        return self.config.d_e

    def embed_users(self, user_ids, user_x: np.ndarray) -> np.ndarray:
        rows = self.user_vocab.rows(user_ids)
        return self.params["user_emb"][rows] + np.asarray(user_x) @ self.params["user_proj"].T

    def embed_items(self, item_ids, item_x: np.ndarray) -> np.ndarray:
        rows = self.item_vocab.rows(item_ids)
        return self.params["item_emb"][rows] + np.asarray(item_x) @ self.params["item_proj"].T

    def score(self, user_ids, user_x, item_ids, item_x) -> np.ndarray:
        return np.einsum(
            "bd,bd->b", self.embed_users(user_ids, user_x), self.embed_items(item_ids, item_x)
        )


def init_two_tower(user_ids, item_ids, d_user: int, d_item: int, config: TwoTowerConfig) -> TwoTowerModel:
    rng = np.random.default_rng(config.seed)
    uv, iv = _Vocab(user_ids), _Vocab(item_ids)
    s = config.init_scale
    params = {
        "user_emb": rng.normal(0, s, (len(uv), config.d_e)),
        "item_emb": rng.normal(0, s, (len(iv), config.d_e)),
        "user_proj": rng.normal(0, s / np.sqrt(max(d_user, 1)), (config.d_e, d_user)),
        "item_proj": rng.normal(0, s / np.sqrt(max(d_item, 1)), (config.d_e, d_item)),
    }
    # the unknown token starts at zero so cold entities lean on side features
    params["user_emb"][0] = 0.0
    params["item_emb"][0] = 0.0
    return TwoTowerModel(config, uv, iv, params)


def positive_pairs(log: InteractionLog, days: tuple[int, int] | None = None) -> np.ndarray:
    """Distinct (user, item) pairs with positive feedback, in first-seen order."""
    cols = log.columns()
    mask = positive_mask(cols["feedback"])
    if days is not None:
        mask &= (cols["day"] >= days[0]) & (cols["day"] < days[1])
    pairs = np.stack([cols["user_id"][mask], cols["item_id"][mask]], axis=1)
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    _, first = np.unique(pairs, axis=0, return_index=True)
    return pairs[np.sort(first)]


def train_two_tower(
    log: InteractionLog,
    user_features: FeatureTable,
    item_features: FeatureTable,
    config: TwoTowerConfig | None = None,
    negative_pool: Sequence[int] | None = None,
    days: tuple[int, int] | None = None,
    pairs: np.ndarray | None = None,
) -> TwoTowerModel:
    """SGD (Adagrad steps) on BCE over positives plus sampled negative users.

    For every positive (u, i), ``negative_ratio`` users drawn uniformly from
    ``negative_pool`` are paired with the same item as negatives; they are
    redrawn every epoch. Deterministic for a fixed ``config.seed``.
    """
    config = config or TwoTowerConfig()
    if pairs is None:
        pairs = positive_pairs(log, days)
    if len(pairs) == 0:
        raise TrainingError("two-tower training needs at least one positive pair")
    pool = np.asarray(negative_pool if negative_pool is not None else log.users, dtype=np.int64)
    if len(pool) == 0:
        raise TrainingError("negative pool is empty")
    user_ids = np.union1d(pool, pairs[:, 0])
    model = init_two_tower(user_ids, pairs[:, 1], user_features.dim, item_features.dim, config)
    rng = np.random.default_rng(config.seed + 1)

    pos_u, pos_i = pairs[:, 0], pairs[:, 1]
    r = config.negative_ratio
    # feature rows are fixed across epochs; negatives only change the user side
    pos_xi = item_features.rows(pos_i)
    pool_x = user_features.rows(pool)
    pool_rows = model.user_vocab.rows(pool)
    pos_u_rows = model.user_vocab.rows(pos_u)
    pos_i_rows = model.item_vocab.rows(pos_i)
    pos_xu = user_features.rows(pos_u)

    # fixed probe sample, same ratio as training, for a comparable per-epoch loss
    probe_neg = rng.integers(0, len(pool), size=(len(pairs), r))
    probe = {
        "u_row": np.concatenate([pos_u_rows, pool_rows[probe_neg].ravel()]),
        "i_row": np.concatenate([pos_i_rows, np.repeat(pos_i_rows, r)]),
        "x_u": np.concatenate([pos_xu, pool_x[probe_neg.ravel()]]),
        "x_i": np.concatenate([pos_xi, np.repeat(pos_xi, r, axis=0)]),
        "y": np.concatenate([np.ones(len(pairs)), np.zeros(len(pairs) * r)]),
    }
    opt = Adagrad(model.params, config.learning_rate)
    for _epoch in range(config.epochs):
        neg = rng.integers(0, len(pool), size=(len(pairs), r))
        u_rows = np.concatenate([pos_u_rows, pool_rows[neg].ravel()])
        x_u = np.concatenate([pos_xu, pool_x[neg.ravel()]])
        i_rows = np.concatenate([pos_i_rows, np.repeat(pos_i_rows, r)])
        x_i = np.concatenate([pos_xi, np.repeat(pos_xi, r, axis=0)])
        y = np.concatenate([np.ones(len(pairs)), np.zeros(len(pairs) * r)])
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            b = order[start : start + config.batch_size]
            batch = {"u_row": u_rows[b], "i_row": i_rows[b], "x_u": x_u[b], "x_i": x_i[b], "y": y[b]}
            _, grads = two_tower_loss_grad(model.params, batch, config.l2)
            opt.step(model.params, grads)
        model.loss_history.append(two_tower_loss_grad(model.params, probe, 0.0)[0])
    logger.debug("two-tower trained on %d positives, losses %s", len(pairs), model.loss_history)
    return model


# ---------------------------------------------------------------------------
# inner-product indices
# ---------------------------------------------------------------------------


class InnerProductIndex:
    """Exact top-K by dot product; ties broken by ascending id."""

    backend = "exact"

    def __init__(self, kind: str, ids: Sequence[int], vectors: np.ndarray):
        if kind not in ("user", "item"):
            raise ValueError(f"kind must be 'user' or 'item', got {kind!r}")
        self.kind = kind
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = _as_matrix(vectors, len(self.ids))
        self._pos = {int(e): k for k, e in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self, ids) -> np.ndarray:
        return np.array([self._pos[int(e)] for e in ids], dtype=np.int64)

    def mask_for(self, allowed) -> np.ndarray:
        if allowed is None:
            return np.ones(len(self.ids), dtype=bool)
        if isinstance(allowed, np.ndarray) and allowed.dtype == bool:
            return allowed
        return np.isin(self.ids, np.fromiter(allowed, dtype=np.int64))

    def search(self, q: np.ndarray, k: int, allowed=None) -> tuple[np.ndarray, np.ndarray]:
        """(ids, scores) of the top-k entries, optionally restricted."""
        if len(self.ids) == 0 or k <= 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        scores = self.vectors @ np.asarray(q, dtype=float)
        cand = np.flatnonzero(self.mask_for(allowed))
        top = topk_desc(scores[cand], self.ids[cand], k)
        return self.ids[cand[top]], scores[cand[top]]

    def query(self, q: np.ndarray, k: int, allowed=None) -> list[int]:
        return self.search(q, k, allowed)[0].tolist()


class IVFIndex(InnerProductIndex):
    """Approximate inner-product search over k-means cells.

    Vectors are clustered by direction; a query scans the ``nprobe`` cells
    whose centroids score highest against it. Recall is not guaranteed and
    must be measured with :func:`measure_recall`.
    """

    backend = "ivf"

    def __init__(self, kind, ids, vectors, n_cells: int = 32, nprobe: int = 8, seed: int = 0):
        super().__init__(kind, ids, vectors)
        self.nprobe = nprobe
        n_cells = max(1, min(n_cells, len(self.ids)))
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        unit = np.divide(self.vectors, norms, out=np.zeros_like(self.vectors), where=norms > 0)
        if len(self.ids):
            self.centroids, labels = kmeans2(unit, n_cells, minit="++", seed=seed)
        else:
            self.centroids, labels = np.zeros((0, self.vectors.shape[1])), np.zeros(0, dtype=int)
        self.cells = [np.flatnonzero(labels == c) for c in range(len(self.centroids))]

    def search(self, q, k, allowed=None):
        if len(self.ids) == 0 or k <= 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        q = np.asarray(q, dtype=float)
        probe = np.argsort(-(self.centroids @ q), kind="stable")[: self.nprobe]
        cand = np.concatenate([self.cells[c] for c in probe])
        cand = cand[self.mask_for(allowed)[cand]]
        scores = self.vectors[cand] @ q
        top = topk_desc(scores, self.ids[cand], k)
        return self.ids[cand[top]], scores[top]


def measure_recall(approx: InnerProductIndex, exact: InnerProductIndex, queries: np.ndarray, k: int) -> float:
    """Mean |approx top-k  &  exact top-k| / k over the queries."""
    hits = 0
    for q in queries:
        a = set(approx.query(q, k))
        e = set(exact.query(q, k))
        hits += len(a & e)
    return hits / (k * len(queries))


def build_index(
    model: TwoTowerModel,
    kind: str,
    ids: Sequence[int],
    features: FeatureTable,
    backend: str = "exact",
    **backend_kw,
) -> InnerProductIndex:
    """Index of tower outputs: user kind for creator-side, item kind for user-side."""
    ids = np.asarray(ids, dtype=np.int64)
    x = features.rows(ids)
    vecs = model.embed_users(ids, x) if kind == "user" else model.embed_items(ids, x)
    if backend == "exact":
        return InnerProductIndex(kind, ids, vecs)
    if backend == "ivf":
        return IVFIndex(kind, ids, vecs, **backend_kw)
    raise ValueError(f"unknown index backend {backend!r}")


def topk_users(index: InnerProductIndex, item_embedding: np.ndarray, L: int = DEFAULT_L, available=None) -> list[int]:
    """Creator-side two-tower retrieval restricted to the available users."""
    if index.kind != "user":
        raise ValueError("topk_users needs a user-kind index")
    return index.query(item_embedding, L, available)


def topk_items(index: InnerProductIndex, user_embedding: np.ndarray, K: int, allowed=None) -> list[int]:
    """User-side two-tower retrieval."""
    if index.kind != "item":
        raise ValueError("topk_items needs an item-kind index")
    return index.query(user_embedding, K, allowed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _unpack(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


def write_checkpoint(path, type_tag: str, config, params: Mapping[str, np.ndarray], vocabs: Mapping[str, _Vocab], extra=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "type": type_tag,
        "config": asdict(config),
        "vocab": {k: v.ids.tolist() for k, v in vocabs.items()},
        "params": {k: _pack(v) for k, v in params.items()},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_checkpoint(path, type_tag: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a dualrec checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if doc.get("type") != type_tag:
        raise ValueError(f"{path}: checkpoint type {doc.get('type')!r}, expected {type_tag!r}")
    doc["params"] = {k: _unpack(v) for k, v in doc["params"].items()}
    doc["vocab"] = {k: _Vocab(v) for k, v in doc["vocab"].items()}
    return doc


def save_two_tower(model: TwoTowerModel, path) -> None:
    write_checkpoint(
        path,
        "two_tower",
        model.config,
        model.params,
        {"user": model.user_vocab, "item": model.item_vocab},
        {"d_e": model.d_e, "loss_history": model.loss_history},
    )


def load_two_tower(path) -> TwoTowerModel:
    doc = read_checkpoint(path, "two_tower")
    return TwoTowerModel(
        TwoTowerConfig(**doc["config"]),
        doc["vocab"]["user"],
        doc["vocab"]["item"],
        doc["params"],
        list(doc["extra"].get("loss_history", [])),
    )
