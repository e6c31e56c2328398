"""Multi-feedback prediction and score integration.

The predictor is a two-tower style encoder with one linear+sigmoid head per
feedback channel: ``s_m = sigmoid(w_m . (e_u * e_i) + c_m)``. The watch-time
head is trained against a soft label in [0, 1] so every head shares the same
loss. Optional sample augmentation duplicates each training row with the item
id replaced by the unknown token, which forces the side features to carry
signal for items the model has never seen.

User-side integration is ``f = sum_m alpha_m s_m``; creator-side integration
is ``g = sum_m beta_m s_m / theta_u`` with a per-user bias ``theta_u``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dualrec.core import CHANNELS, CREATOR_VISIBLE_IDX, N_CHANNELS, WATCH_TIME
from dualrec.retrieval import Adagrad, TrainingError, _Vocab, _sigmoid, read_checkpoint, write_checkpoint
from dualrec.similarity import topk_desc

logger = logging.getLogger(__name__)

THETA_FLOOR = 0.01
WATCH_SCALE = 60.0

DEFAULT_BETA = {
    "like": 1.0,
    "comment": 1.0,
    "follow": 1.5,
    "share": 1.0,
    "profile_visit": 0.5,
    "effective_view": 0.2,
    "watch_time": 0.0,
}
DEFAULT_ALPHA = {
    "like": 1.0,
    "comment": 0.5,
    "follow": 0.5,
    "share": 0.5,
    "profile_visit": 0.2,
    "effective_view": 1.0,
    "watch_time": 1.0,
}


def weight_vector(weights: Mapping[str, float] | Sequence[float]) -> np.ndarray:
    """Channel-ordered weight array from a name map (missing names are 0)."""
    if isinstance(weights, Mapping):
        unknown = set(weights) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")
        return np.array([float(weights.get(c, 0.0)) for c in CHANNELS])
    arr = np.asarray(weights, dtype=float)
    if arr.shape != (N_CHANNELS,):
        raise ValueError(f"expected {N_CHANNELS} weights, got shape {arr.shape}")
    return arr


@dataclass
class IntegrationWeights:
    alpha: np.ndarray = field(default_factory=lambda: weight_vector(DEFAULT_ALPHA))
    beta: np.ndarray = field(default_factory=lambda: weight_vector(DEFAULT_BETA))
    theta_floor: float = THETA_FLOOR

    def __post_init__(self):
        self.alpha = weight_vector(self.alpha)
        self.beta = weight_vector(self.beta)
        if not np.any(self.alpha) or not np.any(self.beta):
            raise ValueError("each side needs at least one nonzero weight")
        if self.theta_floor <= 0:
            raise ValueError("theta floor must be positive")


# ---------------------------------------------------------------------------
# score integration
# ---------------------------------------------------------------------------


def _weighted_sum(scores, weights) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if scores.shape[-1] != len(weights):
        raise ValueError(f"score width {scores.shape[-1]} does not match {len(weights)} weights")
    # explicit left-to-right accumulation keeps results reproducible bit for bit
    out = np.zeros(scores.shape[:-1])
    for m in range(len(weights)):
        out = out + weights[m] * scores[..., m]
    return out


def integrate_user_side(scores, alpha) -> np.ndarray:
    """f = sum_m alpha_m s_m over the last axis."""
    return _weighted_sum(scores, alpha)


def integrate_creator_side(scores, beta, theta_u, floor: float = THETA_FLOOR, diagnostics: dict | None = None):
    """g = sum_m beta_m s_m / theta_u, with theta clamped at ``floor``.

    Clamped entries are counted in ``diagnostics['theta_clamped']``.
    """
    theta = np.asarray(theta_u, dtype=float)
    low = theta < floor
    if np.any(low):
        if diagnostics is not None:
            diagnostics["theta_clamped"] = diagnostics.get("theta_clamped", 0) + int(np.sum(low))
        logger.debug("clamped %d theta values to %g", int(np.sum(low)), floor)
        theta = np.maximum(theta, floor)
    return _weighted_sum(scores, beta) / theta


@dataclass
class UserBias:
    """theta_u = creator-visible interactions per exposure, floored.

    Users with no exposures get the population mean rate.
    """

    theta: np.ndarray
    floor: float = THETA_FLOOR

    @classmethod
    def from_counts(cls, interactions, exposures, floor: float = THETA_FLOOR) -> "UserBias":
        interactions = np.asarray(interactions, dtype=float)
        exposures = np.asarray(exposures, dtype=float)
        seen = exposures > 0
        mean = interactions[seen].sum() / exposures[seen].sum() if np.any(seen) else 1.0
        rate = np.where(seen, interactions / np.maximum(exposures, 1.0), mean)
        return cls(np.maximum(rate, floor), floor)

    @classmethod
    def uniform(cls, n_users: int) -> "UserBias":
        return cls(np.ones(n_users))

    def __getitem__(self, users) -> np.ndarray:
        return self.theta[users]


def rank_users(item_id: int, candidates, g_scores, L: int) -> list[int]:
    """Top-``L`` candidate users by creator-side score; ties by ascending id."""
    if L < 1:
        raise ValueError("L must be >= 1")
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        return []
    pos = topk_desc(np.asarray(g_scores, dtype=float), candidates, L)
    return candidates[pos].tolist()


# ---------------------------------------------------------------------------
# prediction model
# ---------------------------------------------------------------------------


@dataclass
class PredictorConfig:
    d_e: int = 16
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 512
    l2: float = 1e-4
    init_scale: float = 0.1
    use_sample_augmentation: bool = False
    use_extra_features: bool = False
    seed: int = 0


def labels_from_feedback(feedback: np.ndarray, watch_scale: float = WATCH_SCALE) -> np.ndarray:
    """Binary channels as-is, watch time squashed to min(t / scale, 1)."""
    y = np.array(feedback, dtype=float, copy=True)
    y[:, WATCH_TIME] = np.minimum(y[:, WATCH_TIME] / watch_scale, 1.0)
    return y


def augment_samples(batch: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Append a copy of every sample with the item id set to the unknown row (0)."""
    n = len(batch["y"])
    if n == 0:
        raise ValueError("cannot augment an empty batch")
    out = {k: np.concatenate([v, v]) for k, v in batch.items()}
    out["i_row"] = out["i_row"].copy()
    out["i_row"][n:] = 0
    return out


def predictor_forward(params, u_row, i_row, x_u, x_i):
    eu = params["user_emb"][u_row] + x_u @ params["user_proj"].T
    ei = params["item_emb"][i_row] + x_i @ params["item_proj"].T
    h = eu * ei
    z = h @ params["head_w"].T + params["head_b"]
    return eu, ei, h, z


def predictor_loss_grad(params: Mapping[str, np.ndarray], batch: Mapping[str, np.ndarray], l2: float):
    """Mean (over samples) of the summed per-head cross-entropy, with gradients."""
    ur, ir = batch["u_row"], batch["i_row"]
    y = batch["y"]
    n = len(y)
    eu, ei, h, z = predictor_forward(params, ur, ir, batch["x_u"], batch["x_i"])
    U, I = params["user_emb"], params["item_emb"]
    Pu, Pi, W = params["user_proj"], params["item_proj"], params["head_w"]
    loss = np.sum(np.logaddexp(0.0, z) - y * z) / n
    loss += 0.5 * l2 * (np.sum(Pu**2) + np.sum(Pi**2) + np.sum(W**2))
    loss += 0.5 * l2 * (np.sum(U[ur] ** 2) + np.sum(I[ir] ** 2)) / n
    dz = (_sigmoid(z) - y) / n
    dh = dz @ W
    d_eu = dh * ei
    d_ei = dh * eu
    gU = np.zeros_like(U)
    gI = np.zeros_like(I)
    np.add.at(gU, ur, d_eu + l2 * U[ur] / n)
    np.add.at(gI, ir, d_ei + l2 * I[ir] / n)
    grads = {
        "user_emb": gU,
        "item_emb": gI,
        "user_proj": d_eu.T @ batch["x_u"] + l2 * Pu,
        "item_proj": d_ei.T @ batch["x_i"] + l2 * Pi,
        "head_w": dz.T @ h + l2 * W,
        "head_b": dz.sum(axis=0),
    }
    return float(loss), grads


@dataclass
class PredictionModel:
    config: PredictorConfig
    user_vocab: _Vocab
    item_vocab: _Vocab
    params: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_heads(self) -> int:
        return len(self.params["head_b"])

    def predict(self, user_ids, user_x, item_ids, item_x) -> np.ndarray:
        """(n, M) channel scores; ids are always used when known."""
        ur = self.user_vocab.rows(np.asarray(user_ids))
        ir = self.item_vocab.rows(np.asarray(item_ids))
        *_, z = predictor_forward(self.params, ur, ir, np.asarray(user_x), np.asarray(item_x))
        return _sigmoid(z)


def init_predictor(user_ids, item_ids, d_user: int, d_item: int, config: PredictorConfig) -> PredictionModel:
    rng = np.random.default_rng(config.seed)
    uv, iv = _Vocab(user_ids), _Vocab(item_ids)
    s, d = config.init_scale, config.d_e
    params = {
        "user_emb": rng.normal(0, s, (len(uv), d)),
        "item_emb": rng.normal(0, s, (len(iv), d)),
        "user_proj": rng.normal(0, s / np.sqrt(max(d_user, 1)), (d, d_user)),
        "item_proj": rng.normal(0, s / np.sqrt(max(d_item, 1)), (d, d_item)),
        "head_w": rng.normal(0, s, (N_CHANNELS, d)),
        "head_b": np.zeros(N_CHANNELS),
    }
    params["user_emb"][0] = 0.0
    params["item_emb"][0] = 0.0
    return PredictionModel(config, uv, iv, params)


def train_predictor(
    users: np.ndarray,
    items: np.ndarray,
    feedback: np.ndarray,
    user_x: np.ndarray,
    item_x: np.ndarray,
    config: PredictorConfig | None = None,
) -> PredictionModel:
    """Fit all heads on exposed samples. Rows of ``user_x``/``item_x`` align with samples.

    Callers pass item features already zeroed when extra features are off.
    """
    config = config or PredictorConfig()
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise TrainingError("predictor training needs at least one exposure")
    model = init_predictor(users, items, user_x.shape[1], item_x.shape[1], config)
    data = {
        "u_row": model.user_vocab.rows(users),
        "i_row": model.item_vocab.rows(items),
        "x_u": np.asarray(user_x, dtype=float),
        "x_i": np.asarray(item_x, dtype=float),
        "y": labels_from_feedback(feedback),
    }
    if config.use_sample_augmentation:
        data = augment_samples(data)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adagrad(model.params, config.learning_rate)
    n = len(data["y"])
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            b = order[start : start + config.batch_size]
            loss, grads = predictor_loss_grad(model.params, {k: v[b] for k, v in data.items()}, config.l2)
            opt.step(model.params, grads)
            total += loss * len(b)
        model.loss_history.append(total / n)
    logger.debug("predictor trained on %d rows, losses %s", n, model.loss_history)
    return model


def creator_visible_rate(feedback: np.ndarray) -> np.ndarray:
    """Number of creator-visible actions per exposure row."""
    return np.asarray(feedback)[:, CREATOR_VISIBLE_IDX].sum(axis=1)


def save_predictor(model: PredictionModel, path) -> None:
    write_checkpoint(
        path,
        "predictor",
        model.config,
        model.params,
        {"user": model.user_vocab, "item": model.item_vocab},
        {"loss_history": model.loss_history},
    )


def load_predictor(path) -> PredictionModel:
    doc = read_checkpoint(path, "predictor")
    return PredictionModel(
        PredictorConfig(**doc["config"]),
        doc["vocab"]["user"],
        doc["vocab"]["item"],
        doc["params"],
        list(doc["extra"].get("loss_history", [])),
    )
