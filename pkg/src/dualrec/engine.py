"""Per-arm recommendation engine used by the simulator.

Every arm runs the same user-side stand-in: candidates are retrieved and
ranked from a shrunken estimate of each item's latent vector, where the
shrinkage towards the creator's prior fades as the item gathers exposures.
On top sits the baseline new-item strategy (a small random retrieval of
low-exposure items and a score boost for them).

Arms with ``dualrec`` on add the creator-side path: at the end of each day
they refresh availability, retrieve candidate users for every new item,
rank them with the prediction model and fill the matching sets that the
next day's serving boosts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from dualrec.combiner import LambdaController, ResultCache, ServePolicy, serve_user_request
from dualrec.core import CREATOR_VISIBLE_IDX, N_BINARY, InteractionLog, PositiveHistory
from dualrec.features import FeatureState, content_neighbors
from dualrec.ranking import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    PredictionModel,
    PredictorConfig,
    UserBias,
    integrate_creator_side,
    train_predictor,
    weight_vector,
)
from dualrec.retrieval import (
    InnerProductIndex,
    SimilarityRetriever,
    TrainingError,
    TwoTowerConfig,
    TwoTowerModel,
    FeatureTable,
    positive_pairs,
    train_two_tower,
)
from dualrec.similarity import (
    ContentEmbedding,
    ItemSimilarityService,
    UserSimilarityService,
    build_cf_similarity,
    topk_desc,
    build_content_similarity,
)
from dualrec.simulator import (
    SOURCE_CODE,
    ExposureBatch,
    MatchBatch,
    World,
    hash_uniform,
    sigmoid,
)
from dualrec.uac import (
    AvailableUserStore,
    InsufficientHistory,
    activity_features,
    dualrec_recommend,
    refresh_daily,
    train_activity_model,
)

logger = logging.getLogger(__name__)

RETRIEVALS = ("two_tower", "i2i2u", "i2u2u")
_NEW_PICK = 11


@dataclass(frozen=True)
class ArmFlags:
    dualrec: bool = False
    activity_prediction: bool = True
    capacity: bool = True
    sample_augmentation: bool = False
    extra_features: bool = False
    retrievals: tuple = ("two_tower",)
    theta: bool = False

    def validate(self) -> "ArmFlags":
        unknown = set(self.retrievals) - set(RETRIEVALS)
        if unknown:
            raise ValueError(f"unknown retrievals {sorted(unknown)}")
        if self.dualrec and not self.retrievals:
            raise ValueError("a DualRec arm needs at least one retrieval")
        return self


_V1 = ArmFlags(dualrec=True)
_V2 = replace(_V1, sample_augmentation=True, extra_features=True)
_V3 = replace(_V2, retrievals=("two_tower", "i2i2u"))
_V4 = replace(_V3, retrievals=("two_tower", "i2i2u", "i2u2u"))
_V5 = replace(_V4, theta=True)
ARM_PRESETS = {"base": ArmFlags(), "v1": _V1, "v2": _V2, "v3": _V3, "v4": _V4, "v5": _V5}


@dataclass
class EngineConfig:
    # user-side stand-in
    K: int = 10
    pool_days: int = 7
    retrieval_size: int = 50
    new_item_slots: int = 5
    new_item_threshold: int = 20
    new_item_boost: float = 0.1
    confidence_kappa: float = 30.0
    engagement_pseudo: float = 2.0
    alpha: dict = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    # creator side
    L: int = 200
    Q: int = 10
    tau: float = 0.5
    retrieval_k: int = 200
    k_sim: int = 50
    content_neighbors: int = 10
    content_weight: float = 0.8
    similarity_days: int = 7
    beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    theta_floor: float = 0.01
    # combined serving
    q_dual: float = 0.02
    lam0: float = 0.5
    controller_gain: float = 0.5
    fixed_lambda: float | None = None
    # training
    train_days: int = 3
    retrain_every: int = 2
    max_train_rows: int = 40_000
    max_positive_pairs: int = 30_000
    activity_retrain_every: int = 7
    two_tower: dict = field(default_factory=lambda: {"d_e": 16, "epochs": 2, "learning_rate": 0.05})
    predictor: dict = field(default_factory=lambda: {"d_e": 16, "epochs": 2, "learning_rate": 0.05})
    seed: int = 0

    def validate(self) -> "EngineConfig":
        for name in ("K", "pool_days", "retrieval_size", "L", "Q", "retrain_every", "train_days"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 <= self.q_dual <= 1:
            raise ValueError("q_dual must lie in [0, 1]")
        weight_vector(self.alpha)
        weight_vector(self.beta)
        known_tt = {f.name for f in fields(TwoTowerConfig)}
        known_pr = {f.name for f in fields(PredictorConfig)}
        if set(self.two_tower) - known_tt:
            raise ValueError(f"unknown two_tower keys {sorted(set(self.two_tower) - known_tt)}")
        if set(self.predictor) - known_pr:
            raise ValueError(f"unknown predictor keys {sorted(set(self.predictor) - known_pr)}")
        return self


def user_side_estimate(world: World, items: np.ndarray, kappa: float, quality_residual=None) -> np.ndarray:
    """Latent item estimate the user-side ranker works with.

    Taste: the creator's topic is the prior and confidence in the item's own
    topic grows as exposures / (exposures + kappa). Quality: the creator's
    quality plus ``quality_residual``, the engagement-based correction
    learned from feedback (zero when omitted).
    """
    it = world.items
    w = it.w[items]
    creators = it.creator[items]
    d_t = world.d_z - 2
    est = w.copy()
    expo = it.exposures[items].astype(float)
    c = expo / (expo + kappa)
    prior = world.creator_topic[creators]
    est[:, :d_t] = prior + c[:, None] * (w[:, :d_t] - prior)
    est[:, d_t] = world.creator_quality[creators]
    if quality_residual is not None:
        est[:, d_t] += quality_residual
    return est


def engagement_residual(positives, expected, pseudo: float) -> np.ndarray:
    """log((P + m) / (E + m)): observed over prior-expected positives, shrunk towards 0."""
    return np.log((np.asarray(positives) + pseudo) / (np.asarray(expected) + pseudo))


def positive_probability(a: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """P(any binary channel fires) for affinity ``a`` under independent channels."""
    miss = np.ones_like(a)
    for b in bias:
        miss = miss * (1.0 - sigmoid(a + b))
    return 1.0 - miss


class ArmEngine:
    """Serving and (optionally) creator-side matching for one experiment arm."""

    def __init__(self, arm: int, name: str, flags: ArmFlags, config: EngineConfig, world: World):
        self.arm = arm
        self.name = name
        self.flags = flags.validate()
        self.config = config.validate()
        self.users = np.flatnonzero(world.user_arm == arm)
        self.alpha = weight_vector(config.alpha)
        self.beta = weight_vector(config.beta)
        self.bias = np.asarray(world.config.channel_bias, dtype=float)
        self.lam = config.fixed_lambda if config.fixed_lambda is not None else config.lam0
        if not flags.dualrec:
            self.lam = 0.0
        self.controller = LambdaController(target=config.q_dual, lam=self.lam, gain=config.controller_gain)
        self.share_history: list[float] = []
        self.item_pos = np.zeros(0)
        self.item_exp = np.zeros(0)
        self.residual_center = 0.0
        self.dualrec_active = False
        self.store: AvailableUserStore | None = None
        self.cache: ResultCache | None = None
        self.diagnostics: dict = {}
        if flags.dualrec:
            self._init_creator_side(world)

    # -- setup ---------------------------------------------------------------

    def _init_creator_side(self, world: World) -> None:
        cfg = self.config
        self.log = InteractionLog()
        self.log.add_users(self.users.tolist())
        self.features = FeatureState(world.n_users, world.config.content_dim, cfg.content_neighbors)
        self.known_items = np.zeros(0, dtype=np.int64)
        self.daily: dict[int, tuple] = {}
        self.snapshots: dict = {}
        self.store = AvailableUserStore(self.users, Q=cfg.Q, enforce_capacity=self.flags.capacity)
        self.cache = ResultCache(self.store)
        self.activity = None
        self.activity_day = -10**9
        self.two_tower: TwoTowerModel | None = None
        self.predictor: PredictionModel | None = None
        self.trained_day = -10**9
        self.user_index: InnerProductIndex | None = None
        self.retriever: SimilarityRetriever | None = None

    def start_dualrec(self) -> None:
        """Switch the creator-side path on (serving before this is user-side only)."""
        if not self.flags.dualrec:
            raise RuntimeError(f"arm {self.name} has no creator-side path")
        self.dualrec_active = True

    # -- user side -------------------------------------------------------------

    def _pool(self, world: World, day: int) -> np.ndarray:
        it = world.items
        n = len(it)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        ok = (it.arm == self.arm) & (it.day > day - self.config.pool_days) & (it.day <= day)
        return np.flatnonzero(ok)

    def _grow_tallies(self, n: int) -> None:
        if len(self.item_pos) < n:
            cap = max(n, 2 * len(self.item_pos), 1024)
            for name in ("item_pos", "item_exp"):
                old = getattr(self, name)
                new = np.zeros(cap)
                new[: len(old)] = old
                setattr(self, name, new)

    def quality_residual(self, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        self._grow_tallies(int(items.max()) + 1 if len(items) else 0)
        r = engagement_residual(self.item_pos[items], self.item_exp[items], self.config.engagement_pseudo)
        return r - self.residual_center

    def _center_residuals(self, world: World, pool: np.ndarray) -> None:
        # selected pairs underperform the ranker's own expectation (winner's curse), so
        # residuals are centred on the pool's exposure-weighted mean to keep fresh items neutral
        self.residual_center = 0.0
        if len(pool) == 0:
            return
        expo = world.items.exposures[pool].astype(float)
        if expo.sum() > 0:
            r = self.quality_residual(pool)
            self.residual_center = float(np.dot(expo, r) / expo.sum())

    def user_side_scores(self, world: World, users: np.ndarray, items: np.ndarray):
        """(f, affinity estimate) for the users x items grid; f includes the new-item boost."""
        est = user_side_estimate(world, items, self.config.confidence_kappa, self.quality_residual(items))
        a = world.user_z[users] @ est.T
        f = np.zeros_like(a)
        for m in range(N_BINARY):
            f += self.alpha[m] * sigmoid(a + self.bias[m])
        f += self.alpha[N_BINARY] * sigmoid(a)
        fresh = world.items.exposures[items] < self.config.new_item_threshold
        f[:, fresh] += self.config.new_item_boost
        return f, a

    def user_side_candidates(self, world: World, day: int, users: np.ndarray, pool: np.ndarray):
        """Boolean (users, pool) mask of retrieved unseen items, plus f and the seen mask."""
        cfg = self.config
        f, a = self.user_side_scores(world, users, pool)
        self._last_affinity = (users, pool, a)
        seen = world.seen_block(users, pool)
        retr = np.where(seen, -np.inf, a)
        cand = np.zeros_like(seen)
        c = min(cfg.retrieval_size, len(pool))
        if c > 0:
            top = np.argpartition(-retr, c - 1, axis=1)[:, :c]
            np.put_along_axis(cand, top, True, axis=1)
        cand &= ~seen
        fresh = world.items.exposures[pool] < cfg.new_item_threshold
        n_new = min(cfg.new_item_slots, len(pool))
        if n_new > 0 and np.any(fresh):
            key = hash_uniform(cfg.seed, _NEW_PICK, day, users[:, None], pool[None, :])
            key = np.where(fresh[None, :] & ~seen, key, -1.0)
            pick = np.argpartition(-key, n_new - 1, axis=1)[:, :n_new]
            extra = np.zeros_like(seen)
            np.put_along_axis(extra, pick, True, axis=1)
            cand |= extra & (key >= 0)
        return cand, f, seen

    def serve(self, world: World, day: int, visitors: np.ndarray) -> ExposureBatch:
        pool = self._pool(world, day)
        if self.flags.dualrec:
            self._register_items(world, pool)
            # today's uploads are already in the pool, so re-snapshot after registering them
            self.snapshots[day] = self.features.snapshot(day)
        if len(visitors) == 0 or len(pool) == 0:
            self.share_history.append(0.0)
            return ExposureBatch.empty()
        self._center_residuals(world, pool)
        cand, f, seen = self.user_side_candidates(world, day, visitors, pool)
        pos_of = {int(i): k for k, i in enumerate(pool)}
        policy = ServePolicy(lam=self.lam, K=self.config.K, q_dual=self.config.q_dual)
        cache = self.cache if self.dualrec_active else None
        out_u, out_i, out_r, out_s = [], [], [], []
        for r, u in enumerate(visitors.tolist()):
            cols = np.flatnonzero(cand[r])
            matched_f = None
            if cache is not None:
                view = cache.view(u)
                if view:
                    # matches outside today's pool or already seen cannot be served
                    stale = [i for i in view if i not in pos_of or seen[r, pos_of[i]]]
                    if stale:
                        cache.consume(u, stale)
                    matched_f = {i: float(f[r, pos_of[i]]) for i in view if i in pos_of}
            slate = serve_user_request(u, self.config.K, pool[cols], f[r, cols], cache, policy, matched_f)
            k = len(slate)
            out_u.append(np.full(k, u, dtype=np.int64))
            out_i.append(np.asarray(slate.items, dtype=np.int64))
            out_r.append(np.arange(k, dtype=np.int64))
            out_s.append(np.array([SOURCE_CODE[s] for s in slate.sources], dtype=np.int64))
        batch = ExposureBatch(
            np.concatenate(out_u), np.concatenate(out_i), np.concatenate(out_r), np.concatenate(out_s)
        )
        n = len(batch)
        self.share_history.append(float(np.sum(batch.sources != 0)) / n if n else 0.0)
        # positives the ranker expected from these exposures before its engagement correction
        users, pool_ids, a = self._last_affinity
        rows = np.searchsorted(users, batch.users) if np.all(np.diff(users) > 0) else None
        if rows is None:
            rows = np.array([int(np.flatnonzero(users == u)[0]) for u in batch.users.tolist()], dtype=np.int64)
        cols = np.array([pos_of[i] for i in batch.items.tolist()], dtype=np.int64)
        a0 = a[rows, cols] - self.quality_residual(batch.items)
        np.add.at(self.item_exp, batch.items, positive_probability(a0, self.bias))
        return batch

    # -- creator side ------------------------------------------------------------

    def _register_items(self, world: World, items: np.ndarray) -> None:
        new = np.setdiff1d(items, self.known_items)
        if len(new) == 0:
            return
        it = world.items
        for i in new.tolist():
            self.log.add_item(i, int(it.creator[i]), int(it.day[i]))
        # content neighbours among earlier items of this arm (no look-ahead)
        recent = self.known_items[it.day[self.known_items] > int(it.day[new].min()) - 14] if len(self.known_items) else self.known_items
        nb = content_neighbors(it.content[new], it.content[recent], recent, self.config.content_neighbors)
        self.features.add_items(new, it.content[new], nb)
        self.known_items = np.union1d(self.known_items, new)

    def observe(self, world: World, day: int, batch: ExposureBatch) -> None:
        if len(batch) == 0:
            return
        fb = batch.feedback
        self._grow_tallies(int(batch.items.max()) + 1)
        np.add.at(self.item_pos, batch.items, fb[:, :N_BINARY].any(axis=1).astype(float))
        if not self.flags.dualrec:
            return
        self.log.extend(batch.users, batch.items, day, fb)
        positive = fb[:, :N_BINARY].any(axis=1)
        visible = fb[:, CREATOR_VISIBLE_IDX].sum(axis=1)
        self.features.observe(batch.users, batch.items, positive, visible)
        self.daily[day] = (batch.users.copy(), batch.items.copy(), fb.copy())
        for old in [d for d in self.daily if d <= day - max(self.config.train_days, self.config.similarity_days)]:
            del self.daily[old]
        for old in [d for d in self.snapshots if d < day - self.config.train_days]:
            del self.snapshots[old]

    def end_of_day(self, world: World, day: int, uploads: np.ndarray) -> MatchBatch:
        if not self.flags.dualrec:
            return MatchBatch.empty()
        if self.config.fixed_lambda is None and self.dualrec_active:
            self.lam = self.controller.update(self.share_history[-1] if self.share_history else 0.0)
        self._register_items(world, uploads)
        if not self.dualrec_active:
            return MatchBatch.empty()
        snap = self.features.snapshot(day + 1)
        self.snapshots[day + 1] = snap
        if day - self.trained_day >= self.config.retrain_every or self.predictor is None:
            self._train(world, day, snap)
        self._refresh(world, day)
        if self.predictor is None or self.two_tower is None:
            return MatchBatch.empty()
        self._build_retrieval(world, day, snap)
        return self._match(world, day, uploads, snap)

    def _refresh(self, world: World, day: int) -> None:
        model = None
        visits = world.visit_matrix(day)[self.users]
        inter = world.interaction_matrix(day)[self.users]
        col = world.visit_column(day)
        if self.flags.activity_prediction:
            if self.activity is None or day - self.activity_day >= self.config.activity_retrain_every:
                try:
                    self.activity = train_activity_model(
                        visits, inter, weekday_of=lambda t: t % 7, tau=self.config.tau, seed=self.config.seed
                    )
                    self.activity_day = day
                except InsufficientHistory:
                    logger.warning("arm %s: not enough visit history for activity prediction", self.name)
            model = self.activity
        feats = activity_features(visits, inter, col, (col + 1) % 7) if model is not None else None
        refresh_daily(self.store, model, feats, day=day + 1)

    def _train(self, world: World, day: int, snap) -> None:
        cfg = self.config
        lo = day - cfg.train_days + 1
        rows = [self.daily[d] for d in sorted(self.daily) if d >= lo]
        if not rows:
            return
        # predictor: every exposure, featurised as of its own day start
        xu, xi, us, its, fbs = [], [], [], [], []
        for d in sorted(self.daily):
            if d < lo or d not in self.snapshots:
                continue
            u, i, fb = self.daily[d]
            s = self.snapshots[d]
            xu.append(s.user_features(u))
            xi.append(s.item_features(i, self.flags.extra_features))
            us.append(u)
            its.append(i)
            fbs.append(fb)
        if not us:
            return
        us, its, fbs = np.concatenate(us), np.concatenate(its), np.concatenate(fbs)
        xu, xi = np.vstack(xu), np.vstack(xi)
        if len(us) > cfg.max_train_rows:
            keep = np.sort(np.random.default_rng([cfg.seed, day]).choice(len(us), cfg.max_train_rows, replace=False))
            us, its, fbs, xu, xi = us[keep], its[keep], fbs[keep], xu[keep], xi[keep]
        pcfg = PredictorConfig(
            **{
                **cfg.predictor,
                "use_sample_augmentation": self.flags.sample_augmentation,
                "use_extra_features": self.flags.extra_features,
                "seed": cfg.seed + day,
            }
        )
        self.predictor = train_predictor(us, its, fbs, xu, xi, pcfg)

        pairs = positive_pairs(self.log, (day - cfg.similarity_days + 1, day + 1))
        if len(pairs) > cfg.max_positive_pairs:
            pairs = pairs[-cfg.max_positive_pairs :]
        if len(pairs):
            ufeat = FeatureTable(self.users, snap.user_features(self.users))
            items = np.unique(pairs[:, 1])
            ifeat = FeatureTable(items, self._two_tower_item_x(snap, items))
            tcfg = TwoTowerConfig(**{**cfg.two_tower, "seed": cfg.seed + day})
            try:
                self.two_tower = train_two_tower(self.log, ufeat, ifeat, tcfg, negative_pool=self.users, pairs=pairs)
            except TrainingError as exc:
                logger.warning("arm %s: two-tower training skipped: %s", self.name, exc)
        self.trained_day = day

    @staticmethod
    def _two_tower_item_x(snap, items) -> np.ndarray:
        return snap.item_features(items, extra=False)

    def _build_retrieval(self, world: World, day: int, snap) -> None:
        cfg = self.config
        ux = snap.user_features(self.users)
        self.user_index = InnerProductIndex("user", self.users, self.two_tower.embed_users(self.users, ux))
        need_items = "i2i2u" in self.flags.retrievals
        need_users = "i2u2u" in self.flags.retrievals
        if not (need_items or need_users):
            self.retriever = None
            return
        recent = PositiveHistory()
        for d in sorted(self.daily):
            if d > day - cfg.similarity_days:
                u, i, fb = self.daily[d]
                pos = fb[:, :N_BINARY].any(axis=1)
                for a, b in zip(u[pos].tolist(), i[pos].tolist()):
                    recent.add(a, b)
        item_sim = ItemSimilarityService()
        user_sim = UserSimilarityService()
        if need_items:
            it = world.items
            pool = self._pool(world, day)
            content = build_content_similarity(ContentEmbedding(pool, it.content[pool]), cfg.k_sim)
            item_sim = ItemSimilarityService(
                build_cf_similarity(recent, "item", cfg.k_sim), content, cfg.content_weight, cfg.k_sim
            )
        if need_users:
            user_sim = UserSimilarityService(build_cf_similarity(recent, "user", cfg.k_sim))
        self.retriever = SimilarityRetriever(self.log.history, item_sim, user_sim, cfg.k_sim)

    def theta(self, users: np.ndarray) -> np.ndarray:
        if not self.flags.theta:
            return np.ones(len(users))
        bias = UserBias.from_counts(self.features.user_inter, self.features.user_expo, self.config.theta_floor)
        return bias[users]

    def _match(self, world: World, day: int, uploads: np.ndarray, snap) -> MatchBatch:
        cfg = self.config
        if len(uploads) == 0:
            return MatchBatch.empty()
        it = world.items
        item_x = snap.item_features(uploads, self.flags.extra_features)
        tt_x = self._two_tower_item_x(snap, uploads)
        item_emb = self.two_tower.embed_items(uploads, tt_x)
        user_scores = item_emb @ self.user_index.vectors.T
        out_u, out_i, out_s = [], [], []

        def retrieve_for(k):
            def retrieve(item, avail):
                mask = np.zeros(len(self.users), dtype=bool)
                mask[np.searchsorted(self.users, avail)] = True
                res = {}
                if "two_tower" in self.flags.retrievals:
                    cand = np.flatnonzero(mask)
                    top = topk_desc(user_scores[k, cand], self.users[cand], cfg.retrieval_k)
                    res["two_tower"] = self.users[cand[top]].tolist()
                if self.retriever is not None:
                    allowed = set(self.users[mask].tolist())
                    if "i2i2u" in self.flags.retrievals:
                        res["i2i2u"] = self.retriever.i2i2u(item, cfg.retrieval_k, allowed)
                    if "i2u2u" in self.flags.retrievals:
                        res["i2u2u"] = self.retriever.i2u2u(item, cfg.retrieval_k, allowed)
                return res

            return retrieve

        def score_for(k):
            def score(item, users):
                users = np.asarray(users, dtype=np.int64)
                xu = snap.user_features(users)
                xi = np.repeat(item_x[k : k + 1], len(users), axis=0)
                s = self.predictor.predict(users, xu, np.full(len(users), item), xi)
                return integrate_creator_side(s, self.beta, self.theta(users), cfg.theta_floor, self.diagnostics)

            return score

        for k, item in enumerate(uploads.tolist()):
            res = dualrec_recommend(self.store, item, cfg.L, retrieve_for(k), score_for(k))
            out_u.append(np.asarray(res.users, dtype=np.int64))
            out_i.append(np.full(len(res), item, dtype=np.int64))
            out_s.append(np.array([SOURCE_CODE["dualrec/" + s] for s in res.sources], dtype=np.int64))
        return MatchBatch(np.concatenate(out_u), np.concatenate(out_i), np.concatenate(out_s))


def build_engines(world: World, arms: dict[int, tuple[str, ArmFlags]], config: EngineConfig) -> dict[int, ArmEngine]:
    return {arm: ArmEngine(arm, name, flags, config, world) for arm, (name, flags) in arms.items()}
