import numpy as np
import pytest

from dualrec.core import Interaction, InteractionLog, feedback_vector
from dualrec.retrieval import (
    FeatureTable,
    InnerProductIndex,
    IVFIndex,
    SimilarityRetriever,
    TrainingError,
    TwoTowerConfig,
    build_index,
    load_two_tower,
    measure_recall,
    save_two_tower,
    topk_items,
    topk_users,
    train_two_tower,
    two_tower_loss_grad,
)
from dualrec.similarity import (
    ItemSimilarityService,
    SimilarityIndex,
    UserSimilarityService,
    build_cf_similarity,
    build_content_similarity,
)

LIKE = tuple(feedback_vector(like=1))


def make_log(pairs, n_users, n_items):
    log = InteractionLog()
    log.add_users(range(n_users))
    for i in range(n_items):
        log.add_item(i, i, 0)
    for u, i in pairs:
        log.record(Interaction(u, i, 0, LIKE))
    return log


def retriever_for(log, k_sim=50):
    return SimilarityRetriever(
        log,
        ItemSimilarityService(build_cf_similarity(log, "item", k_sim)),
        UserSimilarityService(build_cf_similarity(log, "user", k_sim)),
        k_sim,
    )


def random_pairs(rng, n_users, n_items, n):
    return [tuple(map(int, p)) for p in rng.integers(0, [n_users, n_items], size=(n, 2))]


# --- similarity-based ------------------------------------------------------


def test_u2u2i_empty_without_similar_users():
    log = make_log([(0, 0), (1, 1)], 2, 2)
    assert retriever_for(log).u2u2i(0) == []


def test_u2u2i_direct_substitution():
    hist = make_log([], 2, 3).history
    hist.add(1, 1)
    hist.add(1, 2)
    users = UserSimilarityService(SimilarityIndex("user", {0: ((1, 0.7),), 1: ((0, 0.7),)}))
    r = SimilarityRetriever(hist, ItemSimilarityService(), users)
    assert sorted(r.u2u2i(0)) == [1, 2]


def test_u2i2i_direct_substitution_and_empty():
    hist = make_log([], 2, 3).history
    hist.add(0, 0)
    items = ItemSimilarityService(SimilarityIndex("item", {0: ((1, 0.9),)}))
    r = SimilarityRetriever(hist, items, UserSimilarityService())
    assert r.u2i2i(0) == [1]
    assert r.u2i2i(1) == []


def test_i2i2u_cold_item_uses_content_neighbors():
    log = make_log([(1, 0), (2, 0)], 3, 2)
    content = build_content_similarity({0: [1.0, 0.0], 1: [1.0, 0.1]})
    r = SimilarityRetriever(
        log, ItemSimilarityService(build_cf_similarity(log, "item"), content), UserSimilarityService()
    )
    assert sorted(r.i2i2u(1)) == [1, 2]
    assert r.i2u2u(1) == []


def _oracle_union(seeds_fn, expand_fn, exclude):
    out = set()
    for s in seeds_fn:
        out |= set(expand_fn(s))
    return out - exclude


def test_random_logs_match_set_union_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        log = make_log(random_pairs(rng, 15, 15, 50), 15, 15)
        r = retriever_for(log)
        h = log.history
        S_I = r.item_sim.neighbors
        S_U = r.user_sim.neighbors
        for u in range(15):
            exp = _oracle_union([v for v, _ in S_U.get(u, ())], h.user, set(h.user(u)))
            assert set(r.u2u2i(u, 10_000)) == exp
            exp = _oracle_union(h.user(u), lambda i: [j for j, _ in S_I.get(i, ())], set(h.user(u)))
            assert set(r.u2i2i(u, 10_000)) == exp
        for i in range(15):
            exp = _oracle_union([j for j, _ in S_I.get(i, ())], h.item, set(h.item(i)))
            assert set(r.i2i2u(i, 10_000)) == exp
            exp = _oracle_union(h.item(i), lambda u: [v for v, _ in S_U.get(u, ())], set(h.item(i)))
            assert set(r.i2u2u(i, 10_000)) == exp


def test_mirror_property_on_transposed_log():
    rng = np.random.default_rng(11)
    for _ in range(30):
        log = make_log(random_pairs(rng, 20, 20, 60), 20, 20)
        mirror = log.transpose()
        r, rt = retriever_for(log), retriever_for(mirror)
        for e in range(20):
            # truncated lists must match exactly, order included
            assert r.i2i2u(e, 7) == rt.u2u2i(e, 7)
            assert r.i2u2u(e, 7) == rt.u2i2i(e, 7)
            assert set(r.i2i2u(e)) == set(rt.u2u2i(e))


def test_outputs_have_no_duplicates_and_respect_allowed():
    rng = np.random.default_rng(2)
    log = make_log(random_pairs(rng, 30, 30, 200), 30, 30)
    r = retriever_for(log)
    allowed = set(range(0, 30, 2))
    for i in range(30):
        out = r.i2i2u(i, 50, allowed)
        assert len(out) == len(set(out))
        assert set(out) <= allowed
        assert not set(out) & set(log.history.item(i))


def test_truncation_prefers_higher_similarity_times_recency():
    hist = make_log([], 3, 4).history
    for i in (0, 1):
        hist.add(1, i)
    for i in (2, 3):
        hist.add(2, i)
    users = UserSimilarityService(SimilarityIndex("user", {0: ((1, 0.9), (2, 0.5))}))
    r = SimilarityRetriever(hist, ItemSimilarityService(), users)
    # weights: item1 .9, item0 .45, item3 .5, item2 .25
    assert r.u2u2i(0, 2) == [1, 3]


# --- two-tower -------------------------------------------------------------


def separable_world(seed=0):
    """Two user groups x two item groups; group a only likes group a."""
    rng = np.random.default_rng(seed)
    n_u, n_i = 40, 20
    ug = np.arange(n_u) % 2
    ig = np.arange(n_i) % 2
    pairs = [(u, i) for u in range(n_u) for i in range(n_i) if ug[u] == ig[i] and rng.random() < 0.6]
    log = make_log(pairs, n_u, n_i)
    uf = FeatureTable(range(n_u), np.eye(2)[ug] + rng.normal(0, 0.1, (n_u, 2)))
    itf = FeatureTable(range(n_i), np.eye(2)[ig] + rng.normal(0, 0.1, (n_i, 2)))
    return log, uf, itf, ug, ig


def test_two_tower_learns_separable_data():
    log, uf, itf, ug, ig = separable_world()
    cfg = TwoTowerConfig(d_e=8, epochs=15, learning_rate=0.02, batch_size=64, seed=3)
    model = train_two_tower(log, uf, itf, cfg)
    hist = model.loss_history
    for a, b in zip(hist, hist[1:]):
        assert b <= a + 1e-3
    # pairwise ranking accuracy: positive pair outranks same-item pair from the other group
    users = np.arange(40)
    correct = total = 0
    for i in range(20):
        s = model.score(users, uf.rows(users), np.full(40, i), itf.rows(np.full(40, i)))
        pos, neg = s[ug == ig[i]], s[ug != ig[i]]
        correct += np.sum(pos[:, None] > neg[None, :])
        total += pos.size * neg.size
    assert correct / total >= 0.95


def test_two_tower_determinism():
    log, uf, itf, *_ = separable_world()
    cfg = TwoTowerConfig(d_e=4, epochs=3, seed=9)
    a = train_two_tower(log, uf, itf, cfg)
    b = train_two_tower(log, uf, itf, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_two_tower_requires_positives():
    log = make_log([], 3, 3)
    with pytest.raises(TrainingError):
        train_two_tower(log, FeatureTable.empty(2), FeatureTable.empty(2))


def finite_difference_check(loss_grad, params, h=1e-4):
    _, grads = loss_grad(params)
    worst = 0.0
    for name, p in params.items():
        fd = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_grad(params)
            p[idx] = old - h
            lm, _ = loss_grad(params)
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        err = np.linalg.norm(fd - grads[name]) / max(np.linalg.norm(grads[name]), 1e-12)
        worst = max(worst, err)
    return worst


def test_two_tower_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {
        "user_emb": rng.normal(0, 0.5, (3, 4)),
        "item_emb": rng.normal(0, 0.5, (3, 4)),
        "user_proj": rng.normal(0, 0.5, (4, 3)),
        "item_proj": rng.normal(0, 0.5, (4, 5)),
    }
    for label in (0.0, 1.0):
        batch = {
            "u_row": np.array([1]),
            "i_row": np.array([2]),
            "x_u": rng.normal(size=(1, 3)),
            "x_i": rng.normal(size=(1, 5)),
            "y": np.array([label]),
        }
        err = finite_difference_check(lambda p: two_tower_loss_grad(p, batch, 1e-3), params)
        assert err <= 1e-5


def test_checkpoint_roundtrip(tmp_path):
    log, uf, itf, *_ = separable_world()
    model = train_two_tower(log, uf, itf, TwoTowerConfig(d_e=4, epochs=2))
    save_two_tower(model, tmp_path / "tt.json")
    back = load_two_tower(tmp_path / "tt.json")
    for k in model.params:
        assert np.array_equal(model.params[k], back.params[k])
    u = np.arange(5)
    assert np.array_equal(
        model.score(u, uf.rows(u), u, itf.rows(u)), back.score(u, uf.rows(u), u, itf.rows(u))
    )


# --- indices ---------------------------------------------------------------


def brute_topk(vectors, ids, q, k):
    s = vectors @ q
    order = sorted(range(len(ids)), key=lambda j: (-s[j], ids[j]))
    return [int(ids[j]) for j in order[:k]]


def test_single_entity_index():
    idx = InnerProductIndex("user", [7], np.ones((1, 3)))
    assert idx.query(np.array([-1.0, 0, 0]), 5) == [7]


def test_user_index_matches_brute_force():
    rng = np.random.default_rng(4)
    vecs = rng.normal(size=(100, 8))
    ids = rng.permutation(1000)[:100]
    idx = InnerProductIndex("user", ids, vecs)
    for _ in range(20):
        q = rng.normal(size=8)
        assert topk_users(idx, q, 5) == brute_topk(vecs, ids, q, 5)
    assert topk_users(idx, q, 500) == brute_topk(vecs, ids, q, 500)


def test_ties_resolved_by_ascending_id():
    vecs = np.array([[1.0], [1.0], [1.0], [0.5]])
    idx = InnerProductIndex("item", [9, 3, 5, 1], vecs)
    assert topk_items(idx, np.array([1.0]), 2) == [3, 5]


def test_empty_index_and_restriction():
    empty = InnerProductIndex("user", [], np.zeros((0, 3)))
    assert topk_users(empty, np.ones(3), 10) == []
    idx = InnerProductIndex("user", [0, 1, 2], np.eye(3))
    assert topk_users(idx, np.array([1.0, 1.0, 0.5]), 10, available={2}) == [2]


def test_index_kinds_share_pair_scores():
    log, uf, itf, *_ = separable_world()
    model = train_two_tower(log, uf, itf, TwoTowerConfig(d_e=4, epochs=2))
    users, items = np.arange(40), np.arange(20)
    uidx = build_index(model, "user", users, uf)
    iidx = build_index(model, "item", items, itf)
    s_creator = uidx.vectors @ iidx.vectors[3]
    s_user = iidx.vectors @ uidx.vectors[5]
    assert s_creator[5] == pytest.approx(s_user[3], abs=1e-12)
    with pytest.raises(ValueError):
        topk_users(iidx, np.zeros(4), 3)


def test_ivf_backend_recall_is_measured():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(20, 16))
    vecs = centers[rng.integers(0, 20, 1000)] + 0.3 * rng.normal(size=(1000, 16))
    exact = InnerProductIndex("user", np.arange(1000), vecs)
    approx = IVFIndex("user", np.arange(1000), vecs, n_cells=16, nprobe=8, seed=1)
    recall = measure_recall(approx, exact, rng.normal(size=(100, 16)), 10)
    assert recall >= 0.95
