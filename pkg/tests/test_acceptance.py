"""Exit criteria at their stated scales and tolerances.

Run alone with ``pytest -m acceptance -v``; the verdict table is printed in
the terminal summary. The full-scale runs take roughly a quarter of an hour
on one core.
"""

import time

import numpy as np
import pytest

from dualrec.combiner import combined_scores
from dualrec.engine import EngineConfig
from dualrec.experiment import (
    EventLog,
    ExperimentConfig,
    ExperimentReport,
    ablation_experiment,
    capacity_experiment,
    compute_metrics,
    coverage_experiment,
    cross_arm_exposures,
    evaluate_logs,
    hit_rate_experiment,
    metric_auc,
    run_experiment,
    run_seed,
)
from dualrec.ranking import integrate_creator_side, integrate_user_side, predictor_loss_grad
from dualrec.retrieval import InnerProductIndex, topk_items, topk_users, two_tower_loss_grad
from dualrec.simulator import WorldConfig
from dualrec.uac import AvailabilityError, AvailableUserStore

from conftest import record
from test_retrieval import brute_topk, finite_difference_check, make_log, random_pairs, retriever_for

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2, 3, 4]
WORLD = WorldConfig()
ENGINE = EngineConfig()


@pytest.fixture(scope="module")
def ladder():
    """The shared 20-day, 5-seed co-diverted run of Base, v1 and v5."""
    cfg = ExperimentConfig(world=WORLD, engine=ENGINE, arms=["base", "v1", "v5"], seeds=SEEDS, days=20)
    runs = [run_seed(cfg, s) for s in SEEDS]
    report = ExperimentReport([r for run in runs for r in run.metrics], tuple(cfg.thresholds))
    return runs, report


# 1 ---------------------------------------------------------------------------


def test_mirror_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        n_u, n_i = int(rng.integers(2, 51)), int(rng.integers(2, 51))
        pairs = random_pairs(rng, n_u, n_i, int(rng.integers(1, 4 * max(n_u, n_i))))
        log = make_log(pairs, n_u, n_i)
        r, rt = retriever_for(log), retriever_for(log.transpose())
        for i in range(n_i):
            mismatches += set(r.i2i2u(i, 10_000)) != set(rt.u2u2i(i, 10_000))
            mismatches += set(r.i2u2u(i, 10_000)) != set(rt.u2i2i(i, 10_000))
        for u in range(n_u):
            mismatches += set(r.u2u2i(u, 10_000)) != set(rt.i2i2u(u, 10_000))
            mismatches += set(r.u2i2i(u, 10_000)) != set(rt.i2u2u(u, 10_000))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record(1, "mirror equivalence", ok, f"{mismatches} mismatching lists over 100 logs, {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_exact_topk_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    wrong = 0
    for kind, query in (("user", topk_users), ("item", topk_items)):
        vecs = rng.normal(size=(1000, 16))
        vecs[rng.integers(0, 1000, 50)] = vecs[0]  # planted ties
        ids = rng.permutation(5000)[:1000]
        idx = InnerProductIndex(kind, ids, vecs)
        for q in range(100):
            v = rng.normal(size=16) if q % 10 else vecs[0].copy()
            k = int(rng.choice([1, 10, 200]))
            wrong += query(idx, v, k) != brute_topk(vecs, ids, v, k)
    elapsed = time.perf_counter() - t0
    ok = wrong == 0 and elapsed < 60
    record(2, "exact top-K oracle", ok, f"{wrong}/200 queries differ from brute force, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_uac_capacity_safety():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    Q, n = 10, 40
    worst, divergent = 0, 0
    for _ in range(1000):
        store = AvailableUserStore(range(n), Q=Q)
        store.set_activity(rng.random(n) < 0.7)
        for item in range(int(rng.integers(1, 60))):
            users = rng.choice(n, int(rng.integers(1, 15)), replace=False)
            if rng.random() < 0.5:
                try:
                    store.assign(item, users)
                except AvailabilityError:
                    pass
            else:
                store.assign_ranked(item, users.tolist(), rng.random(len(users)), ["tt"] * len(users), 8)
            worst = max(worst, int(store.sizes().max()))
            divergent += not np.array_equal(store.available_mask(), store.recompute_available())
    elapsed = time.perf_counter() - t0
    ok = worst <= Q and divergent == 0 and elapsed < 120
    record(3, "UAC capacity safety", ok, f"max |D_u|={worst}, {divergent} available-set mismatches, {elapsed:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_hit_rate_dominance():
    t0 = time.perf_counter()
    res = hit_rate_experiment(WORLD, ENGINE, SEEDS)
    elapsed = time.perf_counter() - t0
    pred = np.mean(list(res["predicted"].values()))
    base = np.mean(list(res["all_users"].values()))
    ok = pred - base >= 0.10 and elapsed < 600
    record(4, "hit rate", ok, f"predicted {pred:.3f} vs all users {base:.3f} ({100 * (pred - base):+.1f}pp), {elapsed:.0f}s")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_matching_set_distribution():
    t0 = time.perf_counter()
    res = capacity_experiment(WORLD, ENGINE, SEEDS)
    elapsed = time.perf_counter() - t0
    Q = ENGINE.Q
    without = res["no_store"]
    ok = all(v > 5 * Q for v in without.values()) and all(v <= Q for v in res["store"].values()) and elapsed < 300
    record(
        5, "matching-set sizes", ok,
        f"max |D_u| without store {sorted(without.values())} (need > {5 * Q}), "
        f"with store {max(res['store'].values())}, {elapsed:.0f}s",
    )
    assert ok


# 6 ---------------------------------------------------------------------------


def test_coverage_ordering():
    res = [coverage_experiment(WORLD, ENGINE, s) for s in SEEDS]
    user = np.mean([r["user_side"] for r in res])
    creator = np.mean([r["creator_side"] for r in res])
    ok = creator >= 2 * user
    record(6, "new-item coverage", ok, f"creator side {creator:.3f} vs user side {user:.3f} (need >= 2x)")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_sa_ef_ablation():
    res = [ablation_experiment(WORLD, ENGINE, s) for s in SEEDS]
    m = {k: float(np.mean([r[k] for r in res])) for k in ("neither", "sa", "sa_ef")}
    ok = m["sa_ef"] >= m["sa"] >= m["neither"] - 0.005 and m["sa_ef"] - m["neither"] >= 0.005
    record(7, "SA/EF ablation AUC", ok, f"neither {m['neither']:.4f}, SA {m['sa']:.4f}, SA+EF {m['sa_ef']:.4f}")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_exporeach_direction(ladder):
    _, report = ladder
    er = {a: report.values(a, "exporeach_50") for a in ("base", "v1", "v5")}
    v1_wins = sum(er["v1"][s] > er["base"][s] for s in SEEDS)
    v5_wins = sum(er["v5"][s] >= er["v1"][s] for s in SEEDS)
    ok = v1_wins >= 4 and v5_wins >= 4
    detail = " ".join(f"{a}={[int(er[a][s]) for s in SEEDS]}" for a in er)
    record(8, "ExpoReach-50", ok, f"v1>Base on {v1_wins}/5, v5>=v1 on {v5_wins}/5; {detail}")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_dac_direction(ladder):
    _, report = ladder
    v5, base = report.mean("v5", "dac_final"), report.mean("base", "dac_final")
    ok = v5 > base
    record(9, "final-week DAC", ok, f"v5 {v5:.2f} vs Base {base:.2f}")
    assert ok


# 10 --------------------------------------------------------------------------


def test_exposure_quota(ladder):
    _, report = ladder
    shares = {a: report.values(a, "dualrec_share") for a in ("v1", "v5")}
    flat = [v for d in shares.values() for v in d.values()]
    ok = len(flat) == 2 * len(SEEDS) and all(abs(v - ENGINE.q_dual) <= 0.005 for v in flat)
    detail = " ".join(f"{a}={[round(v, 4) for v in d.values()]}" for a, d in shares.items())
    record(10, "exposure quota", ok, f"last-10-day shares {detail} (target {ENGINE.q_dual} +- 0.005)")
    assert ok


# 11 --------------------------------------------------------------------------


def _auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


def test_numerical_checks():
    rng = np.random.default_rng(0)
    tt = {
        "user_emb": rng.normal(0, 0.5, (3, 4)), "item_emb": rng.normal(0, 0.5, (3, 4)),
        "user_proj": rng.normal(0, 0.5, (4, 3)), "item_proj": rng.normal(0, 0.5, (4, 5)),
    }
    tt_batch = {"u_row": np.array([0, 1, 2]), "i_row": np.array([2, 1, 0]), "x_u": rng.normal(size=(3, 3)),
                "x_i": rng.normal(size=(3, 5)), "y": np.array([1.0, 0.0, 1.0])}
    tt_err = finite_difference_check(lambda p: two_tower_loss_grad(p, tt_batch, 1e-3), tt)

    n, d = 12, 5
    pr = {
        "user_emb": rng.normal(0, 0.5, (4, d)), "item_emb": rng.normal(0, 0.5, (5, d)),
        "user_proj": rng.normal(0, 0.5, (d, 3)), "item_proj": rng.normal(0, 0.5, (d, 4)),
        "head_w": rng.normal(0, 0.5, (7, d)), "head_b": rng.normal(0, 0.5, 7),
    }
    y = (rng.random((n, 7)) < 0.3).astype(float)
    y[:, -1] = rng.random(n)
    pr_batch = {"u_row": rng.integers(0, 4, n), "i_row": rng.integers(0, 5, n),
                "x_u": rng.normal(size=(n, 3)), "x_i": rng.normal(size=(n, 4)), "y": y}
    pr_err = finite_difference_check(lambda p: predictor_loss_grad(p, pr_batch, 1e-2), pr)

    integration_bad = 0
    for _ in range(200):
        s = rng.random((6, 7))
        w = rng.normal(size=7)
        theta = float(rng.uniform(0.01, 2.0))
        brute = np.array([sum(w[m] * row[m] for m in range(7)) for row in s])
        integration_bad += not np.array_equal(integrate_user_side(s, w), brute)
        integration_bad += not np.array_equal(integrate_creator_side(s, w, theta), brute / theta)
        items = rng.choice(50, 10, replace=False)
        f = rng.random(10)
        matched = set(rng.choice(items, 4, replace=False).tolist())
        g = {i: float(rng.random()) for i in matched}
        lam = float(rng.uniform(0, 3))
        expect = [f[k] + lam * g[i] if i in matched else f[k] for k, i in enumerate(items.tolist())]
        integration_bad += not np.array_equal(combined_scores(items, f, g, matched, lam), expect)

    auc_bad = 0
    for _ in range(50):
        m = int(rng.integers(2, 40))
        scores = rng.integers(0, 6, m).astype(float)
        labels = rng.random(m) < 0.4
        labels[0], labels[1] = True, False
        auc_bad += abs(metric_auc(scores, labels) - _auc_pairs(scores, labels)) > 1e-12

    ok = tt_err <= 1e-5 and pr_err <= 1e-5 and integration_bad == 0 and auc_bad == 0
    record(
        11, "numerical checks", ok,
        f"grad rel err two-tower {tt_err:.1e} predictor {pr_err:.1e}; "
        f"{integration_bad} integration and {auc_bad} AUC mismatches",
    )
    assert ok


# 12 --------------------------------------------------------------------------


def test_determinism_and_audit(tmp_path, ladder):
    small = ExperimentConfig(
        world=WorldConfig(n_users=400, n_creators=40), arms=["base", "v1", "v5"], seeds=[0, 1], days=5, warmup_days=2
    )
    run_experiment(small, tmp_path / "a")
    first = run_experiment(small, tmp_path / "b")
    identical = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    audit_small = evaluate_logs(tmp_path / "a").rows == first.rows

    runs, _ = ladder
    audit_full = all(
        [{"seed": run.seed, **r} for r in compute_metrics(EventLog(run.log.meta, run.log.tables))] == run.metrics
        for run in runs
    )
    leaks = sum(cross_arm_exposures(run.log) for run in runs) + sum(
        cross_arm_exposures(EventLog.from_jsonl(p)) for p in (tmp_path / "a").glob("seed_*/events.jsonl")
    )
    ok = identical and audit_small and audit_full and leaks == 0
    record(
        12, "determinism and audit", ok,
        f"bit-identical CSVs={identical}, evaluate==in-run small={audit_small} full={audit_full}, "
        f"cross-arm exposures={leaks}",
    )
    assert ok
