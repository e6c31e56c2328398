import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrec.engine import EngineConfig
from dualrec.experiment import (
    ArmSpec,
    EventLog,
    ExperimentConfig,
    LogFormatError,
    codivert_assign,
    compute_metrics,
    cross_arm_exposures,
    evaluate_logs,
    exposure_counts,
    metric_auc,
    metric_coverage,
    metric_dac,
    metric_exporeach,
    metric_exposure_ratio,
    metric_hit_rate,
    read_metrics_csv,
    run_experiment,
    run_seed,
)
from dualrec.simulator import SOURCE_CODE, ConfigError, WorldConfig

TINY = WorldConfig(n_users=300, n_creators=30, seed=0)


def toy_log(uploads=(), exposures=(), matches=(), visits=(), days=3, arms=("a", "b"), warmup=0):
    """Build an EventLog from tuples.

    uploads: (day, item, creator, arm); exposures: (day, user, item, source, arm);
    matches: (day, user, item, source, arm); visits: (day, user, arm).
    """
    def cols(rows, names):
        rows = list(rows)
        return {n: np.array([r[k] for r in rows], dtype=np.int64) for k, n in enumerate(names)}

    ex = [(d, u, i, SOURCE_CODE[s], 0, a, 0) for d, u, i, s, a in exposures]
    ma = [(d, u, i, SOURCE_CODE[s], a) for d, u, i, s, a in matches]
    tables = {
        "upload": cols(uploads, ("day", "item_id", "creator_id", "arm")),
        "visit": cols(visits, ("day", "user_id", "arm")),
        "exposure": cols(ex, ("day", "user_id", "item_id", "source", "rank", "arm", "interactions")),
        "match": cols(ma, ("day", "user_id", "item_id", "source", "arm")),
    }
    meta = {"days": days, "arms": list(arms), "warmup_days": warmup, "seed": 0}
    return EventLog(meta, tables)


# --- diversion ---------------------------------------------------------------


def test_codivert_partitions_and_is_deterministic():
    d = codivert_assign(11, 3, 100, 1000)
    assert set(d.creator_arm.tolist()) == {0, 1, 2}
    assert np.bincount(d.user_arm).tolist() == [334, 333, 333]
    d2 = codivert_assign(11, 3, 100, 1000)
    np.testing.assert_array_equal(d.user_arm, d2.user_arm)
    assert not np.array_equal(d.user_arm, codivert_assign(12, 3, 100, 1000).user_arm)


def test_single_creator_lands_in_exactly_one_arm():
    d = codivert_assign(0, 2, 1, 10)
    assert d.creator_arm.shape == (1,)
    assert d.arm_of_creator(0) in (0, 1)


def test_codivert_needs_two_arms():
    with pytest.raises(ConfigError):
        codivert_assign(0, 1, 5, 5)


# --- metrics -------------------------------------------------------------------


def test_exporeach_hand_count():
    uploads = [(0, 0, 0, 0), (0, 1, 1, 0), (0, 2, 2, 0)]
    ex = [(0, u, 0, "user_side", 0) for u in range(5)] + [(1, u, 1, "user_side", 0) for u in range(2)]
    log = toy_log(uploads, ex)
    assert metric_exporeach(log, 3, (0, 2), 0) == 1
    assert metric_exporeach(log, 1, (0, 2), 0) == 2
    counts = [metric_exporeach(log, e, (0, 2), 0) for e in range(1, 8)]
    assert counts == sorted(counts, reverse=True)
    # exposures after the window end do not count
    assert metric_exporeach(log, 2, (0, 0), 0) == 1


def test_dac_examples_and_replay_oracle():
    assert metric_dac(toy_log(), 0, 0) == 0
    log = toy_log([(1, i, 7, 0) for i in range(5)])
    assert metric_dac(log, 1, 0) == 1
    rng = np.random.default_rng(0)
    for _ in range(20):
        ups = [(int(rng.integers(3)), k, int(rng.integers(6)), int(rng.integers(2))) for k in range(25)]
        log = toy_log(ups)
        for day, arm in itertools.product(range(3), range(2)):
            expect = len({c for d, _, c, a in ups if d == day and a == arm})
            assert metric_dac(log, day, arm) == expect


def test_hit_rate_examples():
    assert metric_hit_rate([1, 2], [1, 2, 3]) == 1.0
    assert metric_hit_rate([1, 2], [5]) == 0.0
    assert metric_hit_rate([1, 2, 3, 4], [2, 4]) == 0.5
    assert metric_hit_rate([], [1]) is None


def test_coverage_examples_and_recount():
    assert metric_coverage([1, 2, 3], [1, 2]) == 1.0
    assert metric_coverage([9], [1, 2]) == 0.0
    assert metric_coverage([1], []) is None
    rng = np.random.default_rng(1)
    for _ in range(20):
        new = rng.choice(50, 20, replace=False)
        got = rng.choice(60, 25, replace=False)
        assert metric_coverage(got, new) == sum(int(i) in set(got.tolist()) for i in new) / 20


def test_exposure_ratio_normalizes():
    ex = [(0, 1, 1, "dualrec/two_tower", 0)]
    assert metric_exposure_ratio(toy_log(exposures=ex), (0, 2), 0) == {"dualrec/two_tower": 1.0}
    rng = np.random.default_rng(2)
    names = ["user_side", "dualrec/two_tower", "dualrec/i2i2u", "dualrec/i2u2u"]
    tags = [names[k] for k in rng.integers(0, 4, 300)]
    ex = [(0, k, k, t, 0) for k, t in enumerate(tags)]
    r = metric_exposure_ratio(toy_log(exposures=ex), (0, 0), 0)
    assert sum(r.values()) == pytest.approx(1.0, abs=1e-9)
    dual = [t for t in tags if t != "user_side"]
    for name, v in r.items():
        assert v == dual.count(name) / len(dual)


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert metric_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metric_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert metric_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert metric_auc([0.1, 0.2], [1, 1]) is None
    rng = np.random.default_rng(3)
    s = rng.random(4000)
    y = rng.random(4000) < 0.3
    assert abs(metric_auc(s, y) - 0.5) < 0.03


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=10))
def test_auc_matches_pair_oracle(rows):
    scores = [float(s) for s, _ in rows]
    labels = [y for _, y in rows]
    got = metric_auc(scores, labels)
    if all(labels) or not any(labels):
        assert got is None
    else:
        assert got == pytest.approx(auc_pairs(scores, labels), abs=1e-12)


def test_cross_arm_audit():
    uploads = [(0, 0, 0, 0), (0, 1, 1, 1)]
    ok = toy_log(uploads, [(0, 5, 0, "user_side", 0), (0, 6, 1, "user_side", 1)])
    assert cross_arm_exposures(ok) == 0
    bad = toy_log(uploads, [(0, 5, 1, "user_side", 0)])
    assert cross_arm_exposures(bad) == 1


# --- runs, logs and reports ------------------------------------------------------


def tiny_config(**kw):
    base = dict(world=TINY, arms=["base", "v5"], seeds=[0, 1], days=4, warmup_days=1)
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_logs_reconcile_with_world_tallies():
    run = run_seed(tiny_config(), 0, keep_state=True)
    counts = exposure_counts(run.log)
    it = run.world.items
    for i in range(len(it)):
        assert counts.get(i, 0) == it.exposures[i]
    assert cross_arm_exposures(run.log) == 0
    e = run.log["exposure"]
    assert int(e["interactions"].sum()) == int(it.interactions.sum())


def test_evaluate_reproduces_in_run_metrics(tmp_path):
    rep = run_experiment(tiny_config(), tmp_path)
    again = evaluate_logs(tmp_path)
    assert again.rows == rep.rows
    assert read_metrics_csv(tmp_path / "metrics.csv") == rep.rows
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.startswith("#") and "50, 100, 200" in header
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["thresholds"] == [50, 100, 200]
    for name in ("events.jsonl", "metrics.csv", "v5.store.jsonl", "v5.predictor.json", "v5.two_tower.json"):
        assert (tmp_path / "seed_0" / name).exists()


def test_identical_runs_write_identical_csvs(tmp_path):
    run_experiment(tiny_config(), tmp_path / "a")
    run_experiment(tiny_config(), tmp_path / "b")
    for name in ("metrics.csv", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corrupt_log_reports_line_number(tmp_path):
    run = run_seed(tiny_config(), 0)
    path = tmp_path / "events.jsonl"
    run.log.to_jsonl(path)
    lines = path.read_text().splitlines()
    lines[4] = lines[4][: len(lines[4]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match=r":5:"):
        EventLog.from_jsonl(path)
    path.write_text('{"event": "meta", "days": 1, "arms": ["a", "b"]}\n{"event": "teleport"}\n')
    with pytest.raises(LogFormatError, match=r":2:"):
        EventLog.from_jsonl(path)


def test_evaluate_empty_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate_logs(tmp_path)


def test_metric_ranges_and_monotonicity():
    run = run_seed(tiny_config(days=5), 1)
    by = {(r["arm"], r["metric"]): r["value"] for r in run.metrics}
    for arm in ("base", "v5"):
        er = [by[(arm, f"exporeach_{e}")] for e in (50, 100, 200)]
        assert er == sorted(er, reverse=True)
        for m in ("hit_rate", "dualrec_share"):
            if (arm, m) in by:
                assert 0.0 <= by[(arm, m)] <= 1.0
    ratios = [v for (a, m), v in by.items() if a == "v5" and m.startswith("exposure_ratio/")]
    if ratios:
        assert sum(ratios) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(arms=["base", "base"]).validate()
    with pytest.raises(ConfigError):
        tiny_config(arms=["base", "v9"]).validate()
    with pytest.raises(ConfigError):
        tiny_config(arms=["base", {"name": "x", "preset": "v1", "colour": "red"}]).validate()
    with pytest.raises(ConfigError):
        tiny_config(arms=["base", "v3"], engine=EngineConfig(content_weight=0.0)).validate()
    with pytest.raises(ConfigError):
        tiny_config(arms=["base"]).validate()
    spec = ArmSpec.parse({"name": "noact", "preset": "v1", "activity_prediction": False})
    assert spec.name == "noact" and not spec.flags.activity_prediction and spec.flags.dualrec


def test_aa_runs_show_no_systematic_arm_effect():
    cfg = ExperimentConfig(
        world=WorldConfig(n_users=400, n_creators=40),
        arms=[{"name": "a", "preset": "base"}, {"name": "b", "preset": "base"}],
        seeds=list(range(10)),
        days=5,
        warmup_days=1,
    )
    rep = run_experiment(cfg)
    for metric in ("exposures", "dac_mean", "exporeach_50"):
        a, b = rep.values("a", metric), rep.values("b", metric)
        diff = np.array([a[s] - b[s] for s in a], dtype=float)
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert abs(diff.mean()) <= 3 * se + 1e-9
