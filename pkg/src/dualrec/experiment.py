"""Co-diverted A/B runs, metrics and reports.

Users and creators are split into arms by a keyed hash; an arm's users only
ever see items from the same arm's creators, so creator-side effects (how
many new items reach an exposure threshold, how many creators keep posting)
show up as arm differences.

Every run produces an :class:`EventLog`. In-run metrics are computed from
the in-memory log; ``evaluate`` rebuilds the same log from the JSON-lines
file and must reproduce them exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from dualrec.core import N_BINARY
from dualrec.engine import ARM_PRESETS, ArmEngine, ArmFlags, EngineConfig
from dualrec.ranking import PredictorConfig, train_predictor
from dualrec.retrieval import save_two_tower
from dualrec.ranking import save_predictor
from dualrec.similarity import topk_desc
from dualrec.simulator import (
    SOURCE_CODE,
    SOURCES,
    ConfigError,
    DayLog,
    WorldConfig,
    hash_uniform,
    init_population,
    set_diversion,
    step_day,
)

logger = logging.getLogger(__name__)

THRESHOLDS = (50, 100, 200)
THRESHOLD_NOTE = (
    "ExpoReach thresholds E in {50, 100, 200} are the desk-scale stand-ins for "
    "1K/5K/10K exposures on a population of ~10^4 users"
)
_DIVERT = 101


class LogFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# diversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diversion:
    n_arms: int
    creator_arm: np.ndarray
    user_arm: np.ndarray

    def arm_of_user(self, u: int) -> int:
        return int(self.user_arm[u])

    def arm_of_creator(self, c: int) -> int:
        return int(self.creator_arm[c])


def _hash_split(key: int, tag: int, n: int, arms: int) -> np.ndarray:
    # rank entities by a keyed hash and deal them out round-robin: deterministic and balanced
    h = hash_uniform(key, _DIVERT, tag, np.arange(n))
    order = np.argsort(h, kind="stable")
    out = np.empty(n, dtype=np.int64)
    out[order] = np.arange(n) % arms
    return out


def codivert_assign(seed: int, arms: int, creators: int, users: int) -> Diversion:
    """Partition creators and users into ``arms`` groups with a keyed hash."""
    if arms < 2:
        raise ConfigError("co-diverted assignment needs at least two arms")
    return Diversion(arms, _hash_split(seed, 0, creators, arms), _hash_split(seed, 1, users, arms))


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------

_TABLES = {
    "upload": ("day", "item_id", "creator_id", "arm"),
    "visit": ("day", "user_id", "arm"),
    "exposure": ("day", "user_id", "item_id", "source", "rank", "arm", "interactions"),
    "match": ("day", "user_id", "item_id", "source", "arm"),
    "lambda": ("day", "arm", "lam"),
}


@dataclass
class EventLog:
    """Column store of one run's events. ``source`` columns hold codes into SOURCES."""

    meta: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, cols in _TABLES.items():
            self.tables.setdefault(name, {c: np.zeros(0, dtype=float if c == "lam" else np.int64) for c in cols})

    def __getitem__(self, name: str) -> dict:
        return self.tables[name]

    @property
    def days(self) -> int:
        return int(self.meta["days"])

    @property
    def arm_names(self) -> list[str]:
        return list(self.meta["arms"])

    @classmethod
    def from_day_logs(cls, meta: dict, world, day_logs: Sequence[DayLog]) -> "EventLog":
        parts: dict[str, dict[str, list]] = {n: {c: [] for c in cols} for n, cols in _TABLES.items()}
        it = world.items
        for dl in day_logs:
            d = dl.day
            up = dl.uploads
            _push(parts["upload"], day=np.full(len(up), d), item_id=up, creator_id=it.creator[up], arm=it.arm[up])
            v = dl.visitors
            _push(parts["visit"], day=np.full(len(v), d), user_id=v, arm=world.user_arm[v])
            e = dl.exposures
            inter = e.feedback[:, :5].sum(axis=1).astype(np.int64)
            _push(
                parts["exposure"], day=np.full(len(e), d), user_id=e.users, item_id=e.items,
                source=e.sources, rank=e.ranks, arm=dl.exposure_arm, interactions=inter,
            )
            m = dl.matches
            _push(parts["match"], day=np.full(len(m.users), d), user_id=m.users, item_id=m.items,
                  source=m.sources, arm=dl.match_arm)
            arms = sorted(dl.lam)
            _push(parts["lambda"], day=np.full(len(arms), d), arm=np.array(arms, dtype=np.int64),
                  lam=np.array([dl.lam[a] for a in arms], dtype=float))
        tables = {}
        for name, cols in parts.items():
            tables[name] = {
                c: (np.concatenate(v) if v else np.zeros(0)).astype(float if c == "lam" else np.int64)
                for c, v in cols.items()
            }
        return cls(dict(meta), tables)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"event": "meta", **self.meta}) + "\n")
            for name in ("upload", "visit", "exposure", "match", "lambda"):
                tab = self.tables[name]
                cols = _TABLES[name]
                arrays = [tab[c].tolist() for c in cols]
                for row in zip(*arrays):
                    rec = {"event": name}
                    for c, v in zip(cols, row):
                        rec[c] = SOURCES[v] if c == "source" else v
                    fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "EventLog":
        parts: dict[str, dict[str, list]] = {n: {c: [] for c in cols} for n, cols in _TABLES.items()}
        meta = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise LogFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
                kind = rec.pop("event", None) if isinstance(rec, dict) else None
                if kind == "meta":
                    meta = rec
                    continue
                if kind not in _TABLES:
                    raise LogFormatError(f"{path}:{lineno}: unknown event type {kind!r}")
                try:
                    for c in _TABLES[kind]:
                        v = rec[c]
                        parts[kind][c].append(SOURCE_CODE[v] if c == "source" else v)
                except KeyError as exc:
                    raise LogFormatError(f"{path}:{lineno}: bad or missing field {exc}") from None
        if meta is None:
            raise LogFormatError(f"{path}: no meta record")
        tables = {
            name: {c: np.asarray(v, dtype=float if c == "lam" else np.int64) for c, v in cols.items()}
            for name, cols in parts.items()
        }
        return cls(meta, tables)


def _push(table: dict, **cols) -> None:
    for c, v in cols.items():
        table[c].append(np.asarray(v))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def exposure_counts(log: EventLog, upto_day: int | None = None) -> dict[int, int]:
    e = log["exposure"]
    items = e["item_id"] if upto_day is None else e["item_id"][e["day"] <= upto_day]
    ids, counts = np.unique(items, return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))


def metric_exporeach(log: EventLog, E: int, window: tuple[int, int], arm: int) -> int:
    """Items uploaded in ``window`` (inclusive) with >= E exposures by the window's end."""
    lo, hi = window
    up = log["upload"]
    sel = (up["arm"] == arm) & (up["day"] >= lo) & (up["day"] <= hi)
    counts = exposure_counts(log, hi)
    return int(sum(counts.get(i, 0) >= E for i in up["item_id"][sel].tolist()))


def metric_dac(log: EventLog, day: int, arm: int) -> int:
    """Distinct creators with at least one upload on ``day``."""
    up = log["upload"]
    sel = (up["arm"] == arm) & (up["day"] == day)
    return int(len(np.unique(up["creator_id"][sel])))


def metric_hit_rate(matched_users: Iterable[int], next_day_visitors: Iterable[int]) -> float | None:
    """Share of matched users that visit the following day; None when nobody was matched."""
    m = set(int(u) for u in matched_users)
    if not m:
        return None
    v = set(int(u) for u in next_day_visitors)
    return len(m & v) / len(m)


def hit_counts(log: EventLog, window: tuple[int, int], arm: int) -> tuple[int, int]:
    """(hits, matched) pooled over match days in ``window`` that have a logged next day."""
    lo, hi = window
    hi = min(hi, log.days - 2)
    m, v = log["match"], log["visit"]
    hits = total = 0
    for d in range(lo, hi + 1):
        users = np.unique(m["user_id"][(m["day"] == d) & (m["arm"] == arm)])
        if len(users) == 0:
            continue
        nxt = v["user_id"][(v["day"] == d + 1) & (v["arm"] == arm)]
        hits += int(np.isin(users, nxt).sum())
        total += len(users)
    return hits, total


def metric_coverage(retrieved_items: Iterable[int], new_items: Iterable[int]) -> float | None:
    new = set(int(i) for i in new_items)
    if not new:
        return None
    return len(new & set(int(i) for i in retrieved_items)) / len(new)


def metric_exposure_ratio(log: EventLog, window: tuple[int, int], arm: int) -> dict[str, float]:
    """Share of each retrieval source among DualRec-attributed exposures."""
    e = log["exposure"]
    lo, hi = window
    sel = (e["arm"] == arm) & (e["day"] >= lo) & (e["day"] <= hi) & (e["source"] != SOURCE_CODE["user_side"])
    src = e["source"][sel]
    if len(src) == 0:
        return {}
    codes, counts = np.unique(src, return_counts=True)
    total = counts.sum()
    return {SOURCES[c]: n / total for c, n in zip(codes.tolist(), counts.tolist())}


def metric_auc(scores, labels) -> float | None:
    """Rank-based ROC AUC with average ranks for ties; None when only one class is present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    start = 0
    while start < len(s):
        end = start
        while end + 1 < len(s) and s[end + 1] == s[start]:
            end += 1
        ranks[start : end + 1] = 0.5 * (start + end) + 1.0
        start = end + 1
    r = np.empty(len(s))
    r[order] = ranks
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dualrec_share(log: EventLog, window: tuple[int, int], arm: int) -> float | None:
    e = log["exposure"]
    lo, hi = window
    sel = (e["arm"] == arm) & (e["day"] >= lo) & (e["day"] <= hi)
    n = int(sel.sum())
    if n == 0:
        return None
    return int((e["source"][sel] != SOURCE_CODE["user_side"]).sum()) / n


def max_matching_set(log: EventLog, window: tuple[int, int], arm: int) -> int:
    m = log["match"]
    lo, hi = window
    sel = (m["arm"] == arm) & (m["day"] >= lo) & (m["day"] <= hi)
    if not np.any(sel):
        return 0
    keys = np.stack([m["day"][sel], m["user_id"][sel]], axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    return int(counts.max())


def cross_arm_exposures(log: EventLog) -> int:
    """Exposures whose item belongs to a different arm than the exposure (audit)."""
    up, e = log["upload"], log["exposure"]
    if len(e["item_id"]) == 0:
        return 0
    item_arm = np.full(int(up["item_id"].max()) + 1 if len(up["item_id"]) else 0, -1)
    item_arm[up["item_id"]] = up["arm"]
    known = e["item_id"] < len(item_arm)
    bad = ~known
    bad[known] = item_arm[e["item_id"][known]] != e["arm"][known]
    return int(bad.sum())


def _window_name(w: tuple[int, int]) -> str:
    return f"d{w[0]}-{w[1]}"


def compute_metrics(log: EventLog) -> list[dict]:
    """All per-arm metric rows for one run (the same function serves in-run and audit paths)."""
    meta = log.meta
    days = log.days
    warm = int(meta.get("warmup_days", 0))
    treat = (warm, days - 1)
    final = (max(warm, days - int(meta.get("final_window", 7))), days - 1)
    quota = (max(warm, days - int(meta.get("quota_window", 10))), days - 1)
    rows = []

    def add(arm, metric, window, value):
        if value is None:
            return
        rows.append({"arm": log.arm_names[arm], "metric": metric, "window": _window_name(window), "value": value})

    for arm in range(len(log.arm_names)):
        for E in meta.get("thresholds", THRESHOLDS):
            add(arm, f"exporeach_{E}", treat, metric_exporeach(log, int(E), treat, arm))
        for name, w in (("dac_mean", treat), ("dac_final", final)):
            vals = [metric_dac(log, d, arm) for d in range(w[0], w[1] + 1)]
            add(arm, name, w, sum(vals) / len(vals) if vals else None)
        up = log["upload"]
        add(arm, "uploads", treat, int(((up["arm"] == arm) & (up["day"] >= treat[0])).sum()))
        e = log["exposure"]
        add(arm, "exposures", treat, int(((e["arm"] == arm) & (e["day"] >= treat[0])).sum()))
        hits, total = hit_counts(log, treat, arm)
        add(arm, "hit_rate", treat, hits / total if total else None)
        add(arm, "dualrec_share", quota, dualrec_share(log, quota, arm))
        for src, r in sorted(metric_exposure_ratio(log, treat, arm).items()):
            add(arm, f"exposure_ratio/{src}", treat, r)
        add(arm, "max_matching_set", treat, max_matching_set(log, treat, arm))
        lam = log["lambda"]
        sel = (lam["arm"] == arm) & (lam["day"] >= quota[0]) & (lam["day"] <= quota[1])
        add(arm, "lambda_mean", quota, float(lam["lam"][sel].sum() / sel.sum()) if np.any(sel) else None)
    return rows


# ---------------------------------------------------------------------------
# configuration and runs
# ---------------------------------------------------------------------------


@dataclass
class ArmSpec:
    name: str
    flags: ArmFlags

    @classmethod
    def parse(cls, spec) -> "ArmSpec":
        """``"v3"`` or ``{"name": ..., "preset": ..., <flag>: value}``."""
        if isinstance(spec, ArmSpec):
            return spec
        if isinstance(spec, str):
            spec = {"name": spec, "preset": spec}
        spec = dict(spec)
        name = spec.pop("name", None) or spec.get("preset")
        preset = spec.pop("preset", name)
        if preset not in ARM_PRESETS:
            raise ConfigError(f"unknown arm preset {preset!r}; known: {sorted(ARM_PRESETS)}")
        known = {f.name for f in fields(ArmFlags)}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown arm keys {sorted(unknown)} for arm {name!r}")
        if "retrievals" in spec:
            spec["retrievals"] = tuple(spec["retrievals"])
        try:
            flags = replace(ARM_PRESETS[preset], **spec).validate()
        except ValueError as exc:
            raise ConfigError(f"arm {name!r}: {exc}") from None
        return cls(str(name), flags)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    arms: list = field(default_factory=lambda: ["base", "v1", "v5"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    days: int = 20
    warmup_days: int = 3
    diversion_seed: int = 7
    thresholds: tuple = THRESHOLDS
    final_window: int = 7
    quota_window: int = 10

    def arm_specs(self) -> list[ArmSpec]:
        return [ArmSpec.parse(a) for a in self.arms]

    def validate(self) -> "ExperimentConfig":
        try:
            self.world.validate()
            self.engine.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        specs = self.arm_specs()
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate arm names {names}")
        if len(specs) < 2:
            raise ConfigError("an experiment needs at least two arms")
        if self.days < 1 or not 0 <= self.warmup_days < self.days:
            raise ConfigError("need days >= 1 and 0 <= warmup_days < days")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        for s in specs:
            if "i2i2u" in s.flags.retrievals and s.flags.dualrec and self.engine.content_weight <= 0:
                # new items have no co-interactions; without content similarity i2i2u finds nothing
                raise ConfigError(f"arm {s.name!r} uses i2i2u but content similarity is disabled")
        if any(int(e) < 1 for e in self.thresholds):
            raise ConfigError("ExpoReach thresholds must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "engine": asdict(self.engine),
            "arms": [a if isinstance(a, (str, dict)) else a.name for a in self.arms],
            "seeds": list(self.seeds),
            "days": self.days,
            "warmup_days": self.warmup_days,
            "diversion_seed": self.diversion_seed,
            "thresholds": list(self.thresholds),
            "final_window": self.final_window,
            "quota_window": self.quota_window,
        }


@dataclass
class SeedRun:
    seed: int
    log: EventLog
    metrics: list[dict]
    world: object = None
    engines: dict = field(default_factory=dict)


def run_seed(config: ExperimentConfig, seed: int, keep_state: bool = False) -> SeedRun:
    """One co-diverted simulation; DualRec arms switch on after ``warmup_days``."""
    config.validate()
    specs = config.arm_specs()
    wcfg = replace(config.world, seed=int(seed))
    world = init_population(wcfg)
    div = codivert_assign(config.diversion_seed * 1_000_003 + int(seed), len(specs), world.n_creators, world.n_users)
    set_diversion(world, div.user_arm, div.creator_arm)
    ecfg = replace(config.engine, seed=int(seed))
    engines = {k: ArmEngine(k, s.name, s.flags, ecfg, world) for k, s in enumerate(specs)}
    day_logs = []
    for day in range(config.days):
        if day == config.warmup_days:
            for e in engines.values():
                if e.flags.dualrec:
                    e.start_dualrec()
        day_logs.append(step_day(world, engines))
    meta = {
        "seed": int(seed),
        "days": config.days,
        "warmup_days": config.warmup_days,
        "arms": [s.name for s in specs],
        "thresholds": [int(e) for e in config.thresholds],
        "final_window": config.final_window,
        "quota_window": config.quota_window,
    }
    log = EventLog.from_day_logs(meta, world, day_logs)
    metrics = [{"seed": int(seed), **r} for r in compute_metrics(log)]
    logger.info("seed %d finished: %d exposures", seed, len(log["exposure"]["day"]))
    return SeedRun(int(seed), log, metrics, world if keep_state else None, engines if keep_state else {})


@dataclass
class ExperimentReport:
    rows: list[dict]  # seed-level rows: seed, arm, metric, window, value
    thresholds: tuple = THRESHOLDS

    def values(self, arm: str, metric: str) -> dict[int, float]:
        return {r["seed"]: r["value"] for r in self.rows if r["arm"] == arm and r["metric"] == metric}

    def aggregate(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["arm"], r["metric"], r["window"]), []).append(float(r["value"]))
        out = []
        for (arm, metric, window), vals in groups.items():
            v = np.asarray(vals)
            se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")
            out.append({"arm": arm, "metric": metric, "window": window, "mean": float(v.mean()), "stderr": se, "n": len(v)})
        return out

    def mean(self, arm: str, metric: str) -> float:
        vals = list(self.values(arm, metric).values())
        return float(np.mean(vals)) if vals else float("nan")

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(self.rows, out / "metrics.csv")
        with open(out / "report.csv", "w", newline="") as fh:
            fh.write(f"# {THRESHOLD_NOTE}\n")
            w = csv.DictWriter(fh, ["arm", "metric", "window", "mean", "stderr", "n"])
            w.writeheader()
            for r in self.aggregate():
                w.writerow({**r, "mean": repr(r["mean"]), "stderr": "" if math.isnan(r["stderr"]) else repr(r["stderr"])})
        summary = {"note": THRESHOLD_NOTE, "thresholds": list(self.thresholds), "metrics": self.aggregate()}
        for m in summary["metrics"]:
            if math.isnan(m["stderr"]):
                m["stderr"] = None
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def write_metrics_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["seed", "arm", "metric", "window", "value"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(r["value"])})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {**r, "seed": int(r["seed"]), "value": float(r["value"]) if "." in r["value"] or "e" in r["value"] else int(r["value"])}
            for r in csv.DictReader(fh)
        ]


def save_run_artifacts(run: SeedRun, out_dir: str | Path) -> None:
    """Event log, metrics, model checkpoints and store snapshots for one seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.log.to_jsonl(out / "events.jsonl")
    write_metrics_csv(run.metrics, out / "metrics.csv")
    for eng in run.engines.values():
        if not eng.flags.dualrec:
            continue
        if eng.two_tower is not None:
            save_two_tower(eng.two_tower, out / f"{eng.name}.two_tower.json")
        if eng.predictor is not None:
            save_predictor(eng.predictor, out / f"{eng.name}.predictor.json")
        if eng.store is not None:
            eng.store.to_jsonl(out / f"{eng.name}.store.jsonl")


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    config.validate()
    rows = []
    for seed in config.seeds:
        run = run_seed(config, seed, keep_state=out_dir is not None)
        rows.extend(run.metrics)
        if out_dir is not None:
            save_run_artifacts(run, Path(out_dir) / f"seed_{seed}")
    report = ExperimentReport(rows, tuple(config.thresholds))
    if out_dir is not None:
        report.write(out_dir)
        (Path(out_dir) / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return report


def evaluate_logs(log_dir: str | Path) -> ExperimentReport:
    """Recompute every metric from the event logs under ``log_dir``."""
    log_dir = Path(log_dir)
    paths = sorted(log_dir.glob("seed_*/events.jsonl")) or sorted(log_dir.glob("events.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no event logs under {log_dir}")
    rows = []
    thresholds = THRESHOLDS
    for p in paths:
        log = EventLog.from_jsonl(p)
        thresholds = tuple(log.meta.get("thresholds", THRESHOLDS))
        rows.extend({"seed": int(log.meta["seed"]), **r} for r in compute_metrics(log))
    return ExperimentReport(rows, thresholds)


# ---------------------------------------------------------------------------
# focused experiments
# ---------------------------------------------------------------------------


def hit_rate_experiment(world: WorldConfig, engine: EngineConfig, seeds, days: int = 6, warmup: int = 2) -> dict:
    """Next-day hit rate with and without activity prediction, per seed."""
    cfg = ExperimentConfig(
        world=world,
        engine=engine,
        arms=[{"name": "predicted", "preset": "v1"}, {"name": "all_users", "preset": "v1", "activity_prediction": False}],
        seeds=list(seeds),
        days=days,
        warmup_days=warmup,
    )
    rep = run_experiment(cfg)
    return {"predicted": rep.values("predicted", "hit_rate"), "all_users": rep.values("all_users", "hit_rate")}


def capacity_experiment(world: WorldConfig, engine: EngineConfig, seeds, days: int = 5, warmup: int = 2) -> dict:
    """Largest daily matching set per seed with and without the availability store.

    Each condition runs as its own single-arm world (same seed), so every new
    item is matched against the whole population.
    """
    out: dict[str, dict[int, int]] = {"store": {}, "no_store": {}}
    for seed in seeds:
        for name, on in (("store", True), ("no_store", False)):
            flags = replace(ARM_PRESETS["v1"], capacity=on, activity_prediction=on)
            w, eng = _single_arm_world(world, engine, flags, seed)
            worst = 0
            for d in range(days):
                if d == warmup:
                    eng.start_dualrec()
                dl = step_day(w, {0: eng})
                if len(dl.matches.users):
                    worst = max(worst, int(np.bincount(dl.matches.users).max()))
            out[name][int(seed)] = worst
    return out


def _single_arm_world(world: WorldConfig, engine: EngineConfig, flags: ArmFlags, seed: int):
    wcfg = replace(world, seed=int(seed))
    w = init_population(wcfg)
    eng = ArmEngine(0, "probe", flags, replace(engine, seed=int(seed)), w)
    return w, eng


def coverage_experiment(world: WorldConfig, engine: EngineConfig, seed: int, days: int = 6, warmup: int = 3) -> dict:
    """Share of one day's new items reached by user-side versus creator-side retrieval.

    User side: every visitor of the day runs u2u2i, u2i2i and two-tower item
    retrieval over the unseen pool (``retrieval_size`` each); an item counts
    as covered if any visitor retrieves it. Creator side: an item counts as
    covered if two-tower user retrieval, i2i2u or i2u2u returns any user.
    """
    flags = replace(ARM_PRESETS["v4"], activity_prediction=False)
    w, eng = _single_arm_world(world, engine, flags, seed)
    new_items = np.zeros(0, dtype=np.int64)
    visitors = np.zeros(0, dtype=np.int64)
    for d in range(days):
        if d == warmup:
            eng.start_dualrec()
        dl = step_day(w, {0: eng})
        new_items, visitors = dl.uploads, dl.visitors
    day = days - 1
    cfg = eng.config
    k = cfg.retrieval_size
    snap = eng.snapshots[day + 1]
    pool = eng._pool(w, day)
    pool_emb = eng.two_tower.embed_items(pool, eng._two_tower_item_x(snap, pool))
    user_emb = eng.two_tower.embed_users(visitors, snap.user_features(visitors))
    seen = w.seen_block(visitors, pool)
    user_side: set[int] = set()
    for r, u in enumerate(visitors.tolist()):
        unseen = pool[~seen[r]]
        user_side.update(eng.retriever.u2u2i(u, k, set(unseen.tolist())))
        user_side.update(eng.retriever.u2i2i(u, k, set(unseen.tolist())))
        s = pool_emb[~seen[r]] @ user_emb[r]
        user_side.update(unseen[topk_desc(s, unseen, k)].tolist())
    creator_side: set[int] = set()
    item_emb = eng.two_tower.embed_items(new_items, eng._two_tower_item_x(snap, new_items))
    for j, i in enumerate(new_items.tolist()):
        found = len(eng.user_index.search(item_emb[j], k)[0]) > 0
        found = found or bool(eng.retriever.i2i2u(i, k)) or bool(eng.retriever.i2u2u(i, k))
        if found:
            creator_side.add(i)
    return {
        "user_side": metric_coverage(user_side, new_items),
        "creator_side": metric_coverage(creator_side, new_items),
        "new_items": int(len(new_items)),
    }


ABLATION_VARIANTS = {
    "neither": (False, False),
    "sa": (True, False),
    "sa_ef": (True, True),
}


def ablation_experiment(
    world: WorldConfig, engine: EngineConfig, seed: int, days: int = 8, train_days: int = 4
) -> dict[str, float]:
    """Cold-item AUC of predictors trained with and without SA and EF.

    The training slice is ``train_days`` days of logged exposures; the
    evaluation slice is the last day's exposures of items uploaded that day,
    whose ids the predictors have never seen. AUC is averaged over the binary
    heads that have both classes.
    """
    flags = replace(ARM_PRESETS["v2"], activity_prediction=False)
    w, eng = _single_arm_world(world, replace(engine, train_days=train_days + 1), flags, seed)
    for _ in range(days):
        step_day(w, {0: eng})
    last = days - 1
    train_d = [d for d in range(last - train_days, last)]
    users = np.concatenate([eng.daily[d][0] for d in train_d])
    items = np.concatenate([eng.daily[d][1] for d in train_d])
    fb = np.concatenate([eng.daily[d][2] for d in train_d])
    eu, ei, efb = eng.daily[last]
    cold = w.items.day[ei] == last
    eu, ei, efb = eu[cold], ei[cold], efb[cold]
    snap_eval = eng.snapshots[last]
    out = {}
    for name, (sa, ef) in ABLATION_VARIANTS.items():
        xu = np.vstack([eng.snapshots[d].user_features(eng.daily[d][0]) for d in train_d])
        xi = np.vstack([eng.snapshots[d].item_features(eng.daily[d][1], ef) for d in train_d])
        pcfg = PredictorConfig(
            **{**engine.predictor, "use_sample_augmentation": sa, "use_extra_features": ef, "seed": int(seed)}
        )
        model = train_predictor(users, items, fb, xu, xi, pcfg)
        s = model.predict(eu, snap_eval.user_features(eu), ei, snap_eval.item_features(ei, ef))
        aucs = [metric_auc(s[:, m], efb[:, m] > 0) for m in range(N_BINARY)]
        aucs = [a for a in aucs if a is not None]
        out[name] = float(np.mean(aucs)) if aucs else float("nan")
    return out
