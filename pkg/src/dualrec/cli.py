"""Command-line entry points: simulate, evaluate, train, report."""

from __future__ import annotations

import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import click
import numpy as np
import yaml

from dualrec.engine import ARM_PRESETS, ArmEngine, EngineConfig
from dualrec.experiment import (
    ExperimentConfig,
    ExperimentReport,
    LogFormatError,
    evaluate_logs,
    read_metrics_csv,
    run_experiment,
    write_metrics_csv,
)
from dualrec.ranking import save_predictor
from dualrec.retrieval import save_two_tower
from dualrec.simulator import ConfigError, WorldConfig, init_population, step_day
from dualrec.uac import train_activity_model

logger = logging.getLogger(__name__)

_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} | {"out"}
_NESTED = {"world": WorldConfig, "engine": EngineConfig}


def default_config_dict() -> dict:
    d = ExperimentConfig().to_dict()
    d["out"] = "runs/default"
    return d


def _key_lines(node, prefix=()) -> dict[tuple, int]:
    """Map every mapping key path in a YAML node tree to its 1-based line."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def load_config(path: str | Path) -> tuple[ExperimentConfig, str | None]:
    """Parse a YAML run config; unknown keys are errors reported with their line."""
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(node)

    def fail(keypath, msg):
        raise ConfigError(f"{path}:{lines.get(keypath, 1)}: {msg}")

    for k in raw:
        if k not in _TOP_KEYS:
            fail((k,), f"unknown key {k!r}")
    parts = {}
    for name, cls in _NESTED.items():
        sub = raw.get(name) or {}
        if not isinstance(sub, dict):
            fail((name,), f"{name} must be a mapping")
        known = {f.name for f in fields(cls)}
        for k in sub:
            if k not in known:
                fail((name, k), f"unknown key {k!r} in {name}")
        if "channel_bias" in sub:
            sub = {**sub, "channel_bias": tuple(sub["channel_bias"])}
        parts[name] = cls(**sub)
    for name in ("two_tower", "predictor"):
        given = (raw.get("engine") or {}).get(name)
        if given is not None:
            merged = {**getattr(EngineConfig(), name), **given}
            parts["engine"] = replace(parts["engine"], **{name: merged})
    rest = {k: v for k, v in raw.items() if k not in _NESTED and k != "out"}
    if "thresholds" in rest:
        rest["thresholds"] = tuple(rest["thresholds"])
    cfg = ExperimentConfig(**parts, **rest)
    try:
        cfg.validate()
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg, raw.get("out")


def _parse_ints(text: str | None):
    if text is None:
        return None
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _override(cfg: ExperimentConfig, seeds, days, arms) -> ExperimentConfig:
    if seeds is not None:
        cfg = replace(cfg, seeds=_parse_ints(seeds))
    if days is not None:
        cfg = replace(cfg, days=days, warmup_days=min(cfg.warmup_days, max(days - 1, 0)))
    if arms is not None:
        cfg = replace(cfg, arms=[a for a in arms.split(",") if a])
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None


def _load(config_path, seeds, days, arms):
    try:
        cfg, out = load_config(config_path) if config_path else (ExperimentConfig(), None)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None
    return _override(cfg, seeds, days, arms), out


def _print_defaults(ctx, _param, value):
    if not value or ctx.resilient_parsing:
        return
    click.echo(yaml.safe_dump(default_config_dict(), sort_keys=False), nl=False)
    ctx.exit()


@click.group()
@click.option("--print-defaults", is_flag=True, expose_value=False, is_eager=True, callback=_print_defaults,
              help="Print the default configuration as YAML and exit.")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose):
    """Creator-side recommendation simulator and experiment runner."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


_common = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML run config."),
    click.option("--seeds", help="Comma-separated seed list, e.g. 0,1,2."),
    click.option("--days", type=int, help="Number of simulated days."),
    click.option("--arms", help="Comma-separated arm presets, e.g. base,v1,v5."),
]


def _with_common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


@main.command()
@_with_common
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (created if missing).")
def simulate(config_path, seeds, days, arms, out_dir):
    """Run a co-diverted experiment and write logs, checkpoints and metrics."""
    cfg, cfg_out = _load(config_path, seeds, days, arms)
    out = Path(out_dir or cfg_out or "runs/default")
    report = run_experiment(cfg, out)
    _echo_report(report)
    click.echo(f"wrote {out}")


@main.command()
@click.argument("log_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Where to write the recomputed report.")
def evaluate(log_dir, out_dir):
    """Recompute all metrics from event logs and compare with the in-run CSV."""
    try:
        report = evaluate_logs(log_dir)
    except FileNotFoundError as exc:
        raise click.ClickException(f"empty input: {exc}") from None
    except LogFormatError as exc:
        raise click.ClickException(str(exc)) from None
    out = Path(out_dir or log_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report.rows, out / "evaluated_metrics.csv")
    in_run = Path(log_dir) / "metrics.csv"
    if in_run.exists():
        expected = read_metrics_csv(in_run)
        if expected != report.rows:
            n = sum(a != b for a, b in zip(expected, report.rows)) + abs(len(expected) - len(report.rows))
            raise click.ClickException(f"recomputed metrics differ from {in_run} in {n} rows")
        click.echo(f"recomputed {len(report.rows)} metric rows; identical to {in_run}")
    _echo_report(report)


@main.command()
@_with_common
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--preset", default="v5", show_default=True, type=click.Choice(sorted(set(ARM_PRESETS) - {"base"})))
def train(config_path, seeds, days, arms, out_dir, preset):
    """Simulate one arm and train the two-tower, predictor and activity models standalone."""
    cfg, cfg_out = _load(config_path, seeds, days, arms)
    out = Path(out_dir or cfg_out or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.seeds[0])
    world = init_population(replace(cfg.world, seed=seed))
    eng = ArmEngine(0, preset, ARM_PRESETS[preset], replace(cfg.engine, seed=seed), world)
    eng.start_dualrec()
    for _ in range(cfg.days):
        step_day(world, {0: eng})
    if eng.two_tower is None or eng.predictor is None:
        raise click.ClickException("not enough logged data to train; increase --days or the population")
    save_two_tower(eng.two_tower, out / "two_tower.json")
    save_predictor(eng.predictor, out / "predictor.json")
    last = world.day - 1
    model = train_activity_model(
        world.visit_matrix(last), world.interaction_matrix(last), tau=cfg.engine.tau, seed=seed
    )
    coef = {"coef": model.classifier.coef_.ravel().tolist(), "intercept": float(model.classifier.intercept_[0]),
            "tau": model.tau}
    (out / "activity.yaml").write_text(yaml.safe_dump(coef, sort_keys=False))
    click.echo(f"two-tower probe losses: {[round(x, 4) for x in eng.two_tower.loss_history]}")
    click.echo(f"wrote checkpoints to {out}")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def report(run_dir):
    """Print the mean +- standard error table of a finished run."""
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise click.ClickException(f"no metrics.csv in {run_dir}")
    _echo_report(ExperimentReport(read_metrics_csv(path)))


def _echo_report(report: ExperimentReport) -> None:
    rows = sorted(report.aggregate(), key=lambda r: (r["metric"], r["arm"]))
    width = max((len(r["metric"]) for r in rows), default=10)
    for r in rows:
        se = "" if np.isnan(r["stderr"]) else f" +- {r['stderr']:.4g}"
        click.echo(f"{r['metric']:<{width}}  {r['arm']:<10} {r['window']:<8} {r['mean']:.4g}{se}  (n={r['n']})")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
