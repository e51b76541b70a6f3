"""Command-line entry point: ``cprgcn <command> --config desk.yaml --seed 0``."""

from __future__ import annotations

import csv
import functools
import json
import logging
from pathlib import Path

import click
import numpy as np

from ..cohort import VesselTree, generate_cohort, read_cohort, write_cohort
from ..conditions import read_volume
from ..geometry import CLASSES, read_centerlines
from ..model import CprGcn, collate
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import prepare_cohort, prepare_tree
from .metrics import MetricsReport, merge_reports
from .train import (
    ABLATIONS,
    TrainingDiverged,
    cross_validate,
    evaluate,
    load_cv_run,
    run_ablation_grid,
    run_data_attack,
)

SUMMARY_FIELDS = ("meanRecall", "meanPrecision", "meanF1", "microPrecision", "segments")


def common(fn):
    """Every command takes a config document and a seed."""

    @click.option("--config", "-c", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="YAML experiment config (defaults apply when omitted).")
    @click.option("--seed", type=int, default=None, help="Overrides the config seed.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, **kwargs):
        click.get_current_context().meta["seed_given"] = seed is not None
        try:
            cfg = load_config(config_path, seed)
        except ConfigError as exc:
            raise click.UsageError(str(exc)) from exc
        try:
            return fn(cfg, **kwargs)
        except ConfigError as exc:
            raise click.UsageError(str(exc)) from exc
        except TrainingDiverged as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _cohort(cfg: ExperimentConfig, manifest: str | None):
    """Trees, spec and loaded volumes from a manifest, or a fresh cohort from the config."""
    if manifest is None:
        return cfg.cohort, generate_cohort(cfg.cohort), None
    spec, trees, paths = read_cohort(manifest)
    volumes = {tid: read_volume(p) for tid, p in paths.items()} if cfg.model.use_conditions else None
    return spec, trees, volumes


def _samples(cfg, spec, trees, volumes, with_cubes=None):
    with_cubes = cfg.model.use_conditions if with_cubes is None else with_cubes
    return prepare_cohort(trees, spec, cfg.data, cfg.model.condition.gamma, with_cubes, volumes)


def _out_dir(cfg: ExperimentConfig, out: str | None, default: str) -> Path:
    path = Path(out) if out else Path(cfg.output_dir) / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_report(title: str, report: MetricsReport) -> None:
    click.echo(f"== {title}")
    click.echo(report.to_table())


def _progress(name, fold, entry):
    msg = f"[{name} fold {fold}] epoch {entry['epoch']:3d} loss {entry['loss']:.4f}"
    if "select_precision" in entry:
        msg += f" select-precision {entry['select_precision']:.3f}"
    click.echo(msg, err=True)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
def cli(verbose):
    """Coronary artery segment labeling: cohort generation, training and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@common
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default <output_dir>/cohort).")
@click.option("--no-volumes", is_flag=True, help="Write centerlines only.")
def generate(cfg, out, no_volumes):
    """Write a synthetic cohort; an explicit --seed replaces the cohort seed."""
    spec = cfg.cohort
    if click.get_current_context().meta.get("seed_given"):
        spec.seed = cfg.seed
    out_dir = _out_dir(cfg, out, "cohort")
    manifest = write_cohort(out_dir, spec, with_volumes=not no_volumes)
    doc = json.loads(manifest.read_text())
    counts = [len(e["labels"]) for e in doc["trees"]]
    click.echo(f"trees {len(counts)}  branches mean {np.mean(counts):.2f}  min {min(counts)}  max {max(counts)}")
    click.echo(str(manifest))


@cli.command()
@common
@click.option("--cohort", "manifest", type=click.Path(exists=True, dir_okay=False), help="Cohort manifest.json.")
@click.option("--ablation", type=click.Choice(sorted(ABLATIONS)), default="full", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), help="Run directory (default <output_dir>/<ablation>).")
@click.option("--quiet", "-q", is_flag=True, help="No per-epoch progress.")
def train(cfg, manifest, ablation, out, quiet):
    """Five-fold cross-validation; writes per-fold checkpoints and metrics."""
    cfg = cfg.replace_model(**ABLATIONS[ablation])
    spec, trees, volumes = _cohort(cfg, manifest)
    samples = _samples(cfg, spec, trees, volumes)
    out_dir = _out_dir(cfg, out, ablation)
    dump_config(cfg, out_dir / "config.yaml")
    cv = cross_validate(cfg, samples, name=ablation, out_dir=out_dir, progress=None if quiet else _progress)
    _echo_report(f"{ablation} pooled over {len(cv.fold_reports)} folds", cv.pooled)
    click.echo(str(out_dir / "metrics.csv"))


@cli.command("evaluate")
@common
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory written by `train`.")
@click.option("--cohort", "manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Defaults to the run directory.")
def evaluate_cmd(cfg, run_dir, manifest, out):
    """Re-evaluate each fold checkpoint on its held-out trees and time every tree."""
    cv = load_cv_run(run_dir)
    cfg.model = cv.models[0].cfg
    spec, trees, volumes = _cohort(cfg, manifest)
    by_id = {s.tree_id: s for s in _samples(cfg, spec, trees, volumes)}
    out_dir = Path(out) if out else Path(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, rows = [], []
    for k, (model, test_ids) in enumerate(zip(cv.models, cv.split.folds)):
        missing = [t for t in test_ids if t not in by_id]
        if missing:
            raise ConfigError(f"fold {k}: trees {missing[:3]} are not in the cohort")
        test = [by_id[t] for t in test_ids]
        report, _, seconds = evaluate(model, test, {"fold": k}, timing=True)
        reports.append(report)
        rows += [(s.tree_id, k, len(s.labels), f"{t:.6f}") for s, t in zip(test, seconds)]
    pooled = merge_reports(reports, {"config": cv.name})
    pooled.save(out_dir / "evaluate.csv")
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tree_id", "fold", "segments", "seconds"])
        w.writerows(rows)
    _echo_report(f"{cv.name} re-evaluated", pooled)
    click.echo(f"mean inference time per tree {np.mean([float(r[3]) for r in rows]):.4f} s "
               f"over {len(rows)} trees")


@cli.command()
@common
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Checkpoint manifest (model.json).")
@click.option("--centerlines", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--volume", type=click.Path(exists=True, dir_okay=False),
              help="Volume header; required when the model uses image conditions.")
def predict(cfg, model_path, centerlines, volume):
    """Print one predicted label per segment, in file order."""
    model = CprGcn.load(model_path)
    lines = read_centerlines(centerlines)
    vol = read_volume(volume) if volume else None
    if model.cfg.use_conditions and vol is None:
        raise click.UsageError("this model uses image conditions; pass --volume")
    sample = prepare_tree(VesselTree(Path(centerlines).stem, lines, [1.0] * len(lines)), vol, cfg.data,
                          model.cfg.condition.gamma, cfg.cohort.background)
    for k in model.predict(collate([sample])):
        click.echo(CLASSES[k])


@cli.command()
@common
@click.option("--cohort", "manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", "names", multiple=True, type=click.Choice(sorted(ABLATIONS)),
              help="Configurations to run (repeatable; default all).")
@click.option("--blocks", multiple=True, type=click.IntRange(1, 8), help="Block counts (default 1-4).")
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--quiet", "-q", is_flag=True)
def ablate(cfg, manifest, names, blocks, out, quiet):
    """Cross-validate every configuration x block-count cell on one fold split."""
    names = names or tuple(ABLATIONS)
    blocks = blocks or (1, 2, 3, 4)
    spec, trees, volumes = _cohort(cfg, manifest)
    samples = _samples(cfg, spec, trees, volumes, with_cubes=True)
    out_dir = _out_dir(cfg, out, "ablation")
    grid = run_ablation_grid(cfg, samples, names, blocks, out_dir, None if quiet else _progress)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "blocks", *SUMMARY_FIELDS])
        for (name, n), cv in grid.items():
            s = cv.pooled.summary()
            w.writerow([name, n, *(f"{s[k]:.3f}" if isinstance(s[k], float) else s[k] for k in SUMMARY_FIELDS)])
    click.echo(f"{'config':<15}{'blocks':>7}{'meanRecall':>12}{'meanPrecision':>15}{'meanF1':>9}")
    for (name, n), cv in grid.items():
        s = cv.pooled.summary()
        click.echo(f"{name:<15}{n:>7}{s['meanRecall']:>12.3f}{s['meanPrecision']:>15.3f}{s['meanF1']:>9.3f}")
    click.echo(str(out_dir / "summary.csv"))


@cli.command()
@common
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory written by `train`.")
@click.option("--cohort", "manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", type=click.FloatRange(0, 1), default=None, help="Default: cohort attack_fraction.")
@click.option("--out", type=click.Path(file_okay=False), help="Defaults to the run directory.")
def attack(cfg, run_dir, manifest, fraction, out):
    """Evaluate trained fold checkpoints on trees that lost LM and RCA."""
    cv = load_cv_run(run_dir)
    cfg.model = cv.models[0].cfg
    spec, trees, volumes = _cohort(cfg, manifest)
    samples = _samples(cfg, spec, trees, volumes)
    result = run_data_attack(cfg, trees, spec, cv, samples, fraction, volumes)
    out_dir = Path(out) if out else Path(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.original.save(out_dir / "attack_original.csv")
    result.attacked.save(out_dir / "attack_attacked.csv")
    _echo_report("original", result.original)
    _echo_report(f"attacked ({result.n_attacked} trees)", result.attacked)
    click.echo("delta " + "  ".join(f"{k} {v:.3f}" for k, v in result.delta.items()))


@cli.command()
@common
@click.argument("metrics_files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Pooled metrics file to write.")
def report(cfg, metrics_files, out):
    """Pool fold metrics files by summing their confusion matrices."""
    pooled = merge_reports([MetricsReport.load(p) for p in metrics_files], {"files": len(metrics_files)})
    _echo_report(f"pooled over {len(metrics_files)} files", pooled)
    if out:
        pooled.save(out)
        click.echo(out)


def main():
    cli()


if __name__ == "__main__":
    main()
