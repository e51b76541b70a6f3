"""Five-fold training, evaluation, the ablation grid and the data-attack evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..cohort import CohortSpec, VesselTree, apply_data_attack
from ..model import CprGcn, TreeSample, collate, forward_loss
from ..tensor import Adam, no_grad
from .config import ConfigError, ExperimentConfig
from .data import prepare_cohort
from .metrics import MetricsReport, compute_metrics, merge_reports

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "no-conditions": {"use_conditions": False},
    "no-residual": {"shortcut": "none"},
    "undirected": {"directed": False},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FoldSplit:
    folds: list[list[str]]
    seed: int

    def train_ids(self, k: int) -> list[str]:
        return [t for j, f in enumerate(self.folds) if j != k for t in f]


def five_fold_split(tree_ids: list[str], seed: int, n_folds: int = 5) -> FoldSplit:
    """Seeded shuffle cut into ``n_folds`` near-equal parts (sizes differ by at most one)."""
    ids = list(tree_ids)
    if len(ids) < n_folds:
        raise ConfigError(f"need at least {n_folds} trees for {n_folds}-fold cross-validation, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("tree ids must be unique")
    perm = np.random.default_rng([seed, 5]).permutation(len(ids))
    return FoldSplit([[ids[i] for i in part] for part in np.array_split(perm, n_folds)], seed)


@dataclass
class TrainResult:
    model: CprGcn
    history: list[dict]
    initial_loss: float
    best_epoch: int


def _batches(items: list, size: int, rng: np.random.Generator | None) -> list[list]:
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    return [[items[i] for i in order[k:k + size]] for k in range(0, len(items), size)]


def _dump_diagnostics(out_dir: Path | None, payload: dict) -> str:
    if out_dir is None:
        return ""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "diverged.json"
    path.write_text(json.dumps(payload, indent=1))
    return f" (diagnostics in {path})"


def mean_loss(model: CprGcn, samples: list[TreeSample], batch_size: int, reduction: str = "tree") -> float:
    with no_grad():
        losses = [forward_loss(model, collate(b), reduction).item() * len(b)
                  for b in _batches(samples, batch_size, None)]
    return float(sum(losses) / len(samples))


def predict(model: CprGcn, samples: list[TreeSample], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for batch in _batches(samples, batch_size, None):
        pred = model.predict(collate(batch))
        offsets = np.cumsum([0] + [len(s.features) for s in batch])
        out.extend(pred[a:b] for a, b in zip(offsets[:-1], offsets[1:]))
    return out


def evaluate(model: CprGcn, samples: list[TreeSample], descriptor: dict | None = None,
             timing: bool = False) -> tuple[MetricsReport, list[np.ndarray], list[float]]:
    """Metrics over all segments; with ``timing`` each tree is run alone and timed."""
    if timing:
        preds, seconds = [], []
        for s in samples:
            t0 = time.perf_counter()
            preds.append(model.predict(collate([s])))
            seconds.append(time.perf_counter() - t0)
    else:
        preds, seconds = predict(model, samples), []
    truth = np.concatenate([s.labels for s in samples])
    return compute_metrics(np.concatenate(preds), truth, descriptor), preds, seconds


def train_model(cfg: ExperimentConfig, train: list[TreeSample], select: list[TreeSample] | None,
                seed_key: tuple[int, ...], out_dir: Path | None = None,
                progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on mini-batches of trees; keeps the parameters with the best micro precision on ``select``."""
    tc = cfg.train
    model = CprGcn(cfg.model, seed=int(np.random.default_rng(list(seed_key)).integers(2**31)))
    params = list(model.params.values())
    opt = Adam(params, lr=tc.lr)
    shuffle = np.random.default_rng(list(seed_key) + [1])
    initial = mean_loss(model, train, tc.batch_size, tc.loss_reduction)
    history: list[dict] = []
    best, best_score, best_epoch = None, -math.inf, tc.epochs
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for batch in _batches(train, tc.batch_size, shuffle):
            loss = forward_loss(model, collate(batch), tc.loss_reduction)
            value = loss.item()
            if not math.isfinite(value):
                note = _dump_diagnostics(out_dir, {
                    "epoch": epoch, "batch": [s.tree_id for s in batch], "loss": repr(value),
                    "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()},
                })
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}{note}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            total += value * len(batch)
        entry = {"epoch": epoch, "loss": total / len(train), "seconds": time.perf_counter() - t0}
        if select:
            report, _, _ = evaluate(model, select)
            entry["select_precision"] = report.micro_precision
            if report.micro_precision > best_score:
                best_score, best_epoch = report.micro_precision, epoch
                best = {k: p.data.copy() for k, p in model.params.items()}
        history.append(entry)
        if progress:
            progress(entry)
    if best is not None:
        for k, p in model.params.items():
            p.data[...] = best[k]
    return TrainResult(model, history, initial, best_epoch)


@dataclass
class CVResult:
    name: str
    split: FoldSplit
    fold_reports: list[MetricsReport]
    pooled: MetricsReport
    models: list[CprGcn]
    results: list[TrainResult]
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    seconds: float = 0.0


def cross_validate(cfg: ExperimentConfig, samples: list[TreeSample], split: FoldSplit | None = None,
                   name: str = "full", out_dir: str | Path | None = None,
                   progress: Callable[[str, int, dict], None] | None = None) -> CVResult:
    """Train one model per fold and evaluate it on the held-out trees."""
    t_start = time.perf_counter()
    by_id = {s.tree_id: s for s in samples}
    split = split or five_fold_split(list(by_id), cfg.seed, cfg.n_folds)
    out = Path(out_dir) if out_dir is not None else None
    reports, models, results, predictions = [], [], [], {}
    for k, test_ids in enumerate(split.folds):
        train_ids = split.train_ids(k)
        if set(train_ids) & set(test_ids):
            raise ConfigError(f"fold {k}: train and test overlap")
        train = [by_id[t] for t in train_ids]
        test = [by_id[t] for t in test_ids]
        select = test
        if cfg.train.selection == "val_precision":
            n_val = max(1, int(round(cfg.train.val_fraction * len(train))))
            order = np.random.default_rng([cfg.seed, k, 2]).permutation(len(train))
            select = [train[i] for i in order[:n_val]]
            train = [train[i] for i in order[n_val:]]
        elif cfg.train.selection == "last":
            select = None
        fold_dir = out / f"fold{k}" if out is not None else None
        cb = (lambda e, k=k: progress(name, k, e)) if progress else None
        result = train_model(cfg, train, select, (cfg.seed, k), fold_dir, cb)
        report, preds, _ = evaluate(result.model, test, {"config": name, "fold": k})
        predictions.update({s.tree_id: p for s, p in zip(test, preds)})
        reports.append(report)
        models.append(result.model)
        results.append(result)
        if fold_dir is not None:
            fold_dir.mkdir(parents=True, exist_ok=True)
            result.model.save(fold_dir / "model", extra={"fold": k, "seed": cfg.seed, "config": name,
                                                         "best_epoch": result.best_epoch, "test_ids": test_ids})
            report.save(fold_dir / "metrics.csv")
            (fold_dir / "history.json").write_text(json.dumps(
                {"initial_loss": result.initial_loss, "best_epoch": result.best_epoch,
                 "history": result.history}, indent=1))
    pooled = merge_reports(reports, {"config": name})
    if out is not None:
        pooled.save(out / "metrics.csv")
    return CVResult(name, split, reports, pooled, models, results, predictions,
                    time.perf_counter() - t_start)


def run_ablation_grid(cfg: ExperimentConfig, samples: list[TreeSample], names=tuple(ABLATIONS),
                      blocks=(1, 2, 3, 4), out_dir: str | Path | None = None,
                      progress=None) -> dict[tuple[str, int], CVResult]:
    """Cross-validate every (configuration, block count) cell on one shared fold split."""
    split = five_fold_split([s.tree_id for s in samples], cfg.seed, cfg.n_folds)
    out = {}
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        for n_blocks in blocks:
            cell = cfg.replace_model(n_blocks=n_blocks, **ABLATIONS[name])
            label = f"{name}-{n_blocks}"
            cell_dir = Path(out_dir) / label if out_dir is not None else None
            out[(name, n_blocks)] = cross_validate(cell, samples, split, label, cell_dir, progress)
    return out


@dataclass
class AttackResult:
    original: MetricsReport
    attacked: MetricsReport
    n_attacked: int

    @property
    def delta(self) -> dict:
        a, b = self.original.summary(), self.attacked.summary()
        return {k: a[k] - b[k] for k in ("meanRecall", "meanPrecision", "meanF1")}


def run_data_attack(cfg: ExperimentConfig, trees: list[VesselTree], spec: CohortSpec, cv: CVResult,
                    samples: list[TreeSample], fraction: float | None = None,
                    volumes: dict | None = None) -> AttackResult:
    """Evaluate each fold's trained model on the attacked version of its held-out trees.

    No retraining; untouched trees reuse their original samples.
    """
    fraction = spec.attack_fraction if fraction is None else fraction
    attacked_trees = apply_data_attack(trees, fraction, seed=cfg.seed)
    by_id = {s.tree_id: s for s in samples}
    hit = [t for t in attacked_trees if t.attacked]
    with_cubes = cv.models[0].cfg.use_conditions if cv.models else True
    redone = prepare_cohort(hit, spec, cfg.data, cfg.model.condition.gamma, with_cubes, volumes)
    attacked_by_id = dict(by_id)
    attacked_by_id.update({s.tree_id: s for s in redone})
    orig_reports, att_reports = [], []
    for k, test_ids in enumerate(cv.split.folds):
        model = cv.models[k]
        orig_reports.append(evaluate(model, [by_id[t] for t in test_ids])[0])
        att_reports.append(evaluate(model, [attacked_by_id[t] for t in test_ids])[0])
    return AttackResult(merge_reports(orig_reports, {"config": cv.name, "attack": 0.0}),
                        merge_reports(att_reports, {"config": cv.name, "attack": fraction}), len(hit))


def load_cv_run(run_dir: str | Path, name: str | None = None) -> CVResult:
    """Rebuild a cross-validation result from the fold checkpoints a run wrote."""
    run = Path(run_dir)
    fold_dirs = sorted(run.glob("fold*"), key=lambda p: int(p.name[4:]))
    if not fold_dirs:
        raise ConfigError(f"{run}: no fold directories")
    models, reports, folds, results = [], [], [], []
    seed = 0
    for d in fold_dirs:
        model = CprGcn.load(d / "model")
        extra = json.loads((d / "model.json").read_text()).get("extra", {})
        folds.append(list(extra.get("test_ids", [])))
        seed = int(extra.get("seed", seed))
        models.append(model)
        reports.append(MetricsReport.load(d / "metrics.csv"))
        hist = json.loads((d / "history.json").read_text())
        results.append(TrainResult(model, hist["history"], hist["initial_loss"], hist["best_epoch"]))
    name = name or run.name
    return CVResult(name, FoldSplit(folds, seed), reports, merge_reports(reports, {"config": name}),
                    models, results)
