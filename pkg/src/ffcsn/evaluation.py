"""Metrics, identity-disjoint cross-validation and the experiment drivers built on them."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .model import ABLATION_VARIANTS, AblationFlags
from .synthgen import Dataset
from .trainer import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)


class FoldError(ValueError):
    pass


@dataclass
class FoldPlan:
    k: int
    seed: int
    identity_folds: List[List[int]]
    sample_folds: List[List[int]]

    def test_indices(self, fold: int) -> List[int]:
        return list(self.sample_folds[fold])

    def train_indices(self, fold: int) -> List[int]:
        return sorted(i for f, idx in enumerate(self.sample_folds) if f != fold for i in idx)

    def validate(self, identity_ids: Optional[Sequence[int]] = None) -> None:
        """Check disjointness and coverage; with ``identity_ids`` also check sample/identity agreement."""
        seen_ids: Dict[int, int] = {}
        for f, ids in enumerate(self.identity_folds):
            for i in ids:
                if i in seen_ids:
                    raise FoldError(f"identity {i} appears in folds {seen_ids[i]} and {f}")
                seen_ids[i] = f
        seen_samples: Dict[int, int] = {}
        for f, idx in enumerate(self.sample_folds):
            for s in idx:
                if s in seen_samples:
                    raise FoldError(f"sample {s} appears in folds {seen_samples[s]} and {f}")
                seen_samples[s] = f
        if identity_ids is None:
            return
        identity_ids = np.asarray(identity_ids)
        if set(seen_samples) != set(range(len(identity_ids))):
            raise FoldError("fold plan does not cover every sample exactly once")
        for s, f in seen_samples.items():
            owner = seen_ids.get(int(identity_ids[s]))
            if owner != f:
                raise FoldError(f"sample {s} (identity {identity_ids[s]}) is in fold {f} but its identity "
                                f"is assigned to fold {owner}")

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "identity_folds": self.identity_folds,
                "sample_folds": self.sample_folds}

    @classmethod
    def from_json(cls, d: dict, identity_ids: Optional[Sequence[int]] = None) -> "FoldPlan":
        """Build a plan from explicit identity folds (sample folds derived when ``identity_ids`` is given)."""
        id_folds = [[int(i) for i in f] for f in d["identity_folds"]]
        if identity_ids is not None:
            owner = {i: f for f, ids in enumerate(id_folds) for i in ids}
            sample_folds: List[List[int]] = [[] for _ in id_folds]
            for s, ident in enumerate(identity_ids):
                if int(ident) not in owner:
                    raise FoldError(f"identity {ident} of sample {s} is not assigned to any fold")
                sample_folds[owner[int(ident)]].append(s)
        else:
            sample_folds = [[int(s) for s in f] for f in d["sample_folds"]]
        plan = cls(len(id_folds), int(d.get("seed", 0)), id_folds, sample_folds)
        plan.validate(identity_ids)
        return plan


def make_folds(identity_ids: Sequence[int], k: int = 10, seed: int = 0) -> FoldPlan:
    """Shuffle the distinct identities with ``seed`` and deal them round-robin into ``k`` folds."""
    identity_ids = np.asarray(identity_ids, dtype=int)
    distinct = np.unique(identity_ids)
    if not 1 <= k <= len(distinct):
        raise FoldError(f"k={k} must be between 1 and the number of identities ({len(distinct)})")
    order = np.random.default_rng(seed).permutation(distinct)
    id_folds = [sorted(int(i) for i in order[f::k]) for f in range(k)]
    owner = {i: f for f, ids in enumerate(id_folds) for i in ids}
    sample_folds: List[List[int]] = [[] for _ in range(k)]
    for s, ident in enumerate(identity_ids):
        sample_folds[owner[int(ident)]].append(s)
    return FoldPlan(k, seed, id_folds, sample_folds)


def accuracy(predicted: Sequence[int], labels: Sequence[int]) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {labels.shape}")
    if predicted.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predicted == labels))


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise area under the precision-recall curve, sum of (R_i - R_{i-1}) * P_i.

    One point per distinct score threshold, taken in descending order, so tied scores enter
    together. The sum is accumulated in exact rationals and rounded once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("precision-recall is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    area = Fraction(0)
    tp = fp = prev_tp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += int(y[j])
            fp += int(1 - y[j])
            j += 1
        area += Fraction(tp - prev_tp, n_pos) * Fraction(tp, tp + fp)
        prev_tp = tp
        i = j
    return float(area)


@dataclass
class FoldResult:
    fold: int
    test_indices: List[int]
    labels: np.ndarray
    scores: np.ndarray  # deceptive-class probability per test video
    alpha: Optional[np.ndarray]  # (n, 5) per-video mean over its snippets, or None without CL
    acc: float
    auc: Optional[float]  # None when the fold has no deceptive sample


def _check_disjoint(ckpt: Checkpoint, dataset: Dataset, test_indices: Sequence[int]) -> None:
    test_ids = {int(dataset.identity_ids[i]) for i in test_indices}
    overlap = sorted(test_ids & set(ckpt.train_identities))
    if overlap:
        raise FoldError(f"test identities {overlap} were used for training")


def predict(ckpt: Checkpoint, dataset: Dataset, indices: Sequence[int]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Eval-mode deceptive probabilities and per-video mean alpha for ``indices``."""
    model, K = ckpt.model, ckpt.config.K
    was_training = model.training
    model.eval()
    try:
        with nc.no_grad():
            out = model.forward_videos([dataset[int(i)] for i in indices], K, None, train=False)
    finally:
        model.train(was_training)
    probs = nc.softmax(out.E, axis=-1).data[:, 1].astype(np.float64)
    alpha = None
    if out.alpha is not None:
        alpha = out.alpha.data.reshape(len(indices), K, -1).mean(axis=1).astype(np.float64)
    return probs, alpha


def evaluate_fold(ckpt: Checkpoint, dataset: Dataset, test_indices: Sequence[int], fold: int = 0) -> FoldResult:
    test_indices = [int(i) for i in test_indices]
    if not test_indices:
        raise FoldError("empty test fold")
    _check_disjoint(ckpt, dataset, test_indices)
    probs, alpha = predict(ckpt, dataset, test_indices)
    labels = dataset.labels[test_indices]
    pred = (probs > 0.5).astype(int)
    auc = pr_auc(probs, labels) if labels.any() else None
    return FoldResult(fold, test_indices, labels, probs, alpha, accuracy(pred, labels), auc)


def fold_seed(seed: int, fold: int) -> int:
    """Independent per-fold training seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class EvalReport:
    flags: AblationFlags
    seed: int
    folds: List[FoldResult] = field(default_factory=list)

    @property
    def accs(self) -> List[float]:
        return [f.acc for f in self.folds]

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accs))

    @property
    def mean_auc(self) -> float:
        """Mean of per-fold AUC over folds that contain a deceptive sample."""
        vals = [f.auc for f in self.folds if f.auc is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def pooled_auc(self) -> float:
        return pr_auc(np.concatenate([f.scores for f in self.folds]), np.concatenate([f.labels for f in self.folds]))

    def class_alpha(self) -> Optional[Dict[int, np.ndarray]]:
        if not self.folds or self.folds[0].alpha is None:
            return None
        alpha = np.concatenate([f.alpha for f in self.folds])
        labels = np.concatenate([f.labels for f in self.folds])
        return {y: alpha[labels == y].mean(axis=0) for y in (0, 1) if (labels == y).any()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "n_test", "acc", "auc"])
        for f in self.folds:
            w.writerow([f.fold, len(f.test_indices), f"{f.acc:.6f}", "" if f.auc is None else f"{f.auc:.6f}"])
        w.writerow(["mean", sum(len(f.test_indices) for f in self.folds), f"{self.mean_acc:.6f}",
                    f"{self.mean_auc:.6f}"])
        w.writerow(["pooled", "", "", f"{self.pooled_auc:.6f}"])
        return buf.getvalue()


def _run_fold(args) -> Tuple[FoldResult, list]:
    config, dataset, plan, fold = args
    cfg = replace(config, seed=fold_seed(config.seed, fold))
    ckpt, history = train(cfg, dataset, plan.train_indices(fold))
    return evaluate_fold(ckpt, dataset, plan.test_indices(fold), fold), history.records


def _map(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class CVResult:
    report: EvalReport
    histories: List[list]  # per-fold EpochRecord lists


def cross_validate(config: TrainConfig, dataset: Dataset, plan: FoldPlan, jobs: int = 1,
                   folds: Optional[Iterable[int]] = None) -> CVResult:
    """Train a fresh model per fold on the other folds and evaluate it on the held-out one."""
    plan.validate(dataset.identity_ids)
    fold_ids = list(range(plan.k)) if folds is None else list(folds)
    out = _map(_run_fold, [(config, dataset, plan, f) for f in fold_ids], jobs)
    return CVResult(EvalReport(config.flags, config.seed, [r for r, _ in out]), [h for _, h in out])


@dataclass
class AblationTable:
    reports: Dict[str, EvalReport]
    histories: Dict[str, List[list]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "acc", "auc"])
        for name, rep in self.reports.items():
            w.writerow([name, f"{100 * rep.mean_acc:.2f}", f"{100 * rep.mean_auc:.2f}"])
        return buf.getvalue()


def ablation_suite(config: TrainConfig, dataset: Dataset, plan: FoldPlan,
                   variants: Sequence[AblationFlags] = tuple(ABLATION_VARIANTS), jobs: int = 1) -> AblationTable:
    """Cross-validate every variant from scratch with shared seeds; rows keep the given order."""
    plan.validate(dataset.identity_ids)
    tasks = [(replace(config, flags=v), dataset, plan, f) for v in variants for f in range(plan.k)]
    out = _map(_run_fold, tasks, jobs)
    table = AblationTable({})
    for n, v in enumerate(variants):
        chunk = out[n * plan.k : (n + 1) * plan.k]
        table.reports[v.name] = EvalReport(v, config.seed, [r for r, _ in chunk])
        table.histories[v.name] = [h for _, h in chunk]
    return table


LOW_EARLY_THRESHOLD = 0.15


@dataclass
class AlphaReport:
    mean_truthful: np.ndarray
    mean_deceptive: np.ndarray
    low_early_fraction: float  # share of deceptive videos with alpha_1 and alpha_2 both below 0.15

    @property
    def late_mass_gap(self) -> float:
        """Extra mass the deceptive mean puts on indices 3..5 compared with the truthful mean."""
        return float(self.mean_deceptive[2:].sum() - self.mean_truthful[2:].sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + [f"alpha_{j + 1}" for j in range(len(self.mean_truthful))])
        w.writerow(["truthful"] + [f"{v:.6f}" for v in self.mean_truthful])
        w.writerow(["deceptive"] + [f"{v:.6f}" for v in self.mean_deceptive])
        w.writerow(["low_early_fraction", f"{self.low_early_fraction:.6f}"])
        return buf.getvalue()


def alpha_statistics(alpha: np.ndarray, labels: Sequence[int]) -> AlphaReport:
    """Per-class mean alpha from per-video (n, 5) weights."""
    alpha, labels = np.asarray(alpha, dtype=np.float64), np.asarray(labels)
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("alpha report needs samples of both classes")
    dec = alpha[labels == 1]
    low = np.mean((dec[:, 0] < LOW_EARLY_THRESHOLD) & (dec[:, 1] < LOW_EARLY_THRESHOLD))
    return AlphaReport(alpha[labels == 0].mean(axis=0), dec.mean(axis=0), float(low))


def alpha_report(ckpt: Checkpoint, dataset: Dataset, indices: Optional[Sequence[int]] = None) -> AlphaReport:
    """Alpha statistics of a CL checkpoint on ``indices`` (default: every sample outside its training identities)."""
    if not ckpt.config.flags.cl:
        raise ValueError("alpha report needs a checkpoint trained with correlation learning")
    if indices is None:
        seen = set(ckpt.train_identities)
        indices = [i for i, ident in enumerate(dataset.identity_ids) if int(ident) not in seen]
    _check_disjoint(ckpt, dataset, indices)
    _, alpha = predict(ckpt, dataset, indices)
    return alpha_statistics(alpha, dataset.labels[list(indices)])


def report_alpha(report: EvalReport) -> AlphaReport:
    """Alpha statistics pooled over the held-out folds of a cross-validation run."""
    if not report.folds or report.folds[0].alpha is None:
        raise ValueError("report has no alpha (variant without correlation learning)")
    return alpha_statistics(np.concatenate([f.alpha for f in report.folds]),
                            np.concatenate([f.labels for f in report.folds]))


def pair_sweep(config: TrainConfig, dataset: Dataset, plan: FoldPlan, sizes: Sequence[int] = range(2, 9),
               jobs: int = 1) -> Dict[int, float]:
    """Mean ACC of meta-learning models per task size P; every run shares the same seeds."""
    sizes = [int(p) for p in sizes]
    bad = [p for p in sizes if p >= config.batch_size or p < 1]
    if bad:
        raise ValueError(f"task sizes {bad} must lie in [1, batch_size={config.batch_size})")
    if not config.flags.ml:
        config = replace(config, flags=replace(config.flags, ml=True))
    plan.validate(dataset.identity_ids)
    tasks = [(replace(config, P=p), dataset, plan, f) for p in sizes for f in range(plan.k)]
    out = _map(_run_fold, tasks, jobs)
    return {p: float(np.mean([r.acc for r, _ in out[n * plan.k : (n + 1) * plan.k]])) for n, p in enumerate(sizes)}


def sweep_csv(results: Dict[int, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["P", "acc"])
    for p, acc in results.items():
        w.writerow([p, f"{100 * acc:.2f}"])
    return buf.getvalue()


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plotting is optional
        return None
    return plt


def plot_ablation(table: AblationTable, path) -> bool:
    """Bar chart of mean ACC per variant as SVG; returns False when matplotlib is unavailable."""
    plt = _pyplot()
    if plt is None:
        return False
    names = list(table.reports)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(range(len(names)), [100 * table.reports[n].mean_acc for n in names])
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("ACC (%)")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
    return True


def plot_alpha(report: AlphaReport, path) -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    x = np.arange(1, len(report.mean_truthful) + 1)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(x, report.mean_truthful, marker="o", label="truthful")
    ax.plot(x, report.mean_deceptive, marker="s", label="deceptive")
    ax.set_xlabel("motion frame index")
    ax.set_ylabel("mean alpha")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
    return True


def plot_sweep(results: Dict[int, float], path) -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(list(results), [100 * v for v in results.values()], marker="o")
    ax.set_xlabel("task size P")
    ax.set_ylabel("ACC (%)")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
    return True
