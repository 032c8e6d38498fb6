"""Metrics, evaluation reports, repeated-run aggregation and experiment grids.

Inference is single-device: `evaluate` reads only the requested side's
windows, runs deterministic forward passes (dropout off) and reports
accuracy, macro F1 and weighted F1 from argmax predictions. Repeated runs
aggregate to mean and population (divide-by-n) standard deviation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import contrastive, model, training
from .data import WindowedDataset, subsample_labels
from .errors import DataError, LabelError, ParameterError
from .model import ClassifierParams, EncoderParams, HeadParams
from .tensor_core import Rng, Tensor

log = logging.getLogger(__name__)

DEFAULT_LABEL_COUNTS = (1, 5, 10, 50, 100)
DEFAULT_SWEEP_BATCH_SIZES = (16, 32, 64, 128)
DEFAULT_SWEEP_LATENT_SIZES = (32, 64, 96, 128)

METRIC_NAMES = ("accuracy", "macro_f1", "weighted_f1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows true, columns predicted
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                writer.writerow([name, *row.tolist()])


class Metrics(NamedTuple):
    accuracy: float
    macro_f1: float
    weighted_f1: float


@dataclass
class RunReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: ConfusionMatrix
    seed: int = 0
    config: dict = field(default_factory=dict)
    side: str = "left"
    n_evaluated: int = 0
    n_skipped_unlabeled: int = 0
    best_epoch: int | None = None

    def metric(self, name: str) -> float:
        return float(getattr(self, name))

    def to_json(self) -> str:
        doc = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.counts.tolist(),
            "class_names": self.confusion.class_names,
            "seed": self.seed,
            "config": self.config,
            "side": self.side,
            "n_evaluated": self.n_evaluated,
            "n_skipped_unlabeled": self.n_skipped_unlabeled,
            "best_epoch": self.best_epoch,
        }
        return json.dumps(doc, sort_keys=True, indent=2)


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]
    runs: int

    def to_json(self) -> str:
        return json.dumps(
            {"mean": self.mean, "std": self.std, "runs": self.runs},
            sort_keys=True,
            indent=2,
        )


def confusion(predictions, labels, class_names: list[str]) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DataError(
            f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels"
        )
    n = len(class_names)
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise LabelError(f"{what} outside [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts=counts, class_names=list(class_names))


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, macro F1 and support-weighted F1 from a confusion matrix.

    Zero-support classes are excluded from the macro mean and weigh zero
    in the weighted mean; zero-denominator precision/recall count as 0.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    present = support > 0
    macro = float(f1[present].mean())
    weighted = float((f1[present] * support[present]).sum() / support[present].sum())
    accuracy = float(int(np.trace(counts)) / int(total))
    return Metrics(accuracy=accuracy, macro_f1=macro, weighted_f1=weighted)


def predict(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    windows: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Argmax class per (3, T) window; deterministic (no stochastic paths)."""
    out = np.empty(len(windows), dtype=np.int64)
    for i in range(0, len(windows), batch_size):
        x = Tensor(np.stack(windows[i : i + batch_size]))
        h = model.encoder_forward(encoder, x, training=False)
        logits = model.classifier_forward(classifier, h)
        out[i : i + len(logits.data)] = logits.data.argmax(axis=1)
    return out


def evaluate(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    dataset: WindowedDataset,
    side: str = "left",
    seed: int = 0,
    config: dict | None = None,
    batch_size: int = 256,
) -> RunReport:
    """Single-device evaluation: only the chosen side's windows are read."""
    if side not in ("left", "right"):
        raise ParameterError(f"side must be left or right, got {side!r}")
    labeled = [p for p in dataset.pairs if p.label >= 0]
    skipped = len(dataset.pairs) - len(labeled)
    if skipped:
        log.warning("evaluate: skipped %d unlabeled windows", skipped)
    if not labeled:
        raise DataError("no labeled windows to evaluate")
    windows = [p.left if side == "left" else p.right for p in labeled]
    labels = np.array([p.label for p in labeled], dtype=np.int64)
    predictions = predict(encoder, classifier, windows, batch_size)
    cm = confusion(predictions, labels, dataset.class_names)
    m = metrics(cm)
    return RunReport(
        accuracy=m.accuracy,
        macro_f1=m.macro_f1,
        weighted_f1=m.weighted_f1,
        confusion=cm,
        seed=seed,
        config=config or {},
        side=side,
        n_evaluated=len(labeled),
        n_skipped_unlabeled=skipped,
    )


def aggregate(reports: list[RunReport]) -> AggregateReport:
    """Per-metric sample mean and population standard deviation."""
    if not reports:
        raise DataError("cannot aggregate zero reports")
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for name in METRIC_NAMES:
        values = np.array([r.metric(name) for r in reports], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(np.sqrt(((values - values.mean()) ** 2).mean()))
    return AggregateReport(mean=mean, std=std, runs=len(reports))


def embed_pairs(
    encoder: EncoderParams,
    head: HeadParams,
    dataset: WindowedDataset,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm embeddings of both sides, evaluation mode."""
    lefts, rights = [], []
    for i in range(0, len(dataset.pairs), batch_size):
        chunk = dataset.pairs[i : i + batch_size]
        for store, side in ((lefts, "left"), (rights, "right")):
            x = Tensor(np.stack([getattr(p, side) for p in chunk]))
            z = model.head_forward(head, model.encoder_forward(encoder, x, False))
            store.append(z.data)
    return np.concatenate(lefts), np.concatenate(rights)


def alignment_gap(
    encoder: EncoderParams,
    head: HeadParams,
    dataset: WindowedDataset,
    max_pairs: int = 512,
) -> tuple[float, float]:
    """(mean partner cosine similarity, mean non-partner similarity).

    Pretraining should drive the first well above the second; the gap is
    the alignment score of the learned embedding.
    """
    subset = dataset
    if len(dataset.pairs) > max_pairs:
        subset = dataclasses.replace(dataset, pairs=dataset.pairs[:max_pairs])
    z_left, z_right = embed_pairs(encoder, head, subset)
    z = np.empty((2 * len(z_left), z_left.shape[1]), dtype=z_left.dtype)
    z[0::2] = z_left
    z[1::2] = z_right
    sims = contrastive.cosine_similarity_matrix(z)
    n = sims.shape[0]
    partner_idx = np.arange(n) ^ 1
    partner = sims[np.arange(n), partner_idx]
    mask = ~np.eye(n, dtype=bool)
    mask[np.arange(n), partner_idx] = False
    return float(partner.mean()), float(sims[mask].mean())


# ---------------------------------------------------------------------------
# Experiment grids
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    labels_per_class: int
    method: str  # "ssl_finetune" | "supervised"
    aggregate: AggregateReport
    labeled_ids: list[list[int]]  # per repeat, for audit


def _labeled_indices(dataset: WindowedDataset) -> list[int]:
    return [i for i, p in enumerate(dataset.pairs) if p.label >= 0]


def reduced_label_curve(
    pretrained_encoder: EncoderParams,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    test_set: WindowedDataset,
    finetune_cfg: training.FinetuneConfig,
    counts: tuple[int, ...] = DEFAULT_LABEL_COUNTS,
    repeats: int = 3,
    seed: int = 0,
    side: str = "left",
) -> list[CurvePoint]:
    """Label-efficiency comparison: SSL-finetune vs supervised-from-scratch.

    Both arms see bitwise-identical label subsets per (count, repeat); a
    count whose class population is too small is skipped with a warning.
    """
    points: list[CurvePoint] = []
    for count in counts:
        per_method: dict[str, list[RunReport]] = {"ssl_finetune": [], "supervised": []}
        ids: list[list[int]] = []
        skipped = False
        for r in range(repeats):
            run_seed = seed + r
            try:
                subset = subsample_labels(train_set, count, Rng(run_seed).derive(5))
            except DataError as exc:
                log.warning("skipping %d labels/class: %s", count, exc)
                skipped = True
                break
            ids.append(_labeled_indices(subset))
            cfg = dataclasses.replace(finetune_cfg, seed=run_seed)

            enc = model.copy_encoder(pretrained_encoder)
            clf = model.init_classifier(Rng(run_seed).derive(3), train_set.n_classes)
            training.finetune(enc, clf, subset, val_set, cfg)
            per_method["ssl_finetune"].append(
                evaluate(enc, clf, test_set, side, seed=run_seed)
            )

            sup_cfg = dataclasses.replace(cfg, freeze_policy="none")
            enc2, clf2, _, _ = training.train_supervised(subset, val_set, sup_cfg)
            per_method["supervised"].append(
                evaluate(enc2, clf2, test_set, side, seed=run_seed)
            )
        if skipped:
            continue
        for method, reports in per_method.items():
            points.append(
                CurvePoint(
                    labels_per_class=count,
                    method=method,
                    aggregate=aggregate(reports),
                    labeled_ids=ids,
                )
            )
    return points


def curve_to_csv(points: list[CurvePoint], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["labels_per_class", "method", "runs"]
            + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
        )
        for p in points:
            row = [p.labels_per_class, p.method, p.aggregate.runs]
            for m in METRIC_NAMES:
                row += [f"{p.aggregate.mean[m]:.6f}", f"{p.aggregate.std[m]:.6f}"]
            writer.writerow(row)


@dataclass
class SweepCell:
    batch_size: int
    latent_size: int
    aggregate: AggregateReport | None
    error: str = ""


def run_cell(
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    test_set: WindowedDataset,
    pretrain_cfg: training.PretrainConfig,
    finetune_cfg: training.FinetuneConfig,
    latent_size: int,
    side: str,
    seed: int,
) -> RunReport:
    """One full pretrain -> finetune -> evaluate pipeline."""
    root = Rng(seed)
    encoder = model.init_encoder(root.derive(3))
    head = model.init_head(root.derive(3).derive(1), latent_size=latent_size)
    p_cfg = dataclasses.replace(pretrain_cfg, seed=seed)
    training.pretrain_lr_ssl(train_set, encoder, head, p_cfg)
    classifier = model.init_classifier(root.derive(3).derive(2), train_set.n_classes)
    f_cfg = dataclasses.replace(finetune_cfg, seed=seed)
    _, _, _, best_epoch = training.finetune(
        encoder, classifier, train_set, val_set, f_cfg
    )
    report = evaluate(encoder, classifier, test_set, side, seed=seed)
    report.best_epoch = best_epoch
    return report


def sweep(
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    test_set: WindowedDataset,
    pretrain_cfg: training.PretrainConfig,
    finetune_cfg: training.FinetuneConfig,
    batch_sizes: tuple[int, ...] = DEFAULT_SWEEP_BATCH_SIZES,
    latent_sizes: tuple[int, ...] = DEFAULT_SWEEP_LATENT_SIZES,
    repeats: int = 1,
    seed: int = 0,
    side: str = "left",
    jobs: int = 1,
) -> list[SweepCell]:
    """Batch-size x latent-size grid of full runs; failures do not stop it.

    Cell seeds are seed + cell_index (row-major) regardless of scheduling,
    so results are independent of `jobs`.
    """
    tasks = []
    for i, batch in enumerate(batch_sizes):
        for j, latent in enumerate(latent_sizes):
            cell_index = i * len(latent_sizes) + j
            tasks.append((batch, latent, seed + cell_index))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_cell_entry, train_set, val_set, test_set,
                                   pretrain_cfg, finetune_cfg, repeats, side, task)
                       for task in tasks]
            return [f.result() for f in futures]
    return [
        _sweep_cell_entry(train_set, val_set, test_set, pretrain_cfg,
                          finetune_cfg, repeats, side, task)
        for task in tasks
    ]


def _sweep_cell_entry(train_set, val_set, test_set, pretrain_cfg, finetune_cfg,
                      repeats, side, task) -> SweepCell:
    batch, latent, cell_seed = task
    try:
        p_cfg = dataclasses.replace(pretrain_cfg, batch_size=batch)
        reports = [
            run_cell(train_set, val_set, test_set, p_cfg, finetune_cfg,
                     latent, side, cell_seed + r)
            for r in range(repeats)
        ]
        return SweepCell(batch, latent, aggregate(reports))
    except Exception as exc:  # record, keep sweeping
        log.warning("sweep cell (N=%d, S=%d) failed: %s", batch, latent, exc)
        return SweepCell(batch, latent, None, error=str(exc))


def sweep_to_csv(cells: list[SweepCell], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["batch_size", "latent_size", "runs", "error"]
            + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
        )
        for c in cells:
            if c.aggregate is None:
                writer.writerow([c.batch_size, c.latent_size, 0, c.error]
                                + [""] * 6)
                continue
            row = [c.batch_size, c.latent_size, c.aggregate.runs, ""]
            for m in METRIC_NAMES:
                row += [f"{c.aggregate.mean[m]:.6f}", f"{c.aggregate.std[m]:.6f}"]
            writer.writerow(row)
