"""Anomaly scoring, screening reports and the repeated stratified cross-validation harness."""
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from loguru import logger
from sklearn.model_selection import StratifiedKFold

from ..core.errors import InvalidArgumentError
from ..models.graph_s4 import GraphS4Model
from ..schemas.data import HEALTHY, PATIENT, Dataset, Sample, Split
from ..schemas.model import ModelConfig
from ..schemas.report import CVComparison, CVResult, FoldMetrics, ScreenReport, ScreenRow
from ..schemas.run import CVConfig
from ..schemas.task import NetworkPartition, TaskKind, TaskSpec
from ..schemas.training import TrainConfig
from .task_service import build_instance, eval_random_mask_score, instance_mse, sample_seed
from .training_service import binary_metrics, finetune_cls, predict_labels, train_from_scratch

BALANCE_TOLERANCE = 0.1

Predictor = Callable[[Dataset], np.ndarray]
TrainFn = Callable[[Dataset, int, int], Predictor]


def anomaly_score(model: GraphS4Model, x: Sample, spec: TaskSpec, p: Optional[NetworkPartition], seed: int = 0) -> float:
    """Masked-region MSE of the model's prediction, in eval mode."""
    if x.num_nodes != model.config.num_nodes:
        raise InvalidArgumentError(
            f"{x.id} has {x.num_nodes} nodes, model expects {model.config.num_nodes}"
        )
    if spec.kind == TaskKind.RANDOM_MASK:
        return eval_random_mask_score(model, x, spec, seed)
    return instance_mse(model, build_instance(x, spec, p, seed))


def _check_binary(labels: np.ndarray) -> None:
    present = set(np.unique(labels).tolist())
    if not present <= {HEALTHY, PATIENT}:
        raise InvalidArgumentError(f"labels must be 0 or 1, got {sorted(present)}")
    if present != {HEALTHY, PATIENT}:
        raise InvalidArgumentError("both healthy and patient labels are required")


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(patient score > healthy score) with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InvalidArgumentError("scores and labels differ in length")
    _check_binary(labels)
    pos = scores[labels == PATIENT][:, None]
    neg = scores[labels == HEALTHY][None, :]
    wins = np.count_nonzero(pos > neg) + 0.5 * np.count_nonzero(pos == neg)
    return float(wins / (pos.size * neg.size))


@dataclass(frozen=True)
class ThresholdChoice:
    """Youden-optimal cut: scores >= threshold are called patients."""

    threshold: float
    youden_j: float
    sensitivity: float
    specificity: float
    # J <= 0: no cut separates the classes better than chance
    degenerate: bool


def select_threshold(scores: Sequence[float], labels: Sequence[int]) -> ThresholdChoice:
    """Maximise sensitivity + specificity - 1 over the lowest score and the midpoints
    between consecutive distinct scores; ties go to the lower threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    distinct = np.unique(scores)
    candidates = np.concatenate([distinct[:1], (distinct[:-1] + distinct[1:]) / 2])

    best = None
    for t in candidates:
        called = scores >= t
        sensitivity = float(np.mean(called[labels == PATIENT]))
        specificity = float(np.mean(~called[labels == HEALTHY]))
        j = sensitivity + specificity - 1
        if best is None or j > best[1]:
            best = (float(t), j, sensitivity, specificity)
    choice = ThresholdChoice(*best, degenerate=best[1] <= 0)
    if choice.degenerate:
        logger.warning("no threshold beats chance (Youden J = {:.3f})", choice.youden_j)
    return choice


def _check_validation_set(val: Dataset) -> np.ndarray:
    labels = np.array([-1 if s.label is None else s.label for s in val])
    _check_binary(labels)
    imbalance = abs(int(np.sum(labels == PATIENT)) - int(np.sum(labels == HEALTHY))) / len(labels)
    if imbalance > BALANCE_TOLERANCE:
        raise InvalidArgumentError(
            f"validation set is not balanced: {np.sum(labels == PATIENT)} patients vs {np.sum(labels == HEALTHY)} healthy"
        )
    return labels


def _screen_row(model, spec: TaskSpec, val: Dataset, labels: np.ndarray, p, seed: int) -> ScreenRow:
    scores = np.array([anomaly_score(model, s, spec, p, sample_seed(seed, s.id)) for s in val])
    choice = select_threshold(scores, labels)
    return ScreenRow(
        mse_healthy=float(scores[labels == HEALTHY].mean()),
        mse_patient=float(scores[labels == PATIENT].mean()),
        auroc=auroc(scores, labels),
        threshold=choice.threshold,
        sensitivity=choice.sensitivity,
        specificity=choice.specificity,
    )


def screen_networks(
    models: Mapping[str, GraphS4Model],
    val: Dataset,
    p: NetworkPartition,
    dataset_id: str = "synthetic",
    seed: int = 0,
) -> ScreenReport:
    """One row per partition network: masked-network MSE by group, AUROC and Youden threshold."""
    missing = [name for name in p.names if name not in models]
    if missing:
        raise InvalidArgumentError(f"no model for networks {missing}")
    labels = _check_validation_set(val)
    rows = {}
    for name in p.names:
        spec = TaskSpec(kind=TaskKind.NETWORK_MASK, target_network=name)
        rows[name] = _screen_row(models[name], spec, val, labels, p, seed)
        logger.info("network {}: AUROC {:.3f}", name, rows[name].auroc)
    return ScreenReport(dataset_id=dataset_id, unit="network", rows=rows)


def screen_tasks(
    entries: Iterable[Tuple[TaskSpec, GraphS4Model]],
    val: Dataset,
    p: Optional[NetworkPartition],
    dataset_id: str = "synthetic",
    seed: int = 0,
) -> ScreenReport:
    """Same scoring for network-agnostic tasks (forecast, denoise, random masks), one row per task."""
    labels = _check_validation_set(val)
    rows = {}
    for spec, model in entries:
        rows[spec.name] = _screen_row(model, spec, val, labels, p, seed)
        logger.info("task {}: AUROC {:.3f}", spec.name, rows[spec.name].auroc)
    return ScreenReport(dataset_id=dataset_id, unit="task", rows=rows)


def cv_harness(
    dataset: Dataset,
    folds: int,
    repeats: int,
    excluded: Mapping[str, Set[str]],
    train_fn: TrainFn,
    seed: int,
) -> CVResult:
    """Repeated stratified k-fold.

    Ids in excluded["ss_val"] are dropped entirely. Ids in excluded["ss_train"]
    are added to every training fold and never tested. `train_fn(train,
    repeat, fold)` returns a predictor mapping samples to 0/1 labels.
    """
    ss_val = set(excluded.get("ss_val", ()))
    ss_train = set(excluded.get("ss_train", ()))
    always_train = [s for s in dataset if s.id in ss_train and s.id not in ss_val]
    eligible = [s for s in dataset if s.id not in ss_val and s.id not in ss_train]
    labels = np.array([-1 if s.label is None else s.label for s in eligible])
    _check_binary(labels)

    per_fold = []
    for repeat in range(repeats):
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed + repeat)
        try:
            splits = list(splitter.split(np.zeros(len(eligible)), labels))
        except ValueError as e:
            raise InvalidArgumentError(f"cannot build {folds} stratified folds: {e}") from e
        for fold, (train_idx, test_idx) in enumerate(splits):
            test = [eligible[i] for i in test_idx]
            test_labels = labels[test_idx]
            if len(set(test_labels.tolist())) < 2:
                raise InvalidArgumentError(f"repeat {repeat} fold {fold} lacks one of the classes")
            train = [eligible[i] for i in train_idx] + always_train
            predictor = train_fn(train, repeat, fold)
            metrics = binary_metrics(test_labels, np.asarray(predictor(test)))
            per_fold.append(
                FoldMetrics(
                    **metrics,
                    repeat=repeat,
                    fold=fold,
                    train_ids=[s.id for s in train],
                    test_ids=[s.id for s in test],
                )
            )
            logger.debug("repeat {} fold {}: balanced accuracy {:.3f}", repeat, fold, metrics["balanced_accuracy"])
    return CVResult.from_folds(per_fold, repeats=repeats, folds=folds)


def _fold_config(cfg: TrainConfig, repeat: int, fold: int) -> TrainConfig:
    return cfg.model_copy(update={"seed": cfg.seed + 1000 * repeat + fold})


def compare_pretraining(
    pretrained: GraphS4Model,
    model_cfg: ModelConfig,
    dataset: Dataset,
    excluded: Mapping[str, Set[str]],
    cfg: TrainConfig,
    cv: CVConfig,
    task_name: str,
    seed: int = 0,
) -> CVComparison:
    """Fine-tuned pretrained model vs the same architecture trained from scratch, on identical folds."""

    def finetuned(train: Dataset, repeat: int, fold: int) -> Predictor:
        model = finetune_cls(pretrained, train, _fold_config(cfg, repeat, fold))
        return lambda samples: predict_labels(model, samples)

    def scratch(train: Dataset, repeat: int, fold: int) -> Predictor:
        model = train_from_scratch(model_cfg, train, _fold_config(cfg, repeat, fold))
        return lambda samples: predict_labels(model, samples)

    logger.info("cross-validating the {} pretrained model", task_name)
    with_pretraining = cv_harness(dataset, cv.folds, cv.repeats, excluded, finetuned, seed)
    logger.info("cross-validating Graph-S4 from scratch")
    from_scratch = cv_harness(dataset, cv.folds, cv.repeats, excluded, scratch, seed)
    return CVComparison(task=task_name, pretrained=with_pretraining, scratch=from_scratch)


def excluded_ids(dataset: Dataset) -> Dict[str, Set[str]]:
    """ss_val / ss_train id sets from the split labels of a dataset"""
    return {
        "ss_val": {s.id for s in dataset if s.split == Split.CLINICAL_SS_VAL},
        "ss_train": {s.id for s in dataset if s.split == Split.CLINICAL_SS_TRAIN},
    }
