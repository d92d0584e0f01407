"""Optimisation and the two training pipelines.

Self-supervised pretraining runs a fixed number of epochs on the population
split, then continues on healthy clinical subjects with early stopping on an
inner validation split. Supervised fine-tuning attaches a two-logit head and
trains only the last Graph-S4 layer and the head unless asked to train
everything.
"""
import copy
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import train_test_split
from torch.optim import Optimizer
from torch.optim.lr_scheduler import ExponentialLR

from ..core.errors import InvalidArgumentError
from ..models.graph_s4 import GraphS4Model, S4Kernel, init_model
from ..models.losses import masked_loss
from ..schemas.data import HEALTHY, PATIENT, Dataset
from ..schemas.model import ModelConfig
from ..schemas.task import NetworkPartition, TaskSpec
from ..schemas.training import LossConfig, TrainConfig
from .task_service import build_batch, sample_seed

Params = Sequence[torch.Tensor]


def backward(loss: torch.Tensor, params: Params) -> List[torch.Tensor]:
    """d loss / d param for every param; parameters the loss does not touch get exact zeros."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise InvalidArgumentError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def adamw_step(
    params: Params,
    grads: Params,
    state: Dict,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> Dict:
    """One AdamW update in place.

    theta <- theta - lr * weight_decay * theta - lr * m_hat / (sqrt(v_hat) + eps)
    `state` starts empty and carries the step count and both moment estimates.
    """
    beta1, beta2 = betas
    if not state:
        state["step"] = 0
        state["exp_avg"] = [torch.zeros_like(p) for p in params]
        state["exp_avg_sq"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    step = state["step"]
    bias_correction1 = 1 - beta1 ** step
    bias_correction2 = 1 - beta2 ** step

    with torch.no_grad():
        for param, grad, exp_avg, exp_avg_sq in zip(params, grads, state["exp_avg"], state["exp_avg_sq"]):
            param.mul_(1 - lr * weight_decay)
            exp_avg.lerp_(grad, 1 - beta1)
            exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
            denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
            param.addcdiv_(exp_avg, denom, value=-lr / bias_correction1)
    return state


class DecoupledAdamW(Optimizer):
    """torch optimizer front end for `adamw_step`, one state per parameter."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for param in group["params"]:
                if param.grad is None:
                    continue
                adamw_step(
                    [param],
                    [param.grad],
                    self.state[param],
                    lr=group["lr"],
                    betas=group["betas"],
                    eps=group["eps"],
                    weight_decay=group["weight_decay"],
                )
        return loss


class EarlyStopping:
    """Counts epochs without improvement; `should_stop` once `patience` are reached in a row."""

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise InvalidArgumentError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch's value; True if it is a new best."""
        improved = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if improved:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class MetricsLog:
    """Tab-separated per-epoch metrics: epoch, split, loss, mse, pearson, lr"""

    FIELDS = ("epoch", "split", "loss", "mse", "pearson", "lr")

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.rows: List[Dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\t".join(self.FIELDS) + "\n", encoding="utf-8")

    def record(self, epoch: int, split: str, loss: float, mse: float, pearson: float, lr: float) -> None:
        row = dict(epoch=epoch, split=split, loss=loss, mse=mse, pearson=pearson, lr=lr)
        self.rows.append(row)
        if self.path:
            line = "\t".join(v if isinstance(v, str) else f"{v:.10g}" for v in row.values())
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def values(self, split: str, field: str = "loss") -> List[float]:
        return [row[field] for row in self.rows if row["split"] == split]


def binary_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Dict[str, float]:
    """Sensitivity (patients positive), specificity and their mean."""
    tn, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[HEALTHY, PATIENT]).ravel()
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    return {
        "balanced_accuracy": float((sensitivity + specificity) / 2),
        "sensitivity": float(sensitivity),
        "specificity": float(specificity),
    }


def inner_split(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle; the last `fraction` (at least one sample) is held out."""
    if len(dataset) < 2:
        raise InvalidArgumentError("need at least two samples for an inner validation split")
    order = torch.randperm(len(dataset), generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = min(len(dataset) - 1, max(1, round(fraction * len(dataset))))
    shuffled = [dataset[i] for i in order]
    return shuffled[:-n_val], shuffled[-n_val:]


def _batches(dataset: Dataset, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    order = list(range(len(dataset)))
    if shuffle:
        generator = torch.Generator().manual_seed(sample_seed(seed, "batch-order", epoch))
        order = torch.randperm(len(dataset), generator=generator).tolist()
    for start in range(0, len(order), batch_size):
        yield [dataset[i] for i in order[start:start + batch_size]]


def _apply_grads(optimizer: Optimizer, loss: torch.Tensor) -> None:
    params = [p for group in optimizer.param_groups for p in group["params"] if p.requires_grad]
    for param, grad in zip(params, backward(loss, params)):
        param.grad = grad
    optimizer.step()


def train_epoch(
    model: GraphS4Model,
    optimizer: Optimizer,
    dataset: Dataset,
    spec: TaskSpec,
    partition: Optional[NetworkPartition],
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    epoch: int,
) -> Tuple[float, float, float]:
    """One pass over `dataset`; returns sample-weighted (loss, mse, pearson)."""
    model.train()
    totals = np.zeros(3)
    for batch in _batches(dataset, cfg.batch_size, cfg.seed, epoch):
        instance = build_batch(batch, spec, partition, cfg.seed, epoch)
        y_hat = model(instance.input)
        loss, mse, corr = masked_loss(instance.target, y_hat, instance.loss_mask, loss_cfg)
        _apply_grads(optimizer, loss)
        totals += len(batch) * np.array([float(loss), float(mse), float(corr)])
    return tuple(totals / len(dataset))


def evaluate_loss(
    model: GraphS4Model,
    dataset: Dataset,
    spec: TaskSpec,
    partition: Optional[NetworkPartition],
    loss_cfg: LossConfig,
    cfg: TrainConfig,
) -> Tuple[float, float, float]:
    """Eval-mode (loss, mse, pearson) with masks fixed across epochs."""
    model.eval()
    totals = np.zeros(3)
    with torch.no_grad():
        for batch in _batches(dataset, cfg.batch_size, cfg.seed, 0, shuffle=False):
            instance = build_batch(batch, spec, partition, cfg.seed, epoch=0)
            y_hat = model(instance.input)
            loss, mse, corr = masked_loss(instance.target, y_hat, instance.loss_mask, loss_cfg)
            totals += len(batch) * np.array([float(loss), float(mse), float(corr)])
    return tuple(totals / len(dataset))


def make_optimizer(model: GraphS4Model, lr: float, cfg: TrainConfig) -> Tuple[DecoupledAdamW, ExponentialLR]:
    """AdamW over the trainable parameters; SSM dynamics (see `S4Kernel.NO_DECAY`) get no weight decay."""
    exempt = set()
    for module in model.modules():
        if isinstance(module, S4Kernel):
            exempt.update(id(p) for p in module.no_decay_parameters())
    trainable = [p for p in model.parameters() if p.requires_grad]
    groups = [
        {"params": [p for p in trainable if id(p) not in exempt]},
        {"params": [p for p in trainable if id(p) in exempt], "weight_decay": 0.0},
    ]
    groups = [group for group in groups if group["params"]]
    optimizer = DecoupledAdamW(groups, lr=lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    return optimizer, ExponentialLR(optimizer, gamma=cfg.lr_decay)


def pretrain_ssl(
    population: Dataset,
    clinical_healthy: Dataset,
    spec: TaskSpec,
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    partition: Optional[NetworkPartition] = None,
    loss_cfg: Optional[LossConfig] = None,
    model: Optional[GraphS4Model] = None,
    metrics: Optional[MetricsLog] = None,
) -> GraphS4Model:
    """Population warm-up, then early-stopped adaptation on healthy clinical subjects.

    Returns the weights with the best inner-validation loss.
    """
    if not population or not clinical_healthy:
        raise InvalidArgumentError("pretraining needs non-empty population and clinical datasets")
    patients = [s.id for s in clinical_healthy if s.label != HEALTHY]
    if patients:
        raise InvalidArgumentError(f"clinical pretraining data must be healthy only; got {patients[:5]}")
    if model is None:
        if model_cfg is None:
            raise InvalidArgumentError("pass either a model or a model config")
        model = init_model(model_cfg, cfg.seed)
    loss_cfg = loss_cfg or LossConfig()
    metrics = metrics or MetricsLog()
    log = logger.bind(task=spec.name, stage="pretrain")

    torch.manual_seed(cfg.seed)
    optimizer, scheduler = make_optimizer(model, cfg.lr, cfg)

    for epoch in range(1, cfg.epochs_population + 1):
        lr = optimizer.param_groups[0]["lr"]
        loss, mse, corr = train_epoch(model, optimizer, population, spec, partition, loss_cfg, cfg, epoch)
        metrics.record(epoch, "population", loss, mse, corr, lr)
        log.info("population epoch {}/{}: loss {:.4f} mse {:.4f}", epoch, cfg.epochs_population, loss, mse)
        scheduler.step()

    train_set, val_set = inner_split(clinical_healthy, cfg.inner_val_fraction, cfg.seed)
    offset = cfg.epochs_population
    val = evaluate_loss(model, val_set, spec, partition, loss_cfg, cfg)
    metrics.record(offset, "inner_val", *val, optimizer.param_groups[0]["lr"])

    stopper = EarlyStopping(cfg.early_stop_patience, mode="min")
    stopper.update(val[0], offset)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(offset + 1, offset + cfg.epochs_clinical_max + 1):
        lr = optimizer.param_groups[0]["lr"]
        loss, mse, corr = train_epoch(model, optimizer, train_set, spec, partition, loss_cfg, cfg, epoch)
        metrics.record(epoch, "clinical", loss, mse, corr, lr)
        val = evaluate_loss(model, val_set, spec, partition, loss_cfg, cfg)
        metrics.record(epoch, "inner_val", *val, lr)
        if stopper.update(val[0], epoch):
            best_state = copy.deepcopy(model.state_dict())
        log.info("clinical epoch {}: loss {:.4f}, inner-val loss {:.4f}", epoch, loss, val[0])
        scheduler.step()
        if stopper.should_stop:
            log.info("early stop after epoch {} (best epoch {})", epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state)
    model.eval()
    return model


def _inputs(dataset: Dataset) -> torch.Tensor:
    return torch.stack([torch.as_tensor(s.x, dtype=torch.float64) for s in dataset])


def _stack(dataset: Dataset) -> Tuple[torch.Tensor, torch.Tensor]:
    return _inputs(dataset), torch.tensor([s.label for s in dataset], dtype=torch.long)


def predict_labels(model: GraphS4Model, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            out.append(model.classify(_inputs(dataset[start:start + batch_size])).argmax(dim=-1))
    return torch.cat(out).numpy()


def _check_labeled(labeled: Dataset) -> None:
    labels = {s.label for s in labeled}
    if None in labels:
        raise InvalidArgumentError("fine-tuning data must be labeled")
    if labels != {HEALTHY, PATIENT}:
        raise InvalidArgumentError(f"fine-tuning needs both classes, got labels {sorted(labels)}")


def finetune_cls(
    model: GraphS4Model,
    labeled: Dataset,
    cfg: TrainConfig,
    full_finetune: Optional[bool] = None,
    metrics: Optional[MetricsLog] = None,
) -> GraphS4Model:
    """Cross-entropy training of a copy of `model` with a fresh two-logit head.

    Only the last Graph-S4 layer and the head train unless `full_finetune`
    (default cfg.full_finetune). Early stops on inner-validation balanced accuracy.
    """
    _check_labeled(labeled)
    full_finetune = cfg.full_finetune if full_finetune is None else full_finetune
    model = copy.deepcopy(model)
    model.attach_classifier(seed=cfg.seed)
    if full_finetune:
        model.unfreeze()
    else:
        model.freeze_all_but_last()

    labels = [s.label for s in labeled]
    test_size = max(2, round(cfg.inner_val_fraction * len(labeled)))
    train_set, val_set = train_test_split(
        labeled, test_size=test_size, stratify=labels, random_state=cfg.seed, shuffle=True
    )
    x_val, y_val = _stack(val_set)
    log = logger.bind(stage="finetune")

    torch.manual_seed(cfg.seed)
    optimizer, scheduler = make_optimizer(model, cfg.finetune_lr, cfg)
    stopper = EarlyStopping(cfg.early_stop_patience, mode="max")
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.finetune_epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        total = 0.0
        for batch in _batches(train_set, cfg.batch_size, cfg.seed, epoch):
            x, y = _stack(batch)
            loss = F.cross_entropy(model.classify(x), y)
            _apply_grads(optimizer, loss)
            total += float(loss) * len(batch)
        scheduler.step()

        model.eval()
        with torch.no_grad():
            pred = model.classify(x_val).argmax(dim=-1).numpy()
        score = binary_metrics(y_val.numpy(), pred)["balanced_accuracy"]
        if metrics is not None:
            metrics.record(epoch, "finetune", total / len(train_set), float("nan"), float("nan"), lr)
        if stopper.update(score, epoch):
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch {}: ce {:.4f}, inner-val balanced accuracy {:.3f}", epoch, total / len(train_set), score)
        if stopper.should_stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    log.info("fine-tuned for {} epochs, best inner-val balanced accuracy {:.3f}", epoch, stopper.best)
    return model


def train_from_scratch(model_cfg: ModelConfig, labeled: Dataset, cfg: TrainConfig) -> GraphS4Model:
    """Supervised baseline: fresh Graph-S4 with every parameter trainable."""
    return finetune_cls(init_model(model_cfg, cfg.seed), labeled, cfg, full_finetune=True)
