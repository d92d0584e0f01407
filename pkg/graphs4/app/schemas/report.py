import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class ScreenRow(BaseModel):
    mse_healthy: float
    mse_patient: float
    auroc: float = Field(ge=0.0, le=1.0)
    threshold: Optional[float] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None


class ScreenReport(BaseModel):
    dataset_id: str
    unit: Literal["network", "task"] = "network"
    rows: Dict[str, ScreenRow]

    def best_network(self) -> str:
        """Row with the highest AUROC; first row wins ties"""
        return max(self.rows, key=lambda name: self.rows[name].auroc)

    def render_table(self) -> str:
        header = ("Network" if self.unit == "network" else "Task", "MSE healthy", "MSE patient", "AUROC", "Threshold")
        body = [
            (
                name,
                f"{row.mse_healthy:.4f}",
                f"{row.mse_patient:.4f}",
                f"{row.auroc:.3f}",
                "-" if row.threshold is None else f"{row.threshold:.4f}",
            )
            for name, row in self.rows.items()
        ]
        return render_rows(header, body, title=f"Screening on {self.dataset_id}")


class FoldMetrics(BaseModel):
    balanced_accuracy: float = Field(ge=0.0, le=1.0)
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    repeat: int = 0
    fold: int = 0
    train_ids: List[str] = []
    test_ids: List[str] = []


class CVResult(BaseModel):
    per_fold: List[FoldMetrics]
    mean: Dict[str, float]
    std: Dict[str, float]
    repeats: int
    folds: int

    @model_validator(mode="after")
    def check_fold_count(self):
        if len(self.per_fold) != self.repeats * self.folds:
            raise ValueError(
                f"expected {self.repeats * self.folds} fold results, got {len(self.per_fold)}"
            )
        return self

    @classmethod
    def from_folds(cls, per_fold: List[FoldMetrics], repeats: int, folds: int) -> "CVResult":
        mean, std = {}, {}
        for metric in ("balanced_accuracy", "sensitivity", "specificity"):
            values = [getattr(f, metric) for f in per_fold]
            mu = sum(values) / len(values)
            mean[metric] = mu
            std[metric] = math.sqrt(sum((v - mu) ** 2 for v in values) / len(values))
        return cls(per_fold=per_fold, mean=mean, std=std, repeats=repeats, folds=folds)

    def summary_row(self, label: str):
        return (label,) + tuple(
            f"{100 * self.mean[m]:.1f} ± {100 * self.std[m]:.1f}"
            for m in ("balanced_accuracy", "sensitivity", "specificity")
        )


class CVComparison(BaseModel):
    """Fine-tuned pretrained model vs the same architecture trained from scratch on identical folds"""

    task: str
    pretrained: CVResult
    scratch: CVResult

    @property
    def delta_balanced_accuracy(self) -> float:
        return self.pretrained.mean["balanced_accuracy"] - self.scratch.mean["balanced_accuracy"]

    def render_table(self) -> str:
        header = ("Model", "Balanced acc.", "Sensitivity", "Specificity")
        body = [
            self.scratch.summary_row("Graph-S4 (scratch)"),
            self.pretrained.summary_row(f"Graph-S4 ({self.task} pretrained)"),
        ]
        footer = f"delta balanced accuracy: {100 * self.delta_balanced_accuracy:+.1f} points"
        return render_rows(header, body, title="Cross-validation") + "\n" + footer


class GradCheckRow(BaseModel):
    name: str
    passed: bool
    max_rel_error: float
    skipped: int = 0


def render_rows(header, rows, title: Optional[str] = None) -> str:
    """Left-aligned text table with a rule under the header"""
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
