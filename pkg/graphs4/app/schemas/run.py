from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt

from .data import SynthConfig
from .model import ModelConfig
from .task import TaskSpec
from .training import LossConfig, TrainConfig


class ResizeConfig(BaseModel):
    # None keeps every timecourse at its native length when lengths already agree
    target: Optional[PositiveInt] = None
    direction: Literal["clinical", "population", "smaller"] = "smaller"

    class Config:
        extra = "forbid"


class CVConfig(BaseModel):
    folds: int = Field(default=5, ge=2)
    repeats: PositiveInt = 10

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    model: ModelConfig
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    tasks: List[TaskSpec]
    synth: Optional[SynthConfig] = None
    manifest: Optional[str] = None
    partition: Optional[str] = None
    output_dir: str = "./runs/default"
    seed: NonNegativeInt = 0
    resize: ResizeConfig = ResizeConfig()
    cv: CVConfig = CVConfig()
    # Network whose pretrained model is fine-tuned; the best screening network when unset
    finetune_task: Optional[str] = None
    dump_adjacency: bool = False
    dataset_id: str = "synthetic"

    class Config:
        extra = "forbid"

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def data_dir(self) -> Path:
        return self.output_path / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_path / "checkpoints"

    @property
    def metrics_dir(self) -> Path:
        return self.output_path / "metrics"

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.data_dir / "manifest.json"

    @property
    def partition_path(self) -> Path:
        return Path(self.partition) if self.partition else self.data_dir / "partition.json"

    def checkpoint_path(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.gs4m"
