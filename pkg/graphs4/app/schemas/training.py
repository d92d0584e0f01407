from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt, model_validator
from typing import Tuple


class LossConfig(BaseModel):
    lambda1: float = Field(default=1.0, ge=0.0)
    lambda2: float = Field(default=0.5, ge=0.0)
    pearson_eps: float = Field(default=1e-8, gt=0.0)

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_weights(self):
        if self.lambda1 == 0.0 and self.lambda2 == 0.0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")
        return self


class TrainConfig(BaseModel):
    batch_size: PositiveInt = 128
    lr: float = Field(default=0.01, gt=0.0)
    lr_decay: float = Field(default=0.95, gt=0.0, le=1.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    epochs_population: PositiveInt = 20
    epochs_clinical_max: PositiveInt = 100
    early_stop_patience: PositiveInt = 5
    inner_val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)

    # Supervised fine-tuning
    finetune_lr: float = Field(default=0.001, gt=0.0)
    finetune_epochs: PositiveInt = 50
    full_finetune: bool = False

    seed: NonNegativeInt = 0

    class Config:
        extra = "forbid"
