from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt
from typing import Literal


class ModelConfig(BaseModel):
    num_layers: PositiveInt = 4
    state_dim: PositiveInt = 128
    channels: PositiveInt = 5
    diffusion_steps: NonNegativeInt = 2
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    num_nodes: PositiveInt
    emb_dim: PositiveInt = 10

    # One output vector c per channel unless shared
    share_c: bool = False
    # Use E instead of E^d in every diffusion term
    literal_no_power: bool = False
    dtype: Literal["float32", "float64"] = "float32"

    class Config:
        extra = "forbid"
