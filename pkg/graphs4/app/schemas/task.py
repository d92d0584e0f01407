from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, PositiveInt, model_validator

# Target network name that samples a network per sample and epoch.
ALL_NETWORKS = "*"


class TaskKind(str, Enum):
    NETWORK_MASK = "network_mask"
    FORECAST = "forecast"
    DENOISE = "denoise"
    RANDOM_MASK = "random_mask"


class TaskSpec(BaseModel):
    kind: TaskKind
    target_network: Optional[str] = None
    horizon: Optional[PositiveInt] = None
    noise_sigma: Optional[float] = Field(default=None, ge=0.0)
    mask_fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    num_eval_masks: PositiveInt = 5

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_kind_fields(self):
        required = {
            TaskKind.NETWORK_MASK: "target_network",
            TaskKind.FORECAST: "horizon",
            TaskKind.DENOISE: "noise_sigma",
            TaskKind.RANDOM_MASK: "mask_fraction",
        }[self.kind]
        if getattr(self, required) is None:
            raise ValueError(f"{required} is required for {self.kind.value} tasks")
        return self

    @property
    def name(self) -> str:
        """Checkpoint stem for the model trained on this task"""
        if self.kind == TaskKind.NETWORK_MASK:
            return "all-networks" if self.target_network == ALL_NETWORKS else self.target_network
        if self.kind == TaskKind.FORECAST:
            return f"forecast-{self.horizon}"
        if self.kind == TaskKind.DENOISE:
            return "denoise"
        return "random-masks"

    @property
    def is_network_task(self) -> bool:
        return self.kind == TaskKind.NETWORK_MASK and self.target_network != ALL_NETWORKS


class NetworkPartition(BaseModel):
    num_nodes: PositiveInt
    networks: Dict[str, List[int]]
    overlaps: Optional[List[List[float]]] = None

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_partition(self):
        if not self.networks:
            raise ValueError("partition needs at least one network")
        for name, nodes in self.networks.items():
            bad = [i for i in nodes if i < 0 or i >= self.num_nodes]
            if bad:
                raise ValueError(f"network {name!r} has node indices outside [0, {self.num_nodes}): {bad}")

        if self.overlaps is None:
            seen: Dict[int, str] = {}
            for name, nodes in self.networks.items():
                for i in nodes:
                    if i in seen:
                        raise ValueError(f"node {i} belongs to both {seen[i]!r} and {name!r}")
                    seen[i] = name
            missing = sorted(set(range(self.num_nodes)) - set(seen))
            if missing:
                raise ValueError(f"nodes not assigned to any network: {missing}")
        else:
            if len(self.overlaps) != self.num_nodes:
                raise ValueError(f"overlaps must have {self.num_nodes} rows")
            for i, row in enumerate(self.overlaps):
                if len(row) != len(self.networks):
                    raise ValueError(f"overlaps row {i} must have {len(self.networks)} entries")
                if any(v < 0.0 or v > 1.0 for v in row):
                    raise ValueError(f"overlaps row {i} has entries outside [0, 1]")
                if sum(row) > 1.0 + 1e-6:
                    raise ValueError(f"overlaps row {i} sums to more than 1")
        return self

    @property
    def names(self) -> List[str]:
        return list(self.networks)

    def network_index(self, name: str) -> int:
        return self.names.index(name)
