from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt, model_validator


class Split(str, Enum):
    POPULATION = "population"
    CLINICAL_SS_TRAIN = "clinical_ss_train"
    CLINICAL_SS_VAL = "clinical_ss_val"
    CLINICAL_CV = "clinical_cv"


HEALTHY = 0
PATIENT = 1


@dataclass
class Sample:
    """One subject: a node x time signal matrix and its metadata. label is None when unlabeled."""

    id: str
    x: np.ndarray
    label: Optional[int]
    site: str
    split: Split

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def timepoints(self) -> int:
        return self.x.shape[1]


Dataset = List[Sample]


class SplitCounts(BaseModel):
    population: NonNegativeInt = 400
    clinical_ss_train: NonNegativeInt = 100
    clinical_ss_val: NonNegativeInt = 200
    clinical_cv: NonNegativeInt = 100


class SynthConfig(BaseModel):
    num_nodes: PositiveInt = 32
    num_networks: PositiveInt = 4
    timepoints: PositiveInt = 256
    within_coupling: float = Field(default=0.5, ge=0.0)
    between_coupling: float = Field(default=0.25, ge=0.0)
    # Largest eigenvalue modulus of both transitions after scaling
    spectral_radius: float = Field(default=0.95, gt=0.0, lt=1.0)
    noise_sigma: float = Field(default=1.0, gt=0.0)
    anomaly_network: str = "A"
    anomaly_strength: float = Field(default=1.0, ge=0.0)
    # rewire: add an independent draw of between-block input; scale: multiply the existing one
    anomaly_mode: Literal["rewire", "scale"] = "rewire"
    counts: SplitCounts = SplitCounts()
    burn_in: NonNegativeInt = 100
    num_sites: PositiveInt = 2
    seed: NonNegativeInt = 0

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_networks(self):
        if self.within_coupling == 0 and self.between_coupling == 0:
            raise ValueError("within_coupling and between_coupling cannot both be zero")
        if self.num_networks > self.num_nodes:
            raise ValueError("num_networks cannot exceed num_nodes")
        if self.anomaly_network not in self.network_names:
            raise ValueError(
                f"anomaly_network {self.anomaly_network!r} is not one of {self.network_names}"
            )
        return self

    @property
    def network_names(self) -> List[str]:
        if self.num_networks <= 26:
            return [chr(ord("A") + i) for i in range(self.num_networks)]
        return [f"N{i}" for i in range(self.num_networks)]


class ManifestEntry(BaseModel):
    id: str
    path: str
    label: Optional[int] = None
    site: str = "site0"
    split: Split

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_label(self):
        if self.label not in (None, HEALTHY, PATIENT):
            raise ValueError(f"label for {self.id!r} must be 0, 1 or null, got {self.label}")
        return self


class DatasetManifest(BaseModel):
    num_nodes: PositiveInt
    timepoints: PositiveInt
    samples: List[ManifestEntry]

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_unique_ids(self):
        counts: Dict[str, int] = {}
        for entry in self.samples:
            counts[entry.id] = counts.get(entry.id, 0) + 1
        duplicates = sorted(i for i, n in counts.items() if n > 1)
        if duplicates:
            raise ValueError(f"duplicate sample ids: {', '.join(duplicates)}")
        return self
