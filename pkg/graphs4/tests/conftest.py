import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.schemas.data import SplitCounts, SynthConfig  # noqa: E402
from app.schemas.model import ModelConfig  # noqa: E402
from app.schemas.training import TrainConfig  # noqa: E402
from app.services.data_service import generate_synth, synth_partition  # noqa: E402


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        num_layers=2,
        state_dim=8,
        channels=2,
        diffusion_steps=1,
        dropout=0.0,
        num_nodes=4,
        emb_dim=3,
        dtype="float64",
    )


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(
        num_nodes=8,
        num_networks=2,
        timepoints=32,
        counts=SplitCounts(population=12, clinical_ss_train=10, clinical_ss_val=12, clinical_cv=20),
        burn_in=20,
        seed=3,
    )


@pytest.fixture
def tiny_dataset(tiny_synth_config):
    return generate_synth(tiny_synth_config)


@pytest.fixture
def tiny_partition(tiny_synth_config):
    return synth_partition(tiny_synth_config)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        batch_size=8,
        lr=0.01,
        epochs_population=1,
        epochs_clinical_max=3,
        early_stop_patience=2,
        inner_val_fraction=0.2,
        finetune_epochs=3,
        seed=5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)
