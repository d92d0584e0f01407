"""Shared loaders for the commands: run config, datasets, partitions, checkpoints, output lock."""
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Optional

import torch
from loguru import logger
from pydantic import BaseModel, ValidationError

from ..core.config import settings
from ..core.errors import ConfigError, LockError, MissingArtifactError
from ..models.checkpoint import load_checkpoint
from ..models.graph_s4 import GraphS4Model
from ..schemas.data import Dataset
from ..schemas.run import RunConfig
from ..schemas.task import NetworkPartition, TaskSpec
from ..services.data_service import harmonize_lengths, load_dataset, load_partition, validation_message


def load_run_config(path: Optional[str] = None, output: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Validate the whole run config before any work; apply the CLI overrides.

    The run seed is copied into the training and synthetic-data sections so
    all randomness derives from it.
    """
    path = Path(path or settings.DEFAULT_CONFIG_PATH)
    if not path.is_file():
        raise MissingArtifactError(path, "run config")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", field_path=str(path)) from e
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object", field_path=str(path))
    if output is not None:
        raw["output_dir"] = output
    if seed is not None:
        raw["seed"] = seed

    try:
        config = RunConfig(**raw)
    except ValidationError as e:
        field, msg = validation_message(e)
        raise ConfigError(msg, field_path=field) from e

    update = {"train": config.train.model_copy(update={"seed": config.seed})}
    if config.synth is not None:
        update["synth"] = config.synth.model_copy(update={"seed": config.seed})
    config = config.model_copy(update=update)
    _check_config(config)
    return config


def _check_config(config: RunConfig) -> None:
    if not config.tasks:
        raise ConfigError("at least one task is required", field_path="tasks")
    names = [spec.name for spec in config.tasks]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigError(f"duplicate tasks {duplicates}", field_path="tasks")
    if config.synth is not None and config.synth.num_nodes != config.model.num_nodes:
        raise ConfigError(
            f"synthetic data has {config.synth.num_nodes} nodes, model expects {config.model.num_nodes}",
            field_path="model.num_nodes",
        )
    for field in ("manifest", "partition"):
        value = getattr(config, field)
        if value is not None and config.synth is None and not Path(value).exists():
            raise ConfigError(f"{value} does not exist", field_path=field)

    output = config.output_path
    output.mkdir(parents=True, exist_ok=True)
    if not os.access(output, os.W_OK):
        raise ConfigError(f"{output} is not writable", field_path="output_dir")


def configure_torch(config: RunConfig) -> None:
    torch.set_num_threads(settings.NUM_THREADS)
    torch.manual_seed(config.seed)
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True)


@contextmanager
def output_lock(config: RunConfig):
    """Exclusive lockfile in the output directory for the duration of a command"""
    lock_path = config.output_path / settings.LOCK_FILENAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{config.output_path} is in use by another run (remove {lock_path} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)


def get_dataset(config: RunConfig) -> Dataset:
    manifest, dataset = load_dataset(config.manifest_path)
    if manifest.num_nodes != config.model.num_nodes:
        raise ConfigError(
            f"dataset has {manifest.num_nodes} nodes, model expects {config.model.num_nodes}",
            field_path="model.num_nodes",
        )
    return harmonize_lengths(dataset, config.resize)


def get_partition(config: RunConfig) -> NetworkPartition:
    partition = load_partition(config.partition_path)
    if partition.num_nodes != config.model.num_nodes:
        raise ConfigError(
            f"partition covers {partition.num_nodes} nodes, model expects {config.model.num_nodes}",
            field_path="model.num_nodes",
        )
    for spec in config.tasks:
        if spec.is_network_task and spec.target_network not in partition.networks:
            raise ConfigError(f"network {spec.target_network!r} is not in the partition", field_path="tasks")
    return partition


def get_model(config: RunConfig, name: str) -> GraphS4Model:
    model = load_checkpoint(config.checkpoint_path(name))
    if model.config.num_nodes != config.model.num_nodes:
        raise ConfigError(f"checkpoint {name} was trained on {model.config.num_nodes} nodes", field_path="model")
    return model


def get_models(config: RunConfig, specs) -> Dict[str, GraphS4Model]:
    """Checkpoint per task name; every missing file is reported before anything loads."""
    specs = list(specs)
    missing = [str(config.checkpoint_path(s.name)) for s in specs if not config.checkpoint_path(s.name).is_file()]
    if missing:
        raise MissingArtifactError(", ".join(missing), "checkpoint")
    return {spec.name: get_model(config, spec.name) for spec in specs}


def find_task(config: RunConfig, name: str) -> TaskSpec:
    for spec in config.tasks:
        if spec.name == name:
            return spec
    raise ConfigError(f"no task named {name!r}; have {[s.name for s in config.tasks]}", field_path="tasks")


def write_report(path: Path, document: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote {}", path)
    return path
