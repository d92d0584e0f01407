"""Matrix files, dataset manifests, per-node preprocessing and the synthetic generator.

Synthetic subjects follow a stable first-order vector autoregression
x_t = Phi x_{t-1} + eta_t whose transition has a network block structure.
Patients share Phi up to one common scale, except for the inputs the anomaly
network receives from the other networks, which are rewired or strengthened.
"""
import json
import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import ValidationError

from ..core.errors import ConfigError, InvalidArgumentError, MissingArtifactError, ParseError
from ..schemas.data import (
    HEALTHY,
    PATIENT,
    Dataset,
    DatasetManifest,
    ManifestEntry,
    Sample,
    Split,
    SynthConfig,
)
from ..schemas.run import ResizeConfig
from ..schemas.task import NetworkPartition

MATRIX_MAGIC = b"GS4T"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIII")

STANDARDIZE_EPS = 1e-8

PathLike = Union[str, Path]


def validation_message(error: ValidationError) -> Tuple[str, str]:
    """(field path, message) of the first pydantic error"""
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]), first["msg"]


# Preprocessing


def standardize(x: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Zero mean, unit standard deviation per node row; constant rows become zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidArgumentError(f"standardize needs a V x T matrix with T >= 2, got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    sd_safe = np.where(sd > eps, sd, 1.0)
    return (x - mean) / sd_safe


def resample_linear(x: np.ndarray, t_new: int) -> np.ndarray:
    """Per-node linear interpolation onto t_new uniform points, endpoints to endpoints."""
    x = np.asarray(x, dtype=np.float64)
    if t_new < 2:
        raise InvalidArgumentError(f"target length must be at least 2, got {t_new}")
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidArgumentError(f"resample needs a V x T matrix with T >= 2, got {x.shape}")
    if t_new == x.shape[1]:
        return x.copy()
    rows = torch.from_numpy(x).unsqueeze(0)
    out = F.interpolate(rows, size=t_new, mode="linear", align_corners=True)
    return out.squeeze(0).numpy()


def harmonize_lengths(dataset: Dataset, resize: ResizeConfig) -> Dataset:
    """Resample timecourses so every sample shares one length, then re-standardize.

    `direction` picks the group that gets resized: clinical samples toward the
    population length, the population toward the clinical length, or
    whichever group has fewer samples. An explicit `target` resizes everyone.
    """
    lengths = {s.timepoints for s in dataset}
    if resize.target is None and len(lengths) <= 1:
        return dataset

    population = [s for s in dataset if s.split == Split.POPULATION]
    clinical = [s for s in dataset if s.split != Split.POPULATION]
    if resize.target is not None:
        moving, target = dataset, resize.target
    else:
        direction = resize.direction
        if direction == "smaller":
            direction = "population" if len(population) < len(clinical) else "clinical"
        moving, anchor = (clinical, population) if direction == "clinical" else (population, clinical)
        anchor_lengths = {s.timepoints for s in anchor}
        if len(anchor_lengths) != 1:
            raise InvalidArgumentError(
                f"cannot resize toward the {'population' if direction == 'clinical' else 'clinical'} "
                f"group: it has lengths {sorted(anchor_lengths)}"
            )
        target = anchor_lengths.pop()

    moving_ids = {s.id for s in moving}
    logger.info("Resizing {} timecourses to {} timepoints", len(moving_ids), target)
    return [
        Sample(s.id, standardize(resample_linear(s.x, target)), s.label, s.site, s.split)
        if s.id in moving_ids
        else s
        for s in dataset
    ]


# Synthetic generator


def synth_partition(cfg: SynthConfig) -> NetworkPartition:
    """Contiguous, near-equal node blocks named after cfg.network_names"""
    blocks = np.array_split(np.arange(cfg.num_nodes), cfg.num_networks)
    return NetworkPartition(
        num_nodes=cfg.num_nodes,
        networks={name: block.tolist() for name, block in zip(cfg.network_names, blocks)},
    )


def _scale_to_radius(raw: np.ndarray, radius: float, name: str) -> np.ndarray:
    current = float(np.abs(np.linalg.eigvals(raw)).max())
    if current <= 0.0:
        raise InvalidArgumentError(f"{name} coupling is nilpotent; no spectral radius to scale")
    return raw * (radius / current)


def build_coupling(cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Healthy and patient transition matrices (Phi, Phi').

    Entries are within_coupling or between_coupling times U(0.5, 1.5) with a
    random sign. In patients the between-block inputs of the anomaly network
    either gain `anomaly_strength` times an independent draw of the same law
    ("rewire") or are multiplied by 1 + anomaly_strength ("scale"). Both
    matrices are then scaled to cfg.spectral_radius, so rows outside the
    anomaly network differ between Phi and Phi' by one common factor.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    block_of = np.empty(cfg.num_nodes, dtype=np.int64)
    for b, nodes in enumerate(np.array_split(np.arange(cfg.num_nodes), cfg.num_networks)):
        block_of[nodes] = b
    same_block = block_of[:, None] == block_of[None, :]
    shape = (cfg.num_nodes, cfg.num_nodes)

    strength = np.where(same_block, cfg.within_coupling, cfg.between_coupling)
    raw = strength * rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    # Drawn unconditionally: Phi is independent of the anomaly settings
    rewiring = cfg.between_coupling * rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    anomalous = block_of == cfg.network_names.index(cfg.anomaly_network)
    inputs = anomalous[:, None] & ~same_block
    raw_patient = raw.copy()
    if cfg.anomaly_mode == "rewire":
        raw_patient[inputs] += cfg.anomaly_strength * rewiring[inputs]
    else:
        raw_patient[inputs] *= 1.0 + cfg.anomaly_strength

    phi = _scale_to_radius(raw, cfg.spectral_radius, "healthy")
    phi_patient = _scale_to_radius(raw_patient, cfg.spectral_radius, "patient")
    return phi, phi_patient


def simulate_var(phi: np.ndarray, timepoints: int, noise_sigma: float, burn_in: int, rng) -> np.ndarray:
    """V x T trajectory of the VAR(1) process started from zero, burn-in discarded."""
    num_nodes = phi.shape[0]
    x = np.zeros(num_nodes)
    out = np.empty((num_nodes, timepoints))
    for t in range(burn_in + timepoints):
        x = phi @ x + noise_sigma * rng.standard_normal(num_nodes)
        if t >= burn_in:
            out[:, t - burn_in] = x
    return out


def generate_synth(cfg: SynthConfig) -> Dataset:
    """Population (unlabeled), healthy clinical training, and balanced validation and CV splits."""
    phi, phi_patient = build_coupling(cfg)
    plan: List[Tuple[Split, Optional[int]]] = []
    plan += [(Split.POPULATION, None)] * cfg.counts.population
    plan += [(Split.CLINICAL_SS_TRAIN, HEALTHY)] * cfg.counts.clinical_ss_train
    for split in (Split.CLINICAL_SS_VAL, Split.CLINICAL_CV):
        count = getattr(cfg.counts, split.value)
        plan += [(split, HEALTHY if i % 2 == 0 else PATIENT) for i in range(count)]

    dataset: Dataset = []
    per_split = {split: 0 for split in Split}
    for index, (split, label) in enumerate(plan):
        rng = np.random.default_rng(cfg.seed ^ index)
        transition = phi_patient if label == PATIENT else phi
        x = simulate_var(transition, cfg.timepoints, cfg.noise_sigma, cfg.burn_in, rng)
        sample_id = f"{split.value}-{per_split[split]:04d}"
        per_split[split] += 1
        dataset.append(Sample(sample_id, standardize(x), label, f"site{index % cfg.num_sites}", split))

    logger.info(
        "Generated {} synthetic subjects ({} nodes, {} timepoints, anomaly in {}: {} {})",
        len(dataset),
        cfg.num_nodes,
        cfg.timepoints,
        cfg.anomaly_network,
        cfg.anomaly_mode,
        cfg.anomaly_strength,
    )
    return dataset


def steady_state_covariance(
    phi: np.ndarray, noise_sigma: float, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    """Solve P = Phi P Phi^T + sigma^2 I by fixed-point iteration."""
    q = noise_sigma ** 2 * np.eye(phi.shape[0])
    p = q.copy()
    for _ in range(max_iter):
        nxt = phi @ p @ phi.T + q
        if np.max(np.abs(nxt - p)) < tol:
            return nxt
        p = nxt
    raise InvalidArgumentError("steady-state covariance did not converge; is the transition stable?")


# Matrix files


def save_matrix(path: PathLike, x: np.ndarray, fmt: Optional[str] = None) -> Path:
    """Write a V x T matrix as GS4T binary or as headerless CSV (chosen by suffix when fmt is None)."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "binary")
    x = np.asarray(x)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a V x T matrix, got shape {x.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        np.savetxt(path, x.astype(np.float64), fmt="%.17g", delimiter=",")
    elif fmt == "binary":
        num_nodes, timepoints = x.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, num_nodes, timepoints))
            fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    else:
        raise InvalidArgumentError(f"unknown matrix format {fmt!r}")
    return path


def _load_binary(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header", offset=len(data))
    magic, version, num_nodes, timepoints = _HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", offset=0)
    if version != MATRIX_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    expected = _HEADER.size + 4 * num_nodes * timepoints
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(data)}", offset=min(len(data), expected))
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return values.reshape(num_nodes, timepoints).copy()


def _load_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = []
            for col_no, cell in enumerate(line.split(","), start=1):
                try:
                    row.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: not a number: {cell.strip()!r}", line=line_no, column=col_no)
            if rows and len(row) != len(rows[0]):
                raise ParseError(
                    f"{path}: expected {len(rows[0])} values, found {len(row)}", line=line_no, column=len(row)
                )
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: empty matrix", line=1)
    return np.array(rows, dtype=np.float64)


def load_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, "matrix file")
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    return _load_binary(path)


# Datasets and partitions


def load_dataset(manifest_path: PathLike) -> Tuple[DatasetManifest, Dataset]:
    """Read a manifest and every matrix it names; relative paths resolve against the manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingArtifactError(manifest_path, "dataset manifest")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        field, msg = validation_message(e)
        raise ConfigError(msg, field_path=f"{manifest_path.name}:{field}") from e

    dataset: Dataset = []
    for entry in manifest.samples:
        matrix_path = Path(entry.path)
        if not matrix_path.is_absolute():
            matrix_path = manifest_path.parent / matrix_path
        x = load_matrix(matrix_path)
        if x.shape[0] != manifest.num_nodes:
            raise InvalidArgumentError(
                f"{entry.id}: {x.shape[0]} nodes, manifest declares {manifest.num_nodes}"
            )
        if x.shape[1] > manifest.timepoints:
            raise InvalidArgumentError(
                f"{entry.id}: {x.shape[1]} timepoints, manifest declares at most {manifest.timepoints}"
            )
        if not np.isfinite(x).all():
            raise InvalidArgumentError(f"{entry.id}: matrix contains non-finite values")
        dataset.append(Sample(entry.id, x, entry.label, entry.site, entry.split))
    longest = max((s.timepoints for s in dataset), default=manifest.timepoints)
    if longest != manifest.timepoints:
        raise InvalidArgumentError(
            f"{manifest_path}: longest sample has {longest} timepoints, manifest declares {manifest.timepoints}"
        )
    logger.info("Loaded {} samples from {}", len(dataset), manifest_path)
    return manifest, dataset


def save_dataset(dataset: Dataset, directory: PathLike, fmt: str = "binary") -> Path:
    """Write one matrix per sample under `samples/` and a manifest.json next to it."""
    directory = Path(directory)
    if not dataset:
        raise InvalidArgumentError("cannot save an empty dataset")
    suffix = ".csv" if fmt == "csv" else ".gs4t"
    entries = []
    for sample in dataset:
        rel = Path("samples") / f"{sample.id}{suffix}"
        save_matrix(directory / rel, sample.x, fmt=fmt)
        entries.append(
            ManifestEntry(id=sample.id, path=rel.as_posix(), label=sample.label, site=sample.site, split=sample.split)
        )
    lengths = {s.timepoints for s in dataset}
    manifest = DatasetManifest(num_nodes=dataset[0].num_nodes, timepoints=max(lengths), samples=entries)
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest_path


def load_partition(path: PathLike) -> NetworkPartition:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, "network partition")
    try:
        return NetworkPartition.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        field, msg = validation_message(e)
        raise ConfigError(msg, field_path=f"{path.name}:{field}") from e


def save_partition(partition: NetworkPartition, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(partition.model_dump(exclude_none=True), indent=2), encoding="utf-8")
    return path


def select(dataset: Dataset, *splits: Split, label: Optional[int] = None) -> Dataset:
    """Samples in any of `splits`, optionally restricted to one label"""
    return [s for s in dataset if s.split in splits and (label is None or s.label == label)]
