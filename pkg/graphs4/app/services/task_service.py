"""Self-supervised task construction: which entries a model sees and which it must predict.

Hidden entries are encoded as exact zeros in the input (samples are
standardized per node, so zero carries no information).
"""
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from ..core.errors import InvalidArgumentError
from ..models.losses import masked_mse
from ..schemas.data import Sample
from ..schemas.task import ALL_NETWORKS, NetworkPartition, TaskKind, TaskSpec

OVERLAP_THRESHOLD = 0.5


@dataclass(frozen=True)
class TaskInstance:
    input: torch.Tensor
    target: torch.Tensor
    loss_mask: torch.Tensor


def sample_seed(base_seed: int, sample_id: str, epoch: int = 0) -> int:
    """Stable per-sample, per-epoch seed derived from the run seed"""
    return zlib.crc32(f"{base_seed}:{epoch}:{sample_id}".encode("utf-8"))


def make_network_mask(p: NetworkPartition, network: str) -> torch.Tensor:
    """Boolean length-V vector of the nodes belonging to `network`."""
    if network not in p.networks:
        raise InvalidArgumentError(f"unknown network {network!r}; partition has {p.names}")
    if p.overlaps is not None:
        column = p.network_index(network)
        overlaps = torch.tensor(p.overlaps, dtype=torch.float64)
        return overlaps[:, column] >= OVERLAP_THRESHOLD
    mask = torch.zeros(p.num_nodes, dtype=torch.bool)
    mask[p.networks[network]] = True
    return mask


def _resolve_network(spec: TaskSpec, p: NetworkPartition, generator: torch.Generator) -> str:
    if spec.target_network != ALL_NETWORKS:
        return spec.target_network
    pick = int(torch.randint(len(p.names), (1,), generator=generator))
    return p.names[pick]


def build_instance(x: Sample, spec: TaskSpec, p: Optional[NetworkPartition], seed: int) -> TaskInstance:
    target = torch.as_tensor(x.x, dtype=torch.float64)
    num_nodes, timepoints = target.shape
    generator = torch.Generator().manual_seed(seed)
    loss_mask = torch.zeros(num_nodes, timepoints, dtype=torch.bool)

    if spec.kind == TaskKind.NETWORK_MASK:
        if p is None:
            raise InvalidArgumentError("network-mask tasks need a network partition")
        if p.num_nodes != num_nodes:
            raise InvalidArgumentError(f"{x.id}: {num_nodes} nodes, partition has {p.num_nodes}")
        rows = make_network_mask(p, _resolve_network(spec, p, generator))
        loss_mask[rows] = True
        inputs = target.masked_fill(loss_mask, 0.0)
    elif spec.kind == TaskKind.FORECAST:
        if spec.horizon >= timepoints:
            raise InvalidArgumentError(f"forecast horizon {spec.horizon} must be below T = {timepoints}")
        loss_mask[:, timepoints - spec.horizon:] = True
        inputs = target.masked_fill(loss_mask, 0.0)
    elif spec.kind == TaskKind.DENOISE:
        noise = torch.randn(num_nodes, timepoints, generator=generator, dtype=torch.float64)
        inputs = target + spec.noise_sigma * noise
        loss_mask[:] = True
    else:
        count = max(1, min(num_nodes, round(spec.mask_fraction * num_nodes)))
        rows = torch.randperm(num_nodes, generator=generator)[:count]
        loss_mask[rows] = True
        inputs = target.masked_fill(loss_mask, 0.0)

    if not loss_mask.any():
        raise InvalidArgumentError(f"task {spec.name} hides nothing in sample {x.id}")
    return TaskInstance(input=inputs, target=target, loss_mask=loss_mask)


def build_batch(
    samples: Sequence[Sample],
    spec: TaskSpec,
    p: Optional[NetworkPartition],
    seed: int,
    epoch: int = 0,
) -> TaskInstance:
    """Stacked (B, V, T) instance; every sample gets its own derived seed."""
    instances = [build_instance(s, spec, p, sample_seed(seed, s.id, epoch)) for s in samples]
    return TaskInstance(
        input=torch.stack([i.input for i in instances]),
        target=torch.stack([i.target for i in instances]),
        loss_mask=torch.stack([i.loss_mask for i in instances]),
    )


def predict(model, inputs: torch.Tensor) -> torch.Tensor:
    """Eval-mode forward without gradient tracking"""
    model.eval()
    with torch.no_grad():
        return model(inputs)


def instance_mse(model, instance: TaskInstance) -> float:
    y_hat = predict(model, instance.input)
    return float(masked_mse(instance.target, y_hat, instance.loss_mask))


def eval_random_mask_score(model, x: Sample, spec: TaskSpec, seed: int) -> float:
    """Mean masked MSE over spec.num_eval_masks random node masks (mask k uses seed + k)."""
    if spec.kind != TaskKind.RANDOM_MASK:
        raise InvalidArgumentError(f"expected a random_mask task, got {spec.kind.value}")
    scores = [instance_mse(model, build_instance(x, spec, None, seed + k)) for k in range(spec.num_eval_masks)]
    return sum(scores) / len(scores)
