"""Adaptive adjacency and diffusion mixing across nodes.

E = I + sparsemax(ReLU(E_a E_a^T)) is learned from a node embedding
dictionary; features are mixed with Z = sum_d E^d X W_d.
"""
from typing import Sequence, Union

import torch
from torch import nn
from torch.autograd import Function

from ..core.errors import InvalidArgumentError

# V x V matrix, I plus a row-stochastic sparse part.
AdjacencyMatrix = torch.Tensor
# (D + 1) x C_in x C_out, or a sequence of D + 1 matrices.
DiffusionWeights = Union[torch.Tensor, Sequence[torch.Tensor]]


def project_simplex(z: torch.Tensor) -> torch.Tensor:
    """Euclidean projection of each row (last axis) onto the probability simplex.

    Sort descending, take the largest k with 1 + k z_(k) > sum_{j<=k} z_(j),
    threshold at tau = (sum_{j<=k} z_(j) - 1) / k.
    """
    z_sorted, _ = torch.sort(z, dim=-1, descending=True)
    cumsum = z_sorted.cumsum(dim=-1)
    ks = torch.arange(1, z.shape[-1] + 1, dtype=z.dtype, device=z.device)
    support = (1 + ks * z_sorted) > cumsum
    k_z = support.sum(dim=-1, keepdim=True)
    tau = (cumsum.gather(-1, k_z - 1) - 1) / k_z.to(z.dtype)
    return torch.clamp(z - tau, min=0)


def sparsemax_grad(output: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    # (I - 11^T/|S|) on the support, zero elsewhere
    support = (output > 0).to(grad.dtype)
    mean = (grad * support).sum(dim=-1, keepdim=True) / support.sum(dim=-1, keepdim=True)
    return support * (grad - mean)


class Sparsemax(Function):
    @staticmethod
    def forward(ctx, z):
        output = project_simplex(z)
        ctx.save_for_backward(output)
        return output

    @staticmethod
    def backward(ctx, grad):
        output, = ctx.saved_tensors
        return sparsemax_grad(output, grad)


def sparsemax_row(z: torch.Tensor) -> torch.Tensor:
    """Differentiable sparsemax over the last axis."""
    return Sparsemax.apply(z)


def adaptive_adjacency(e_a: torch.Tensor) -> AdjacencyMatrix:
    """E = I_V + sparsemax(ReLU(E_a E_a^T)), row-wise. The self-similarity diagonal is kept."""
    if e_a.dim() != 2 or 0 in e_a.shape:
        raise InvalidArgumentError(f"node embedding must be a non-empty V x C matrix, got {tuple(e_a.shape)}")
    similarity = torch.relu(e_a @ e_a.transpose(0, 1))
    eye = torch.eye(e_a.shape[0], dtype=e_a.dtype, device=e_a.device)
    return eye + sparsemax_row(similarity)


def diffusion_conv(
    adj: AdjacencyMatrix,
    x: torch.Tensor,
    weights: DiffusionWeights,
    literal_no_power: bool = False,
) -> torch.Tensor:
    """Z = sum_{d=0..D} E^d X W_d for x of shape (..., V, T, C_in).

    With `literal_no_power` every d >= 1 term uses E X instead of E^d X.
    """
    if not isinstance(weights, torch.Tensor):
        weights = torch.stack(list(weights))
    if weights.dim() != 3 or weights.shape[0] < 1:
        raise InvalidArgumentError("diffusion weights must be D + 1 matrices C_in x C_out")
    num_nodes = adj.shape[0]
    if adj.shape != (num_nodes, num_nodes):
        raise InvalidArgumentError(f"adjacency must be square, got {tuple(adj.shape)}")
    if x.dim() < 3 or x.shape[-3] != num_nodes:
        raise InvalidArgumentError(f"input must be (..., {num_nodes}, T, C), got {tuple(x.shape)}")
    if x.shape[-1] != weights.shape[1]:
        raise InvalidArgumentError(
            f"input has {x.shape[-1]} channels, weights expect {weights.shape[1]}"
        )

    out = x @ weights[0]
    h = x
    for d in range(1, weights.shape[0]):
        source = x if literal_no_power else h
        h = torch.einsum("vw,...wtc->...vtc", adj, source)
        out = out + h @ weights[d]
    return out


class NodeEmbedding(nn.Module):
    """Learnable V x C_emb dictionary, initialised uniform in [0, 1)."""

    def __init__(self, num_nodes: int, emb_dim: int, generator: torch.Generator = None, dtype=torch.float32):
        super().__init__()
        if num_nodes < 1 or emb_dim < 1:
            raise InvalidArgumentError("node embedding needs V >= 1 and C_emb >= 1")
        self.e_a = nn.Parameter(torch.rand(num_nodes, emb_dim, generator=generator, dtype=dtype))

    def forward(self) -> AdjacencyMatrix:
        return adaptive_adjacency(self.e_a)
