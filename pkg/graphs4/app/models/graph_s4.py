"""Graph-S4: a shared S4 kernel along time followed by diffusion mixing across nodes.

Each block computes
    h = S4(x) per node-channel sequence -> GELU -> sum_d E^d h W_d + bias -> dropout
and returns x + h. The state-space parameters (lambda, p = q, b, dt) are
shared by every node and channel of a layer; only the output vector c is
kept per channel unless `share_c` is set.
"""
import math
from typing import Iterator, Literal, Optional

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from ..core.errors import InvalidArgumentError, StateError
from ..schemas.model import ModelConfig
from .graph import NodeEmbedding, diffusion_conv
from .ssm import (
    DPLRParams,
    DiscreteSSM,
    causal_conv,
    discretize_bilinear,
    hippo_legs_init,
    kernel_fast,
    ssm_scan,
)

MIN_TIMEPOINTS = 8

Mode = Literal["conv", "scan"]

DTYPES = {
    "float32": (torch.float32, torch.complex64),
    "float64": (torch.float64, torch.complex128),
}


def gelu(x: torch.Tensor) -> torch.Tensor:
    """x * Phi(x) with the exact normal CDF."""
    return F.gelu(x, approximate="none")


def _as_pairs(z: torch.Tensor, dtype: torch.dtype) -> nn.Parameter:
    return nn.Parameter(torch.view_as_real(z.to(torch.complex128)).to(dtype).clone())


class S4Kernel(nn.Module):
    """DPLR state-space parameters for one layer, complex values stored as real pairs.

    Re(lambda) is kept negative through a log parameterisation and q is tied
    to p, so A = lambda - p p^* stays stable for any parameter values.

    The state matrix, input and step size are excluded from weight decay;
    only the readout c is decayed.
    """

    NO_DECAY = ("log_neg_re", "lambda_im", "p", "b", "log_dt")

    def __init__(self, state_dim: int, channels: int, share_c: bool, seed: int, dtype=torch.float32):
        super().__init__()
        init = hippo_legs_init(state_dim, seed, channels=1 if share_c else channels)
        self.log_neg_re = nn.Parameter(torch.log(-init.lambda_.real).to(dtype))
        self.lambda_im = nn.Parameter(init.lambda_.imag.to(dtype).clone())
        self.p = _as_pairs(init.p, dtype)
        self.b = _as_pairs(init.b, dtype)
        self.c = _as_pairs(init.c, dtype)
        self.log_dt = nn.Parameter(init.log_dt.to(dtype).clone())

    def no_decay_parameters(self) -> Iterator[nn.Parameter]:
        for name in self.NO_DECAY:
            yield getattr(self, name)

    def dplr(self) -> DPLRParams:
        lambda_ = torch.complex(-torch.exp(self.log_neg_re), self.lambda_im)
        p = torch.view_as_complex(self.p)
        return DPLRParams(
            lambda_=lambda_,
            p=p,
            q=p,
            b=torch.view_as_complex(self.b),
            c=torch.view_as_complex(self.c),
            log_dt=self.log_dt,
        )

    def kernel(self, length: int) -> torch.Tensor:
        """(C or 1) x length filter taps"""
        return kernel_fast(self.dplr(), length)

    def discrete(self) -> DiscreteSSM:
        return discretize_bilinear(self.dplr())


class GraphS4Layer(nn.Module):
    def __init__(self, config: ModelConfig, seed: int, generator: torch.Generator):
        super().__init__()
        real_dtype, _ = DTYPES[config.dtype]
        channels = config.channels
        self.literal_no_power = config.literal_no_power
        self.ssm = S4Kernel(config.state_dim, channels, config.share_c, seed, dtype=real_dtype)

        bound = 1.0 / math.sqrt(channels * (config.diffusion_steps + 1))
        mix = torch.empty(config.diffusion_steps + 1, channels, channels, dtype=real_dtype)
        self.mix = nn.Parameter(mix.uniform_(-bound, bound, generator=generator))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=real_dtype))
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, adj: torch.Tensor, mode: Mode = "conv") -> torch.Tensor:
        """x: (B, V, T, C) -> (B, V, T, C)"""
        u = x.permute(0, 1, 3, 2)
        if mode == "conv":
            y = self._convolve(u)
        elif mode == "scan":
            y = ssm_scan(self.ssm.discrete(), u)
        else:
            raise InvalidArgumentError(f"unknown mode {mode!r}")
        h = gelu(y.permute(0, 1, 3, 2))
        h = diffusion_conv(adj, h, self.mix, literal_no_power=self.literal_no_power) + self.bias
        return x + self.dropout(h)

    def _convolve(self, u: torch.Tensor) -> torch.Tensor:
        k = self.ssm.kernel(u.shape[-1]).to(u.dtype)
        return causal_conv(k, u)


class GraphS4Model(nn.Module):
    """Stacked Graph-S4 blocks between a 1 -> C input lift and a C -> 1 prediction head.

    The classification head (global average pool over time, then a linear
    map from V*C features to two logits) is attached on demand.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        real_dtype, _ = DTYPES[config.dtype]
        generator = torch.Generator().manual_seed(seed)

        self.input_proj = nn.Linear(1, config.channels, bias=False, dtype=real_dtype)
        self.output_proj = nn.Linear(config.channels, 1, dtype=real_dtype)
        self.emb = NodeEmbedding(config.num_nodes, config.emb_dim, generator=generator, dtype=real_dtype)
        self.layers = nn.ModuleList(
            GraphS4Layer(config, seed=seed * 1000 + i, generator=generator)
            for i in range(config.num_layers)
        )
        self.cls_head: Optional[nn.Linear] = None

        with torch.no_grad():
            _uniform_(self.input_proj.weight, 1.0, generator)
            _uniform_(self.output_proj.weight, 1.0 / math.sqrt(config.channels), generator)
            self.output_proj.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype][0]

    def attach_classifier(self, seed: Optional[int] = None) -> nn.Linear:
        generator = torch.Generator().manual_seed(self.seed if seed is None else seed)
        width = self.config.num_nodes * self.config.channels
        head = nn.Linear(width, 2, dtype=self.dtype)
        with torch.no_grad():
            _uniform_(head.weight, 1.0 / math.sqrt(width), generator)
            head.bias.zero_()
        self.cls_head = head
        return head

    def adjacency(self) -> torch.Tensor:
        return self.emb()

    def features(self, x: torch.Tensor, mode: Mode = "conv") -> torch.Tensor:
        """(B, V, T) -> last-layer features (B, V, T, C)"""
        self._check_input(x)
        adj = self.adjacency()
        h = self.input_proj(x.to(self.dtype).unsqueeze(-1))
        for layer in self.layers:
            h = layer(h, adj, mode)
        return h

    def forward(self, x: torch.Tensor, mode: Mode = "conv") -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        y = self.output_proj(self.features(x, mode)).squeeze(-1)
        return y.squeeze(0) if squeeze else y

    def classify(self, x: torch.Tensor, mode: Mode = "conv") -> torch.Tensor:
        if self.cls_head is None:
            raise StateError("classification head is not attached")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        pooled = self.features(x, mode).mean(dim=2)
        logits = self.cls_head(pooled.flatten(start_dim=1))
        return logits.squeeze(0) if squeeze else logits

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 3 or x.shape[1] != self.config.num_nodes:
            raise InvalidArgumentError(
                f"expected input (batch, {self.config.num_nodes}, T), got {tuple(x.shape)}"
            )
        if x.shape[-1] < MIN_TIMEPOINTS:
            raise InvalidArgumentError(f"need at least {MIN_TIMEPOINTS} timepoints, got {x.shape[-1]}")
        if not torch.isfinite(x).all():
            raise InvalidArgumentError("input contains non-finite values")

    def trunk_parameters(self) -> Iterator[nn.Parameter]:
        """Everything except the classification head"""
        for name, param in self.named_parameters():
            if not name.startswith("cls_head."):
                yield param

    def freeze_all_but_last(self) -> None:
        """Freeze the embedding, projections and every layer except the last one."""
        for param in self.parameters():
            param.requires_grad_(False)
        for param in self.layers[-1].parameters():
            param.requires_grad_(True)
        if self.cls_head is not None:
            for param in self.cls_head.parameters():
                param.requires_grad_(True)

    def unfreeze(self) -> None:
        for param in self.parameters():
            param.requires_grad_(True)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.trunk_parameters())

    def stability_report(self) -> list:
        """Max real part of the eigenvalues of each layer's continuous A"""
        with torch.no_grad():
            return [float(layer.ssm.dplr().eigenvalues().real.max()) for layer in self.layers]


def _uniform_(tensor: torch.Tensor, bound: float, generator: torch.Generator) -> None:
    tensor.uniform_(-bound, bound, generator=generator)


def init_model(cfg: ModelConfig, seed: int) -> GraphS4Model:
    model = GraphS4Model(cfg, seed=seed)
    logger.debug(
        "Initialised Graph-S4 with {} layers, {} parameters (seed {})",
        cfg.num_layers,
        model.parameter_count(),
        seed,
    )
    return model


def forward_seq(model: GraphS4Model, x: torch.Tensor, mode: Mode = "conv") -> torch.Tensor:
    """Sequence prediction (V, T) or (B, V, T) -> same shape."""
    return model(x, mode)


def forward_cls(model: GraphS4Model, x: torch.Tensor) -> torch.Tensor:
    """Two logits per input from time-pooled last-layer features."""
    return model.classify(x)
