"""Finite-difference checks of every differentiable piece, in double precision.

Each check projects the output onto a fixed random direction, differentiates
that scalar with autograd and with central differences (h = 1e-5), and
reports the relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||).
Inputs that sit within a small margin of a ReLU or sparsemax support change
are redrawn; the number of redraws is reported as `skipped`.
"""
from typing import Callable, Dict, List, Sequence

import torch
from loguru import logger
from torch.func import functional_call

from ..models.graph import adaptive_adjacency, diffusion_conv, project_simplex, sparsemax_row
from ..models.graph_s4 import init_model
from ..models.losses import loss_mse_pearson
from ..models.ssm import DPLRParams, causal_conv, discretize_bilinear, hippo_legs_init, kernel_fast, ssm_scan
from ..schemas.model import ModelConfig
from ..schemas.report import GradCheckRow
from ..schemas.training import LossConfig
from .training_service import backward

STEP = 1e-5
TOLERANCE = 1e-3
KINK_MARGIN = 1e-3
MAX_REDRAWS = 20

DTYPE = torch.float64


def central_difference_error(fn: Callable, inputs: Sequence[torch.Tensor], seed: int = 0, h: float = STEP) -> float:
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    direction = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)
    analytic = backward((out * direction).sum(), inputs)

    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(inputs, analytic):
            numeric = torch.zeros_like(tensor)
            flat, flat_numeric = tensor.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = float((fn(*inputs) * direction).sum())
                flat[i] = original - h
                minus = float((fn(*inputs) * direction).sum())
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2 * h)
            scale = max(float(grad.norm()), float(numeric.norm()))
            if scale > 0:
                worst = max(worst, float((grad - numeric).norm()) / scale)
    return worst


def sparsemax_margin(z: torch.Tensor) -> float:
    """Distance of the closest entry to the sparsemax threshold, over all rows."""
    p = project_simplex(z)
    support = p > 0
    tau = ((z - p) * support).sum(-1, keepdim=True) / support.sum(-1, keepdim=True)
    return float((z - tau).abs().min())


def adjacency_margin(e_a: torch.Tensor) -> float:
    similarity = e_a @ e_a.T
    return min(float(similarity.abs().min()), sparsemax_margin(torch.relu(similarity)))


def _draw(make: Callable[[int], List[torch.Tensor]], margin: Callable[[List[torch.Tensor]], float], seed: int):
    for redraw in range(MAX_REDRAWS):
        inputs = make(seed + redraw)
        if margin(inputs) > KINK_MARGIN:
            return inputs, redraw
    raise RuntimeError("could not draw inputs away from a kink")


def _rand(generator: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


def _dplr_tensors(n: int, seed: int) -> List[torch.Tensor]:
    init = hippo_legs_init(n, seed)
    return [
        torch.log(-init.lambda_.real),
        init.lambda_.imag.clone(),
        torch.view_as_real(init.p).clone(),
        torch.view_as_real(init.b).clone(),
        torch.view_as_real(init.c).clone(),
        init.log_dt.clone(),
    ]


def _dplr(log_neg_re, lambda_im, p, b, c, log_dt) -> DPLRParams:
    p = torch.view_as_complex(p)
    return DPLRParams(
        lambda_=torch.complex(-torch.exp(log_neg_re), lambda_im),
        p=p,
        q=p,
        b=torch.view_as_complex(b),
        c=torch.view_as_complex(c),
        log_dt=log_dt,
    )


def small_model_config() -> ModelConfig:
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


def _check(name: str, fn: Callable, inputs, skipped: int = 0, seed: int = 0) -> GradCheckRow:
    err = central_difference_error(fn, inputs, seed=seed)
    row = GradCheckRow(name=name, passed=err < TOLERANCE, max_rel_error=err, skipped=skipped)
    logger.debug("gradcheck {}: rel. error {:.2e}{}", name, err, "" if row.passed else " FAILED")
    return row


def run_gradcheck(seed: int = 0) -> List[GradCheckRow]:
    g = torch.Generator().manual_seed(seed)
    rows = []

    rows.append(_check("kernel_fast", lambda *t: kernel_fast(_dplr(*t), 32), _dplr_tensors(8, seed)))
    u = _rand(g, 24)
    rows.append(
        _check(
            "discretize_bilinear+ssm_scan",
            lambda *t: ssm_scan(discretize_bilinear(_dplr(*t[:-1])), t[-1]),
            _dplr_tensors(8, seed) + [u],
        )
    )
    rows.append(_check("causal_conv", causal_conv, [_rand(g, 3, 16), _rand(g, 3, 16)]))

    z, skipped = _draw(lambda s: [torch.randn(5, 7, generator=torch.Generator().manual_seed(s), dtype=DTYPE)],
                       lambda t: sparsemax_margin(t[0]), seed)
    rows.append(_check("sparsemax_row", sparsemax_row, z, skipped))

    e_a, skipped = _draw(lambda s: [torch.rand(6, 3, generator=torch.Generator().manual_seed(s), dtype=DTYPE)],
                         lambda t: adjacency_margin(t[0]), seed)
    rows.append(_check("adaptive_adjacency", adaptive_adjacency, e_a, skipped))

    adj = adaptive_adjacency(e_a[0]).detach()
    rows.append(_check("diffusion_conv", diffusion_conv, [adj, _rand(g, 6, 5, 2), _rand(g, 3, 2, 3)]))

    y = _rand(g, 3, 16)
    rows.append(_check("loss_mse_pearson", lambda y_hat: loss_mse_pearson(y, y_hat, LossConfig()), [_rand(g, 3, 16)]))

    rows.append(_check_model(seed))
    return rows


def _check_model(seed: int) -> GradCheckRow:
    cfg = small_model_config()
    for redraw in range(MAX_REDRAWS):
        model = init_model(cfg, seed + redraw)
        if adjacency_margin(model.emb.e_a.detach()) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a model away from a kink")
    model.eval()
    x = torch.randn(cfg.num_nodes, 32, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    names = [name for name, _ in model.named_parameters()]
    params: Dict[str, torch.Tensor] = {name: p.detach() for name, p in model.named_parameters()}

    def forward(*tensors):
        return functional_call(model, dict(zip(names, tensors)), (x,))

    return _check("graph_s4_forward", forward, [params[n] for n in names], skipped=redraw)


def all_passed(rows: Sequence[GradCheckRow]) -> bool:
    return all(row.passed for row in rows)
