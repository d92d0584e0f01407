"""Prediction losses: MSE plus a per-node Pearson correlation reward, restricted to masked rows."""
import torch

from ..core.errors import InvalidArgumentError
from ..schemas.training import LossConfig


def pearson(y: torch.Tensor, y_hat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Correlation over the last axis, one value per leading index.

    Each sum of squares is clamped to at least eps before the square root,
    so a constant row gives a correlation of (about) zero and finite gradients.
    """
    dy = y - y.mean(dim=-1, keepdim=True)
    dy_hat = y_hat - y_hat.mean(dim=-1, keepdim=True)
    num = (dy * dy_hat).sum(dim=-1)
    den = torch.sqrt((dy * dy).sum(dim=-1).clamp_min(eps)) * torch.sqrt((dy_hat * dy_hat).sum(dim=-1).clamp_min(eps))
    return num / den


def loss_mse_pearson(y: torch.Tensor, y_hat: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """lambda1 * MSE - lambda2 * mean node correlation, for V' x T (or batched) rows."""
    if y.shape != y_hat.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.dim() < 2 or y.shape[-1] < 2:
        raise InvalidArgumentError("loss needs at least 2 timepoints per node")
    mse = ((y - y_hat) ** 2).mean()
    corr = pearson(y, y_hat, cfg.pearson_eps).mean()
    return cfg.lambda1 * mse - cfg.lambda2 * corr


def masked_mse(y: torch.Tensor, y_hat: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the positions where loss_mask is set."""
    mask = loss_mask.to(y_hat.dtype)
    count = mask.sum()
    if count == 0:
        raise InvalidArgumentError("loss mask is empty")
    return (((y.to(y_hat.dtype) - y_hat) ** 2) * mask).sum() / count


def masked_loss(y: torch.Tensor, y_hat: torch.Tensor, loss_mask: torch.Tensor, cfg: LossConfig):
    """Training loss on masked positions of a (B, V, T) batch.

    MSE is averaged over masked entries. The correlation term is taken over
    the time steps each node has masked, averaged over nodes that have at
    least two. Returns (loss, mse, mean correlation).
    """
    y = y.to(y_hat.dtype)
    mask = loss_mask.to(y_hat.dtype)
    mse = masked_mse(y, y_hat, loss_mask)

    steps = mask.sum(dim=-1)
    rows = steps >= 2
    if rows.any():
        count = steps.clamp_min(1).unsqueeze(-1)
        mean_y = (y * mask).sum(dim=-1, keepdim=True) / count
        mean_hat = (y_hat * mask).sum(dim=-1, keepdim=True) / count
        dy = (y - mean_y) * mask
        dy_hat = (y_hat - mean_hat) * mask
        num = (dy * dy_hat).sum(dim=-1)
        den = torch.sqrt((dy * dy).sum(dim=-1).clamp_min(cfg.pearson_eps)) * torch.sqrt(
            (dy_hat * dy_hat).sum(dim=-1).clamp_min(cfg.pearson_eps)
        )
        corr = (num / den)[rows].mean()
    else:
        corr = torch.zeros((), dtype=y_hat.dtype)
    return cfg.lambda1 * mse - cfg.lambda2 * corr, mse, corr
