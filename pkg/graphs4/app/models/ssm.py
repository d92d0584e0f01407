"""State-space machinery behind each Graph-S4 layer.

A continuous system x' = Ax + Bu, y = Cx is parameterised with a
diagonal-plus-low-rank transition A = diag(lambda) - p q^*, discretised with
the bilinear transform and unrolled into a convolution filter. The filter is
available two ways: `kernel_naive` iterates the discrete recurrence (the
reference), `kernel_fast` evaluates the truncated generating function at the
roots of unity with Cauchy sums and a rank-1 Woodbury correction, then
inverts with an FFT.

Everything here is a pure function of tensors and works in either precision;
the reference checks run in complex128.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch

from ..core.errors import InvalidArgumentError, NumericSingularityError

# Convolution filter taps, time-major with tap 0 first; leading dims are channels.
Kernel = torch.Tensor

DT_MIN = 1e-3
DT_MAX = 1e-1


@dataclass(frozen=True)
class DPLRParams:
    lambda_: torch.Tensor
    p: torch.Tensor
    q: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    log_dt: torch.Tensor
    # Unitary change of basis from the eigenbasis back to the original coordinates.
    basis: Optional[torch.Tensor] = None

    def __post_init__(self):
        n = self.lambda_.shape[-1] if self.lambda_.dim() else 0
        if self.lambda_.dim() != 1 or n == 0:
            raise InvalidArgumentError("lambda must be a non-empty vector")
        for name in ("p", "q", "b"):
            if getattr(self, name).shape != (n,):
                raise InvalidArgumentError(f"{name} must have length {n}")
        if self.c.shape[-1] != n:
            raise InvalidArgumentError(f"c must have trailing length {n}")

    @property
    def n(self) -> int:
        return self.lambda_.shape[0]

    @property
    def dt(self) -> torch.Tensor:
        return torch.exp(self.log_dt)

    def dense_a(self) -> torch.Tensor:
        """A = diag(lambda) - p q^* in the eigenbasis."""
        return torch.diag(self.lambda_) - torch.outer(self.p, self.q.conj())

    def reconstruct(self) -> torch.Tensor:
        """A in the original coordinates (identical to `dense_a` without a basis)."""
        a = self.dense_a()
        if self.basis is None:
            return a
        return self.basis @ a @ self.basis.conj().T

    def eigenvalues(self) -> torch.Tensor:
        return torch.linalg.eigvals(self.dense_a())

    def is_stable(self) -> bool:
        return bool((self.eigenvalues().real < 0).all())


@dataclass(frozen=True)
class DiscreteSSM:
    a_bar: torch.Tensor
    b_bar: torch.Tensor
    c_bar: torch.Tensor

    def __post_init__(self):
        n = self.b_bar.shape[-1]
        if self.a_bar.shape != (n, n):
            raise InvalidArgumentError(f"a_bar must be {n}x{n}, got {tuple(self.a_bar.shape)}")
        if self.c_bar.shape[-1] != n:
            raise InvalidArgumentError(f"c_bar must have trailing length {n}")

    @property
    def n(self) -> int:
        return self.b_bar.shape[-1]

    def spectral_radius(self) -> float:
        return float(torch.linalg.eigvals(self.a_bar).abs().max())


def hippo_legs_matrix(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Dense HiPPO-LegS transition: -sqrt(2n+1)sqrt(2k+1) below the diagonal, -(n+1) on it."""
    if n < 1:
        raise InvalidArgumentError(f"state size must be positive, got {n}")
    r = torch.sqrt(2 * torch.arange(n, dtype=dtype) + 1)
    a = torch.tril(torch.outer(r, r)) - torch.diag(torch.arange(n, dtype=dtype))
    return -a


def hippo_legs_init(
    n: int,
    seed: int,
    channels: Optional[int] = None,
    dtype: torch.dtype = torch.complex128,
) -> DPLRParams:
    """HiPPO-LegS in diagonal-plus-low-rank form.

    A = A_normal - p p^T with p_n = sqrt(n + 1/2); A_normal is -1/2 I plus a
    skew-symmetric part, so it diagonalises unitarily with eigenvalues
    -1/2 + i*mu. `channels` draws that many independent output vectors c.
    """
    if n < 1:
        raise InvalidArgumentError(f"state size must be positive, got {n}")
    real_dtype = torch.float64
    out_real = torch.float32 if dtype == torch.complex64 else torch.float64
    generator = torch.Generator().manual_seed(seed)

    a = hippo_legs_matrix(n, real_dtype)
    p = torch.sqrt(torch.arange(n, dtype=real_dtype) + 0.5)
    normal = a + torch.outer(p, p)
    diag = torch.diagonal(normal)
    skew = normal - torch.diag(diag)

    mu, v = torch.linalg.eigh(skew.to(torch.complex128) * -1j)
    lambda_ = diag.mean() + 1j * mu

    vh = v.conj().T
    p_eig = vh @ p.to(torch.complex128)
    b_eig = vh @ torch.ones(n, dtype=torch.complex128)

    c_shape = (n,) if channels is None else (channels, n)
    c = torch.randn(c_shape, dtype=torch.complex128, generator=generator) / math.sqrt(n)

    log_dt = torch.rand((), dtype=real_dtype, generator=generator)
    log_dt = log_dt * (math.log(DT_MAX) - math.log(DT_MIN)) + math.log(DT_MIN)

    return DPLRParams(
        lambda_=lambda_.to(dtype),
        p=p_eig.to(dtype),
        q=p_eig.to(dtype),
        b=b_eig.to(dtype),
        c=c.to(dtype),
        log_dt=log_dt.to(out_real),
        basis=v.to(dtype),
    )


def discretize_bilinear(params: DPLRParams) -> DiscreteSSM:
    """Bilinear (Tustin) discretisation of the continuous DPLR system."""
    a = params.dense_a()
    dt = params.dt.to(a.dtype)
    eye = torch.eye(params.n, dtype=a.dtype, device=a.device)
    backward = eye - (dt / 2.0) * a
    forward = eye + (dt / 2.0) * a
    try:
        a_bar = torch.linalg.solve(backward, forward)
        b_bar = torch.linalg.solve(backward, (dt * params.b).unsqueeze(-1)).squeeze(-1)
    except RuntimeError as e:
        raise NumericSingularityError(f"I - dt/2 A is singular: {e}") from e
    if not (torch.isfinite(a_bar.real).all() and torch.isfinite(a_bar.imag).all()):
        raise NumericSingularityError("I - dt/2 A is numerically singular")
    return DiscreteSSM(a_bar=a_bar, b_bar=b_bar, c_bar=params.c)


def ssm_scan(d: DiscreteSSM, u: torch.Tensor) -> torch.Tensor:
    """Run z_k = A z_{k-1} + B u_k, y_k = C z_k from z_0 = 0 along the last axis of u.

    Leading axes of u are independent sequences; a 2-D c_bar of shape
    (channels, N) broadcasts against the axis just before time.
    """
    if u.dim() < 1:
        raise InvalidArgumentError("input must have a time axis")
    if u.is_complex():
        raise InvalidArgumentError("input must be real")
    length = u.shape[-1]
    z = torch.zeros(u.shape[:-1] + (d.n,), dtype=d.a_bar.dtype, device=u.device)
    a_t = d.a_bar.transpose(0, 1)
    outputs = []
    for k in range(length):
        z = z @ a_t + d.b_bar * u[..., k, None].to(z.dtype)
        outputs.append((z * d.c_bar).sum(-1).real)
    return torch.stack(outputs, dim=-1).to(u.dtype)


def kernel_naive(d: DiscreteSSM, l: int) -> Kernel:
    """k[i] = Re(C A^i B) by iterated matrix-vector products."""
    if l < 1:
        raise InvalidArgumentError(f"kernel length must be positive, got {l}")
    x = d.b_bar
    taps = []
    for _ in range(l):
        taps.append((d.c_bar * x).sum(-1).real)
        x = d.a_bar @ x
    return torch.stack(taps, dim=-1)


def _cauchy(v: torch.Tensor, denominator: torch.Tensor) -> torch.Tensor:
    """sum_n v[..., n] / denominator[l, n] for every frequency l."""
    return torch.einsum("...n,ln->...l", v, 1.0 / denominator)


def kernel_fast(params: DPLRParams, l: int) -> Kernel:
    """The `kernel_naive` filter from the generating function at the roots of unity.

    With s(z) = dt/2 (1 + z) the truncated generating function is
        K(z) = dt * c~ [(1 - z) I - s(z) A]^{-1} B,
    where c~ = c (I - A_bar^L) absorbs the truncation. The resolvent of the
    DPLR matrix splits into four Cauchy sums over diag((1 - z) - s(z) lambda)
    and a rank-1 Woodbury correction. This form stays regular at z = -1.

    Cost: A_bar^L is formed densely by repeated squaring, O(N^3 log L); the
    Cauchy sums are O(N L) and the inverse FFT O(L log L). For the state
    sizes used here the dense power dominates once N^2 log L exceeds L.
    """
    if l < 1:
        raise InvalidArgumentError(f"kernel length must be positive, got {l}")
    length = 1 << (l - 1).bit_length()

    discrete = discretize_bilinear(params)
    a_pow = torch.linalg.matrix_power(discrete.a_bar, length)
    c_tilde = params.c - params.c @ a_pow

    cdtype = params.lambda_.dtype
    rdtype = params.log_dt.dtype
    dt = params.dt.to(cdtype)
    angles = -2.0 * math.pi * torch.arange(length, dtype=rdtype) / length
    z = torch.polar(torch.ones_like(angles), angles).to(cdtype)
    s = (dt / 2.0) * (1.0 + z)

    denominator = (1.0 - z).unsqueeze(-1) - s.unsqueeze(-1) * params.lambda_
    q_conj = params.q.conj()

    k_cb = _cauchy(c_tilde * params.b, denominator)
    k_cp = _cauchy(c_tilde * params.p, denominator)
    k_qb = _cauchy(q_conj * params.b, denominator)
    k_qp = _cauchy(q_conj * params.p, denominator)

    at_roots = dt * (k_cb - k_cp * s * k_qb / (1.0 + s * k_qp))
    k = torch.fft.ifft(at_roots, n=length).real
    return k[..., :l]


def causal_conv(k: Kernel, u: torch.Tensor) -> torch.Tensor:
    """y[t] = sum_{i<=t} k[i] u[t-i] via zero-padded FFT; leading axes broadcast."""
    if k.shape[-1] != u.shape[-1]:
        raise InvalidArgumentError(
            f"kernel length {k.shape[-1]} does not match input length {u.shape[-1]}"
        )
    length = u.shape[-1]
    n = 2 * length
    k_f = torch.fft.rfft(k, n=n)
    u_f = torch.fft.rfft(u, n=n)
    return torch.fft.irfft(k_f * u_f, n=n)[..., :length]
