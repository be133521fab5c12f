"""Moment-constrained convolution kernels approximating spatial derivatives.

A k x k kernel ``q`` applied by cross-correlation computes

    sum_{u,v} q[u, v] h(x + u, y + v) = sum_{a,b} m_{a,b} d^{a+b}h / dx^a dy^b

with moments ``m_{a,b} = 1/(a! b!) sum u^a v^b q[u, v]``.  Forcing the moment
matrix to the unit pattern at ``(i, j)`` turns ``q`` into a finite-difference
stencil for ``d^{i+j} / dx^i dy^j``.

Axis convention: the first kernel axis is x (i-derivatives) and maps to the
height axis of ``(..., H, W)`` tensors; the second is y and maps to width.
"""
from __future__ import annotations

from math import factorial

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainTooSmallError, InvalidKernelError, InvalidOrderError


def _check_size(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or k < 3 or k % 2 == 0:
        raise InvalidKernelError(f"kernel size must be an odd integer >= 3, got {k!r}")


def moment_weights(k: int) -> np.ndarray:
    """Per-axis weights ``w[a, u] = u^a / a!`` for offsets ``u = -(k-1)/2 .. (k-1)/2``."""
    r = (k - 1) // 2
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    return np.stack([offsets**a / factorial(a) for a in range(k)])


def moment_matrix(kernel) -> np.ndarray | torch.Tensor:
    """Moment matrix of a square odd-sized kernel.

    Accepts a numpy array or a torch tensor; the return type follows the
    input.  Trailing two axes are the kernel, leading axes are batched over.
    """
    shape = tuple(kernel.shape)
    if len(shape) < 2 or shape[-1] != shape[-2] or shape[-1] % 2 == 0:
        raise InvalidKernelError(f"kernel must be square with odd side, got shape {shape}")
    k = shape[-1]
    w = moment_weights(k)
    if isinstance(kernel, torch.Tensor):
        wt = torch.as_tensor(w, dtype=kernel.dtype, device=kernel.device)
        return wt @ kernel @ wt.T
    return w @ np.asarray(kernel, dtype=np.float64) @ w.T


def target_delta(i: int, j: int, k: int) -> np.ndarray:
    _check_size(k)
    if not (0 <= i < k and 0 <= j < k):
        raise InvalidOrderError(f"orders ({i}, {j}) out of range for k={k}")
    delta = np.zeros((k, k))
    delta[i, j] = 1.0
    return delta


def exact_kernels(k: int) -> np.ndarray:
    """Solve for the k^2 kernels whose moment matrices equal their targets exactly.

    The moment map factorises as ``M = W q W^T``, so each kernel is
    ``W^{-1} Delta_{i,j} W^{-T}``.  Returned shape is ``(k*k, k, k)`` in
    row-major ``(i, j)`` order.
    """
    _check_size(k)
    w_inv = np.linalg.inv(moment_weights(k))
    out = np.empty((k * k, k, k))
    for i in range(k):
        for j in range(k):
            out[i * k + j] = w_inv @ target_delta(i, j, k) @ w_inv.T
    return out


class DerivativeKernelBank(nn.Module):
    """The k^2 learnable kernels; channel ``i*k + j`` approximates D_{i,j}."""

    def __init__(self, k: int, noise: float = 0.0, generator: torch.Generator | None = None):
        super().__init__()
        _check_size(k)
        self.k = int(k)
        init = torch.as_tensor(exact_kernels(k), dtype=torch.float32)
        if noise:
            init = init + noise * torch.randn(init.shape, generator=generator)
        self.kernels = nn.Parameter(init)

    @classmethod
    def exact(cls, k: int, dtype=torch.float64) -> "DerivativeKernelBank":
        bank = cls(k)
        bank.kernels.data = torch.as_tensor(exact_kernels(k), dtype=dtype)
        return bank

    @classmethod
    def from_kernels(cls, kernels) -> "DerivativeKernelBank":
        kernels = torch.as_tensor(kernels)
        n, k, k2 = kernels.shape
        if k != k2 or n != k * k:
            raise InvalidKernelError(f"expected shape (k*k, k, k), got {tuple(kernels.shape)}")
        bank = cls(k)
        bank.kernels.data = kernels.clone()
        return bank

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.k and 0 <= j < self.k):
            raise InvalidOrderError(f"orders ({i}, {j}) out of range for k={self.k}")
        return i * self.k + j

    def moment_loss(self) -> torch.Tensor:
        return moment_loss(self)

    def forward(self, h: torch.Tensor, orders=None) -> torch.Tensor:
        return apply_derivatives(h, self, orders)


def moment_loss(bank: DerivativeKernelBank) -> torch.Tensor:
    """Sum over kernels of the Frobenius distance between moments and targets."""
    k = bank.k
    targets = torch.eye(k * k, dtype=bank.kernels.dtype, device=bank.kernels.device)
    diff = moment_matrix(bank.kernels).reshape(k * k, k * k) - targets
    return torch.linalg.vector_norm(diff, dim=1).sum()


def apply_derivatives(h: torch.Tensor, bank: DerivativeKernelBank, orders=None) -> torch.Tensor:
    """Depthwise derivative stack.

    ``h`` is ``(B, C, H, W)`` (or ``(C, H, W)``).  Output has ``C * n``
    channels laid out channel-major: output channel ``c * n + t`` holds
    derivative ``t`` of input channel ``c``, where ``n = k^2`` (or
    ``len(orders)`` when a subset of ``(i, j)`` pairs is requested).
    """
    squeeze = h.dim() == 3
    if squeeze:
        h = h.unsqueeze(0)
    if h.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(h.shape)}")
    k = bank.k
    if h.shape[-2] < k or h.shape[-1] < k:
        raise DomainTooSmallError(f"spatial dims {tuple(h.shape[-2:])} smaller than kernel size {k}")
    kernels = bank.kernels
    if orders is not None:
        kernels = kernels[[bank.index(i, j) for i, j in orders]]
    n = kernels.shape[0]
    c = h.shape[1]
    weight = kernels.to(h.dtype).unsqueeze(1).repeat(c, 1, 1, 1)
    out = F.conv2d(h, weight, padding=(k - 1) // 2, groups=c)
    return out.squeeze(0) if squeeze else out


def fit_moments(bank: DerivativeKernelBank, steps: int = 500, lr: float = 0.03) -> list[float]:
    """Train a bank on the moment penalty alone (Adam, cosine-decayed rate).

    Returns the loss trajectory.
    """
    opt = torch.optim.Adam([bank.kernels], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    history = []
    for _ in range(steps):
        opt.zero_grad()
        loss = moment_loss(bank)
        loss.backward()
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
    return history
