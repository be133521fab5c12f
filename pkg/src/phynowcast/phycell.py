"""PhyCell: latent prediction by learned differential operators plus gated correction."""
from __future__ import annotations

import torch
from torch import nn

from .derivative_ops import DerivativeKernelBank, apply_derivatives
from .errors import DimensionError, DomainTooSmallError

VARIANTS = ("baseline", "quad", "advdiff")
DEFAULT_K = {"baseline": 7, "quad": 3, "advdiff": 3}
ADVDIFF_ORDERS = ((1, 0), (0, 1), (2, 0), (0, 2))


def upper_triangular_products(d: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Pairwise products ``d_a * d_b`` for ``a <= b``, enumerated row by row.

    ``n`` terms along ``dim`` become ``n (n + 1) / 2`` terms along the same axis.
    """
    dim = dim % d.dim()
    n = d.shape[dim]
    rows, cols = torch.triu_indices(n, n, device=d.device)
    return d.index_select(dim, rows) * d.index_select(dim, cols)


def term_count(variant: str, k: int) -> int:
    if variant == "baseline":
        return k * k
    if variant == "quad":
        n = k * k
        return n + n * (n + 1) // 2
    if variant == "advdiff":
        return len(ADVDIFF_ORDERS)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def norm_groups(variant: str, k: int) -> int:
    """Normalisation groups per latent channel (k groups of k, 6 of 9 for k=3, one)."""
    if variant == "baseline":
        return k
    if variant == "quad":
        return term_count("quad", k) // (k * k)
    return 1


class PhyCell(nn.Module):
    """Physically constrained recurrent cell.

    Parameters
    ----------
    channels:
        Latent channel count ``C_h``.
    variant:
        ``"baseline"`` (linear combination of all k^2 derivatives),
        ``"quad"`` (derivatives plus their pairwise products) or
        ``"advdiff"`` (advection-diffusion with a state-dependent velocity).
    k:
        Derivative order bound; defaults to 7 for baseline and 3 otherwise.
    norm:
        Group-normalise the terms before combining them.  Disabling it makes
        the baseline predictor linear in the state.
    """

    def __init__(self, channels: int, variant: str = "advdiff", k: int | None = None,
                 norm: bool = True, kernel_noise: float = 1e-3):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        k = DEFAULT_K[variant] if k is None else int(k)
        self.channels = channels
        self.variant = variant
        self.k = k
        self.n_terms = term_count(variant, k)

        self.bank = DerivativeKernelBank(k, noise=kernel_noise)
        width = channels * self.n_terms
        if norm:
            self.norm = nn.GroupNorm(channels * norm_groups(variant, k), width, eps=1e-5)
        else:
            self.norm = nn.Identity()
        self.combine = nn.Conv2d(width, channels, 1, bias=False)
        nn.init.uniform_(self.combine.weight, -0.01, 0.01)

        self.gain_pred = nn.Conv2d(channels, channels, 3, padding=1)
        self.gain_input = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.advect = nn.Conv2d(channels, 2, 5, padding=2, bias=False) if variant == "advdiff" else None

    # -- prediction -------------------------------------------------------

    def _check(self, h: torch.Tensor) -> None:
        if h.dim() != 4 or h.shape[1] != self.channels:
            raise DimensionError(f"expected (B, {self.channels}, H, W) latent, got {tuple(h.shape)}")

    def terms(self, h_p: torch.Tensor) -> torch.Tensor:
        """Un-normalised terms, shape ``(B, C_h, n_terms, H, W)``."""
        self._check(h_p)
        b, c, hh, ww = h_p.shape
        if self.variant == "advdiff":
            u = self.infer_advection(h_p)
            ux, uy = u[:, :1], u[:, 1:]
            d = torch.stack([
                apply_derivatives(ux * h_p, self.bank, [(1, 0)]),
                apply_derivatives(uy * h_p, self.bank, [(0, 1)]),
                apply_derivatives(h_p, self.bank, [(2, 0)]),
                apply_derivatives(h_p, self.bank, [(0, 2)]),
            ], dim=2)
            return d
        d = apply_derivatives(h_p, self.bank).reshape(b, c, self.k * self.k, hh, ww)
        if self.variant == "quad":
            d = torch.cat([d, upper_triangular_products(d, dim=2)], dim=2)
        return d

    def predict(self, h_p: torch.Tensor) -> torch.Tensor:
        """Latent increment ``Phi(h_p)`` for the configured variant."""
        d = self.terms(h_p)
        b, c, n, hh, ww = d.shape
        return self.combine(self.norm(d.reshape(b, c * n, hh, ww)))

    def infer_advection(self, h_p: torch.Tensor) -> torch.Tensor:
        """Velocity field ``(u_x, u_y)`` as a ``(B, 2, H, W)`` tensor."""
        if self.advect is None:
            raise ValueError(f"variant {self.variant!r} has no advection field")
        self._check(h_p)
        if h_p.shape[-2] < 5 or h_p.shape[-1] < 5:
            raise DomainTooSmallError(f"spatial dims {tuple(h_p.shape[-2:])} smaller than 5")
        return self.advect(h_p)

    # -- correction -------------------------------------------------------

    def kalman_gain(self, h_tilde: torch.Tensor, encoded: torch.Tensor) -> torch.Tensor:
        if h_tilde.shape != encoded.shape:
            raise DimensionError(f"shape mismatch {tuple(h_tilde.shape)} vs {tuple(encoded.shape)}")
        return torch.sigmoid(self.gain_pred(h_tilde) + self.gain_input(encoded))

    def forward(self, h_p: torch.Tensor, encoded: torch.Tensor | None = None,
                gain: torch.Tensor | float | None = None):
        """One step; returns ``(h_p_new, h_tilde)``.

        Without ``encoded`` the cell runs the prediction alone.  ``gain``
        overrides the learned Kalman gain (used to pin K in experiments).
        """
        h_tilde = h_p + self.predict(h_p)
        if encoded is None:
            return h_tilde, h_tilde
        if encoded.shape != h_p.shape:
            raise DimensionError(f"shape mismatch {tuple(h_p.shape)} vs {tuple(encoded.shape)}")
        k = self.kalman_gain(h_tilde, encoded) if gain is None else gain
        return (1 - k) * h_tilde + k * encoded, h_tilde


def phycell_step(cell: PhyCell, h_p, encoded=None, gain=None):
    return cell(h_p, encoded, gain)
