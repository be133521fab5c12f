"""Encoder / PhyCell / ConvLSTM / decoder assembly and the sequence forecaster."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import torch
from torch import nn

from .convlstm import ConvLSTMState, ResidualConvLSTM
from .errors import ArityError, DimensionError
from .phycell import DEFAULT_K, VARIANTS, PhyCell


@dataclass
class ModelConfig:
    variant: str = "advdiff"
    k: int | None = None
    latent_channels: int = 64
    tau_in: int = 4
    tau_out: int = 6
    delta_minutes: int = 10
    icloss_enabled: bool = False
    convlstm_widths: tuple[int, ...] = (128, 128, 64)
    severe_threshold_dbz: float = 40.0
    class_weight: float = 5.0
    residual: bool = True
    norm: bool = True
    encoder_width: int = 32
    seed: int = 0

    def __post_init__(self):
        self.convlstm_widths = tuple(int(w) for w in self.convlstm_widths)
        if self.k is None:
            self.k = DEFAULT_K.get(self.variant, 3)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"k must be an odd integer >= 3, got {self.k}")
        if self.variant == "advdiff" and self.k != 3:
            raise ValueError("advdiff uses k=3")
        for name in ("latent_channels", "tau_in", "tau_out", "delta_minutes", "encoder_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.convlstm_widths or min(self.convlstm_widths) < 1:
            raise ValueError(f"convlstm_widths must be positive, got {self.convlstm_widths}")
        if not 0 < self.severe_threshold_dbz <= 60:
            raise ValueError("severe_threshold_dbz must lie in (0, 60]")
        if self.class_weight <= 0:
            raise ValueError("class_weight must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convlstm_widths"] = list(self.convlstm_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class CellMemory(NamedTuple):
    h_p: torch.Tensor
    h_r: torch.Tensor
    convlstm: ConvLSTMState | None


@dataclass
class PredictionBundle:
    intensity: torch.Tensor
    prob: torch.Tensor | None = None
    logits: torch.Tensor | None = None


@dataclass
class BranchDecomposition:
    combined: list[PredictionBundle]
    physical: list[torch.Tensor] = field(default_factory=list)
    residual: list[torch.Tensor] = field(default_factory=list)


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class Encoder(nn.Module):
    def __init__(self, latent: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            nn.GroupNorm(_groups(width), width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, latent, 3, stride=2, padding=1),
            nn.GroupNorm(_groups(latent), latent),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, latent: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent, width, 3, stride=2, padding=1, output_padding=1),
            nn.GroupNorm(_groups(width), width),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width, 1, 3, stride=2, padding=1, output_padding=1),
        )

    def forward(self, h):
        return self.net(h).clamp(0.0, 1.0)


class PhyDNet(nn.Module):
    """Disentangled recurrent forecaster.

    Frames are ``(B, 1, H, W)`` tensors in MLdBZ; sequences are ``(B, T, H, W)``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.latent_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = Encoder(c, config.encoder_width)
            self.decoder = Decoder(c, config.encoder_width)
            self.phycell = PhyCell(c, config.variant, config.k, norm=config.norm)
            self.convlstm = ResidualConvLSTM(c, config.convlstm_widths) if config.residual else None
            self.prob_conv = nn.Conv2d(1, 2, 3, padding=1) if config.icloss_enabled else None

    @property
    def dtype(self):
        return self.phycell.combine.weight.dtype

    # -- building blocks --------------------------------------------------

    def encode(self, frame: torch.Tensor) -> torch.Tensor:
        if frame.dim() != 4 or frame.shape[1] != 1:
            raise DimensionError(f"expected (B, 1, H, W) frame, got {tuple(frame.shape)}")
        if frame.shape[-2] % 4 or frame.shape[-1] % 4:
            raise DimensionError(f"frame dims {tuple(frame.shape[-2:])} must be divisible by 4")
        return self.encoder(frame)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.config.latent_channels:
            raise DimensionError(
                f"expected (B, {self.config.latent_channels}, H, W) latent, got {tuple(latent.shape)}")
        return self.decoder(latent)

    def prob_head(self, intensity: torch.Tensor):
        """Two-class logits and the probability of exceeding the severe threshold."""
        if self.prob_conv is None:
            raise ValueError("probability head requires icloss_enabled")
        logits = self.prob_conv(intensity)
        return logits, torch.softmax(logits, dim=1)[:, 1:2]

    def init_memory(self, batch: int, height: int, width: int) -> CellMemory:
        shape = (batch, self.config.latent_channels, height // 4, width // 4)
        zeros = torch.zeros(shape, dtype=self.dtype)
        lstm = self.convlstm.init_state(batch, height // 4, width // 4, self.dtype) if self.convlstm else None
        return CellMemory(zeros, zeros, lstm)

    def step(self, frame: torch.Tensor, memory: CellMemory | None = None, gain=None):
        """Advance the cell by one frame; returns ``(PredictionBundle, CellMemory)``."""
        if memory is None:
            memory = self.init_memory(frame.shape[0], frame.shape[-2], frame.shape[-1])
        encoded = self.encode(frame)
        if encoded.shape != memory.h_p.shape:
            raise DimensionError(f"memory shape {tuple(memory.h_p.shape)} does not match {tuple(encoded.shape)}")
        h_p, _ = self.phycell(memory.h_p, encoded, gain)
        if self.convlstm is not None:
            increment, lstm = self.convlstm(memory.convlstm, encoded)
            h_r = memory.h_r + increment
        else:
            h_r, lstm = memory.h_r, None
        intensity = self.decode(h_p + h_r)
        bundle = PredictionBundle(intensity)
        if self.prob_conv is not None:
            bundle.logits, bundle.prob = self.prob_head(intensity)
        return bundle, CellMemory(h_p, h_r, lstm)

    # -- sequences --------------------------------------------------------

    def _rollout(self, inputs: torch.Tensor, tau_out: int | None, teacher=None, branches=False):
        if inputs.dim() != 4:
            raise DimensionError(f"expected (B, T, H, W) inputs, got {tuple(inputs.shape)}")
        if inputs.shape[1] != self.config.tau_in:
            raise ArityError(f"expected {self.config.tau_in} input frames, got {inputs.shape[1]}")
        tau_out = self.config.tau_out if tau_out is None else int(tau_out)
        if tau_out < 1:
            raise ArityError("tau_out must be >= 1")
        memory = self.init_memory(inputs.shape[0], inputs.shape[-2], inputs.shape[-1])
        for t in range(inputs.shape[1]):
            bundle, memory = self.step(inputs[:, t:t + 1], memory)
        out = BranchDecomposition([bundle])
        if branches:
            out.physical.append(self.decode(memory.h_p))
            out.residual.append(self.decode(memory.h_r))
        for i in range(1, tau_out):
            feed = bundle.intensity if teacher is None else teacher[:, i - 1:i]
            bundle, memory = self.step(feed, memory)
            out.combined.append(bundle)
            if branches:
                out.physical.append(self.decode(memory.h_p))
                out.residual.append(self.decode(memory.h_r))
        return out

    def forecast(self, inputs: torch.Tensor, tau_out: int | None = None, teacher=None) -> list[PredictionBundle]:
        """Warm up on ``tau_in`` frames, then predict ``tau_out`` frames autoregressively.

        ``teacher`` (``(B, >= tau_out - 1, H, W)``) replaces the fed-back
        predictions with observed frames.
        """
        return self._rollout(inputs, tau_out, teacher).combined

    def decompose_branches(self, inputs: torch.Tensor, tau_out: int | None = None) -> BranchDecomposition:
        """Forecast plus each branch's latent decoded on its own."""
        return self._rollout(inputs, tau_out, branches=True)

    def advection_field(self, inputs: torch.Tensor) -> torch.Tensor:
        """Velocity inferred from ``h_p`` after warming up on ``inputs``."""
        if self.config.variant != "advdiff":
            raise ValueError("variant has no advection field")
        memory = self.init_memory(inputs.shape[0], inputs.shape[-2], inputs.shape[-1])
        for t in range(inputs.shape[1]):
            _, memory = self.step(inputs[:, t:t + 1], memory)
        return self.phycell.infer_advection(memory.h_p)


def stack_intensity(bundles: list[PredictionBundle]) -> torch.Tensor:
    return torch.cat([b.intensity for b in bundles], dim=1)
