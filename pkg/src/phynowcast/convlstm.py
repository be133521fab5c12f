"""Stacked convolutional LSTM for the residual (unmodelled) dynamics."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .errors import DimensionError


class ConvLSTMState(NamedTuple):
    hidden: tuple[torch.Tensor, ...]
    memory: tuple[torch.Tensor, ...]


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel_size: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel_size, padding=kernel_size // 2)
        with torch.no_grad():
            self.gates.bias.zero_()
            # forget gate occupies the second block
            self.gates.bias[hidden:2 * hidden].fill_(1.0)

    def forward(self, x, h, c):
        i, f, o, g = torch.split(self.gates(torch.cat([x, h], dim=1)), self.hidden, dim=1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, c_new


class ResidualConvLSTM(nn.Module):
    """Stack of ConvLSTM cells followed by a 1x1 projection back to ``channels``.

    The projection of the last hidden state is the residual increment.
    """

    def __init__(self, channels: int, widths=(128, 128, 64), kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.widths = tuple(int(w) for w in widths)
        ins = (channels,) + self.widths[:-1]
        self.cells = nn.ModuleList(ConvLSTMCell(i, w, kernel_size) for i, w in zip(ins, self.widths))
        self.project = nn.Conv2d(self.widths[-1], channels, 1)

    def init_state(self, batch: int, height: int, width: int, dtype=torch.float32) -> ConvLSTMState:
        zeros = tuple(torch.zeros(batch, w, height, width, dtype=dtype) for w in self.widths)
        return ConvLSTMState(zeros, zeros)

    def forward(self, state: ConvLSTMState, encoded: torch.Tensor):
        if encoded.dim() != 4 or encoded.shape[1] != self.channels:
            raise DimensionError(f"expected (B, {self.channels}, H, W) input, got {tuple(encoded.shape)}")
        if len(state.hidden) != len(self.cells):
            raise DimensionError(f"state has {len(state.hidden)} layers, stack has {len(self.cells)}")
        x = encoded
        hidden, memory = [], []
        for cell, h, c in zip(self.cells, state.hidden, state.memory):
            x, c_new = cell(x, h, c)
            hidden.append(x)
            memory.append(c_new)
        return self.project(x), ConvLSTMState(tuple(hidden), tuple(memory))


def convlstm_step(branch: ResidualConvLSTM, state: ConvLSTMState, encoded: torch.Tensor):
    return branch(state, encoded)
