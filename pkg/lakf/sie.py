"""Semantic-Independent Encoder.

A stack of N state vectors of length M is read as an ``M x N`` matrix. Every
row (one semantic element such as ``cx`` or ``h``) is embedded by the same
kernel-1 convolution, squashed by tanh, mean-pooled over channels into an
M-vector, and finally mixed across rows by a fully-connected layer.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as func
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor, nn

from lakf.errors import DomainError


class SIEConfig(BaseModel):
    """Encoder geometry: M rows, N columns, C channels, E outputs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    m: int = Field(ge=1, description="Number of semantic rows")
    n: int = Field(ge=1, description="Number of stacked state vectors")
    channels: int = Field(default=4, ge=1, description="Convolution output channels")
    emb_dim: Optional[int] = Field(default=None, ge=1, description="Embedding size, defaults to m")

    @model_validator(mode="before")
    @classmethod
    def default_emb_dim(cls, data):
        if isinstance(data, dict) and data.get("emb_dim") is None and "m" in data:
            data = {**data, "emb_dim": data["m"]}
        return data


@dataclass(frozen=True, eq=False)
class SIEParams:
    """Encoder parameters as plain tensors."""

    conv_w: Tensor  # (C, N)
    conv_b: Tensor  # (C,)
    fc_w: Tensor  # (E, M)
    fc_b: Tensor  # (E,)


def _uniform(shape, bound: float, generator: torch.Generator, dtype: torch.dtype) -> Tensor:
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound


def sie_init(cfg: SIEConfig, seed: int, dtype: torch.dtype = torch.float64) -> SIEParams:
    """Draws every weight and bias uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    generator = torch.Generator().manual_seed(seed)
    conv_bound = 1.0 / math.sqrt(cfg.n)
    fc_bound = 1.0 / math.sqrt(cfg.m)
    return SIEParams(
        conv_w=_uniform((cfg.channels, cfg.n), conv_bound, generator, dtype),
        conv_b=_uniform((cfg.channels,), conv_bound, generator, dtype),
        fc_w=_uniform((cfg.emb_dim, cfg.m), fc_bound, generator, dtype),
        fc_b=_uniform((cfg.emb_dim,), fc_bound, generator, dtype),
    )


def encode_rows(params: SIEParams, cfg: SIEConfig, z_in: Tensor) -> Tensor:
    """
    Row-shared convolution, tanh and channel mean-pool.

    Args:
        params: Encoder parameters
        cfg: Encoder geometry
        z_in: ``(M, N)`` or batched ``(B, M, N)`` input

    Returns:
        ``(M,)`` or ``(B, M)`` pooled row codes in (-1, 1)

    Raises:
        DomainError: If z_in does not have M rows and N columns
    """
    if z_in.shape[-2:] != (cfg.m, cfg.n):
        raise DomainError(f"SIE expects (..., {cfg.m}, {cfg.n}) input, got {tuple(z_in.shape)}")
    batched = z_in.dim() == 3
    z = z_in if batched else z_in.unsqueeze(0)
    # conv1d over the row axis: channels-in are the N columns
    u = torch.tanh(func.conv1d(z.transpose(1, 2), params.conv_w.unsqueeze(-1), params.conv_b))
    v = u.mean(dim=1)
    return v if batched else v.squeeze(0)


def sie_forward(params: SIEParams, cfg: SIEConfig, z_in: Tensor) -> Tensor:
    """Full encoder: encode_rows followed by the row-mixing linear layer."""
    return func.linear(encode_rows(params, cfg, z_in), params.fc_w, params.fc_b)


class SemanticIndependentEncoder(nn.Module):
    """Trainable wrapper around sie_forward."""

    def __init__(self, cfg: SIEConfig, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        params = sie_init(cfg, seed, dtype)
        self.conv_w = nn.Parameter(params.conv_w)
        self.conv_b = nn.Parameter(params.conv_b)
        self.fc_w = nn.Parameter(params.fc_w)
        self.fc_b = nn.Parameter(params.fc_b)

    @property
    def params(self) -> SIEParams:
        return SIEParams(self.conv_w, self.conv_b, self.fc_w, self.fc_b)

    @property
    def out_dim(self) -> int:
        return self.cfg.emb_dim

    def forward(self, z_in: Tensor) -> Tensor:
        return sie_forward(self.params, self.cfg, z_in)
