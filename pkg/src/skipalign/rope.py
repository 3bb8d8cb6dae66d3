"""Rotary position embeddings driven by explicit position ids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeParams:
    head_dim: int = 32
    theta_base: float = 10000.0
    # Multiplies the base frequency.  A plain knob for stretching wavelengths,
    # not a reproduction of any particular NTK recipe.
    scale: float = 1.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise RopeConfigError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.theta_base <= 0 or self.scale <= 0:
            raise RopeConfigError("theta_base and scale must be positive")

    def frequencies(self) -> np.ndarray:
        t = np.arange(self.head_dim // 2, dtype=np.float64)
        return (self.theta_base * self.scale) ** (-2.0 * t / self.head_dim)


def rope_rotate(v, index: int, params: RopeParams) -> np.ndarray:
    """Rotate pairs (v[2t], v[2t+1]) by ``index * omega_t``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != params.head_dim:
        raise RopeConfigError(f"expected a vector of length {params.head_dim}, got shape {v.shape}")
    ang = index * params.frequencies()
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(v)
    out[0::2] = v[0::2] * c - v[1::2] * s
    out[1::2] = v[0::2] * s + v[1::2] * c
    return out


def rope_angles(position_ids: torch.Tensor, params: RopeParams, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape ``position_ids.shape + (head_dim // 2,)``.

    Angles are formed in float64 and cast afterwards so large positions keep
    their precision.
    """
    freqs = torch.from_numpy(params.frequencies()).to(position_ids.device)
    ang = position_ids.to(torch.float64).unsqueeze(-1) * freqs
    dtype = dtype or torch.get_default_dtype()
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """x: [..., T, D]; cos/sin broadcastable to [..., T, D/2]."""
    if x.shape[-1] % 2:
        raise RopeConfigError("last dimension must be even")
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1)
    return out.flatten(-2)


def check_increasing(position_ids: torch.Tensor, valid: torch.Tensor | None = None) -> None:
    pos = position_ids
    if pos.shape[-1] < 2:
        return
    step = pos[..., 1:] - pos[..., :-1]
    bad = step <= 0
    if valid is not None:
        bad = bad & valid[..., 1:]
    if bool(bad.any()):
        raise ValueError("position ids must be strictly increasing along the sequence")


def attention_scores(queries: torch.Tensor, keys: torch.Tensor, position_ids, params: RopeParams) -> torch.Tensor:
    """Causal pre-softmax scores ``[..., T, T]``.

    The mask follows sequence order; position values only enter through the
    rotation, so token j < i is visible to i however far apart they sit.
    """
    position_ids = torch.as_tensor(position_ids)
    check_increasing(position_ids)
    cos, sin = rope_angles(position_ids, params, dtype=queries.dtype)
    if queries.dim() > position_ids.dim() + 1:
        # heads axis sits between batch and time
        cos, sin = cos.unsqueeze(-3), sin.unsqueeze(-3)
    q = apply_rope(queries, cos, sin)
    k = apply_rope(keys, cos, sin)
    scores = q @ k.transpose(-1, -2) / math.sqrt(params.head_dim)
    t = scores.shape[-1]
    causal = torch.ones(t, t, dtype=torch.bool, device=scores.device).tril()
    return scores.masked_fill(~causal, float("-inf"))
