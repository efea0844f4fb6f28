"""Small conditional U-Net denoiser for 16x16x4 latents.

Two resolutions (16 and 8), residual blocks with time-embedding injection,
and cross-attention onto the conditioning sequence at every level. All
activations are smooth so finite-difference gradient checks stay tight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 64
    cond_dim: int = 128
    time_dim: int = 128
    n_heads: int = 4
    groups: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / max(1, half - 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial queries attend to the conditioning token sequence."""

    def __init__(self, channels: int, cond_dim: int, n_heads: int, groups: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(cond_dim, channels)
        self.v = nn.Linear(cond_dim, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, cond, cond_mask=None):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.k(cond)
        v = self.v(cond)

        def split(t):
            return t.reshape(b, -1, self.n_heads, self.head_dim).transpose(1, 2)

        scores = split(q) @ split(k).transpose(-2, -1) / math.sqrt(self.head_dim)
        if cond_mask is not None:
            scores = scores.masked_fill(
                ~cond_mask[:, None, None, :], float("-inf")
            )
        attn = scores.softmax(dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        out = self.out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ConditionalUNet(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        self.config = cfg = config or UNetConfig()
        ch, g = cfg.base_channels, cfg.groups
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim * 2),
            nn.SiLU(),
            nn.Linear(cfg.time_dim * 2, cfg.time_dim),
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)
        self.res1 = ResBlock(ch, ch, cfg.time_dim, g)
        self.attn1 = CrossAttention(ch, cfg.cond_dim, cfg.n_heads, g)
        self.down = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.res2 = ResBlock(ch, ch * 2, cfg.time_dim, g)
        self.attn2 = CrossAttention(ch * 2, cfg.cond_dim, cfg.n_heads, g)
        self.mid1 = ResBlock(ch * 2, ch * 2, cfg.time_dim, g)
        self.attn_mid = CrossAttention(ch * 2, cfg.cond_dim, cfg.n_heads, g)
        self.mid2 = ResBlock(ch * 2, ch * 2, cfg.time_dim, g)
        self.up_conv = nn.Conv2d(ch * 2, ch, 3, padding=1)
        self.res3 = ResBlock(ch * 2, ch, cfg.time_dim, g)
        self.attn3 = CrossAttention(ch, cfg.cond_dim, cfg.n_heads, g)
        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, z, t, cond, cond_mask=None):
        """z: (B, C, 16, 16); t: (B,) float steps; cond: (B, L, cond_dim)."""
        t_emb = self.time_mlp(timestep_embedding(t, self.config.time_dim))
        h0 = self.conv_in(z)
        h1 = self.attn1(self.res1(h0, t_emb), cond, cond_mask)
        h2 = self.attn2(self.res2(self.down(h1), t_emb), cond, cond_mask)
        m = self.mid2(self.attn_mid(self.mid1(h2, t_emb), cond, cond_mask), t_emb)
        u = self.up_conv(F.interpolate(m, scale_factor=2, mode="nearest"))
        u = self.attn3(self.res3(torch.cat([u, h1], dim=1), t_emb), cond, cond_mask)
        return self.conv_out(F.silu(self.norm_out(u)))
