"""Image/latent autoencoder and the diffusion noise schedule.

The autoencoder compresses 64x64x3 images into 16x16x4 latents (4x spatial
downsampling); latents are standardized by training statistics so diffusion
operates at roughly unit scale. The schedule stores cumulative signal
coefficients abar_1..abar_T; forward noising and its algebraic inverse live
here so every consumer shares one implementation.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_SHAPE = (16, 16, 4)


@dataclass
class CodecConfig:
    latent_channels: int = 4
    hidden: int = 64
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class AutoEncoder(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = cfg = config or CodecConfig()
        h = cfg.hidden
        self.enc1 = nn.Conv2d(3, h // 2, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(h // 2, h, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(h, cfg.latent_channels, 3, padding=1)
        self.dec1 = nn.Conv2d(cfg.latent_channels, h, 3, padding=1)
        self.dec2 = nn.Conv2d(h, h // 2, 3, padding=1)
        self.dec3 = nn.Conv2d(h // 2, 3, 3, padding=1)
        # Latent standardization, filled in by training.
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(cfg.latent_channels))
        self.register_buffer("trained", torch.tensor(False))

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 64, 64, 3) -> (B, C, 16, 16)
        h = images.permute(0, 3, 1, 2)
        h = F.silu(self.enc1(h))
        h = F.silu(self.enc2(h))
        return self.enc3(h)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.dec1(z))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec2(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.dec3(h)).permute(0, 2, 3, 1)

    def normalize(self, z_raw: torch.Tensor) -> torch.Tensor:
        mean = self.latent_mean.view(1, -1, 1, 1)
        std = self.latent_std.view(1, -1, 1, 1)
        return (z_raw - mean) / std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        mean = self.latent_mean.view(1, -1, 1, 1)
        std = self.latent_std.view(1, -1, 1, 1)
        return z * std + mean


def _require_trained(codec: AutoEncoder) -> None:
    if not bool(codec.trained):
        raise RuntimeError("codec is untrained; run train_autoencoder first")


def encode_latent(codec: AutoEncoder, image) -> torch.Tensor:
    """Single image (64,64,3) -> standardized latent (16,16,4)."""
    _require_trained(codec)
    t = torch.as_tensor(np.asarray(image), dtype=next(codec.parameters()).dtype)
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    z = codec.normalize(codec.encode_raw(t)).permute(0, 2, 3, 1)
    return z[0] if squeeze else z


def decode_latent(codec: AutoEncoder, z: torch.Tensor) -> torch.Tensor:
    """Standardized latent (16,16,4) -> image (64,64,3) in [0,1]."""
    _require_trained(codec)
    squeeze = z.dim() == 3
    if squeeze:
        z = z.unsqueeze(0)
    img = codec.decode_raw(codec.denormalize(z.permute(0, 3, 1, 2)))
    return img[0] if squeeze else img


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(1.0 / mse))


def train_autoencoder(
    images: torch.Tensor, config: CodecConfig | None = None, holdout: int = 64
) -> tuple[AutoEncoder, dict]:
    """MSE-train the codec; freeze it; report held-out reconstruction PSNR."""
    cfg = config or CodecConfig()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if len(images) < 2000:
        raise ValueError(f"dataset too small: {len(images)} images < 2000")
    torch.manual_seed(cfg.seed)
    codec = AutoEncoder(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(images))
    hold = images[order[:holdout]]
    train = images[order[holdout:]]

    codec.train()
    last = None
    for step in range(cfg.steps):
        idx = rng.choice(len(train), size=cfg.batch_size, replace=False)
        batch = train[idx]
        recon = codec.decode_raw(codec.encode_raw(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())

    codec.eval()
    with torch.no_grad():
        z = codec.encode_raw(train[: min(512, len(train))])
        codec.latent_mean.copy_(z.mean(dim=(0, 2, 3)))
        codec.latent_std.copy_(z.std(dim=(0, 2, 3)).clamp(min=1e-4))
        codec.trained.fill_(True)
        recon = decode_latent(codec, encode_latent(codec, hold))
        holdout_psnr = psnr(recon, hold)
    for p in codec.parameters():
        p.requires_grad_(False)
    metrics = {"final_loss": last, "holdout_psnr": holdout_psnr, "holdout": holdout}
    return codec, metrics


# ---- noise schedule ---------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    alpha_bar: tuple[float, ...]  # cumulative signal coefficients, index t-1
    family: str

    def coeff(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        return self.alpha_bar[t - 1]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "family": self.family}


def make_schedule(steps: int, family: str = "cosine") -> NoiseSchedule:
    if steps < 2:
        raise ValueError("schedule needs at least 2 steps")
    if family == "cosine":
        s = 0.008
        t = np.arange(steps + 1, dtype=np.float64)
        f = np.cos(((t / steps) + s) / (1 + s) * np.pi / 2.0) ** 2
        abar = np.clip(f[1:] / f[0], 1e-6, 1.0)
        abar = np.minimum.accumulate(abar)
    elif family == "linear":
        betas = np.linspace(1e-4, 0.02, steps, dtype=np.float64)
        abar = np.cumprod(1.0 - betas)
    else:
        raise ValueError(f"unknown schedule family {family!r}")
    sched = NoiseSchedule(steps=steps, alpha_bar=tuple(float(a) for a in abar), family=family)
    arr = np.asarray(sched.alpha_bar)
    assert np.all(arr > 0.0) and np.all(arr <= 1.0)
    assert np.all(np.diff(arr) <= 0.0), "alpha_bar must be non-increasing"
    return sched


def add_noise(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    abar = sched.coeff(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def predict_x0(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward noising given a noise estimate."""
    abar = sched.coeff(t)
    if abar <= 0.0:
        raise ValueError("non-invertible step: signal coefficient is zero")
    return (z_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def sampling_steps(sched: NoiseSchedule, n: int) -> list[int]:
    """Uniform-stride decreasing subsequence of schedule steps, ending at 1."""
    n = min(n, sched.steps)
    ts = np.linspace(1, sched.steps, n).round().astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int | None,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic update from step t to t_prev (None means final, t=0)."""
    x0 = predict_x0(z_t, eps_hat, t, sched)
    if t_prev is None:
        return x0
    abar_prev = sched.coeff(t_prev)
    return np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps_hat
