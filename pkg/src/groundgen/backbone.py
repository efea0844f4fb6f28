"""Vision-language backbone: encoders, shared-space projections, fusion, decoding.

The generative path is
    images -> encode_image -> project(visual)   \
                                                 fuse -> lm_head -> logits
    tokens -> encode_text  -> project(textual)  /
Visual tokens form a bidirectional prefix; text attends causally, so logits at
position i never depend on tokens after i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import get_vocab


@dataclass
class BackboneConfig:
    d_vision: int = 128
    d_text: int = 128
    d_shared: int = 128
    n_layers: int = 4
    n_fusion_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.0
    patch_size: int = 8
    image_size: int = 64
    max_seq_len: int = 224
    vocab_size: int = field(default_factory=lambda: len(get_vocab()))
    fusion_positions: bool = True

    def __post_init__(self) -> None:
        if self.d_shared % self.n_heads != 0:
            raise ValueError("d_shared must be divisible by n_heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must divide image_size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodeSpec:
    mode: str = "greedy"  # "greedy" | "sample"
    temperature: float = 1.0
    seed: int = 0


class MultiHeadAttention(nn.Module):
    """Standard scaled-dot-product attention that can expose its weights."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None, return_attention=False):
        b, L, d = x.shape
        qkv = self.qkv(x).reshape(b, L, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, L, head_dim)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, L, d)
        out = self.drop(self.out(out))
        return (out, attn) if return_attention else (out, None)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Linear(dim * 4, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x, mask=None, return_attention=False):
        h, attn = self.attn(self.norm1(x), mask, return_attention)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


def causal_mask(length: int, device) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))


def prefix_mask(n_prefix: int, length: int, device) -> torch.Tensor:
    """Bidirectional within the prefix, causal afterwards."""
    mask = causal_mask(length, device)
    mask[:, :n_prefix] = True
    return mask


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_embed = nn.Linear(patch_dim, cfg.d_vision)
        self.vision_pos = nn.Embedding(cfg.n_patches, cfg.d_vision)
        self.vision_blocks = nn.ModuleList(
            TransformerBlock(cfg.d_vision, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.vision_norm = nn.LayerNorm(cfg.d_vision)

        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_text)
        self.text_pos = nn.Embedding(cfg.max_seq_len, cfg.d_text)
        self.text_blocks = nn.ModuleList(
            TransformerBlock(cfg.d_text, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.text_norm = nn.LayerNorm(cfg.d_text)

        self.proj_visual = nn.Linear(cfg.d_vision, cfg.d_shared)
        self.proj_textual = nn.Linear(cfg.d_text, cfg.d_shared)

        self.segment_embed = nn.Embedding(2, cfg.d_shared)  # 0 visual, 1 textual
        self.fusion_pos = nn.Embedding(cfg.max_seq_len + cfg.n_patches, cfg.d_shared)
        self.fusion_blocks = nn.ModuleList(
            TransformerBlock(cfg.d_shared, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_fusion_layers)
        )
        self.fusion_norm = nn.LayerNorm(cfg.d_shared)
        self.lm_head = nn.Linear(cfg.d_shared, cfg.vocab_size)

    # ---- encoders -------------------------------------------------------

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        p = self.config.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 64, 64, 3) in [0,1] -> (B, n_patches, d_vision)."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        s = self.config.image_size
        if images.shape[1:] != (s, s, 3):
            raise ValueError(f"expected image shape ({s},{s},3), got {tuple(images.shape[1:])}")
        x = self.patch_embed(self._patchify(images))
        x = x + self.vision_pos.weight.unsqueeze(0)
        for block in self.vision_blocks:
            x, _ = block(x)
        return self.vision_norm(x)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, M) int token ids -> (B, M, d_text), causal contextualization."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() and int(tokens.max()) >= self.config.vocab_size:
            raise ValueError("token id out of range")
        if int(tokens.min() if tokens.numel() else 0) < 0:
            raise ValueError("token id out of range")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError("sequence longer than max_seq_len")
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.token_embed(tokens) + self.text_pos(positions).unsqueeze(0)
        mask = causal_mask(tokens.shape[1], tokens.device)
        for block in self.text_blocks:
            x, _ = block(x, mask)
        return self.text_norm(x)

    def project(self, seq: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "visual":
            expected, proj = self.config.d_vision, self.proj_visual
        elif modality == "textual":
            expected, proj = self.config.d_text, self.proj_textual
        else:
            raise ValueError(f"unknown modality {modality!r}")
        if seq.shape[-1] != expected:
            raise ValueError(
                f"modality mismatch: {modality} expects width {expected}, got {seq.shape[-1]}"
            )
        return proj(seq)

    def fuse(
        self,
        visual: torch.Tensor | None,
        textual: torch.Tensor,
        return_attention: bool = False,
        use_positions: bool | None = None,
    ):
        """Prefix-style self-attention over [visual; textual] shared-space tokens.

        Returns (fused, attentions) where attentions is a list of per-layer
        (B, heads, L, L) tensors when requested, else None.
        """
        if textual.dim() == 2:
            textual = textual.unsqueeze(0)
        if visual is not None and visual.dim() == 2:
            visual = visual.unsqueeze(0)
        d = self.config.d_shared
        if textual.shape[-1] != d or (visual is not None and visual.shape[-1] != d):
            raise ValueError("fuse expects shared-space width on both inputs")
        n_vis = 0 if visual is None else visual.shape[1]
        parts = [] if visual is None else [visual + self.segment_embed.weight[0]]
        parts.append(textual + self.segment_embed.weight[1])
        x = torch.cat(parts, dim=1)
        if use_positions is None:
            use_positions = self.config.fusion_positions
        if use_positions:
            positions = torch.arange(x.shape[1], device=x.device)
            x = x + self.fusion_pos(positions).unsqueeze(0)
        mask = prefix_mask(n_vis, x.shape[1], x.device)
        attentions = [] if return_attention else None
        for block in self.fusion_blocks:
            x, attn = block(x, mask, return_attention)
            if return_attention:
                attentions.append(attn)
        return self.fusion_norm(x), attentions

    # ---- language modeling ----------------------------------------------

    def forward_tokens(
        self, images: torch.Tensor | None, tokens: torch.Tensor
    ) -> torch.Tensor:
        """Next-token logits (B, M, vocab) at every text position."""
        visual = None
        if images is not None:
            visual = self.project(self.encode_image(images), "visual")
        textual = self.project(self.encode_text(tokens), "textual")
        fused, _ = self.fuse(visual, textual)
        n_vis = 0 if visual is None else visual.shape[1]
        return self.lm_head(fused[:, n_vis:])

    def sequence_logprobs(
        self,
        images: torch.Tensor | None,
        tokens: torch.Tensor,
        loss_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Sum of log p(token_i | prefix) over positions where loss_mask is set.

        loss_mask marks target positions: position i masks token[:, i],
        predicted from logits at i-1.
        """
        logits = self.forward_tokens(images, tokens)
        logp = F.log_softmax(logits[:, :-1], dim=-1)
        target = tokens[:, 1:]
        gathered = logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
        return (gathered * loss_mask[:, 1:]).sum(dim=1)

    @torch.no_grad()
    def generate(
        self,
        images: torch.Tensor | None,
        prompts: list[list[int]],
        decode: DecodeSpec,
        max_len: int = 128,
    ) -> list[list[int]]:
        """Autoregressive continuation of each prompt; returns new tokens only.

        Stops a row at eos or END. Greedy decoding (or temperature 0) is
        deterministic; sampling is driven by a dedicated generator seeded
        from decode.seed.
        """
        vocab = get_vocab()
        cfg = self.config
        b = len(prompts)
        lengths = [len(p) for p in prompts]
        if max(lengths) + max_len > cfg.max_seq_len:
            raise ValueError("prompt + max_len exceeds max_seq_len")
        device = next(self.parameters()).device
        buf = torch.full(
            (b, max(lengths) + max_len), vocab.pad_id, dtype=torch.long, device=device
        )
        for i, p in enumerate(prompts):
            buf[i, : len(p)] = torch.tensor(p, dtype=torch.long, device=device)
        frontier = torch.tensor(lengths, device=device)
        done = torch.zeros(b, dtype=torch.bool, device=device)
        generated: list[list[int]] = [[] for _ in range(b)]
        greedy = decode.mode == "greedy" or decode.temperature <= 0.0
        gen = None
        if not greedy:
            gen = torch.Generator(device="cpu")
            gen.manual_seed(decode.seed)

        visual = None
        if images is not None:
            visual = self.project(self.encode_image(images), "visual")

        stop_ids = (vocab.eos_id, vocab.end_id)
        for _ in range(max_len):
            if bool(done.all()):
                break
            cur_len = int(frontier.max())
            textual = self.project(self.encode_text(buf[:, :cur_len]), "textual")
            fused, _ = self.fuse(visual, textual)
            n_vis = 0 if visual is None else visual.shape[1]
            logits = self.lm_head(fused[:, n_vis:])
            last = logits[torch.arange(b, device=device), frontier - 1]
            if greedy:
                nxt = last.argmax(dim=-1)
            else:
                probs = (last / decode.temperature).softmax(dim=-1)
                nxt = torch.multinomial(probs.cpu(), 1, generator=gen).squeeze(1).to(device)
            for i in range(b):
                if done[i]:
                    continue
                tok = int(nxt[i])
                buf[i, frontier[i]] = tok
                generated[i].append(tok)
                if tok in stop_ids:
                    done[i] = True
            frontier = frontier + (~done).long()
        return generated

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


def make_caption_prompt(vocab=None) -> list[int]:
    vocab = vocab or get_vocab()
    return [vocab.bos_id, vocab.caption_task_id]


def make_plan_prompt(prompt_word_ids: list[int], vocab=None) -> list[int]:
    vocab = vocab or get_vocab()
    return [vocab.bos_id, vocab.plan_task_id, *prompt_word_ids]
