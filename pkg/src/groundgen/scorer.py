"""Frozen dual encoder scoring image/text agreement.

Pretrained once on shapes-world (image, caption) and (patch, local-caption)
pairs with a symmetric in-batch contrastive objective, then frozen. All
alignment and consistency signals downstream read similarities from this
model; nothing ever writes to it again.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocab import get_vocab
from .world import CANVAS


@dataclass
class ScorerConfig:
    embed_dim: int = 64
    text_width: int = 64
    n_text_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 64
    vocab_size: int = 0  # filled from the vocabulary when 0
    batch_size: int = 64
    steps: int = 3500
    lr: float = 2e-3
    lr_final: float = 2e-4
    init_temperature: float = 0.07
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size == 0:
            self.vocab_size = len(get_vocab())

    def to_dict(self) -> dict:
        return asdict(self)


class ImageTower(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
        self.head = nn.Linear(64, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 64, 64, 3) channels-last in [0, 1]
        h = x.permute(0, 3, 1, 2)
        h = F.silu(self.conv1(h))
        h = F.silu(self.conv2(h))
        h = F.silu(self.conv3(h))
        h = h.mean(dim=(2, 3))
        return F.normalize(self.head(h), dim=-1, eps=1e-8)


class TextTower(nn.Module):
    def __init__(self, cfg: ScorerConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos = nn.Embedding(cfg.max_text_len, cfg.text_width)
        layer = nn.TransformerEncoderLayer(
            cfg.text_width,
            cfg.n_heads,
            dim_feedforward=cfg.text_width * 4,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, cfg.n_text_layers, enable_nested_tensor=False
        )
        self.head = nn.Linear(cfg.text_width, cfg.embed_dim)
        self.pad_id = get_vocab().pad_id

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (B, M) right-padded with pad_id
        tokens = tokens[:, : self.pos.num_embeddings]
        mask = tokens == self.pad_id
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        h = self.embed(tokens) + self.pos(positions).unsqueeze(0)
        h = self.encoder(h, src_key_padding_mask=mask)
        keep = (~mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.head(pooled), dim=-1, eps=1e-8)


class Scorer(nn.Module):
    """Image and text towers mapping into one unit-norm embedding space."""

    def __init__(self, config: ScorerConfig | None = None):
        super().__init__()
        self.config = config or ScorerConfig()
        self.image_tower = ImageTower(self.config.embed_dim)
        self.text_tower = TextTower(self.config)
        self.log_temperature = nn.Parameter(
            torch.tensor(float(np.log(self.config.init_temperature)))
        )
        self.frozen = False

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True

    def params_hash(self) -> str:
        from .archive import module_params_hash

        return module_params_hash(self)

    # ---- embedding ops ----------------------------------------------------

    def _to_image_batch(self, image) -> tuple[torch.Tensor, bool]:
        t = torch.as_tensor(np.asarray(image), dtype=self._dtype())
        single = t.dim() == 3
        if single:
            t = t.unsqueeze(0)
        if t.shape[-3:] != (CANVAS, CANVAS, 3):
            raise ValueError(f"expected ({CANVAS},{CANVAS},3) image, got {tuple(t.shape)}")
        return t, single

    def _dtype(self):
        return next(self.parameters()).dtype

    def embed_image(self, image) -> torch.Tensor:
        batch, single = self._to_image_batch(image)
        out = self.image_tower(batch)
        return out[0] if single else out

    def embed_patch(self, image, box) -> torch.Tensor:
        """Crop a half-open pixel rectangle, resize bilinearly, embed."""
        batch, _ = self._to_image_batch(image)
        x0, y0, x1, y1 = (int(v) for v in box)
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(CANVAS, x1), min(CANVAS, y1)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate box {box}")
        crop = batch[:, y0:y1, x0:x1, :].permute(0, 3, 1, 2)
        resized = F.interpolate(
            crop, size=(CANVAS, CANVAS), mode="bilinear", align_corners=False
        )
        out = self.image_tower(resized.permute(0, 2, 3, 1))
        return out[0]

    def embed_text(self, tokens) -> torch.Tensor:
        if isinstance(tokens, (list, tuple)) and tokens and isinstance(tokens[0], str):
            tokens = get_vocab().encode_words(tokens, strict=False)
        t = torch.as_tensor(tokens, dtype=torch.long)
        single = t.dim() == 1
        if single:
            t = t.unsqueeze(0)
        out = self.text_tower(t)
        return out[0] if single else out


def similarity(u: torch.Tensor, v: torch.Tensor) -> float:
    """Cosine similarity of unit vectors (plain dot product)."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    if not (torch.isfinite(u).all() and torch.isfinite(v).all()):
        raise ValueError("non-finite embedding")
    return float((u * v).sum(dim=-1))


def contrastive_loss(
    image_emb: torch.Tensor, text_emb: torch.Tensor, temperature: float | torch.Tensor
) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over unit-norm embeddings."""
    logits = image_emb @ text_emb.T / temperature
    labels = torch.arange(len(image_emb), device=image_emb.device)
    return 0.5 * (
        F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)
    )


def _pad_token_batch(seqs: list[list[int]], pad_id: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def build_pairs(records) -> list[tuple]:
    """Training pairs: (image, global caption) plus (object patch, local caption)."""
    from .captions import ground_truth_caption, object_phrase

    vocab = get_vocab()
    pairs = []
    for idx, rec in enumerate(records):
        cap = ground_truth_caption(rec.spec)
        pairs.append((idx, None, vocab.encode_words(cap.global_text)))
        for obj in rec.spec.objects:
            pairs.append((idx, obj.box, vocab.encode_words(object_phrase(obj))))
    return pairs


def _crop_resize(images: torch.Tensor, boxes: list) -> torch.Tensor:
    out = []
    for img, box in zip(images, boxes):
        if box is None:
            out.append(img)
            continue
        x0, y0, x1, y1 = (int(v) for v in box)
        crop = img[y0:y1, x0:x1, :].permute(2, 0, 1).unsqueeze(0)
        resized = F.interpolate(
            crop, size=(CANVAS, CANVAS), mode="bilinear", align_corners=False
        )
        out.append(resized[0].permute(1, 2, 0))
    return torch.stack(out)


def pretrain_scorer(
    records, config: ScorerConfig | None = None, holdout_fraction: float = 0.1
) -> tuple[Scorer, dict]:
    """Train the dual encoder and freeze it; returns (scorer, metrics).

    Raises ValueError when the dataset yields fewer than 2000 pairs. Retrieval
    top-1 is measured on held-out batches, counting a hit when the retrieved
    item carries the same token sequence (captions can collide across scenes).
    """
    cfg = config or ScorerConfig()
    pairs = build_pairs(records)
    if len(pairs) < 2000:
        raise ValueError(f"dataset too small: {len(pairs)} pairs < 2000")
    torch.manual_seed(cfg.seed)
    scorer = Scorer(cfg)
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.steps), eta_min=cfg.lr_final
    )
    rng = np.random.default_rng(cfg.seed)

    n_hold = max(cfg.batch_size, int(len(pairs) * holdout_fraction))
    order = rng.permutation(len(pairs))
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    images = torch.stack(
        [torch.as_tensor(rec.load_image(), dtype=torch.float32) for rec in records]
    )
    vocab = get_vocab()

    def batch_tensors(idx_list):
        chosen = [pairs[i] for i in idx_list]
        imgs = _crop_resize(
            images[[c[0] for c in chosen]], [c[1] for c in chosen]
        )
        toks = _pad_token_batch([c[2] for c in chosen], vocab.pad_id)
        return imgs, toks

    scorer.train()
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(train_idx), size=cfg.batch_size, replace=False)
        imgs, toks = batch_tensors(train_idx[idx])
        img_emb = scorer.image_tower(imgs)
        txt_emb = scorer.text_tower(toks)
        loss = contrastive_loss(img_emb, txt_emb, scorer.log_temperature.exp())
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        losses.append(float(loss.detach()))

    scorer.freeze()
    hits_i2t, hits_t2i, total = 0, 0, 0
    with torch.no_grad():
        for start in range(0, len(hold_idx) - cfg.batch_size + 1, cfg.batch_size):
            batch = hold_idx[start : start + cfg.batch_size]
            imgs, toks = batch_tensors(batch)
            img_emb = scorer.image_tower(imgs)
            txt_emb = scorer.text_tower(toks)
            sims = img_emb @ txt_emb.T
            keys = [tuple(pairs[i][2]) for i in batch]
            for row in range(len(batch)):
                total += 1
                if keys[int(sims[row].argmax())] == keys[row]:
                    hits_i2t += 1
                if keys[int(sims[:, row].argmax())] == keys[row]:
                    hits_t2i += 1
    metrics = {
        "pairs": len(pairs),
        "final_loss": losses[-1] if losses else None,
        "retrieval_top1_image_to_text": hits_i2t / max(1, total),
        "retrieval_top1_text_to_image": hits_t2i / max(1, total),
        "retrieval_top1": (hits_i2t + hits_t2i) / max(1, 2 * total),
        "holdout_batches": total // cfg.batch_size,
    }
    return scorer, metrics
