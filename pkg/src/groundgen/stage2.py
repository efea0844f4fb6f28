"""Stage 2: compositional planning, conditioned diffusion, and sampling.

Before generating pixels, the stage-1-trained language model decomposes the
prompt into sub-prompts (greedy decode, plan grammar). Prompt and sub-prompt
encodings are projected into the shared space, tagged by segment, concatenated,
and adapted to the denoiser's conditioning width. Training mixes the denoising
MSE with a consistency term that decodes the one-step clean-latent estimate to
pixels and scores it against each sub-prompt with the frozen dual encoder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import captions as C
from .archive import module_params_hash
from .backbone import Backbone, DecodeSpec, make_plan_prompt
from .codec import (
    AutoEncoder,
    NoiseSchedule,
    ddim_step,
    decode_latent,
    encode_latent,
    make_schedule,
    predict_x0,
    sampling_steps,
)
from .scorer import Scorer, similarity
from .unet import ConditionalUNet, UNetConfig
from .vocab import get_vocab

MAX_SUBPROMPTS = C.MAX_SUBPROMPTS


@dataclass
class Stage2Config:
    consistency_weight: float = 0.5
    condition_dropout: float = 0.0
    schedule_steps: int = 400
    schedule_family: str = "cosine"
    sampler_steps: int = 50
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    use_planning: bool = True
    max_plan_len: int = 72
    cond_cap: int = 96
    consistency_every: int = 1
    train_backbone_body: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.consistency_weight < 0:
            raise ValueError("consistency weight must be >= 0")
        if not 0.0 <= self.condition_dropout < 1.0:
            raise ValueError("condition dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SubPromptPlan:
    subs: tuple[tuple[str, ...], ...]
    source_prompt: tuple[str, ...]
    fallback: bool = False

    def __post_init__(self) -> None:
        if not self.subs:
            raise ValueError("a plan must carry at least one sub-prompt")
        if any(not s for s in self.subs):
            raise ValueError("empty sub-prompt")


@dataclass
class ConditioningBundle:
    embeddings: torch.Tensor  # (L, cond_dim)
    segment_tags: tuple[str, ...]  # per token: "main" | "plan" | "null"
    segment_lengths: tuple[int, ...]  # main first, then one entry per sub-prompt
    dropped: bool = False
    truncated: bool = False

    def __post_init__(self) -> None:
        if len(self.segment_tags) != self.embeddings.shape[0]:
            raise ValueError("segment tags must cover the sequence")


class GenerationModel(nn.Module):
    """Denoiser plus the conditioning pathway on top of a frozen backbone.

    The conditioning projection starts as a copy of the backbone's textual
    head and trains independently, so stage-2 updates never drift the
    discrete planner that shares the backbone's own weights.
    """

    def __init__(self, backbone: Backbone, unet_config: UNetConfig | None = None):
        super().__init__()
        self.backbone = backbone
        cfg = backbone.config
        self.unet = ConditionalUNet(unet_config or UNetConfig(cond_dim=cfg.d_shared))
        self.cond_proj = nn.Linear(cfg.d_text, cfg.d_shared)
        self.cond_proj.load_state_dict(backbone.proj_textual.state_dict())
        self.cond_segment = nn.Embedding(2, cfg.d_shared)  # 0 main, 1 plan
        self.adapter = nn.Linear(cfg.d_shared, self.unet.config.cond_dim)
        self.null_cond = nn.Parameter(torch.zeros(1, self.unet.config.cond_dim))
        nn.init.normal_(self.null_cond, std=0.02)
        self.register_buffer("trained", torch.tensor(False))

    def trainable_modules(self, include_body: bool) -> dict[str, bool]:
        return {
            "unet": True,
            "adapter": True,
            "cond_proj": True,
            "cond_segment": True,
            "null_cond": True,
            "backbone_body": include_body,
        }

    def trainable_parameters(self, include_body: bool = False):
        params = [
            *self.unet.parameters(),
            *self.cond_proj.parameters(),
            *self.cond_segment.parameters(),
            *self.adapter.parameters(),
            self.null_cond,
        ]
        if include_body:
            params += list(self.backbone.parameters())
        return params


def _segment_ids(words, vocab) -> list[int]:
    return [vocab.bos_id, *vocab.encode_words(words, strict=False), vocab.eos_id]


def plan_subprompts_batch(
    model: Backbone, prompts, decode: DecodeSpec, max_len: int = 72
) -> list[SubPromptPlan]:
    """Decompose prompts into sub-prompts; falls back to the whole prompt."""
    vocab = get_vocab()
    prompts = [tuple(p) for p in prompts]
    rows = [
        make_plan_prompt(vocab.encode_words(p, strict=False), vocab) for p in prompts
    ]
    outs = model.generate(None, rows, decode, max_len=max_len)
    plans = []
    for prompt_words, ids in zip(prompts, outs):
        words = vocab.ids_to_words(ids, strip_special=True)
        subs = C.parse_plan(words, lenient=True)
        if not subs:
            plans.append(
                SubPromptPlan(subs=(prompt_words,), source_prompt=prompt_words, fallback=True)
            )
        else:
            plans.append(SubPromptPlan(subs=subs, source_prompt=prompt_words))
    return plans


def plan_subprompts(
    model: Backbone, prompt_words, decode: DecodeSpec, max_len: int = 72
) -> SubPromptPlan:
    return plan_subprompts_batch(model, [prompt_words], decode, max_len)[0]


def encode_text_segments(
    backbone: Backbone, segments: list[list[int]], frozen_body: bool = True
) -> list[torch.Tensor]:
    """Run the language model over each token segment; returns (L_i, d_text)."""
    outs = []
    ctx = torch.no_grad() if frozen_body else torch.enable_grad()
    with ctx:
        for ids in segments:
            t = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
            outs.append(backbone.encode_text(t)[0])
    return outs


def assemble_bundle(
    gen: GenerationModel,
    main_enc: torch.Tensor,
    sub_encs: list[torch.Tensor],
    cond_cap: int,
    drop: bool = False,
) -> ConditioningBundle:
    """Project segments to shared space, tag, concatenate, adapt."""
    if drop:
        return ConditioningBundle(
            embeddings=gen.null_cond,
            segment_tags=("null",),
            segment_lengths=(1,),
            dropped=True,
        )
    parts = [gen.cond_proj(main_enc) + gen.cond_segment.weight[0]]
    tags = ["main"] * main_enc.shape[0]
    lengths = [main_enc.shape[0]]
    for enc in sub_encs:
        parts.append(gen.cond_proj(enc) + gen.cond_segment.weight[1])
        tags += ["plan"] * enc.shape[0]
        lengths.append(enc.shape[0])
    combined = torch.cat(parts, dim=0)
    truncated = False
    if combined.shape[0] > cond_cap:
        combined = combined[:cond_cap]
        tags = tags[:cond_cap]
        truncated = True
    return ConditioningBundle(
        embeddings=gen.adapter(combined),
        segment_tags=tuple(tags),
        segment_lengths=tuple(lengths),
        truncated=truncated,
    )


def embed_conditions(
    gen: GenerationModel,
    prompt_words,
    plan: SubPromptPlan | None,
    drop: bool = False,
    cond_cap: int | None = None,
) -> ConditioningBundle:
    """Spec-level conditioning op for a single prompt/plan pair."""
    vocab = get_vocab()
    cap = cond_cap if cond_cap is not None else Stage2Config().cond_cap
    segments = [_segment_ids(tuple(prompt_words), vocab)]
    if plan is not None:
        segments += [_segment_ids(s, vocab) for s in plan.subs]
    encs = encode_text_segments(gen.backbone, segments)
    return assemble_bundle(gen, encs[0], encs[1:], cap, drop=drop)


def _pad_bundles(bundles: list[ConditioningBundle]):
    width = max(b.embeddings.shape[0] for b in bundles)
    dim = bundles[0].embeddings.shape[1]
    dtype = bundles[0].embeddings.dtype
    mask = torch.zeros(len(bundles), width, dtype=torch.bool)
    rows = []
    for i, b in enumerate(bundles):
        L = b.embeddings.shape[0]
        mask[i, :L] = True
        rows.append(
            torch.cat([b.embeddings, torch.zeros(width - L, dim, dtype=dtype)], dim=0)
        )
    return torch.stack(rows), mask


def predict_noise(
    gen: GenerationModel, z_t: torch.Tensor, t: int, bundle: ConditioningBundle
) -> torch.Tensor:
    """Denoiser output for one latent (16,16,4) at schedule step t."""
    z = z_t.permute(2, 0, 1).unsqueeze(0)
    cond = bundle.embeddings.unsqueeze(0)
    t_vec = torch.full((1,), float(t), dtype=z.dtype)
    out = gen.unet(z, t_vec, cond)
    if out.shape != z.shape:
        raise RuntimeError("denoiser output shape mismatch")
    return out[0].permute(1, 2, 0)


def batch_add_noise(z0, t_idx, eps, sched: NoiseSchedule):
    abar = torch.tensor(
        [sched.coeff(int(t)) for t in t_idx], dtype=z0.dtype
    ).view(-1, 1, 1, 1)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def batch_predict_x0(z_t, eps_hat, t_idx, sched: NoiseSchedule):
    abar = torch.tensor(
        [sched.coeff(int(t)) for t in t_idx], dtype=z_t.dtype
    ).view(-1, 1, 1, 1)
    return (z_t - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()


def loss_denoise(
    gen: GenerationModel,
    z0: torch.Tensor,
    bundles: list[ConditioningBundle],
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> tuple[torch.Tensor, dict]:
    """Mean squared noise-prediction error over a batch of clean latents.

    z0: (B, C, 16, 16) channels-first standardized latents.
    Returns (loss, aux) with the drawn steps, noise, prediction, and noisy
    latents so callers can recompute or reuse them.
    """
    b = z0.shape[0]
    t_idx = torch.randint(1, sched.steps + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = batch_add_noise(z0, t_idx, eps, sched)
    cond, mask = _pad_bundles(bundles)
    eps_hat = gen.unet(z_t, t_idx.to(z0.dtype), cond, mask)
    loss = ((eps - eps_hat) ** 2).mean()
    aux = {"t": t_idx, "eps": eps, "eps_hat": eps_hat, "z_t": z_t}
    return loss, aux


def loss_consistency(plan: SubPromptPlan, image, scorer: Scorer) -> float:
    """Mean negative sub-prompt/image similarity for a finished image."""
    if not plan.subs:
        raise ValueError("empty plan")
    img_emb = scorer.embed_image(image)
    sims = [similarity(scorer.embed_text(list(s)), img_emb) for s in plan.subs]
    return -float(np.mean(sims))


def batch_consistency(
    images: torch.Tensor, text_embs: list[torch.Tensor], scorer: Scorer
) -> torch.Tensor:
    """Differentiable consistency over a batch; text embeddings precomputed.

    images: (B, 64, 64, 3) with gradients intact; text_embs[i]: (K_i, D).
    """
    img_emb = scorer.image_tower(images)
    losses = []
    for i, txt in enumerate(text_embs):
        sims = txt.to(img_emb.dtype) @ img_emb[i]
        losses.append(-sims.mean())
    return torch.stack(losses).mean()


def stage2_loss(ld, lc, config: Stage2Config):
    return ld + config.consistency_weight * lc


def stage2_step(
    gen: GenerationModel,
    opt,
    scorer: Scorer,
    codec: AutoEncoder,
    z0: torch.Tensor,
    bundles: list[ConditioningBundle],
    plans_text_embs: list[torch.Tensor],
    sched: NoiseSchedule,
    config: Stage2Config,
    generator: torch.Generator,
    compute_consistency: bool = True,
) -> dict:
    """One optimizer update on the combined stage-2 objective."""
    ld, aux = loss_denoise(gen, z0, bundles, sched, generator)
    lc = None
    if compute_consistency:
        grad_ctx = torch.enable_grad() if config.consistency_weight > 0 else torch.no_grad()
        with grad_ctx:
            x0_hat = batch_predict_x0(aux["z_t"], aux["eps_hat"], aux["t"], sched)
            decoded = codec.decode_raw(codec.denormalize(x0_hat))
            lc = batch_consistency(decoded, plans_text_embs, scorer)
    if lc is not None and config.consistency_weight > 0:
        total = stage2_loss(ld, lc, config)
    else:
        total = ld
    record = {
        "loss_denoise": float(ld.detach()),
        "loss_consistency": None if lc is None else float(lc.detach()),
        "loss_total": float(total.detach()),
        "nan_step": False,
    }
    if not torch.isfinite(total):
        opt.zero_grad()
        record["nan_step"] = True
        return record
    opt.zero_grad()
    total.backward()
    opt.step()
    return record


def _prompt_words(record) -> tuple[str, ...]:
    return C.ground_truth_caption(record.spec).global_text


def plan_for_training(
    backbone: Backbone, prompt_words, config: Stage2Config, cache: dict
) -> SubPromptPlan:
    key = tuple(prompt_words)
    if key not in cache:
        if config.use_planning:
            cache[key] = plan_subprompts(
                backbone, key, DecodeSpec(mode="greedy"), config.max_plan_len
            )
        else:
            cache[key] = SubPromptPlan(subs=(key,), source_prompt=key, fallback=True)
    return cache[key]


def train_stage2(
    backbone: Backbone,
    scorer: Scorer,
    codec: AutoEncoder,
    records,
    config: Stage2Config,
    metrics_path: Path | None = None,
    log_every: int = 25,
) -> tuple[GenerationModel, dict]:
    """Train the denoiser stack on (image, prompt) pairs from the dataset."""
    torch.manual_seed(config.seed)
    gen = GenerationModel(backbone)
    sched = make_schedule(config.schedule_steps, config.schedule_family)
    scorer_hash = scorer.params_hash()
    codec_hash = module_params_hash(codec)
    vocab = get_vocab()

    for p in backbone.parameters():
        p.requires_grad_(config.train_backbone_body)
    opt = torch.optim.Adam(
        gen.trainable_parameters(config.train_backbone_body), lr=config.lr
    )

    # Frozen-component caches: latents, plan token sequences, language-model
    # encodings of every conditioning segment, scorer text embeddings.
    images = torch.stack(
        [torch.as_tensor(r.load_image(), dtype=torch.float32) for r in records]
    )
    with torch.no_grad():
        z0_all = codec.normalize(codec.encode_raw(images))
    plan_cache: dict = {}
    enc_cache: list[dict] = []
    for rec in records:
        prompt = _prompt_words(rec)
        plan = plan_for_training(backbone, prompt, config, plan_cache)
        segs = [_segment_ids(prompt, vocab)]
        if config.use_planning:
            segs += [_segment_ids(s, vocab) for s in plan.subs]
        encs = encode_text_segments(backbone, segs, frozen_body=True)
        with torch.no_grad():
            txt = torch.stack([scorer.embed_text(list(s)) for s in plan.subs])
        enc_cache.append({"main": encs[0], "subs": encs[1:], "text_embs": txt})

    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator(device="cpu")
    noise_gen.manual_seed(config.seed)
    lines = []
    for step in range(config.steps):
        idx = rng.choice(len(records), size=min(config.batch_size, len(records)), replace=False)
        bundles = []
        text_embs = []
        for i in idx:
            drop = False
            if config.condition_dropout > 0:
                drop = bool(
                    torch.rand(1, generator=noise_gen).item() < config.condition_dropout
                )
            bundles.append(
                assemble_bundle(
                    gen, enc_cache[i]["main"], enc_cache[i]["subs"],
                    config.cond_cap, drop=drop,
                )
            )
            text_embs.append(enc_cache[i]["text_embs"])
        record = stage2_step(
            gen, opt, scorer, codec, z0_all[idx], bundles, text_embs, sched,
            config, noise_gen,
            compute_consistency=(step % max(1, config.consistency_every) == 0),
        )
        record["step"] = step
        if step % log_every == 0 or step == config.steps - 1:
            lines.append(json.dumps(record, sort_keys=True))

    if scorer.params_hash() != scorer_hash:
        raise RuntimeError("frozen scorer changed during stage-2 training")
    if module_params_hash(codec) != codec_hash:
        raise RuntimeError("frozen codec changed during stage-2 training")
    gen.trained.fill_(True)
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    summary = {
        "steps": config.steps,
        "schedule": sched.to_dict(),
        "trainable": gen.trainable_modules(config.train_backbone_body),
        "metrics_lines": lines,
    }
    return gen, summary


@torch.no_grad()
def sample_image(
    gen: GenerationModel,
    codec: AutoEncoder,
    prompt_words,
    config: Stage2Config,
    seed: int,
    steps: int | None = None,
    guidance: float = 1.0,
) -> tuple[np.ndarray, SubPromptPlan]:
    """Plan, condition, denoise from pure noise, decode. Deterministic in seed."""
    imgs, plans = sample_images(
        gen, codec, prompt_words, config, seeds=[seed], steps=steps, guidance=guidance
    )
    return imgs[0], plans[0]


@torch.no_grad()
def sample_images(
    gen: GenerationModel,
    codec: AutoEncoder,
    prompt_words,
    config: Stage2Config,
    seeds: list[int],
    steps: int | None = None,
    guidance: float = 1.0,
    plan: SubPromptPlan | None = None,
) -> tuple[list[np.ndarray], list[SubPromptPlan]]:
    """Batch of candidates for one prompt, one per seed (shared greedy plan)."""
    if not bool(gen.trained):
        raise RuntimeError("generation model is untrained; run train_stage2 first")
    prompt_words = tuple(prompt_words)
    if plan is None:
        if config.use_planning:
            plan = plan_subprompts(
                gen.backbone, prompt_words, DecodeSpec(mode="greedy"), config.max_plan_len
            )
        else:
            plan = SubPromptPlan(subs=(prompt_words,), source_prompt=prompt_words, fallback=True)
    bundle = embed_conditions(
        gen, prompt_words, plan if config.use_planning else None,
        drop=False, cond_cap=config.cond_cap,
    )
    sched = make_schedule(config.schedule_steps, config.schedule_family)
    n_steps = steps if steps is not None else config.sampler_steps
    ts = sampling_steps(sched, n_steps)

    b = len(seeds)
    lat_shape = (b, gen.unet.config.in_channels, 16, 16)
    z_rows = []
    for s in seeds:
        g = torch.Generator(device="cpu")
        g.manual_seed(int(s))
        z_rows.append(torch.randn(lat_shape[1:], generator=g))
    z = torch.stack(z_rows)
    cond = bundle.embeddings.unsqueeze(0).expand(b, -1, -1)
    null = gen.null_cond.unsqueeze(0).expand(b, -1, -1)
    for i, t in enumerate(ts):
        t_vec = torch.full((b,), float(t), dtype=z.dtype)
        eps = gen.unet(z, t_vec, cond)
        if guidance != 1.0:
            eps_null = gen.unet(z, t_vec, null)
            eps = eps_null + guidance * (eps - eps_null)
        t_prev = ts[i + 1] if i + 1 < len(ts) else None
        z = ddim_step(z, eps, t, t_prev, sched)
    imgs = codec.decode_raw(codec.denormalize(z))
    out = [imgs[i].numpy().astype(np.float32) for i in range(b)]
    return out, [plan] * b
