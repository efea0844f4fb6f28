"""Stage 1: multi-granularity grounding through self-captioning.

Warm-up teacher-forces ground-truth captions (and plan grammar) so outputs
parse; the self-supervised phase then samples captions, scores them with the
frozen dual encoder, and updates the backbone by self-critical policy
gradient with the greedy caption's reward as baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import captions as C
from .backbone import Backbone, DecodeSpec, make_caption_prompt, make_plan_prompt
from .scorer import Scorer, similarity
from .vocab import get_vocab


@dataclass
class Stage1Config:
    weight_global: float = 1.0
    weight_local: float = 1.0
    malformed_penalty: float = 0.5
    samples_per_image: int = 4
    warmup_steps: int = 900
    warmup_batch: int = 16
    warmup_lr: float = 3e-4
    rl_steps: int = 500
    rl_batch: int = 6
    rl_lr: float = 2e-5
    max_caption_len: int = 120
    probe_scenes: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.weight_global < 0 or self.weight_local < 0:
            raise ValueError("loss weights must be non-negative")
        if self.weight_global == 0 and self.weight_local == 0:
            raise ValueError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stage1Metrics:
    phase: str
    step: int
    loss_global: float | None = None
    loss_local: float | None = None
    stage1_loss: float | None = None
    mean_reward: float | None = None
    parse_rate: float | None = None
    warmup_ce: float | None = None
    nan_step: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def self_caption(
    model: Backbone, images: torch.Tensor, decode: DecodeSpec, max_len: int = 120
) -> list[tuple[C.HierarchicalCaption, list[int]]]:
    """Generate captions for a batch of images; lenient parse absorbs damage."""
    vocab = get_vocab()
    if images.dim() == 3:
        images = images.unsqueeze(0)
    prompts = [make_caption_prompt(vocab) for _ in range(len(images))]
    outs = model.generate(images, prompts, decode, max_len=max_len)
    results = []
    for ids in outs:
        words = vocab.ids_to_words(ids, strip_special=True)
        results.append((C.parse_caption(words, lenient=True), ids))
    return results


def loss_global(scorer: Scorer, global_words, image) -> float:
    """Negative cosine similarity between caption and image embeddings."""
    if not global_words:
        raise ValueError("empty global caption")
    return -similarity(scorer.embed_text(list(global_words)), scorer.embed_image(image))


def loss_local(scorer: Scorer, objects, image) -> tuple[float, dict]:
    """Mean negative text/patch similarity over valid boxes.

    Returns (value, info) where info counts skipped degenerate boxes and
    flags the no-objects case (defined as 0 so the combined loss stays finite).
    """
    sims = []
    skipped = 0
    for obj in objects:
        box = C.dequantize_box(obj.box)
        try:
            patch_emb = scorer.embed_patch(image, box)
        except ValueError:
            skipped += 1
            continue
        if not obj.text:
            skipped += 1
            continue
        sims.append(similarity(scorer.embed_text(list(obj.text)), patch_emb))
    if not sims:
        return 0.0, {"skipped": skipped, "no_objects": True}
    return -float(np.mean(sims)), {"skipped": skipped, "no_objects": False}


def stage1_loss(lg: float, ll: float, config: Stage1Config) -> float:
    return config.weight_global * lg + config.weight_local * ll


def caption_reward(
    scorer: Scorer, cap: C.HierarchicalCaption, image, config: Stage1Config
) -> tuple[float, dict]:
    """reward = -(weighted alignment loss) - penalty if not well formed.

    An empty global caption takes the worst-case global loss (+1) so the
    reward stays inside its documented bounds.
    """
    if cap.global_text:
        lg = loss_global(scorer, cap.global_text, image)
    else:
        lg = 1.0
    ll, info = loss_local(scorer, cap.objects, image)
    total = stage1_loss(lg, ll, config)
    reward = -total
    if not cap.well_formed:
        reward -= config.malformed_penalty
    return reward, {"loss_global": lg, "loss_local": ll, "stage1_loss": total, **info}


def _pad_rows(rows: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r) for r in rows)
    toks = torch.full((len(rows), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.float32)
    return toks, mask


def build_teacher_rows(
    prompts: list[list[int]], targets: list[list[int]], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded [prompt + target] rows plus a mask over target positions."""
    rows = [p + t for p, t in zip(prompts, targets)]
    toks, mask = _pad_rows(rows, pad_id)
    for i, (p, t) in enumerate(zip(prompts, targets)):
        toks[i, : len(p) + len(t)] = torch.tensor(p + t, dtype=torch.long)
        mask[i, len(p) : len(p) + len(t)] = 1.0
    return toks, mask


def teacher_forced_ce(
    model: Backbone,
    images: torch.Tensor | None,
    tokens: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Mean cross-entropy (nats/token) over masked target positions."""
    logits = model.forward_tokens(images, tokens)
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    target = tokens[:, 1:]
    gathered = logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    m = mask[:, 1:]
    return -(gathered * m).sum() / m.sum().clamp(min=1.0)


def caption_target_ids(spec, vocab) -> list[int]:
    words = C.serialize_caption(C.ground_truth_caption(spec))
    return [*vocab.encode_words(words), vocab.eos_id]


def plan_rows(spec, vocab) -> tuple[list[int], list[int]]:
    prompt_words = C.ground_truth_caption(spec).global_text
    prompt = make_plan_prompt(vocab.encode_words(prompt_words), vocab)
    target = [*vocab.encode_words(C.serialize_plan(C.ground_truth_plan(spec))), vocab.eos_id]
    return prompt, target


def warmup_step(
    model: Backbone, opt, images: torch.Tensor, specs, config: Stage1Config
) -> float:
    """One teacher-forced step over caption and plan grammars; returns CE."""
    vocab = get_vocab()
    cap_prompts = [make_caption_prompt(vocab) for _ in specs]
    cap_targets = [caption_target_ids(s, vocab) for s in specs]
    toks, mask = build_teacher_rows(cap_prompts, cap_targets, vocab.pad_id)
    ce_caption = teacher_forced_ce(model, images, toks, mask)

    plan_pairs = [plan_rows(s, vocab) for s in specs]
    ptoks, pmask = build_teacher_rows(
        [p for p, _ in plan_pairs], [t for _, t in plan_pairs], vocab.pad_id
    )
    ce_plan = teacher_forced_ce(model, None, ptoks, pmask)

    loss = ce_caption + ce_plan
    if not torch.isfinite(loss):
        opt.zero_grad()
        return float("nan")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(ce_caption.detach())


def stage1_step(
    model: Backbone,
    opt,
    scorer: Scorer,
    images: torch.Tensor,
    config: Stage1Config,
    step_seed: int,
) -> Stage1Metrics:
    """One self-critical policy-gradient step over a batch of images."""
    vocab = get_vocab()
    b = len(images)
    n = config.samples_per_image

    greedy = self_caption(model, images, DecodeSpec(mode="greedy"), config.max_caption_len)
    baselines = []
    parse_ok = 0
    lg_sum, ll_sum, s1_sum = 0.0, 0.0, 0.0
    with torch.no_grad():
        for (cap, _), image in zip(greedy, images):
            r, parts = caption_reward(scorer, cap, image, config)
            baselines.append(r)
            parse_ok += int(cap.well_formed)
            lg_sum += parts["loss_global"]
            ll_sum += parts["loss_local"]
            s1_sum += parts["stage1_loss"]

    rep_images = images.repeat_interleave(n, dim=0)
    sampled = self_caption(
        model,
        rep_images,
        DecodeSpec(mode="sample", temperature=1.0, seed=step_seed),
        config.max_caption_len,
    )
    rewards = []
    with torch.no_grad():
        for (cap, _), image in zip(sampled, rep_images):
            r, _ = caption_reward(scorer, cap, image, config)
            rewards.append(r)
    advantages = torch.tensor(
        [rewards[i * n + j] - baselines[i] for i in range(b) for j in range(n)],
        dtype=torch.float32,
    )

    prompts = [make_caption_prompt(vocab) for _ in range(b * n)]
    continuations = [ids for _, ids in sampled]
    toks, mask = build_teacher_rows(prompts, continuations, vocab.pad_id)
    logp = model.sequence_logprobs(rep_images, toks, mask)
    lengths = mask.sum(dim=1).clamp(min=1.0)
    pg_loss = -(advantages * logp / lengths).mean()

    metrics = Stage1Metrics(
        phase="rl",
        step=0,
        loss_global=lg_sum / b,
        loss_local=ll_sum / b,
        stage1_loss=s1_sum / b,
        mean_reward=float(np.mean(rewards)),
        parse_rate=parse_ok / b,
    )
    if not torch.isfinite(pg_loss):
        opt.zero_grad()
        metrics.nan_step = True
        return metrics
    opt.zero_grad()
    pg_loss.backward()
    opt.step()
    return metrics


def probe_mean_reward(
    model: Backbone, scorer: Scorer, scenes, images: torch.Tensor, config: Stage1Config
) -> float:
    """Mean greedy-caption reward over a fixed probe set."""
    total = 0.0
    bs = 16
    for start in range(0, len(images), bs):
        chunk = images[start : start + bs]
        outs = self_caption(model, chunk, DecodeSpec(mode="greedy"), config.max_caption_len)
        with torch.no_grad():
            for (cap, _), image in zip(outs, chunk):
                r, _ = caption_reward(scorer, cap, image, config)
                total += r
    return total / len(images)


def strict_parse_rate(model: Backbone, images: torch.Tensor, max_len: int = 120) -> float:
    vocab = get_vocab()
    ok = 0
    bs = 16
    for start in range(0, len(images), bs):
        chunk = images[start : start + bs]
        outs = self_caption(model, chunk, DecodeSpec(mode="greedy"), max_len)
        for cap, ids in outs:
            words = vocab.ids_to_words(ids, strip_special=True)
            try:
                C.parse_caption(words, lenient=False)
                ok += 1
            except C.CaptionParseError:
                pass
    return ok / len(images)


def train_stage1(
    model: Backbone,
    scorer: Scorer,
    records,
    config: Stage1Config,
    metrics_path: Path | None = None,
    probe_images: torch.Tensor | None = None,
    log_every: int = 25,
) -> dict:
    """Run warm-up then the self-supervised phase; returns a summary dict.

    The summary carries the post-warm-up backbone snapshot (state dict) so the
    caller can persist the warm-up-only checkpoint for the grounding ablation.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    images = torch.stack(
        [torch.as_tensor(r.load_image(), dtype=torch.float32) for r in records]
    )
    specs = [r.spec for r in records]
    scorer_hash_before = scorer.params_hash()
    lines: list[str] = []

    opt = torch.optim.Adam(model.parameters(), lr=config.warmup_lr)
    for step in range(config.warmup_steps):
        idx = rng.choice(len(records), size=min(config.warmup_batch, len(records)), replace=False)
        ce = warmup_step(model, opt, images[idx], [specs[i] for i in idx], config)
        if step % log_every == 0 or step == config.warmup_steps - 1:
            lines.append(
                Stage1Metrics(
                    phase="warmup", step=step, warmup_ce=ce, nan_step=not np.isfinite(ce)
                ).to_json()
            )

    warmup_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if probe_images is None:
        probe_images = images[: min(config.probe_scenes, len(images))]
    baseline_reward = probe_mean_reward(model, scorer, specs, probe_images, config)

    opt = torch.optim.Adam(model.parameters(), lr=config.rl_lr)
    for step in range(config.rl_steps):
        idx = rng.choice(len(records), size=min(config.rl_batch, len(records)), replace=False)
        m = stage1_step(
            model, opt, scorer, images[idx], config,
            step_seed=int(config.seed * 1_000_003 + step),
        )
        m.step = step
        if step % max(1, log_every // 5) == 0 or step == config.rl_steps - 1:
            lines.append(m.to_json())

    final_reward = probe_mean_reward(model, scorer, specs, probe_images, config)
    if scorer.params_hash() != scorer_hash_before:
        raise RuntimeError("frozen scorer changed during stage-1 training")
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    return {
        "warmup_state": warmup_state,
        "baseline_reward": baseline_reward,
        "final_reward": final_reward,
        "reward_improvement": final_reward - baseline_reward,
        "metrics_lines": lines,
    }
