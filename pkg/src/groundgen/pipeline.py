"""Pipeline orchestration: one directory per run, explicit artifact lineage.

Every command reads/writes under the configured out_dir:
    dataset/ aux_dataset/ checkpoints/ metrics/ reports/ samples/
Commands fail with a named-artifact error when a prerequisite is missing.
"""
from __future__ import annotations

import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import archive, captions, checkpoints, dataset, evaluation, world
from .backbone import Backbone
from .config import RunConfig, config_to_dict, dump_config
from .scorer import pretrain_scorer, similarity
from .stage1 import Stage1Config, strict_parse_rate, train_stage1
from .stage2 import Stage2Config, sample_image, sample_images, train_stage2
from .vocab import get_vocab

VARIANTS = ("full", "no_grounding", "no_consistency", "no_icp")


class MissingArtifactError(RuntimeError):
    def __init__(self, name: str, path: Path, hint: str):
        super().__init__(
            f"missing prerequisite artifact: {name} ({path}); run `{hint}` first"
        )


class RunPaths:
    def __init__(self, cfg: RunConfig):
        self.base = Path(cfg.out_dir)
        self.dataset = cfg.dataset_dir()
        self.aux_dataset = cfg.aux_dataset_dir()
        self.checkpoints = self.base / "checkpoints"
        self.metrics = self.base / "metrics"
        self.reports = self.base / "reports"
        self.samples = self.base / "samples"

    def scorer_ckpt(self) -> Path:
        return self.checkpoints / "scorer.ckpt"

    def codec_ckpt(self) -> Path:
        return self.checkpoints / "codec.ckpt"

    def stage1_ckpt(self, seed: int, warmup: bool = False) -> Path:
        stem = "stage1_warmup" if warmup else "stage1"
        return self.checkpoints / f"{stem}_s{seed}.ckpt"

    def stage2_ckpt(self, seed: int, variant: str) -> Path:
        return self.checkpoints / f"stage2_{variant}_s{seed}.ckpt"

    def ensure(self) -> None:
        for d in (self.base, self.checkpoints, self.metrics, self.reports, self.samples):
            d.mkdir(parents=True, exist_ok=True)


def apply_runtime(cfg: RunConfig) -> None:
    torch.set_num_threads(max(1, cfg.torch_threads))
    if cfg.device not in ("cpu",) and not torch.cuda.is_available():
        raise RuntimeError(f"device {cfg.device!r} unavailable; use cpu")


def _require(path: Path, name: str, hint: str) -> None:
    if not path.exists():
        raise MissingArtifactError(name, path, hint)


def _scorer_records(cfg: RunConfig, paths: RunPaths):
    root = paths.aux_dataset if cfg.data.aux_scenes > 0 else paths.dataset
    _require(root / "scenes.jsonl", "training dataset", "gen-data")
    return dataset.load_dataset(root)


def variant_stage2_config(cfg: RunConfig, variant: str) -> Stage2Config:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    s2 = dataclasses.replace(cfg.stage2)
    if variant == "no_consistency":
        s2.consistency_weight = 0.0
    if variant == "no_icp":
        s2.use_planning = False
    return s2


def distinct_caption_records(records, n: int):
    seen = set()
    out = []
    for rec in records:
        key = tuple(captions.ground_truth_caption(rec.spec).global_text)
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
        if len(out) == n:
            return out
    raise RuntimeError(f"only {len(out)} distinct-caption scenes available, wanted {n}")


# ---- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    data_hash = dataset.generate_dataset(
        paths.dataset, cfg.data.scenes, cfg.data.seed_start, cfg.data.max_objects
    )
    result = {"data_hash": data_hash, "scenes": cfg.data.scenes}
    if cfg.data.aux_scenes > 0:
        aux_hash = dataset.generate_dataset(
            paths.aux_dataset, cfg.data.aux_scenes, cfg.data.aux_seed_start,
            cfg.data.max_objects,
        )
        result["aux_data_hash"] = aux_hash
        result["aux_scenes"] = cfg.data.aux_scenes
    dump_config(cfg, paths.base / "effective_config.json")
    return result


def cmd_train_scorer(cfg: RunConfig) -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    records = _scorer_records(cfg, paths)
    scorer, metrics = pretrain_scorer(records, cfg.scorer)
    root = paths.aux_dataset if cfg.data.aux_scenes > 0 else paths.dataset
    ckpt_hash = checkpoints.save_checkpoint(
        paths.scorer_ckpt(), "scorer", scorer, cfg.scorer.to_dict(),
        data_hash=dataset.dataset_hash(root),
        extra={"metrics": metrics},
    )
    (paths.metrics / "scorer_summary.json").write_text(
        json.dumps({"metrics": metrics, "checkpoint": ckpt_hash}, sort_keys=True, indent=2)
    )
    return metrics


def cmd_train_codec(cfg: RunConfig) -> dict:
    from .codec import train_autoencoder

    paths = RunPaths(cfg)
    paths.ensure()
    records = _scorer_records(cfg, paths)
    images = torch.stack(
        [torch.as_tensor(r.load_image(), dtype=torch.float32) for r in records]
    )
    codec, metrics = train_autoencoder(images, cfg.codec)
    root = paths.aux_dataset if cfg.data.aux_scenes > 0 else paths.dataset
    ckpt_hash = checkpoints.save_checkpoint(
        paths.codec_ckpt(), "codec", codec, cfg.codec.to_dict(),
        data_hash=dataset.dataset_hash(root),
        extra={"metrics": metrics},
    )
    (paths.metrics / "codec_summary.json").write_text(
        json.dumps({"metrics": metrics, "checkpoint": ckpt_hash}, sort_keys=True, indent=2)
    )
    return metrics


def cmd_train_stage1(cfg: RunConfig) -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    _require(paths.dataset / "scenes.jsonl", "training dataset", "gen-data")
    _require(paths.scorer_ckpt(), "scorer checkpoint", "train-scorer")
    records = dataset.load_dataset(paths.dataset)
    scorer, scorer_manifest = checkpoints.load_scorer(paths.scorer_ckpt())
    s1cfg = dataclasses.replace(cfg.stage1, seed=cfg.seed)

    torch.manual_seed(cfg.seed)
    model = Backbone(cfg.backbone)
    summary = train_stage1(
        model, scorer, records, s1cfg,
        metrics_path=paths.metrics / f"stage1_s{cfg.seed}.jsonl",
    )

    heldout = dataset.heldout_scenes(
        200, cfg.eval.heldout_seed_start + 1_000_000, cfg.data.max_objects
    )
    heldout_images = torch.stack(
        [torch.as_tensor(world.render(s), dtype=torch.float32) for s in heldout]
    )
    warmup_model = Backbone(cfg.backbone)
    warmup_model.load_state_dict(summary["warmup_state"])
    warmup_model.eval()
    warmup_parse = strict_parse_rate(warmup_model, heldout_images, s1cfg.max_caption_len)
    model.eval()
    final_parse = strict_parse_rate(model, heldout_images, s1cfg.max_caption_len)

    data_hash = dataset.dataset_hash(paths.dataset)
    scorer_hash = archive.file_hash(paths.scorer_ckpt())
    manifest_cfg = {"backbone": cfg.backbone.to_dict(), "stage1": s1cfg.to_dict()}
    extra = {
        "baseline_reward": summary["baseline_reward"],
        "final_reward": summary["final_reward"],
        "reward_improvement": summary["reward_improvement"],
        "warmup_parse_rate": warmup_parse,
        "final_parse_rate": final_parse,
    }
    checkpoints.save_checkpoint(
        paths.stage1_ckpt(cfg.seed, warmup=True), "backbone", warmup_model,
        manifest_cfg, data_hash=data_hash, parent=scorer_hash,
        step=s1cfg.warmup_steps, extra={**extra, "phase": "warmup"},
    )
    checkpoints.save_checkpoint(
        paths.stage1_ckpt(cfg.seed), "backbone", model, manifest_cfg,
        data_hash=data_hash, parent=scorer_hash,
        step=s1cfg.warmup_steps + s1cfg.rl_steps, extra={**extra, "phase": "full"},
    )
    result = {k: v for k, v in extra.items()}
    (paths.metrics / f"stage1_s{cfg.seed}_summary.json").write_text(
        json.dumps(result, sort_keys=True, indent=2)
    )
    return result


def cmd_train_stage2(cfg: RunConfig, variant: str = "full") -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    _require(paths.dataset / "scenes.jsonl", "training dataset", "gen-data")
    _require(paths.scorer_ckpt(), "scorer checkpoint", "train-scorer")
    _require(paths.codec_ckpt(), "codec checkpoint", "train-codec")
    use_warmup = variant == "no_grounding"
    s1_path = paths.stage1_ckpt(cfg.seed, warmup=use_warmup)
    _require(s1_path, "stage1 checkpoint", "train-stage1")

    records = dataset.load_dataset(paths.dataset)
    if cfg.overfit_scenes > 0:
        records = distinct_caption_records(records, cfg.overfit_scenes)
    scorer, _ = checkpoints.load_scorer(paths.scorer_ckpt())
    codec, _ = checkpoints.load_codec(paths.codec_ckpt())
    backbone, _ = checkpoints.load_backbone(s1_path)
    s2cfg = variant_stage2_config(cfg, variant)
    s2cfg = dataclasses.replace(s2cfg, seed=cfg.seed)

    gen, summary = train_stage2(
        backbone, scorer, codec, records, s2cfg,
        metrics_path=paths.metrics / f"stage2_{variant}_s{cfg.seed}.jsonl",
    )
    manifest_cfg = {
        "backbone": cfg.backbone.to_dict(),
        "unet": gen.unet.config.to_dict(),
        "stage2": s2cfg.to_dict(),
        "schedule": summary["schedule"],
    }
    ckpt_hash = checkpoints.save_checkpoint(
        paths.stage2_ckpt(cfg.seed, variant), "generation", gen, manifest_cfg,
        data_hash=dataset.dataset_hash(paths.dataset),
        parent=archive.file_hash(s1_path),
        step=s2cfg.steps,
        extra={"variant": variant, "trainable": summary["trainable"]},
    )
    return {"variant": variant, "checkpoint": ckpt_hash, "steps": s2cfg.steps}


def _eval_cases(cfg: RunConfig, records):
    if cfg.eval.use_train_subset > 0:
        subset = distinct_caption_records(records, cfg.eval.use_train_subset)
        return [
            (r.spec, captions.ground_truth_caption(r.spec).global_text) for r in subset
        ]
    scenes = dataset.heldout_scenes(
        cfg.eval.prompts, cfg.eval.heldout_seed_start,
        cfg.data.max_objects, cfg.eval.min_objects,
    )
    return [(s, captions.ground_truth_caption(s).global_text) for s in scenes]


def cmd_evaluate(cfg: RunConfig, variant: str = "full") -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    ckpt_path = paths.stage2_ckpt(cfg.seed, variant)
    _require(ckpt_path, "stage2 checkpoint", "train-stage2")
    _require(paths.scorer_ckpt(), "scorer checkpoint", "train-scorer")
    gen, manifest = checkpoints.load_generation(ckpt_path)
    codec, _ = checkpoints.load_codec(paths.codec_ckpt())
    scorer, _ = checkpoints.load_scorer(paths.scorer_ckpt())
    s2cfg = Stage2Config(**manifest["config"]["stage2"])
    records = dataset.load_dataset(paths.dataset)
    cases = _eval_cases(cfg, records)
    steps = cfg.eval.sampler_steps or None

    prompts = [words for _, words in cases]
    plan_map: dict[tuple, object] = {}
    if s2cfg.use_planning:
        from .backbone import DecodeSpec
        from .stage2 import plan_subprompts_batch

        for start in range(0, len(prompts), 16):
            chunk = prompts[start : start + 16]
            for words, plan in zip(
                chunk,
                plan_subprompts_batch(
                    gen.backbone, chunk, DecodeSpec(mode="greedy"), s2cfg.max_plan_len
                ),
            ):
                plan_map[tuple(words)] = plan

    def sample_fn(prompt_words, seeds):
        imgs, _ = sample_images(
            gen, codec, prompt_words, s2cfg, seeds,
            steps=steps, guidance=cfg.eval.guidance,
            plan=plan_map.get(tuple(prompt_words)),
        )
        return imgs

    text_cache: dict = {}

    def selector(prompt_words, image):
        key = tuple(prompt_words)
        if key not in text_cache:
            text_cache[key] = scorer.embed_text(list(key))
        return similarity(text_cache[key], scorer.embed_image(image))

    report = evaluation.evaluate_suite(
        cases, sample_fn, selector, k=cfg.eval.k, base_seed=cfg.eval.base_seed
    )
    report["lineage"] = {
        "generation_checkpoint": archive.file_hash(ckpt_path),
        "stage1_checkpoint": manifest.get("parent"),
        "data_hash": manifest.get("data_hash"),
        "variant": variant,
        "seed": cfg.seed,
    }
    evaluation.write_report(report, paths.reports, stem=f"eval_{variant}_s{cfg.seed}")
    return report


def cmd_sample(
    cfg: RunConfig, prompt: str | None = None, n: int = 1, variant: str = "full"
) -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    ckpt_path = paths.stage2_ckpt(cfg.seed, variant)
    _require(ckpt_path, "stage2 checkpoint", "train-stage2")
    gen, manifest = checkpoints.load_generation(ckpt_path)
    codec, _ = checkpoints.load_codec(paths.codec_ckpt())
    s2cfg = Stage2Config(**manifest["config"]["stage2"])
    if prompt:
        words = tuple(prompt.split())
        unknown = [w for w in words if w not in get_vocab().word_to_id]
        if unknown:
            raise ValueError(f"prompt words outside vocabulary: {unknown}")
    else:
        scene = dataset.heldout_scenes(1, cfg.eval.heldout_seed_start, min_objects=2)[0]
        words = captions.ground_truth_caption(scene).global_text
    ckpt_hash = archive.file_hash(ckpt_path)
    steps = cfg.eval.sampler_steps or s2cfg.sampler_steps
    outputs = []
    for i in range(n):
        seed = cfg.eval.base_seed + i
        img, plan = sample_image(
            gen, codec, words, s2cfg, seed=seed, steps=steps, guidance=cfg.eval.guidance
        )
        png = paths.samples / f"sample_s{cfg.seed}_{i}.png"
        dataset.save_image(png, img)
        sidecar = {
            "prompt": " ".join(words),
            "plan": [" ".join(s) for s in plan.subs],
            "seed": seed,
            "steps": steps,
            "guidance": cfg.eval.guidance,
            "checkpoint_hash": ckpt_hash,
        }
        png.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
        outputs.append(str(png))
    return {"samples": outputs, "prompt": " ".join(words)}


def _ablation_seed_run(cfg: RunConfig, seed: int) -> dict:
    """Train stage 1 once per seed, then stage 2 + evaluate per variant."""
    seed_cfg = dataclasses.replace(cfg, seed=seed)
    paths = RunPaths(cfg)
    if not paths.stage1_ckpt(seed).exists():
        cmd_train_stage1(seed_cfg)
    results = {}
    for variant in cfg.ablation.variants:
        if not paths.stage2_ckpt(seed, variant).exists():
            cmd_train_stage2(seed_cfg, variant)
        report = cmd_evaluate(seed_cfg, variant)
        results[variant] = {
            "average": report["average"],
            "dimension_means": report["dimension_means"],
        }
    out = paths.reports / f"ablation_seed{seed}.json"
    out.write_text(json.dumps(results, sort_keys=True, indent=2))
    return results


def cmd_ablate(
    cfg: RunConfig, config_path: str | None = None, only_seed: int | None = None
) -> dict:
    paths = RunPaths(cfg)
    paths.ensure()
    variants = cfg.ablation.variants
    if len(set(variants)) != len(variants):
        raise ValueError(f"variant config collision: duplicates in {variants}")
    for v in variants:
        variant_stage2_config(cfg, v)  # validates names
    if only_seed is not None:
        return _ablation_seed_run(cfg, only_seed)

    seeds = cfg.ablation.seeds
    jobs = max(1, cfg.ablation.jobs)
    pending = [s for s in seeds if not (paths.reports / f"ablation_seed{s}.json").exists()]
    if jobs > 1 and config_path and len(pending) > 1:
        for chunk_start in range(0, len(pending), jobs):
            chunk = pending[chunk_start : chunk_start + jobs]
            procs = [
                subprocess.Popen(
                    [
                        sys.executable, "-m", "groundgen.cli", "ablate",
                        "--config", config_path, "--ablation-seed", str(s),
                    ]
                )
                for s in chunk
            ]
            for p, s in zip(procs, chunk):
                if p.wait() != 0:
                    raise RuntimeError(f"ablation run for seed {s} failed")
    else:
        for s in pending:
            _ablation_seed_run(cfg, s)

    table: dict[str, dict] = {}
    for s in seeds:
        results = json.loads((paths.reports / f"ablation_seed{s}.json").read_text())
        for variant, r in results.items():
            table.setdefault(variant, {})[str(s)] = r
    summary = {"seeds": seeds, "variants": variants, "table": table}
    (paths.reports / "ablation.json").write_text(json.dumps(summary, sort_keys=True, indent=2))

    lines = ["variant," + ",".join(f"seed{s}" for s in seeds) + ",mean"]
    for variant in variants:
        vals = [table[variant][str(s)]["average"] for s in seeds]
        cells = ",".join(f"{v:.4f}" for v in vals)
        lines.append(f"{variant},{cells},{np.mean(vals):.4f}")
    (paths.reports / "ablation.csv").write_text("\n".join(lines) + "\n")
    return summary


def cmd_report(cfg: RunConfig, variant: str = "full") -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = RunPaths(cfg)
    summary_path = paths.reports / f"eval_{variant}_s{cfg.seed}_summary.json"
    _require(summary_path, "evaluation summary", "evaluate")
    summary = json.loads(summary_path.read_text())
    means = summary["dimension_means"]
    names = [d for d in evaluation.DIMENSIONS if d in means]
    values = [means[d] for d in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(names, values, color="#4878a8")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean score")
    ax.set_title(f"dimension means ({variant}, seed {cfg.seed})")
    fig.tight_layout()
    out = paths.reports / f"dimensions_{variant}_s{cfg.seed}.png"
    fig.savefig(out)
    plt.close(fig)
    return {"plot": str(out), "dimension_means": means, "average": summary["average"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-scorer": cmd_train_scorer,
    "train-codec": cmd_train_codec,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}
