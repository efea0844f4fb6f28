"""Typed checkpoints over the flat archive format.

Each checkpoint carries a manifest: artifact kind, config snapshot, vocabulary
hash, dataset hash, training step, and the file hash of its parent checkpoint,
so any report can resolve its lineage chain back to the dataset.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import archive
from .backbone import Backbone, BackboneConfig
from .codec import AutoEncoder, CodecConfig
from .scorer import Scorer, ScorerConfig
from .stage2 import GenerationModel
from .unet import UNetConfig
from .vocab import get_vocab

KINDS = ("backbone", "scorer", "codec", "generation")


class CheckpointError(RuntimeError):
    pass


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(
    path: Path | str,
    kind: str,
    module: torch.nn.Module,
    config: dict,
    *,
    data_hash: str | None = None,
    step: int = 0,
    parent: str | None = None,
    extra: dict | None = None,
) -> str:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    manifest = {
        "kind": kind,
        "config": config,
        "vocab_hash": get_vocab().content_hash(),
        "data_hash": data_hash,
        "step": step,
        "parent": parent,
    }
    if kind == "scorer":
        manifest["frozen"] = True
    if extra:
        manifest.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return archive.save_archive(path, manifest, _state_arrays(module))


def load_checkpoint(path: Path | str, expect_kind: str | None = None):
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    manifest, arrays = archive.load_archive(path)
    kind = manifest.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(
            f"checkpoint kind mismatch: expected {expect_kind!r}, got {kind!r} in {path}"
        )
    if manifest.get("vocab_hash") != get_vocab().content_hash():
        raise CheckpointError(f"vocabulary hash mismatch in {path}")
    return manifest, arrays


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def load_backbone(path: Path | str) -> tuple[Backbone, dict]:
    manifest, arrays = load_checkpoint(path, "backbone")
    model = Backbone(BackboneConfig(**manifest["config"]))
    _load_state(model, arrays)
    model.eval()
    return model, manifest


def load_scorer(path: Path | str) -> tuple[Scorer, dict]:
    manifest, arrays = load_checkpoint(path, "scorer")
    scorer = Scorer(ScorerConfig(**manifest["config"]))
    _load_state(scorer, arrays)
    scorer.freeze()
    return scorer, manifest


def load_codec(path: Path | str) -> tuple[AutoEncoder, dict]:
    manifest, arrays = load_checkpoint(path, "codec")
    codec = AutoEncoder(CodecConfig(**manifest["config"]))
    _load_state(codec, arrays)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, manifest


def load_generation(path: Path | str) -> tuple[GenerationModel, dict]:
    manifest, arrays = load_checkpoint(path, "generation")
    backbone = Backbone(BackboneConfig(**manifest["config"]["backbone"]))
    gen = GenerationModel(backbone, UNetConfig(**manifest["config"]["unet"]))
    _load_state(gen, arrays)
    gen.eval()
    return gen, manifest
