"""Dataset generation and persistence: PNG images plus a scenes.jsonl index.

One JSON-lines record per scene:
    {"seed": int, "image": "images/scene_<seed>.png",
     "scene": {...SceneSpec...}, "caption": "<serialized ground-truth caption>"}
The JSONL file is the interchange contract; its sha256 is the dataset hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import captions, world


@dataclass
class SceneRecord:
    seed: int
    spec: world.SceneSpec
    caption_words: tuple[str, ...]
    image_path: Path

    def load_image(self) -> np.ndarray:
        return load_image(self.image_path)


def save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def generate_dataset(
    out_dir: Path | str,
    n_scenes: int,
    seed_start: int = 0,
    max_objects: int = 4,
) -> str:
    """Render scenes seed_start..seed_start+n-1; returns the dataset hash."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for seed in range(seed_start, seed_start + n_scenes):
        spec = world.sample_scene(seed, max_objects)
        img = world.render(spec)
        rel = f"images/scene_{seed}.png"
        save_image(out_dir / rel, img)
        cap = captions.ground_truth_caption(spec)
        record = {
            "seed": seed,
            "image": rel,
            "scene": world.scene_to_json(spec),
            "caption": " ".join(captions.serialize_caption(cap)),
        }
        lines.append(json.dumps(record, sort_keys=True))
    payload = ("\n".join(lines) + "\n").encode()
    (out_dir / "scenes.jsonl").write_bytes(payload)
    data_hash = hashlib.sha256(payload).hexdigest()
    meta = {
        "count": n_scenes,
        "seed_start": seed_start,
        "max_objects": max_objects,
        "canvas": world.CANVAS,
        "data_hash": data_hash,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return data_hash


def dataset_hash(root: Path | str) -> str:
    return hashlib.sha256((Path(root) / "scenes.jsonl").read_bytes()).hexdigest()


def load_dataset(root: Path | str) -> list[SceneRecord]:
    root = Path(root)
    records = []
    for line in (root / "scenes.jsonl").read_text().splitlines():
        data = json.loads(line)
        records.append(
            SceneRecord(
                seed=data["seed"],
                spec=world.scene_from_json(data["scene"]),
                caption_words=tuple(data["caption"].split()),
                image_path=root / data["image"],
            )
        )
    return records


def heldout_scenes(
    count: int, seed_start: int, max_objects: int = 4, min_objects: int = 1
) -> list[world.SceneSpec]:
    """Deterministic held-out scenes, skipping seeds below the object floor."""
    scenes = []
    seed = seed_start
    while len(scenes) < count:
        spec = world.sample_scene(seed, max_objects)
        if len(spec.objects) >= min_objects:
            scenes.append(spec)
        seed += 1
    return scenes
