"""Deterministic pixel-level judge: scene analysis and dimension scoring.

analyze_image inverts the renderer on the synthetic domain: background and
lighting from border statistics, objects from connected components, and
(shape, size, rotation, center) by exact template matching against the
renderer's own rasterization. score_dimensions compares a parse against a
target scene or caption under an optimal one-to-one object assignment.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import captions as C
from . import world
from .vocab import ORDINALS, RELATIONS

DIMENSIONS = ("obj", "backg", "color", "texture", "light", "comp", "pose")

FG_THRESHOLD = 0.05
DARK_THRESHOLD = 0.08
MIN_COMPONENT = 25


@dataclass(frozen=True)
class DetectedObject:
    shape: str
    color: str
    texture: str
    size: str
    rotation: int
    center: tuple[float, float]
    pixel_count: int
    match_iou: float


@dataclass(frozen=True)
class SceneParse:
    background_color: str
    light_level: str
    objects: tuple[DetectedObject, ...]
    relations: tuple[tuple[int, str, int], ...]


@dataclass(frozen=True)
class DimensionScores:
    scores: dict[str, float]

    @property
    def average(self) -> float:
        return average_score(list(self.scores.values()))

    def get(self, name: str) -> float | None:
        return self.scores.get(name)


def _background_combos() -> list[tuple[str, str, np.ndarray]]:
    combos = []
    for bg in world.BACKGROUND_COLORS:
        for light in world.LIGHT_LEVELS:
            combos.append((bg, light, world.lit_color(bg, light, foreground=False)))
    return combos


_BG_COMBOS = _background_combos()


def detect_background(image: np.ndarray) -> tuple[str, str]:
    """Mode over border pixels, each assigned to its nearest (bg, light) combo."""
    border = np.concatenate(
        [image[0], image[-1], image[1:-1, 0], image[1:-1, -1]], axis=0
    )
    refs = np.stack([c[2] for c in _BG_COMBOS])
    dists = ((border[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    assign = dists.argmin(axis=1)
    counts = np.bincount(assign, minlength=len(_BG_COMBOS))
    bg, light, _ = _BG_COMBOS[int(counts.argmax())]
    return bg, light


def _reference_templates() -> list[dict]:
    """Rasterize each (shape, size, rotation) once, centered on the canvas.

    Rasterization at pixel centers is invariant under integer shifts, so a
    component anywhere on the canvas matches a shifted reference exactly
    (border clipping included).
    """
    out = []
    c = world.CANVAS // 2
    for size in world.SIZES:
        side = world.BOX_SIDE[size]
        box = (c - side // 2, c - side // 2, c - side // 2 + side, c - side // 2 + side)
        for shape in world.SHAPES:
            for rot in world.ROTATION_CHOICES[shape]:
                mask = world.shape_mask(shape, rot, box)
                cy, cx = ndimage.center_of_mass(mask)
                out.append(
                    {
                        "shape": shape,
                        "size": size,
                        "rotation": rot,
                        "mask": mask,
                        "count": int(mask.sum()),
                        "centroid": (cy, cx),
                        "center": (c, c),  # geometric box center (x == y here)
                    }
                )
    return out


_TEMPLATES = _reference_templates()


def _shifted_iou(mask: np.ndarray, tmpl: np.ndarray, dy: int, dx: int, counts) -> float:
    """IoU between mask and tmpl translated by (dy, dx), clipped at borders."""
    h, w = mask.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return 0.0
    window_t = tmpl[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    window_m = mask[ys0:ys1, xs0:xs1]
    inter = int((window_t & window_m).sum())
    tmpl_visible = int(window_t.sum())
    union = counts + tmpl_visible - inter
    return inter / union if union else 0.0


def _match_template(mask: np.ndarray, centroid: tuple[float, float]):
    """Best (shape, size, rotation, center) by IoU against cached templates."""
    best = None
    best_iou = -1.0
    mask_count = int(mask.sum())
    for tmpl in _TEMPLATES:
        base_dy = centroid[0] - tmpl["centroid"][0]
        base_dx = centroid[1] - tmpl["centroid"][1]
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                dy = int(round(base_dy)) + oy
                dx = int(round(base_dx)) + ox
                iou = _shifted_iou(mask, tmpl["mask"], dy, dx, mask_count)
                if iou > best_iou:
                    best_iou = iou
                    best = (
                        tmpl["shape"],
                        tmpl["size"],
                        tmpl["rotation"],
                        (tmpl["center"][0] + dx, tmpl["center"][1] + dy),
                    )
    shape, size, rot, center = best
    return shape, size, rot, center, best_iou


def _dominant_color(pixels: np.ndarray) -> np.ndarray:
    """Most common color among pixels, quantized to uint8 triples."""
    q = np.round(pixels * 255.0).astype(np.int32)
    keys = q[:, 0] * 65536 + q[:, 1] * 256 + q[:, 2]
    values, counts = np.unique(keys, return_counts=True)
    top = int(values[counts.argmax()])
    return np.array([top // 65536, (top // 256) % 256, top % 256]) / 255.0


def _classify_color(dominant: np.ndarray, light: str) -> str:
    best, best_d = None, np.inf
    for name in world.FOREGROUND_COLORS:
        ref = world.lit_color(name, light)
        d = float(((dominant - ref) ** 2).sum())
        if d < best_d:
            best, best_d = name, d
    return best


def _classify_texture(mask: np.ndarray, image: np.ndarray, dominant: np.ndarray) -> str:
    """Shaded-pixel layout: stripes run wide (>= 4 px), dot blocks cap at 2 px."""
    dark = mask & (((image - dominant) ** 2).sum(axis=2) > DARK_THRESHOLD**2)
    if dark.sum() < 3:
        return "solid"
    labels, n = ndimage.label(dark, structure=np.ones((3, 3), dtype=int))
    widths = []
    for sl in ndimage.find_objects(labels):
        widths.append(sl[1].stop - sl[1].start)
    return "striped" if max(widths) >= 4 else "dotted"


def analyze_image(image: np.ndarray) -> SceneParse:
    """Deterministic scene recovery from a (64,64,3) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (world.CANVAS, world.CANVAS, 3):
        raise ValueError(f"expected ({world.CANVAS},{world.CANVAS},3), got {image.shape}")
    bg, light = detect_background(image)
    bg_color = world.lit_color(bg, light, foreground=False)
    fg = ((image - bg_color) ** 2).sum(axis=2) > FG_THRESHOLD**2
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    objects = []
    for comp in range(1, n + 1):
        mask = labels == comp
        if mask.sum() < MIN_COMPONENT:
            continue
        centroid = ndimage.center_of_mass(mask)  # (row, col)
        shape, size, rot, center, iou = _match_template(mask, centroid)
        dominant = _dominant_color(image[mask])
        color = _classify_color(dominant, light)
        texture = _classify_texture(mask, image, dominant)
        objects.append(
            DetectedObject(
                shape=shape,
                color=color,
                texture=texture,
                size=size,
                rotation=0 if shape == "circle" else rot,
                center=center,
                pixel_count=int(mask.sum()),
                match_iou=iou,
            )
        )
    relations = []
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            rel = C.relation_between(objects[i].center, objects[j].center)
            if rel is not None:
                relations.append((i, rel, j))
    return SceneParse(
        background_color=bg,
        light_level=light,
        objects=tuple(objects),
        relations=tuple(relations),
    )


# ---- expected content from a target ----------------------------------------


@dataclass(frozen=True)
class ExpectedObject:
    shape: str | None
    color: str | None
    texture: str | None
    rotation: int | None
    size: str | None = None
    center: tuple[float, float] | None = None


@dataclass(frozen=True)
class Expectation:
    background_color: str | None
    light_level: str | None
    objects: tuple[ExpectedObject, ...]
    relations: tuple[tuple[int, str, int], ...]


def _expected_from_scene(spec: world.SceneSpec) -> Expectation:
    objs = tuple(
        ExpectedObject(
            shape=o.shape,
            color=o.color,
            texture=o.texture,
            rotation=None if o.shape == "circle" else o.rotation,
            size=o.size,
            center=o.center,
        )
        for o in spec.objects
    )
    return Expectation(
        background_color=spec.background_color,
        light_level=spec.light_level,
        objects=objs,
        relations=tuple(C.scene_relations(spec)),
    )


def _phrase_to_expected(words: Sequence[str], box=None) -> ExpectedObject:
    shape = color = texture = size = None
    rotation = None
    for w in words:
        if w in world.SHAPES:
            shape = w
        elif w in world.FOREGROUND_COLORS:
            color = w
        elif w in world.TEXTURES:
            texture = w
        elif w in world.SIZES:
            size = w
        elif w.startswith("rot_"):
            try:
                rotation = int(w[4:])
            except ValueError:
                pass
    if shape == "circle":
        rotation = None
    center = None
    if box is not None:
        x0, y0, x1, y1 = C.dequantize_box(box)
        center = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    return ExpectedObject(
        shape=shape, color=color, texture=texture, rotation=rotation,
        size=size, center=center,
    )


def _expected_from_caption(cap: C.HierarchicalCaption) -> Expectation:
    bg = light = None
    for w in cap.global_text:
        if bg is None and w in world.BACKGROUND_COLORS:
            bg = w
        if light is None and w in world.LIGHT_LEVELS:
            light = w
    objects = tuple(_phrase_to_expected(o.text, o.box) for o in cap.objects)
    relations = []
    g = list(cap.global_text)
    for i in range(len(g) - 2):
        if g[i] in ORDINALS and g[i + 1] in RELATIONS and g[i + 2] in ORDINALS:
            a, b = ORDINALS.index(g[i]), ORDINALS.index(g[i + 2])
            if a < len(objects) and b < len(objects):
                relations.append((a, g[i + 1], b))
    return Expectation(
        background_color=bg, light_level=light,
        objects=objects, relations=tuple(relations),
    )


def build_expectation(target) -> Expectation:
    if isinstance(target, world.SceneSpec):
        exp = _expected_from_scene(target)
    elif isinstance(target, C.HierarchicalCaption):
        exp = _expected_from_caption(target)
    else:
        raise TypeError(f"unsupported target type {type(target)!r}")
    if not exp.objects and exp.background_color is None and exp.light_level is None:
        raise ValueError("empty target")
    return exp


# ---- assignment and scoring --------------------------------------------------


def _pair_score(exp: ExpectedObject, det: DetectedObject) -> tuple[int, int, float]:
    shape = int(exp.shape is not None and exp.shape == det.shape)
    attrs = 0
    attrs += int(exp.color is not None and exp.color == det.color)
    attrs += int(exp.texture is not None and exp.texture == det.texture)
    attrs += int(exp.rotation is not None and exp.rotation == det.rotation)
    attrs += int(exp.size is not None and exp.size == det.size)
    dist = 0.0
    if exp.center is not None:
        dist = float(np.hypot(exp.center[0] - det.center[0], exp.center[1] - det.center[1]))
    return shape, attrs, dist


def optimal_assignment(
    expected: Sequence[ExpectedObject], detected: Sequence[DetectedObject]
) -> dict[int, int]:
    """Exhaustive best one-to-one map target-idx -> detected-idx (<=4 objects)."""
    n_t, n_d = len(expected), len(detected)
    if n_t == 0 or n_d == 0:
        return {}
    best_map: dict[int, int] = {}
    best_key = (-1, -1, 0.0)
    if n_d >= n_t:
        for perm in itertools.permutations(range(n_d), n_t):
            shape_total, attr_total, dist_total = 0, 0, 0.0
            for t, d in enumerate(perm):
                s, a, dd = _pair_score(expected[t], detected[d])
                shape_total += s
                attr_total += a
                dist_total += dd
            key = (shape_total, attr_total, -dist_total)
            if key > best_key:
                best_key = key
                best_map = {t: d for t, d in enumerate(perm)}
    else:
        for perm in itertools.permutations(range(n_t), n_d):
            shape_total, attr_total, dist_total = 0, 0, 0.0
            for d, t in enumerate(perm):
                s, a, dd = _pair_score(expected[t], detected[d])
                shape_total += s
                attr_total += a
                dist_total += dd
            key = (shape_total, attr_total, -dist_total)
            if key > best_key:
                best_key = key
                best_map = {t: d for d, t in enumerate(perm)}
    return best_map


def score_dimensions(target, image: np.ndarray) -> DimensionScores:
    """Dimension-wise [0,1] scores of an image against a scene or caption."""
    exp = build_expectation(target)
    parse = analyze_image(image)
    assignment = optimal_assignment(exp.objects, parse.objects)

    scores: dict[str, float] = {}
    if exp.background_color is not None:
        scores["backg"] = float(parse.background_color == exp.background_color)
    if exp.light_level is not None:
        scores["light"] = float(parse.light_level == exp.light_level)

    n_targets = len(exp.objects)
    if n_targets:
        shape_hits = sum(
            int(exp.objects[t].shape == parse.objects[d].shape)
            for t, d in assignment.items()
            if exp.objects[t].shape is not None
        )
        scores["obj"] = shape_hits / n_targets

    matched = list(assignment.items())
    color_pairs = [
        (t, d) for t, d in matched if exp.objects[t].color is not None
    ]
    if color_pairs:
        scores["color"] = float(
            np.mean([exp.objects[t].color == parse.objects[d].color for t, d in color_pairs])
        )
    texture_pairs = [
        (t, d) for t, d in matched if exp.objects[t].texture is not None
    ]
    if texture_pairs:
        scores["texture"] = float(
            np.mean(
                [exp.objects[t].texture == parse.objects[d].texture for t, d in texture_pairs]
            )
        )
    pose_pairs = [(t, d) for t, d in matched if exp.objects[t].rotation is not None]
    if pose_pairs:
        scores["pose"] = float(
            np.mean(
                [exp.objects[t].rotation == parse.objects[d].rotation for t, d in pose_pairs]
            )
        )

    if exp.relations:
        satisfied = 0
        for i, rel, j in exp.relations:
            if i in assignment and j in assignment:
                actual = C.relation_between(
                    parse.objects[assignment[i]].center,
                    parse.objects[assignment[j]].center,
                )
                satisfied += int(actual == rel)
        scores["comp"] = satisfied / len(exp.relations)

    return DimensionScores(scores=scores)


def average_score(values: Sequence[float]) -> float:
    """Plain arithmetic mean; tables round to 2 decimals at display time."""
    if len(values) == 0:
        raise ValueError("cannot average an empty list")
    return float(sum(values)) / len(values)


# ---- best-of-k and suite evaluation -----------------------------------------


def best_of_k(
    target,
    prompt_words,
    sample_fn: Callable[[Sequence[str], list[int]], list[np.ndarray]],
    selector: Callable[[Sequence[str], np.ndarray], float],
    k: int = 4,
    base_seed: int = 0,
    score_fn: Callable = score_dimensions,
) -> tuple[np.ndarray, DimensionScores, dict]:
    """Generate k candidates, select by the selector, judge only the winner.

    Selection never touches the analyzer; the judged scores come from
    score_fn on the selected image alone. Ties keep the lowest seed index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seeds = [base_seed + i for i in range(k)]
    images = sample_fn(prompt_words, seeds)
    best_idx, best_value = 0, -np.inf
    values = []
    for i, img in enumerate(images):
        v = float(selector(prompt_words, img))
        values.append(v)
        if v > best_value:
            best_value = v
            best_idx = i
    winner = images[best_idx]
    scores = score_fn(target, winner)
    info = {"seeds": seeds, "selector_scores": values, "selected": best_idx}
    return winner, scores, info


def evaluate_suite(
    cases: Sequence[tuple],
    sample_fn,
    selector,
    k: int = 4,
    base_seed: int = 0,
    score_fn: Callable = score_dimensions,
) -> dict:
    """Score (target, prompt) cases; returns per-dimension means and details."""
    if not cases:
        raise ValueError("empty prompt suite")
    details = []
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for i, (target, prompt_words) in enumerate(cases):
        _, scores, info = best_of_k(
            target, prompt_words, sample_fn, selector,
            k=k, base_seed=base_seed + 1000 * i, score_fn=score_fn,
        )
        for name, value in scores.scores.items():
            sums[name] = sums.get(name, 0.0) + value
            counts[name] = counts.get(name, 0) + 1
        details.append(
            {
                "case": i,
                "prompt": " ".join(prompt_words),
                "scores": {n: scores.scores[n] for n in sorted(scores.scores)},
                "average": scores.average,
                "selector": info,
            }
        )
    means = {name: sums[name] / counts[name] for name in sorted(sums)}
    report = {
        "cases": len(cases),
        "k": k,
        "dimension_means": means,
        "average": average_score(list(means.values())),
        "details": details,
    }
    return report


def write_report(report: dict, out_dir: Path | str, stem: str = "eval") -> None:
    """summary JSON + per-prompt JSONL + a CSV row in table column order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in report.items() if k != "details"}
    (out / f"{stem}_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    lines = [json.dumps(d, sort_keys=True) for d in report["details"]]
    (out / f"{stem}_details.jsonl").write_text("\n".join(lines) + "\n")
    means = report["dimension_means"]
    header = [d for d in DIMENSIONS if d in means] + ["avg"]
    row = [f"{means[d]:.2f}" for d in DIMENSIONS if d in means]
    row.append(f"{report['average']:.2f}")
    (out / f"{stem}_table.csv").write_text(
        ",".join(header) + "\n" + ",".join(row) + "\n"
    )
