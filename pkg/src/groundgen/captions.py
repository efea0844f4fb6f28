"""Hierarchical caption and plan grammars over the shapes world.

Serialized caption form:
    GLOBAL <words> ; OBJ <loc_x a> <loc_y b> <loc_x c> <loc_y d> <words> ; ... END
Serialized plan form:
    SUB <words> ; SUB <words> ; ... END
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import vocab as V
from .world import CANVAS, ObjectSpec, SceneSpec

BIN_SIZE = CANVAS // V.LOCATION_BINS  # 4 px per location bin
MAX_SUBPROMPTS = 8


class CaptionError(ValueError):
    """Malformed caption that cannot be serialized."""


class CaptionParseError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (at token {index})")
        self.index = index


@dataclass(frozen=True)
class CaptionObject:
    box: tuple[int, int, int, int]  # quantized bins, 0..15 per coordinate
    text: tuple[str, ...]


@dataclass(frozen=True)
class HierarchicalCaption:
    global_text: tuple[str, ...]
    objects: tuple[CaptionObject, ...]
    well_formed: bool = True


def quantize_box(box: Sequence[int]) -> tuple[int, int, int, int]:
    return tuple(min(V.LOCATION_BINS - 1, int(v) // BIN_SIZE) for v in box)


def dequantize_box(bins: Sequence[int]) -> tuple[int, int, int, int]:
    """Low edges for (x0, y0), high edges for (x1, y1); error stays under one bin."""
    x0, y0, x1, y1 = (int(b) for b in bins)
    return (x0 * BIN_SIZE, y0 * BIN_SIZE, (x1 + 1) * BIN_SIZE, (y1 + 1) * BIN_SIZE)


def object_phrase(obj: ObjectSpec) -> tuple[str, ...]:
    words = [obj.size, obj.color, obj.texture, obj.shape]
    if obj.shape != "circle":
        words.append(f"rot_{obj.rotation}")
    return tuple(words)


def relation_between(
    center_a: Sequence[float], center_b: Sequence[float], margin: float = 4.0
) -> str | None:
    """Relation of a w.r.t. b by centroid; horizontal wins, ties are omitted."""
    dx = center_b[0] - center_a[0]
    if dx >= margin:
        return "left_of"
    if dx <= -margin:
        return "right_of"
    dy = center_b[1] - center_a[1]
    if dy >= margin:
        return "above"
    if dy <= -margin:
        return "below"
    return None


def scene_relations(spec: SceneSpec) -> list[tuple[int, str, int]]:
    """One relation per adjacent pair in object order, where unambiguous."""
    out = []
    for k in range(1, len(spec.objects)):
        rel = relation_between(spec.objects[k - 1].center, spec.objects[k].center)
        if rel is not None:
            out.append((k - 1, rel, k))
    return out


def ground_truth_caption(spec: SceneSpec) -> HierarchicalCaption:
    words: list[str] = [spec.light_level, "light", spec.background_color, "background"]
    for obj in spec.objects:
        words.extend(object_phrase(obj))
    for i, rel, j in scene_relations(spec):
        words.extend((V.ORDINALS[i], rel, V.ORDINALS[j]))
    objects = tuple(
        CaptionObject(box=quantize_box(obj.box), text=object_phrase(obj))
        for obj in spec.objects
    )
    return HierarchicalCaption(global_text=tuple(words), objects=objects)


def serialize_caption(cap: HierarchicalCaption) -> tuple[str, ...]:
    if not cap.well_formed:
        raise CaptionError("unserializable: caption not well formed")
    out: list[str] = [V.GLOBAL, *cap.global_text, V.SEP]
    for obj in cap.objects:
        if len(obj.box) != 4 or not all(
            0 <= b < V.LOCATION_BINS for b in obj.box
        ):
            raise CaptionError(f"unserializable: bad box bins {obj.box}")
        if not obj.text:
            raise CaptionError("unserializable: empty local caption")
        x0, y0, x1, y1 = obj.box
        out += [V.OBJ, f"loc_x_{x0}", f"loc_y_{y0}", f"loc_x_{x1}", f"loc_y_{y1}"]
        out += list(obj.text)
        out.append(V.SEP)
    out.append(V.END)
    return tuple(out)


def _loc_value(word: str, axis: str) -> int | None:
    prefix = f"loc_{axis}_"
    if word.startswith(prefix):
        try:
            value = int(word[len(prefix):])
        except ValueError:
            return None
        if 0 <= value < V.LOCATION_BINS:
            return value
    return None


_STRUCTURAL = {V.GLOBAL, V.OBJ, V.SUB, V.END, V.SEP}


def parse_caption(
    tokens: Sequence[str], lenient: bool = False
) -> HierarchicalCaption:
    """Parse serialized caption words back into a HierarchicalCaption.

    Strict mode raises CaptionParseError (carrying the first offending token
    index) on any grammar violation. Lenient mode keeps the longest valid
    prefix, drops malformed OBJ blocks, and clears well_formed if anything
    was dropped or missing.
    """
    toks = list(tokens)
    well_formed = True
    i = 0

    def fail(msg: str, at: int) -> None:
        raise CaptionParseError(msg, at)

    if not toks or toks[0] != V.GLOBAL:
        if not lenient:
            fail("expected GLOBAL", 0)
        return HierarchicalCaption((), (), well_formed=False)
    i = 1
    global_words: list[str] = []
    while i < len(toks) and toks[i] not in _STRUCTURAL:
        global_words.append(toks[i])
        i += 1
    if i >= len(toks) or toks[i] != V.SEP:
        if not lenient:
            fail("expected ';' after global caption", i)
        return HierarchicalCaption(tuple(global_words), (), well_formed=False)
    i += 1

    objects: list[CaptionObject] = []
    while True:
        if i >= len(toks):
            if not lenient:
                fail("unterminated caption, expected END", i)
            well_formed = False
            break
        if toks[i] == V.END:
            i += 1
            if i < len(toks):
                if not lenient:
                    fail("trailing tokens after END", i)
                well_formed = False
            break
        if toks[i] != V.OBJ:
            if not lenient:
                fail("expected OBJ or END", i)
            well_formed = False
            i += 1
            continue
        block_start = i
        i += 1
        bins: list[int] = []
        ok = True
        for axis in ("x", "y", "x", "y"):
            value = _loc_value(toks[i], axis) if i < len(toks) else None
            if value is None:
                if not lenient:
                    fail(f"expected loc_{axis} token", min(i, len(toks)))
                ok = False
                break
            bins.append(value)
            i += 1
        if ok:
            words: list[str] = []
            while i < len(toks) and toks[i] not in _STRUCTURAL:
                words.append(toks[i])
                i += 1
            if i >= len(toks) or toks[i] != V.SEP or not words:
                if not lenient:
                    fail("malformed OBJ block", min(i, len(toks)))
                ok = False
            else:
                i += 1
                objects.append(CaptionObject(box=tuple(bins), text=tuple(words)))
        if not ok:
            # Drop this block: skip forward to the next structural anchor.
            well_formed = False
            i = block_start + 1
            while i < len(toks) and toks[i] not in (V.OBJ, V.END):
                i += 1

    return HierarchicalCaption(
        tuple(global_words), tuple(objects), well_formed=well_formed
    )


def ground_truth_plan(spec: SceneSpec) -> tuple[tuple[str, ...], ...]:
    """Sub-prompts: scene context first, then one per object with its relation."""
    subs: list[tuple[str, ...]] = [
        (spec.light_level, "light", spec.background_color, "background")
    ]
    relations = {j: (i, rel) for i, rel, j in scene_relations(spec)}
    for k, obj in enumerate(spec.objects):
        words = list(object_phrase(obj))
        if k in relations:
            i, rel = relations[k]
            words.extend((V.ORDINALS[i], rel, V.ORDINALS[k]))
        subs.append(tuple(words))
    return tuple(subs)


def serialize_plan(subs: Sequence[Sequence[str]]) -> tuple[str, ...]:
    if not subs:
        raise CaptionError("unserializable: empty plan")
    out: list[str] = []
    for sub in subs:
        if not sub:
            raise CaptionError("unserializable: empty sub-prompt")
        out += [V.SUB, *sub, V.SEP]
    out.append(V.END)
    return tuple(out)


def parse_plan(tokens: Sequence[str], lenient: bool = True) -> tuple[tuple[str, ...], ...]:
    """Recover sub-prompts; malformed blocks are dropped in lenient mode."""
    subs: list[tuple[str, ...]] = []
    toks = list(tokens)
    i = 0
    while i < len(toks):
        if toks[i] == V.END:
            i += 1
            break
        if toks[i] != V.SUB:
            if not lenient:
                raise CaptionParseError("expected SUB or END", i)
            i += 1
            continue
        i += 1
        words: list[str] = []
        while i < len(toks) and toks[i] not in _STRUCTURAL:
            words.append(toks[i])
            i += 1
        terminated = i < len(toks) and toks[i] == V.SEP
        if terminated:
            i += 1
        if words and (terminated or lenient):
            if terminated:
                subs.append(tuple(words))
            elif not lenient:
                raise CaptionParseError("unterminated SUB block", i)
        elif not lenient:
            raise CaptionParseError("malformed SUB block", i)
        if len(subs) >= MAX_SUBPROMPTS:
            break
    return tuple(subs)
