"""Closed word-level vocabulary shared by the caption and plan grammars."""
from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Iterable, Sequence

from . import world

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
GLOBAL, OBJ, SUB, END, SEP = "GLOBAL", "OBJ", "SUB", "END", ";"
CAPTION_TASK, PLAN_TASK = "CAPTION_TASK", "PLAN_TASK"

LOCATION_BINS = 16
ORDINALS = ("first", "second", "third", "fourth")
RELATIONS = ("left_of", "right_of", "above", "below")


def _build_words() -> tuple[str, ...]:
    words: list[str] = [PAD, BOS, EOS, UNK]
    words += [GLOBAL, OBJ, SUB, END, SEP]
    words += [CAPTION_TASK, PLAN_TASK]
    words += [f"loc_x_{i}" for i in range(LOCATION_BINS)]
    words += [f"loc_y_{i}" for i in range(LOCATION_BINS)]
    words += list(world.SHAPES)
    words += list(world.FOREGROUND_COLORS)
    words += list(world.BACKGROUND_COLORS)
    words += list(world.TEXTURES)
    words += list(world.SIZES)
    words += [f"rot_{r}" for r in world.ROTATIONS]
    words += list(world.LIGHT_LEVELS)
    words += list(RELATIONS)
    words += list(ORDINALS)
    words += ["light", "background"]
    assert len(words) == len(set(words)), "duplicate vocabulary entry"
    return tuple(words)


class Vocabulary:
    """Fixed token table; ids are dense and stable across runs."""

    def __init__(self) -> None:
        self.words = _build_words()
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.word_to_id[PAD]
        self.bos_id = self.word_to_id[BOS]
        self.eos_id = self.word_to_id[EOS]
        self.unk_id = self.word_to_id[UNK]
        self.end_id = self.word_to_id[END]
        self.caption_task_id = self.word_to_id[CAPTION_TASK]
        self.plan_task_id = self.word_to_id[PLAN_TASK]

    def __len__(self) -> int:
        return len(self.words)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()

    def encode_words(self, words: Iterable[str], strict: bool = True) -> list[int]:
        ids = []
        for w in words:
            i = self.word_to_id.get(w)
            if i is None:
                if strict:
                    raise ValueError(f"unknown word {w!r}")
                i = self.unk_id
            ids.append(i)
        return ids

    def ids_to_words(
        self, ids: Sequence[int], strip_special: bool = True
    ) -> tuple[str, ...]:
        skip = {self.pad_id, self.bos_id, self.eos_id} if strip_special else set()
        out = []
        for i in ids:
            if int(i) < 0 or int(i) >= len(self.words):
                raise ValueError(f"token id {i} out of range")
            if int(i) in skip:
                continue
            out.append(self.words[int(i)])
        return tuple(out)

    def tokenize(self, text: str, strict: bool = True) -> list[int]:
        """Whitespace split, map to ids, wrap in bos/eos."""
        words = text.split()
        return [self.bos_id, *self.encode_words(words, strict=strict), self.eos_id]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.ids_to_words(ids, strip_special=True))


@lru_cache(maxsize=1)
def get_vocab() -> Vocabulary:
    return Vocabulary()
