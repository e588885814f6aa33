"""Embedding and language instruction templates rendered to token ids.

Layouts (pre-splice, ``IMG`` is later replaced by the projected patch rows)::

    embedding: BOS SYS HUM [IMG] [caption] compress this {image|sentence|input} in one word ASST
    language:  BOS SYS HUM IMG describe the image ASST caption EOS
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import COLORS, DEFAULT_GRID, NUMBER_WORDS, SHAPES, MultimodalPair
from .errors import ArgumentError
from .tokenizer import ASST, BOS, EOS, HUM, IMG, PAD, SYS, Vocab, build_vocab

EMBED_PROMPT = "compress this {} in one word"
LANGUAGE_PROMPT = "describe the image"
PROMPT_TEXTS = tuple(EMBED_PROMPT.format(w) for w in ("image", "sentence", "input")) + (LANGUAGE_PROMPT,)

CAPTION_GLUE = ("a", "at", "row", "column", "and")

EMBED_IMAGE = "embed_image"
EMBED_TEXT = "embed_text"
EMBED_BOTH = "embed_both"
LANGUAGE = "language"
EMBED_KINDS = (EMBED_IMAGE, EMBED_TEXT, EMBED_BOTH)


@dataclass(frozen=True, eq=False)
class Instruction:
    """A rendered instruction.

    ``token_ids`` is the pre-splice sequence.  ``last_index`` and ``loss_mask``
    address the post-splice sequence, where the single IMG token at
    ``image_slot`` expands into one position per patch row.
    """

    token_ids: tuple[int, ...]
    kind: str
    last_index: int
    image_slot: int | None = None
    patches: np.ndarray | None = None
    loss_mask: tuple[bool, ...] | None = None

    @property
    def n_patches(self) -> int:
        return 0 if self.patches is None else self.patches.shape[0]

    @property
    def length(self) -> int:
        """Post-splice sequence length."""
        return len(self.token_ids) + (self.n_patches - 1 if self.image_slot is not None else 0)

    def spliced_ids(self) -> np.ndarray:
        """Post-splice token ids; patch positions carry the IMG id."""
        ids = list(self.token_ids)
        if self.image_slot is not None:
            ids[self.image_slot : self.image_slot + 1] = [IMG] * self.n_patches
        return np.array(ids, dtype=np.intp)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instruction):
            return NotImplemented
        same_patches = (self.patches is None and other.patches is None) or (
            self.patches is not None and other.patches is not None and np.array_equal(self.patches, other.patches)
        )
        return (
            self.token_ids == other.token_ids
            and self.kind == other.kind
            and self.last_index == other.last_index
            and self.image_slot == other.image_slot
            and self.loss_mask == other.loss_mask
            and same_patches
        )

    __hash__ = None


def _prompt_ids(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text)


def build_embedding_instruction(vocab: Vocab, image: np.ndarray | None = None, text: str | None = None) -> Instruction:
    """Embedding instruction over an optional patch matrix and/or optional text."""
    if image is None and text is None:
        raise ArgumentError("an embedding instruction needs an image, a text, or both")
    ids = [BOS, SYS, HUM]
    slot = None
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2 or image.shape[0] < 1:
            raise ArgumentError("image must be a non-empty patch matrix")
        slot = len(ids)
        ids.append(IMG)
    if text is not None:
        ids += vocab.encode(text)
    if image is not None and text is not None:
        kind, word = EMBED_BOTH, "input"
    elif image is not None:
        kind, word = EMBED_IMAGE, "image"
    else:
        kind, word = EMBED_TEXT, "sentence"
    ids += _prompt_ids(vocab, EMBED_PROMPT.format(word))
    ids.append(ASST)
    inst = Instruction(tuple(ids), kind, last_index=0, image_slot=slot, patches=image)
    return _with_last_index(inst)


def build_language_instruction(vocab: Vocab, pair: MultimodalPair) -> Instruction:
    """Captioning instruction; the loss mask covers the caption tokens and EOS."""
    caption = vocab.encode(pair.caption)
    patches = pair.patches
    ids = [BOS, SYS, HUM, IMG] + _prompt_ids(vocab, LANGUAGE_PROMPT) + [ASST] + caption + [EOS]
    n_prompt = len(ids) - len(caption) - 1
    n_extra = patches.shape[0] - 1
    mask = (False,) * (n_prompt + n_extra) + (True,) * (len(caption) + 1)
    inst = Instruction(tuple(ids), LANGUAGE, last_index=0, image_slot=3, patches=patches, loss_mask=mask)
    return _with_last_index(inst)


def _with_last_index(inst: Instruction) -> Instruction:
    return Instruction(
        inst.token_ids,
        inst.kind,
        last_token_index(inst.spliced_ids(), PAD),
        inst.image_slot,
        inst.patches,
        inst.loss_mask,
    )


def last_token_index(ids: Sequence[int], pad_id: int = PAD) -> int:
    """Index of the final non-pad token."""
    ids = np.asarray(ids)
    nonpad = np.flatnonzero(ids != pad_id)
    if nonpad.size == 0:
        raise ArgumentError("sequence contains only padding")
    return int(nonpad[-1])


def grammar_words(grid: int = DEFAULT_GRID) -> list[str]:
    """Every word the caption grammar can emit for a ``grid`` x ``grid`` board."""
    return sorted(set(COLORS) | set(SHAPES) | set(NUMBER_WORDS[:grid]) | set(CAPTION_GLUE))


def instruction_vocab(grid: int = DEFAULT_GRID) -> Vocab:
    """Vocabulary covering captions and all instruction prompts."""
    return build_vocab([" ".join(grammar_words(grid)), *PROMPT_TEXTS])
