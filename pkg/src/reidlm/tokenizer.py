"""Word-level vocabulary and dialogue formatting.

A dialogue is rendered as::

    <bos> ###Human: <instruction with <Img> <img>*N </Img>> ###Assistant: <answer> <eos> ...

and the loss mask is 1 only on answer tokens and the ``<eos>`` closing them.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK, IMG = "<pad>", "<bos>", "<eos>", "<unk>", "<img>"
HUMAN, ASSISTANT = "###Human:", "###Assistant:"
IMG_OPEN, IMG_CLOSE = "<Img>", "</Img>"
IMAGE_FEATURE = "<ImageFeature>"

# id == position; <pad> must stay at 0
RESERVED = (PAD, BOS, EOS, UNK, IMG, HUMAN, ASSISTANT, IMG_OPEN, IMG_CLOSE)

# Instruction used offline to turn a caption into its continuation target.
TEXT_CONTINUATION_INSTRUCTION = (
    "Continue the following text in a coherent and engaging style with less than 20 words."
)

# Instruction paired with every image during multimodal tuning.
IMAGE_CONTINUATION_INSTRUCTION = (
    "###Human: continue the following image <Img> <ImageFeature> </Img>. "
    "When continuing, focus on the persons in the picture and generate a "
    "continuation related to the persons.\n###Assistant:"
)

_TOKEN_RE = re.compile(
    r"###Human:|###Assistant:|</Img>|<Img>|<ImageFeature>|<pad>|<bos>|<eos>|<unk>|<img>"
    r"|[A-Za-z0-9]+|[^\sA-Za-z0-9]"
)
_MARKERS = set(RESERVED) | {IMAGE_FEATURE}


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation, keeping markers intact."""
    return [tok if tok in _MARKERS else tok.lower() for tok in _TOKEN_RE.findall(text)]


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def img_id(self) -> int:
        return self.index[IMG]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Sequence[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary over ``corpus``; order is frequency desc, then lexicographic."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text) if tok not in _MARKERS)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(tok) for tok in tokenize(text)]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        out.append(vocab.tokens[i])
    return " ".join(out)


@dataclass
class DialogueSample:
    """One image with T (instruction, answer) turns.

    ``image_ref`` is any hashable handle on the image (record index or path).
    """

    image_ref: object
    turns: list[tuple[str, str]]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("a dialogue needs at least one turn")

    @property
    def instruction(self) -> str:
        return self.turns[0][0]

    @property
    def continuation(self) -> str:
        return self.turns[0][1]

    @property
    def T(self) -> int:
        return len(self.turns)


@dataclass
class TokenSequence:
    ids: np.ndarray
    loss_mask: np.ndarray
    image_slots: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _instruction_tokens(instruction: str) -> list[str]:
    toks = tokenize(instruction)
    if not toks or toks[0] != HUMAN:
        toks = [HUMAN] + toks
    if toks[-1] != ASSISTANT:
        toks = toks + [ASSISTANT]
    return toks


def format_dialogue(sample: DialogueSample, vocab: Vocabulary, num_image_tokens: int) -> TokenSequence:
    """Token ids, answer-only loss mask and image slot positions for ``sample``.

    Each ``<ImageFeature>`` placeholder expands to ``num_image_tokens`` slots.
    """
    ids = [vocab.index[BOS]]
    mask = [0]
    slots: list[int] = []
    for instruction, answer in sample.turns:
        ans = tokenize(answer)
        if not ans:
            raise ValueError("empty continuation")
        for tok in _instruction_tokens(instruction):
            if tok == IMAGE_FEATURE:
                for _ in range(num_image_tokens):
                    slots.append(len(ids))
                    ids.append(vocab.img_id)
                    mask.append(0)
            else:
                ids.append(vocab.id(tok))
                mask.append(0)
        for tok in ans:
            ids.append(vocab.id(tok))
            mask.append(1)
        ids.append(vocab.index[EOS])
        mask.append(1)
    if len(slots) != num_image_tokens:
        raise ValueError(
            f"dialogue has {len(slots)} image slots, encoder produces {num_image_tokens} tokens")
    return TokenSequence(np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64),
                         np.array(slots, dtype=np.int64))


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int = 0):
    """Right-pad into arrays ``(ids [B,L], mask [B,L], slots [B,N])``."""
    L = max(len(s) for s in seqs)
    n = {len(s.image_slots) for s in seqs}
    if len(n) != 1:
        raise ValueError("all sequences in a batch need the same number of image slots")
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s.ids
        mask[b, : len(s)] = s.loss_mask
    slots = np.stack([s.image_slots for s in seqs])
    return ids, mask, slots
