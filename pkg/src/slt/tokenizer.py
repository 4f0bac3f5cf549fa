"""Subword vocabulary (byte-pair-encoding style) and truecasing.

Text is lowercased and whitespace-split before segmentation. Word-initial
symbols carry the boundary marker ``▁`` so decoding can restore spaces.
Merge rules are learned greedily by pair frequency with a lexicographic
tie-break, which makes training fully deterministic.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

BOS_ID = 0
PAD_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIALS = ("<s>", "<pad>", "</s>", "<unk>")
BOUNDARY = "▁"  # ▁ marks a word-initial subword

_UNK_SURFACE = "⁇"  # ⁇ rendered for unknown ids on decode


class TokenizerError(ValueError):
    pass


class EmptyCorpusError(TokenizerError):
    pass


class VocabSizeError(TokenizerError):
    pass


def _words(line: str) -> list[str]:
    return line.lower().split()


def _word_symbols(word: str) -> list[str]:
    chars = list(word)
    return [BOUNDARY + chars[0]] + chars[1:]


@dataclass
class Vocabulary:
    """Subword inventory with dense ids; specials fixed at 0..3 (pad=1)."""

    subwords: list[str]
    merges: list[tuple[str, str]]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.subwords[:4] != list(SPECIALS):
            raise TokenizerError("first four ids must be the reserved specials")
        if len(set(self.subwords)) != len(self.subwords):
            raise TokenizerError("duplicate subword strings in vocabulary")
        self._index = {s: i for i, s in enumerate(self.subwords)}
        for left, right in self.merges:
            if left + right not in self._index:
                raise TokenizerError(f"merge output {left + right!r} missing from table")

    def __len__(self) -> int:
        return len(self.subwords)

    @property
    def size(self) -> int:
        return len(self.subwords)

    def id_of(self, subword: str) -> int:
        return self._index.get(subword, UNK_ID)

    # -- persistence (plain-text format, header SLTVOCAB 1) -----------------

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("SLTVOCAB 1\n")
            fh.write(f"size={len(self.subwords)}\n")
            for sub in self.subwords:
                fh.write(sub + "\n")
            fh.write("#MERGES\n")
            for left, right in self.merges:
                fh.write(f"{left}\t{right}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines[0] != "SLTVOCAB 1":
            raise TokenizerError(f"{path}: bad vocabulary header {lines[0]!r}")
        size = int(lines[1].removeprefix("size="))
        subwords = lines[2 : 2 + size]
        if len(subwords) != size or lines[2 + size] != "#MERGES":
            raise TokenizerError(f"{path}: truncated vocabulary file")
        merges = []
        for line in lines[3 + size :]:
            if not line:
                continue
            left, right = line.split("\t")
            merges.append((left, right))
        return cls(subwords=subwords, merges=merges)


def train_vocab(corpus: list[str], size: int) -> Vocabulary:
    """Learn a BPE vocabulary of at most ``size`` entries from text lines.

    Pairs are merged most-frequent-first until the table is full or no pair
    occurs twice; ties break on the lexicographically smallest pair, so two
    runs over the same corpus produce identical merge lists.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(_words(line))
    if not word_counts:
        raise EmptyCorpusError("corpus contains no words")

    symbol_seqs = {w: _word_symbols(w) for w in word_counts}
    base = sorted({s for seq in symbol_seqs.values() for s in seq})
    if size < len(base) + len(SPECIALS):
        raise VocabSizeError(
            f"size {size} below base inventory {len(base)} + {len(SPECIALS)} specials"
        )

    subwords = list(SPECIALS) + base
    merges: list[tuple[str, str]] = []
    while len(subwords) < size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, seq in symbol_seqs.items():
            n = word_counts[word]
            for a, b in zip(seq, seq[1:]):
                pair_counts[(a, b)] += n
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merged = pair[0] + pair[1]
        merges.append(pair)
        subwords.append(merged)
        for word, seq in symbol_seqs.items():
            symbol_seqs[word] = _apply_merge(seq, pair, merged)
    return Vocabulary(subwords=subwords, merges=merges)


def _apply_merge(seq: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, segment with the learned merges, map to ids (unknown -> unk)."""
    ids: list[int] = []
    for word in _words(text):
        seq = _word_symbols(word)
        for pair in vocab.merges:
            seq = _apply_merge(seq, pair, pair[0] + pair[1])
        ids.extend(vocab.id_of(s) for s in seq)
    return ids


def decode(ids: list[int], vocab: Vocabulary) -> str:
    """Invert `encode`: concatenate subwords and restore word boundaries.

    Specials other than unk are dropped; unk renders as ⁇.
    """
    pieces = []
    for i in ids:
        if i < 0 or i >= len(vocab):
            raise TokenizerError(f"id {i} out of range for vocabulary of size {len(vocab)}")
        if i == UNK_ID:
            pieces.append(BOUNDARY + _UNK_SURFACE)
        elif i in (BOS_ID, PAD_ID, EOS_ID):
            continue
        else:
            pieces.append(vocab.subwords[i])
    return "".join(pieces).replace(BOUNDARY, " ").strip()


# -- truecasing ---------------------------------------------------------------


@dataclass
class CasingModel:
    """Most-frequent surface form per lowercase key, plus initial-capital rule.

    Keys may span several words (applied greedily, longest match first);
    the model learned from transcripts only ever emits single-word keys.
    """

    forms: dict[str, str]
    capitalize_initial: bool = True

    def __post_init__(self):
        for key, surface in self.forms.items():
            if key != key.lower():
                raise TokenizerError(f"casing key {key!r} must be lowercase")
            if surface.lower() != key:
                raise TokenizerError(f"surface {surface!r} must match key {key!r} up to case")

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("SLTCASE 1\n")
            fh.write(f"capitalize_initial={int(self.capitalize_initial)}\n")
            for key in sorted(self.forms):
                fh.write(f"{key}\t{self.forms[key]}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CasingModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "SLTCASE 1":
            raise TokenizerError(f"{path}: bad casing-model header")
        cap = bool(int(lines[1].removeprefix("capitalize_initial=")))
        forms = {}
        for line in lines[2:]:
            if not line:
                continue
            key, surface = line.split("\t")
            forms[key] = surface
        return cls(forms=forms, capitalize_initial=cap)


def train_casing(transcripts: list[str]) -> CasingModel:
    """Count surface forms of each word; keep the winner when it isn't lowercase.

    Sentence-initial words are skipped while counting so the forced capital
    does not contaminate the statistics.
    """
    counts: dict[str, Counter[str]] = {}
    for line in transcripts:
        for pos, token in enumerate(line.split()):
            if pos == 0:
                continue
            counts.setdefault(token.lower(), Counter())[token] += 1
    forms = {}
    for key, surface_counts in counts.items():
        surface = min(surface_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if surface != key:
            forms[key] = surface
    return CasingModel(forms=forms)


def truecase(text: str, casing: CasingModel) -> str:
    """Restore capitalization: per-word (or phrase) surface forms, then a
    capital on the sentence-initial word. Unknown words pass through."""
    words = text.split()
    if not words:
        return ""
    max_span = max((key.count(" ") + 1 for key in casing.forms), default=1)
    out: list[str] = []
    i = 0
    while i < len(words):
        match = None
        for span in range(min(max_span, len(words) - i), 0, -1):
            key = " ".join(words[i : i + span]).lower()
            if key in casing.forms:
                match = (span, casing.forms[key])
                break
        if match:
            out.append(match[1])
            i += match[0]
        else:
            out.append(words[i])
            i += 1
    if casing.capitalize_initial and out[0]:
        out[0] = out[0][0].upper() + out[0][1:]
    return " ".join(out)
