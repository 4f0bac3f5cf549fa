"""Corpus BLEU with brevity penalty, and the reduced-BLEU variant that
deletes a fixed word set from hypothesis and reference before scoring.

Scoring tokenization is frozen: lowercase, then split words and punctuation
marks into separate tokens. All cumulative scores are on a 0-100 scale;
BLEU means BLEU-4. Zero precision at any order zeroes the cumulative score
unless add-one smoothing is switched on.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .beam import DecodeConfig, beam_search
from .data import Manifest, load_features
from .model import ModelConfig, ModelParams, encode as model_encode
from .tensor import Tensor
from .tokenizer import CasingModel, Vocabulary, decode as subword_decode, truecase

MAX_ORDER = 4

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class BleuError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class BleuReport:
    precisions: tuple[float, ...]  # modified n-gram precisions p1..p4 in [0,1]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    scores: tuple[float, ...]  # cumulative BLEU-1..BLEU-4, 0-100 scale
    degenerate: bool = False  # set when filtering left nothing to score

    @property
    def bleu(self) -> float:
        return self.scores[-1]

    def row(self) -> str:
        return "\t".join(f"{s:.2f}" for s in self.scores)


_ZERO_REPORT = BleuReport(
    precisions=(0.0,) * MAX_ORDER,
    brevity_penalty=0.0,
    candidate_length=0,
    reference_length=0,
    scores=(0.0,) * MAX_ORDER,
    degenerate=True,
)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _effective_ref_length(cand_len: int, ref_lens: list[int]) -> int:
    # closest reference length; ties prefer the shorter
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence, smooth: bool = False) -> BleuReport:
    """Corpus-level BLEU over whitespace/punctuation tokens.

    ``references`` holds one string per hypothesis, or a list of alternative
    strings per hypothesis (the effective reference length then picks the
    closest length per sentence). Counts are clipped per sentence and summed
    corpus-wide; BP = exp(1 - r/c) when the candidate corpus is shorter.
    """
    if len(hypotheses) != len(references):
        raise BleuError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise BleuError("empty corpus")
    hyp_tokens = [tokenize(h) for h in hypotheses]
    ref_tokens = [
        [tokenize(r) for r in (ref if isinstance(ref, (list, tuple)) else [ref])]
        for ref in references
    ]
    return _score_tokens(hyp_tokens, ref_tokens, smooth)


def _score_tokens(hyp_tokens, ref_tokens, smooth: bool) -> BleuReport:
    clipped = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = 0
    r = 0
    for hyp, refs in zip(hyp_tokens, ref_tokens):
        c += len(hyp)
        r += _effective_ref_length(len(hyp), [len(x) for x in refs])
        for n in range(1, MAX_ORDER + 1):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            best = Counter()
            for ref in refs:
                for ng, cnt in _ngrams(ref, n).items():
                    if cnt > best[ng]:
                        best[ng] = cnt
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(cnt, best[ng]) for ng, cnt in counts.items())

    if c == 0 or r == 0:
        return _ZERO_REPORT

    precisions = []
    for n in range(MAX_ORDER):
        num, den = clipped[n], totals[n]
        if smooth and n > 0:
            num, den = num + 1, den + 1
        precisions.append(num / den if den else 0.0)

    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    scores = []
    for k in range(1, MAX_ORDER + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
        else:
            scores.append(100.0 * bp * math.exp(sum(math.log(p) for p in precisions[:k]) / k))
    return BleuReport(
        precisions=tuple(precisions),
        brevity_penalty=bp,
        candidate_length=c,
        reference_length=r,
        scores=tuple(scores),
    )


# -- reduced BLEU ---------------------------------------------------------------


@dataclass(frozen=True)
class ExclusionList:
    """Lowercase word forms deleted from both sides before scoring."""

    words: frozenset[str]

    def __post_init__(self):
        for w in self.words:
            if w != w.lower() or any(ch.isspace() for ch in w):
                raise BleuError(f"exclusion entry {w!r} must be lowercase and whitespace-free")

    def __contains__(self, token: str) -> bool:
        return token in self.words

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "ExclusionList":
        return cls(frozenset(w.strip().lower() for w in words if w.strip()))

    @classmethod
    def load(cls, path: str | Path) -> "ExclusionList":
        words = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                words.append(line)
        return cls.from_words(words)

    @classmethod
    def default(cls) -> "ExclusionList":
        text = resources.files("slt").joinpath("data/stopwords_en.txt").read_text(encoding="utf-8")
        return cls.from_words(
            line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
        )

    @classmethod
    def empty(cls) -> "ExclusionList":
        return cls(frozenset())


def rbleu(hypotheses: Sequence[str], references: Sequence, excl: ExclusionList,
          smooth: bool = False) -> BleuReport:
    """BLEU after deleting excluded tokens from hypothesis and reference.

    Lengths c and r are recomputed on the filtered corpora. When filtering
    leaves nothing on either side, returns an all-zero report flagged
    ``degenerate`` instead of failing.
    """
    if len(hypotheses) != len(references):
        raise BleuError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise BleuError("empty corpus")

    def keep(tokens: list[str]) -> list[str]:
        return [t for t in tokens if t not in excl]

    hyp_tokens = [keep(tokenize(h)) for h in hypotheses]
    ref_tokens = [
        [keep(tokenize(r)) for r in (ref if isinstance(ref, (list, tuple)) else [ref])]
        for ref in references
    ]
    return _score_tokens(hyp_tokens, ref_tokens, smooth)


# -- end-to-end split evaluation ---------------------------------------------------


@dataclass
class EvalResult:
    bleu: BleuReport
    rbleu: BleuReport
    hypotheses: list[str] = field(default_factory=list)
    references: list[str] = field(default_factory=list)
    exact_match: float = 0.0


def evaluate_split(params: ModelParams, manifest: Manifest, vocab: Vocabulary,
                   casing: CasingModel, decode_cfg: DecodeConfig, excl: ExclusionList,
                   hypotheses_path: Optional[str | Path] = None,
                   references_as_hypotheses: bool = False,
                   progress=None) -> EvalResult:
    """Decode a whole manifest with beam search, post-process, and score.

    Every item is beam-decoded, detokenized, truecased, then scored against
    the raw transcripts. Exact match compares scoring tokens. Decoded
    hypotheses can be written to a file for audit.
    """
    config = params.config
    missing = [rec.id for rec in manifest.records if not rec.feature_path.exists()]
    if missing:
        raise FileNotFoundError(f"feature files missing for ids {missing}")

    hyps: list[str] = []
    refs: list[str] = []
    for i, rec in enumerate(manifest.records):
        refs.append(rec.transcript)
        if references_as_hypotheses:
            hyps.append(rec.transcript)
        else:
            feats = load_features(rec.feature_path)
            states, mask = model_encode(
                Tensor(feats[None].astype(np.float32)), np.array([feats.shape[0]]),
                params, config, mode="eval",
            )
            ids, _ = beam_search(states, mask, params, config, decode_cfg)
            hyps.append(truecase(subword_decode(ids, vocab), casing))
        if progress is not None:
            progress(i + 1, len(manifest.records))

    if hypotheses_path is not None:
        Path(hypotheses_path).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")

    exact = sum(tokenize(h) == tokenize(r) for h, r in zip(hyps, refs)) / len(hyps)
    return EvalResult(
        bleu=corpus_bleu(hyps, refs),
        rbleu=rbleu(hyps, refs, excl),
        hypotheses=hyps,
        references=refs,
        exact_match=exact,
    )


def format_report(result_bleu: BleuReport, result_rbleu: BleuReport) -> str:
    """One row in the rBLEU / BLEU-1 / BLEU-2 / BLEU-3 / BLEU column layout."""
    header = "rBLEU\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU"
    row = "\t".join(
        f"{v:.2f}"
        for v in (
            result_rbleu.bleu,
            result_bleu.scores[0],
            result_bleu.scores[1],
            result_bleu.scores[2],
            result_bleu.bleu,
        )
    )
    return header + "\n" + row
