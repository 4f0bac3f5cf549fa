"""Beam-search and greedy decoding.

The search core is model-agnostic: it only needs a function mapping a batch
of token prefixes to next-token log-probabilities, which keeps it testable
against hand-built toy distributions and exhaustive enumeration. The model
wrappers re-run the decoder on the whole prefix each step (no incremental
cache); desk-scale sequences keep that affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ModelConfig, ModelParams, decode_step
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID, PAD_ID

StepFn = Callable[[np.ndarray], np.ndarray]  # (B, t) prefixes -> (B, V) logprobs

MAX_LEN_CAP = 200


@dataclass(frozen=True)
class Hypothesis:
    """A (partial) decode: ids always start with bos; finished means eos
    was emitted and the hypothesis will not be extended further."""

    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False

    @property
    def generated(self) -> int:
        return len(self.tokens) - 1


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_len: Optional[int] = None  # None: 2 * source frames + 10, capped at 200
    length_penalty: float = 1.0

    def validate(self) -> "DecodeConfig":
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        return self


def default_max_len(source_frames: int) -> int:
    return min(2 * source_frames + 10, MAX_LEN_CAP)


def penalized(h: Hypothesis, alpha: float) -> float:
    return h.logprob / (h.generated**alpha) if h.generated else 0.0


def _rank_key(h: Hypothesis, alpha: float):
    # higher penalized score first; ties prefer lower token ids, then shorter
    return (-penalized(h, alpha), h.tokens)


def beam_search_steps(step_fn: StepFn, vocab_size: int, cfg: DecodeConfig, max_len: int,
                      bos: int = BOS_ID, eos: int = EOS_ID, pad: int = PAD_ID) -> Hypothesis:
    """Core beam search over an arbitrary next-token distribution.

    Expands every live hypothesis over the vocabulary (pad and bos are never
    generated) and keeps the top candidates by cumulative log-probability.
    A hypothesis that emits eos is banked and permanently consumes one of the
    ``beam_size`` slots, so the search stops exactly when ``beam_size``
    hypotheses are banked (live becomes empty) or ``max_len`` tokens were
    generated. Final ranking divides by length^length_penalty; ties break on
    lower token ids, then length.
    """
    cfg.validate()
    banned = [t for t in (pad, bos) if 0 <= t < vocab_size]
    token_order = np.arange(vocab_size)
    live = [Hypothesis((bos,), 0.0)]
    banked: list[Hypothesis] = []

    while live and len(banked) < cfg.beam_size:
        if live[0].generated >= max_len:
            break
        prefixes = np.array([h.tokens for h in live], dtype=np.int64)
        logprobs = np.asarray(step_fn(prefixes), dtype=np.float64)

        slots = cfg.beam_size - len(banked)
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for row, hyp in enumerate(live):
            lp = logprobs[row].copy()
            lp[banned] = -np.inf
            # exact per-row top-k: primary score desc, tie on token id asc
            order = np.lexsort((token_order, -lp))[:slots]
            for tok in order:
                score = hyp.logprob + float(lp[tok])
                if score == -np.inf:
                    continue
                candidates.append((score, hyp.tokens + (int(tok),)))

        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tokens in candidates[:slots]:
            if tokens[-1] == eos:
                banked.append(Hypothesis(tokens, score, finished=True))
            else:
                live.append(Hypothesis(tokens, score))

    pool = banked + live
    if not pool:
        raise RuntimeError("beam search retained no hypotheses")
    return min(pool, key=lambda h: _rank_key(h, cfg.length_penalty))


def greedy_steps(step_fn: StepFn, vocab_size: int, max_len: int,
                 bos: int = BOS_ID, eos: int = EOS_ID, pad: int = PAD_ID) -> Hypothesis:
    """Argmax decoding until eos or the length cap; ties take the lowest id."""
    banned = [t for t in (pad, bos) if 0 <= t < vocab_size]
    tokens = [bos]
    score = 0.0
    for _ in range(max_len):
        lp = np.asarray(step_fn(np.array([tokens], dtype=np.int64)), dtype=np.float64)[0].copy()
        lp[banned] = -np.inf
        tok = int(np.argmax(lp))
        tokens.append(tok)
        score += float(lp[tok])
        if tok == eos:
            return Hypothesis(tuple(tokens), score, finished=True)
    return Hypothesis(tuple(tokens), score, finished=False)


# -- model-facing wrappers -----------------------------------------------------


def model_step_fn(encoder_states: Tensor, encoder_mask: np.ndarray,
                  params: ModelParams, config: ModelConfig) -> StepFn:
    """Next-token distribution for one encoded sentence, recomputing the
    decoder prefix each call; the encoder states broadcast over the beam."""
    if encoder_states.shape[0] != 1:
        raise ValueError("decoding operates on one sentence at a time")
    if encoder_states.shape[1] == 0 or not encoder_mask.any():
        raise ValueError("empty encoder states")
    states_data = encoder_states.data

    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        states = Tensor(np.broadcast_to(states_data, (n,) + states_data.shape[1:]))
        mask = np.broadcast_to(encoder_mask, (n, encoder_mask.shape[1]))
        lp = decode_step(prefixes, states, mask, params, config, mode="eval")
        return lp.data[:, -1, :]

    return step


def strip_specials(h: Hypothesis) -> list[int]:
    out = [t for t in h.tokens[1:] if t != EOS_ID]
    return out


def beam_search(encoder_states: Tensor, encoder_mask: np.ndarray, params: ModelParams,
                config: ModelConfig, decode_cfg: DecodeConfig) -> tuple[list[int], float]:
    """Best decode for one encoded sentence: (generated ids sans specials,
    length-penalized score)."""
    step = model_step_fn(encoder_states, encoder_mask, params, config)
    max_len = decode_cfg.max_len or default_max_len(int(encoder_mask.sum()))
    best = beam_search_steps(step, config.vocab_size, decode_cfg, max_len)
    return strip_specials(best), penalized(best, decode_cfg.length_penalty)


def greedy(encoder_states: Tensor, encoder_mask: np.ndarray, params: ModelParams,
           config: ModelConfig, max_len: Optional[int] = None) -> tuple[list[int], float]:
    step = model_step_fn(encoder_states, encoder_mask, params, config)
    max_len = max_len or default_max_len(int(encoder_mask.sum()))
    best = greedy_steps(step, config.vocab_size, max_len)
    return strip_specials(best), penalized(best, 1.0)
