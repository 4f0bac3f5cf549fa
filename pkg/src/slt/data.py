"""Feature-file ingestion, manifests, padded batching, and the synthetic
dataset generator used for desk-scale end-to-end validation.

Feature files are a frozen binary format (magic ``SLTF``, version 1,
u32 frame count and dim, float32 little-endian payload) so fixtures stay
portable. The loader applies no transformation whatsoever.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import BOS_ID, EOS_ID, PAD_ID, Vocabulary, encode

FEATURE_MAGIC = b"SLTF"
FEATURE_VERSION = 1

# fixed inventory the synthetic generator draws word types from
_SYNTH_WORDS = (
    "apple baker candle delta eagle forest garden harbor island jungle kettle "
    "lemon marble needle orange pepper quartz river stone tiger umbrella velvet "
    "walnut xenon yellow zephyr anchor bridge canyon dune ember fjord glacier "
    "hollow ivory jasper krill lagoon meadow nectar onyx prairie quill reef "
    "saddle thistle urchin vortex willow yonder zinc acorn basil cedar"
).split()


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class NonFiniteValueError(FeatureFileError):
    pass


class ManifestError(ValueError):
    pass


def write_features(path: str | os.PathLike, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FeatureFileError(f"features must be 2-D (frames x dim), got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<B", FEATURE_VERSION))
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.tobytes())


def load_features(path: str | os.PathLike) -> np.ndarray:
    """Read a feature file exactly as stored; no normalization, no casting."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 13:
        raise TruncatedFileError(f"{path}: header truncated ({len(blob)} bytes)")
    version = blob[4]
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    frames, dim = struct.unpack("<II", blob[5:13])
    if frames < 1 or dim < 1:
        raise FeatureFileError(f"{path}: invalid dimensions {frames}x{dim}")
    expected = 13 + 4 * frames * dim
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=13).reshape(frames, dim).copy()
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return values


# -- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    feature_path: Path
    transcript: str


@dataclass
class Manifest:
    """TSV of (id, feature file, transcript); paths resolve relative to the
    manifest's own directory."""

    records: list[ManifestRecord]
    split: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path: str | os.PathLike, split: str = "") -> "Manifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "id\tfeatures\ttranscript":
            raise ManifestError(f"{path}: missing 'id\\tfeatures\\ttranscript' header")
        records = []
        seen = set()
        missing = []
        for ln, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{ln}: expected 3 tab-separated fields")
            rid, rel, transcript = parts
            if rid in seen:
                raise ManifestError(f"{path}:{ln}: duplicate id {rid!r}")
            seen.add(rid)
            feature_path = (path.parent / rel).resolve()
            if not feature_path.exists():
                missing.append(rid)
            records.append(ManifestRecord(rid, feature_path, transcript))
        if missing:
            raise ManifestError(f"{path}: feature files missing for ids {missing}")
        return cls(records=records, split=split or path.stem)

    @staticmethod
    def save(path: str | os.PathLike, rows: list[tuple[str, str, str]]) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id\tfeatures\ttranscript\n")
            for rid, rel, transcript in rows:
                fh.write(f"{rid}\t{rel}\t{transcript}\n")


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray        # (B, T_max, D), zeros past each length
    source_lengths: np.ndarray  # (B,)
    decoder_input: np.ndarray   # (B, U_max) bos + targets, pad past length
    target_output: np.ndarray   # (B, U_max) targets + eos, pad past length
    target_lengths: np.ndarray  # (B,)


BUCKET_WIDTH = 8  # frames per length bucket


def make_batches(manifest: Manifest, vocab: Vocabulary, batch_size: int,
                 seed: int, epoch: int = 0) -> list[Batch]:
    """Deterministic padded batches for one epoch.

    Items are bucketed by source length (width 8 frames) to bound padding,
    shuffled within buckets, grouped, and the batch order shuffled, all from
    one generator seeded by (seed, epoch). Every item appears exactly once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = []
    for rec in manifest.records:
        feats = load_features(rec.feature_path)
        token_ids = encode(rec.transcript, vocab)
        items.append((rec.id, feats, token_ids))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A, epoch]))
    buckets: dict[int, list] = {}
    for item in items:
        buckets.setdefault(item[1].shape[0] // BUCKET_WIDTH, []).append(item)

    groups = []
    for key in sorted(buckets):
        bucket = buckets[key]
        order = rng.permutation(len(bucket))
        bucket = [bucket[i] for i in order]
        for i in range(0, len(bucket), batch_size):
            groups.append(bucket[i : i + batch_size])
    rng.shuffle(groups)

    return [_pad_group(group) for group in groups]


def _pad_group(group) -> Batch:
    b = len(group)
    dim = group[0][1].shape[1]
    t_max = max(item[1].shape[0] for item in group)
    u_max = max(len(item[2]) + 1 for item in group)

    feats = np.zeros((b, t_max, dim), dtype=np.float32)
    src_len = np.zeros(b, dtype=np.int64)
    dec_in = np.full((b, u_max), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, u_max), PAD_ID, dtype=np.int64)
    tgt_len = np.zeros(b, dtype=np.int64)
    ids = []
    for i, (rid, f, token_ids) in enumerate(group):
        ids.append(rid)
        feats[i, : f.shape[0]] = f
        src_len[i] = f.shape[0]
        seq = [BOS_ID] + list(token_ids) + [EOS_ID]
        dec_in[i, : len(seq) - 1] = seq[:-1]
        tgt_out[i, : len(seq) - 1] = seq[1:]
        tgt_len[i] = len(seq) - 1
    return Batch(ids, feats, src_len, dec_in, tgt_out, tgt_len)


# -- synthetic dataset -------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_items: int = 500
    vocab_words: int = 30
    frames_per_word: int = 4
    dim: int = 64
    noise: float = 0.01
    seed: int = 0
    min_words: int = 3
    max_words: int = 8


def generate_synthetic(out_dir: str | os.PathLike, spec: SyntheticSpec,
                       split: str = "train") -> Path:
    """Write feature files plus a manifest for a learnable toy task.

    Each word type owns a fixed block of ``frames_per_word`` frames drawn once
    from the seeded generator; a sentence's features are its word blocks
    concatenated, plus Gaussian noise. At zero noise the text -> features map
    is injective, so near-perfect BLEU is reachable by construction.

    The split name participates in sentence sampling, so train/val/test
    draw disjoint streams from the same word table.
    """
    if spec.num_items < 1 or spec.vocab_words < 1 or spec.frames_per_word < 1 or spec.dim < 1:
        raise ValueError("synthetic spec parameters must be positive")
    if spec.noise < 0:
        raise ValueError("noise must be >= 0")
    if spec.vocab_words > len(_SYNTH_WORDS):
        raise ValueError(f"at most {len(_SYNTH_WORDS)} word types available")

    out_dir = Path(out_dir)
    feat_dir = out_dir / f"{split}_features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    table_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7AB1E]))
    words = list(_SYNTH_WORDS[: spec.vocab_words])
    blocks = {
        w: table_rng.standard_normal((spec.frames_per_word, spec.dim)).astype(np.float32)
        for w in words
    }

    sent_rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 0x5E27, zlib.crc32(split.encode("utf-8"))])
    )
    rows = []
    for idx in range(spec.num_items):
        n_words = int(sent_rng.integers(spec.min_words, spec.max_words + 1))
        sentence = [words[int(sent_rng.integers(0, len(words)))] for _ in range(n_words)]
        feats = np.concatenate([blocks[w] for w in sentence], axis=0)
        if spec.noise > 0:
            feats = feats + sent_rng.normal(0.0, spec.noise, size=feats.shape).astype(np.float32)
        rid = f"{split}{idx:05d}"
        rel = f"{split}_features/{rid}.sltf"
        write_features(out_dir / rel, feats.astype(np.float32))
        rows.append((rid, rel, " ".join(sentence)))

    manifest_path = out_dir / f"{split}.tsv"
    Manifest.save(manifest_path, rows)
    return manifest_path


def word_blocks(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """The generator's word -> frame-block table (for oracle checks)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7AB1E]))
    return {
        w: rng.standard_normal((spec.frames_per_word, spec.dim)).astype(np.float32)
        for w in _SYNTH_WORDS[: spec.vocab_words]
    }
