import struct

import numpy as np
import pytest

from slt.data import (
    BadMagicError,
    Manifest,
    ManifestError,
    NonFiniteValueError,
    SyntheticSpec,
    TruncatedFileError,
    generate_synthetic,
    load_features,
    make_batches,
    word_blocks,
    write_features,
)
from slt.model import ModelConfig, init_params, encode as model_encode
from slt.tensor import Tensor
from slt.tokenizer import PAD_ID, train_vocab
from slt.training import LossConfig, smoothed_ce
from slt.model import decode_step


class TestFeatureFiles:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((7, 5)).astype(np.float32)
        path = tmp_path / "x.sltf"
        write_features(path, values)
        loaded = load_features(path)
        assert np.array_equal(loaded, values)
        assert loaded.dtype == np.float32

    def test_hand_written_fixture(self, tmp_path):
        # 3x4 file assembled byte by byte; loader must hand back the exact
        # floats in row-major order
        floats = [float(i) / 8 for i in range(12)]
        blob = b"SLTF" + bytes([1]) + struct.pack("<II", 3, 4) + struct.pack("<12f", *floats)
        path = tmp_path / "hand.sltf"
        path.write_bytes(blob)
        loaded = load_features(path)
        assert loaded.shape == (3, 4)
        assert loaded.reshape(-1).tolist() == pytest.approx(floats)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sltf"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(BadMagicError):
            load_features(path)

    def test_truncated_names_byte_counts(self, tmp_path):
        values = np.ones((4, 3), dtype=np.float32)
        path = tmp_path / "t.sltf"
        write_features(path, values)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])  # cut mid-frame
        with pytest.raises(TruncatedFileError, match=rf"expected {13 + 48} bytes, found {13 + 48 - 7}"):
            load_features(path)

    def test_non_finite_rejected(self, tmp_path):
        values = np.ones((2, 2), dtype=np.float32)
        values[1, 1] = np.nan
        path = tmp_path / "nan.sltf"
        with open(path, "wb") as fh:
            fh.write(b"SLTF" + bytes([1]) + struct.pack("<II", 2, 2) + values.tobytes())
        with pytest.raises(NonFiniteValueError):
            load_features(path)

    def test_loader_applies_no_transformation(self, tmp_path):
        values = (np.arange(12, dtype=np.float32).reshape(3, 4) - 5.5) * 1e3
        path = tmp_path / "raw.sltf"
        write_features(path, values)
        assert load_features(path).tobytes() == values.tobytes()


class TestManifest:
    def test_load_and_relative_paths(self, tmp_path):
        write_features(tmp_path / "a.sltf", np.ones((2, 3), dtype=np.float32))
        Manifest.save(tmp_path / "train.tsv", [("a", "a.sltf", "hello world")])
        manifest = Manifest.load(tmp_path / "train.tsv")
        assert len(manifest) == 1
        assert manifest.records[0].transcript == "hello world"
        assert manifest.records[0].feature_path.exists()

    def test_duplicate_id_rejected(self, tmp_path):
        write_features(tmp_path / "a.sltf", np.ones((2, 3), dtype=np.float32))
        Manifest.save(tmp_path / "m.tsv", [("a", "a.sltf", "x"), ("a", "a.sltf", "y")])
        with pytest.raises(ManifestError, match="duplicate"):
            Manifest.load(tmp_path / "m.tsv")

    def test_missing_feature_file_listed(self, tmp_path):
        Manifest.save(tmp_path / "m.tsv", [("ghost", "ghost.sltf", "x")])
        with pytest.raises(ManifestError, match="ghost"):
            Manifest.load(tmp_path / "m.tsv")

    def test_header_required(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\tb.sltf\tx\n")
        with pytest.raises(ManifestError, match="header"):
            Manifest.load(tmp_path / "m.tsv")


def build_corpus(tmp_path, n=20, seed=3):
    spec = SyntheticSpec(num_items=n, vocab_words=6, frames_per_word=2, dim=8,
                         noise=0.0, seed=seed, min_words=2, max_words=5)
    manifest = Manifest.load(generate_synthetic(tmp_path, spec, split="train"))
    vocab = train_vocab([r.transcript for r in manifest.records], 100)
    return manifest, vocab


class TestBatching:
    def test_partition_property(self, tmp_path):
        manifest, vocab = build_corpus(tmp_path)
        batches = make_batches(manifest, vocab, batch_size=6, seed=0)
        assert sum(len(b.ids) for b in batches) == len(manifest)
        assert all(len(b.ids) <= 6 for b in batches)
        seen = [rid for b in batches for rid in b.ids]
        assert sorted(seen) == sorted(r.id for r in manifest.records)

    def test_same_seed_same_composition(self, tmp_path):
        manifest, vocab = build_corpus(tmp_path)
        a = make_batches(manifest, vocab, batch_size=4, seed=7)
        b = make_batches(manifest, vocab, batch_size=4, seed=7)
        assert [x.ids for x in a] == [x.ids for x in b]
        for x, y in zip(a, b):
            assert np.array_equal(x.features, y.features)

    def test_different_epoch_different_order(self, tmp_path):
        manifest, vocab = build_corpus(tmp_path, n=30)
        a = make_batches(manifest, vocab, batch_size=4, seed=7, epoch=0)
        b = make_batches(manifest, vocab, batch_size=4, seed=7, epoch=1)
        assert [x.ids for x in a] != [x.ids for x in b]

    def test_batch_size_one_enumerates_items(self, tmp_path):
        manifest, vocab = build_corpus(tmp_path)
        batches = make_batches(manifest, vocab, batch_size=1, seed=0)
        assert len(batches) == len(manifest)
        assert all(len(b.ids) == 1 for b in batches)

    def test_padding_layout(self, tmp_path):
        manifest, vocab = build_corpus(tmp_path)
        for batch in make_batches(manifest, vocab, batch_size=8, seed=1):
            for i in range(len(batch.ids)):
                assert np.all(batch.features[i, batch.source_lengths[i]:] == 0.0)
                assert np.all(batch.decoder_input[i, batch.target_lengths[i]:] == PAD_ID)
                assert np.all(batch.target_output[i, batch.target_lengths[i]:] == PAD_ID)
                assert batch.decoder_input[i, 0] == 0  # bos
                # no interior pads
                assert np.all(batch.decoder_input[i, : batch.target_lengths[i]] != PAD_ID)

    def test_padding_invisible_to_loss(self, tmp_path):
        # batch loss equals the token-weighted mean of per-item losses
        manifest, vocab = build_corpus(tmp_path, n=6)
        config = ModelConfig(encoder_layers=1, decoder_layers=1, embed_dim=8, ffn_dim=16,
                             attention_heads=2, activation="relu", dropout=0.0,
                             feature_dim=8, vocab_size=len(vocab), max_positions=64)
        params = init_params(config, 0)
        loss_cfg = LossConfig(epsilon=0.1, num_classes=config.vocab_size)
        batches = make_batches(manifest, vocab, batch_size=6, seed=0)
        batch = max(batches, key=lambda b: len(b.ids))

        states, mask = model_encode(Tensor(batch.features), batch.source_lengths, params, config)
        lp = decode_step(batch.decoder_input, states, mask, params, config)
        batch_loss, batch_count = smoothed_ce(lp, batch.target_output, loss_cfg)

        total, count = 0.0, 0
        for i in range(len(batch.ids)):
            f = batch.features[i : i + 1, : batch.source_lengths[i]]
            s, m = model_encode(Tensor(f), batch.source_lengths[i : i + 1], params, config)
            u = batch.target_lengths[i]
            lp_i = decode_step(batch.decoder_input[i : i + 1, :u], s, m, params, config)
            loss_i, count_i = smoothed_ce(lp_i, batch.target_output[i : i + 1, :u], loss_cfg)
            total += loss_i.item() * count_i
            count += count_i
        assert count == batch_count
        assert batch_loss.item() == pytest.approx(total / count, abs=1e-5)


class TestSynthetic:
    def test_pure_function_of_seed(self, tmp_path):
        spec = SyntheticSpec(num_items=5, vocab_words=4, frames_per_word=3, dim=6, noise=0.02, seed=9)
        m1 = Manifest.load(generate_synthetic(tmp_path / "a", spec))
        m2 = Manifest.load(generate_synthetic(tmp_path / "b", spec))
        for r1, r2 in zip(m1.records, m2.records):
            assert r1.transcript == r2.transcript
            assert np.array_equal(load_features(r1.feature_path), load_features(r2.feature_path))

    def test_frame_count_construction(self, tmp_path):
        spec = SyntheticSpec(num_items=10, vocab_words=5, frames_per_word=3, dim=4, noise=0.0, seed=1)
        manifest = Manifest.load(generate_synthetic(tmp_path, spec))
        assert len(manifest) == 10
        for rec in manifest.records:
            frames = load_features(rec.feature_path).shape[0]
            assert frames == 3 * len(rec.transcript.split())

    def test_zero_noise_identical_text_identical_features(self, tmp_path):
        spec = SyntheticSpec(num_items=40, vocab_words=3, frames_per_word=2, dim=4,
                             noise=0.0, seed=2, min_words=2, max_words=3)
        manifest = Manifest.load(generate_synthetic(tmp_path, spec))
        by_text = {}
        for rec in manifest.records:
            by_text.setdefault(rec.transcript, []).append(load_features(rec.feature_path))
        dup = [v for v in by_text.values() if len(v) > 1]
        assert dup, "expected repeated sentences in a tiny vocabulary"
        for group in dup:
            for other in group[1:]:
                assert np.array_equal(group[0], other)

    def test_nearest_neighbor_oracle_recovers_words(self, tmp_path):
        # 1-NN against the generator's own word blocks: task is learnable
        spec = SyntheticSpec(num_items=50, vocab_words=30, frames_per_word=4, dim=64,
                             noise=0.01, seed=11)
        manifest = Manifest.load(generate_synthetic(tmp_path, spec))
        blocks = word_blocks(spec)
        names = list(blocks)
        stacked = np.stack([blocks[w] for w in names])  # (W, k, D)
        correct = total = 0
        for rec in manifest.records:
            feats = load_features(rec.feature_path)
            words = rec.transcript.split()
            for j, word in enumerate(words):
                block = feats[j * 4 : (j + 1) * 4]
                dists = ((stacked - block[None]) ** 2).sum(axis=(1, 2))
                correct += names[int(np.argmin(dists))] == word
                total += 1
        assert correct / total >= 0.99

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, SyntheticSpec(num_items=0))
        with pytest.raises(ValueError):
            generate_synthetic(tmp_path, SyntheticSpec(noise=-1.0))
