"""Asymmetric transformer encoder-decoder over precomputed visual features.

The encoder ingests T x D feature sequences through a linear projection; the
decoder is a standard causal transformer with cross-attention and an untied
output projection. Blocks are pre-norm (norm before each sublayer, final
norm after the stack). All math runs on the autodiff tensors from
``slt.tensor``; parameters live in a flat name -> Tensor mapping.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as tt
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SLTCKPT1"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 6
    decoder_layers: int = 3
    embed_dim: int = 256
    ffn_dim: int = 1024
    attention_heads: int = 4
    activation: str = "relu"
    dropout: float = 0.3
    feature_dim: int = 1024
    vocab_size: int = 7000
    max_positions: int = 1024

    def validate(self) -> "ModelConfig":
        for name in ("encoder_layers", "decoder_layers", "embed_dim", "ffn_dim",
                     "attention_heads", "feature_dim", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.attention_heads != 0:
            raise ConfigError(
                f"embed_dim={self.embed_dim} not divisible by attention_heads={self.attention_heads}"
            )
        if self.embed_dim % 2 != 0:
            raise ConfigError(f"embed_dim must be even for sinusoidal positions, got {self.embed_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be relu or gelu, got {self.activation!r}")
        return self

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "activation":
                kwargs[f.name] = raw
            elif f.name == "dropout":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs).validate()


def _attention_param_specs(prefix: str, d: int):
    for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
        yield f"{prefix}.{proj}.weight", (d, d)
        yield f"{prefix}.{proj}.bias", (d,)


def _layer_norm_specs(prefix: str, d: int):
    yield f"{prefix}.gain", (d,)
    yield f"{prefix}.bias", (d,)


def parameter_specs(config: ModelConfig):
    """Yield (name, shape) for every trainable tensor, in a fixed order."""
    d, ffn = config.embed_dim, config.ffn_dim
    yield "encoder.feat_proj.weight", (config.feature_dim, d)
    yield "encoder.feat_proj.bias", (d,)
    for i in range(config.encoder_layers):
        p = f"encoder.layers.{i}"
        yield from _attention_param_specs(f"{p}.self_attn", d)
        yield from _layer_norm_specs(f"{p}.self_attn_layer_norm", d)
        yield f"{p}.fc1.weight", (d, ffn)
        yield f"{p}.fc1.bias", (ffn,)
        yield f"{p}.fc2.weight", (ffn, d)
        yield f"{p}.fc2.bias", (d,)
        yield from _layer_norm_specs(f"{p}.final_layer_norm", d)
    yield from _layer_norm_specs("encoder.layer_norm", d)

    yield "decoder.embed_tokens.weight", (config.vocab_size, d)
    yield from _layer_norm_specs("decoder.layernorm_embedding", d)
    for i in range(config.decoder_layers):
        p = f"decoder.layers.{i}"
        yield from _attention_param_specs(f"{p}.self_attn", d)
        yield from _layer_norm_specs(f"{p}.self_attn_layer_norm", d)
        yield from _attention_param_specs(f"{p}.encoder_attn", d)
        yield from _layer_norm_specs(f"{p}.encoder_attn_layer_norm", d)
        yield f"{p}.fc1.weight", (d, ffn)
        yield f"{p}.fc1.bias", (ffn,)
        yield f"{p}.fc2.weight", (ffn, d)
        yield f"{p}.fc2.bias", (d,)
        yield from _layer_norm_specs(f"{p}.final_layer_norm", d)
    yield from _layer_norm_specs("decoder.layer_norm", d)
    yield "decoder.output_projection.weight", (d, config.vocab_size)  # bias-free


class ModelParams:
    """Named tensor collection for one model instance."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for n, t in self.tensors.items()
        })


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    Parameters are drawn in spec order from one seeded generator, so equal
    seeds give bit-identical models.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_specs(config):
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def sinusoidal_table(max_positions: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed position encodings; row i encodes position i+1.

    Layout: first half sines, second half cosines, frequency 10000^(2i/dim).
    """
    half = dim // 2
    positions = np.arange(1, max_positions + 1, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(half, dtype=np.float64) * 2.0 / dim)[None, :]
    angles = positions * freqs
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return table.astype(dtype)


# -- building blocks ---------------------------------------------------------


def _linear(x: Tensor, params: ModelParams, name: str, bias: bool = True) -> Tensor:
    out = tt.matmul(x, params[f"{name}.weight"])
    if bias:
        out = tt.add(out, params[f"{name}.bias"])
    return out


def _layer_norm(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return tt.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              out_weight: Optional[Tensor] = None, out_bias: Optional[Tensor] = None,
              key_mask: Optional[np.ndarray] = None, causal: bool = False,
              dropout_p: float = 0.0, mode: str = "eval",
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v of shape (B, T, d).

    Each head attends with scale 1/sqrt(d/heads); excluded positions get zero
    weight (a row with nothing to attend to yields zeros, not NaN). Heads are
    concatenated and, when ``out_weight`` is given, output-projected.
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    if k.shape[0] != b or v.shape[:2] != k.shape[:2]:
        raise tt.ShapeMismatchError(f"attention: q {q.shape} vs k {k.shape} vs v {v.shape}")
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(x: Tensor, t: int) -> Tensor:
        return tt.transpose(tt.reshape(x, (b, t, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    scores = tt.matmul(qh, tt.transpose(kh, (0, 1, 3, 2)))
    scores = tt.mul(scores, Tensor(np.asarray(1.0 / math.sqrt(hd), dtype=scores.dtype)))

    mask = None
    if key_mask is not None:
        mask = np.broadcast_to(np.asarray(key_mask, bool)[:, None, None, :], scores.shape)
    if causal:
        tri = np.tril(np.ones((tq, tk), dtype=bool))[None, None, :, :]
        mask = tri if mask is None else (mask & tri)

    probs = tt.softmax(scores, axis=-1, mask=mask)
    if mode == "train" and dropout_p > 0.0:
        probs = tt.dropout(probs, dropout_p, mode, rng)
    ctx = tt.matmul(probs, vh)
    merged = tt.reshape(tt.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    if out_weight is not None:
        merged = tt.matmul(merged, out_weight)
        if out_bias is not None:
            merged = tt.add(merged, out_bias)
    return merged


def _mha_block(x: Tensor, kv: Optional[Tensor], params: ModelParams, prefix: str, cfg: ModelConfig,
               key_mask, causal: bool, mode: str, rng) -> Tensor:
    kv = x if kv is None else kv
    q = _linear(x, params, f"{prefix}.q_proj")
    k = _linear(kv, params, f"{prefix}.k_proj")
    v = _linear(kv, params, f"{prefix}.v_proj")
    return attention(
        q, k, v, cfg.attention_heads,
        out_weight=params[f"{prefix}.out_proj.weight"],
        out_bias=params[f"{prefix}.out_proj.bias"],
        key_mask=key_mask, causal=causal,
        dropout_p=cfg.dropout, mode=mode, rng=rng,
    )


def _ffn_block(x: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig, mode: str, rng) -> Tensor:
    act = tt.relu if cfg.activation == "relu" else tt.gelu
    h = act(_linear(x, params, f"{prefix}.fc1"))
    h = _dropout(h, cfg, mode, rng)  # activation dropout
    return _linear(h, params, f"{prefix}.fc2")


def _dropout(x: Tensor, cfg: ModelConfig, mode: str, rng) -> Tensor:
    if mode == "train" and cfg.dropout > 0.0:
        return tt.dropout(x, cfg.dropout, mode, rng)
    return x


def _add_positions(x: Tensor, seq_len: int, cfg: ModelConfig, dtype) -> Tensor:
    if seq_len > cfg.max_positions:
        raise ConfigError(f"sequence length {seq_len} exceeds max_positions {cfg.max_positions}")
    table = sinusoidal_table(seq_len, cfg.embed_dim, dtype=dtype)
    return tt.add(x, Tensor(table[None, :, :]))


def encode(features: Tensor, lengths: np.ndarray, params: ModelParams,
           config: ModelConfig, mode: str = "eval",
           rng: Optional[np.random.Generator] = None):
    """Run the encoder stack.

    ``features`` is (B, T, feature_dim) with zero padding past each length.
    Returns (states (B, T, d), padding mask (B, T) with True at valid frames).
    Padded frames are masked out of every attention, so their content cannot
    reach any valid position.
    """
    b, t, d_in = features.shape
    if d_in != config.feature_dim:
        raise ConfigError(f"feature dim {d_in} != configured {config.feature_dim}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths > t) or np.any(lengths < 1):
        raise ConfigError("lengths must be in [1, T]")
    src_mask = np.arange(t)[None, :] < lengths[:, None]

    x = _linear(features, params, "encoder.feat_proj")
    x = tt.mul(x, Tensor(np.asarray(math.sqrt(config.embed_dim), dtype=x.dtype)))
    x = _add_positions(x, t, config, x.dtype)
    x = _dropout(x, config, mode, rng)

    for i in range(config.encoder_layers):
        p = f"encoder.layers.{i}"
        h = _mha_block(_layer_norm(x, params, f"{p}.self_attn_layer_norm"), None, params,
                       f"{p}.self_attn", config, src_mask, False, mode, rng)
        x = tt.add(x, _dropout(h, config, mode, rng))
        h = _ffn_block(_layer_norm(x, params, f"{p}.final_layer_norm"), params, p, config, mode, rng)
        x = tt.add(x, _dropout(h, config, mode, rng))

    return _layer_norm(x, params, "encoder.layer_norm"), src_mask


def decode_step(prev_tokens: np.ndarray, encoder_states: Tensor, encoder_mask: np.ndarray,
                params: ModelParams, config: ModelConfig, mode: str = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run the decoder on a (B, T_tgt) token prefix.

    Causal self-attention, cross-attention over the encoder states, then the
    bias-free output projection and a log-softmax: the result (B, T_tgt, V)
    exponentiates to a distribution at every position.
    """
    ids = np.asarray(prev_tokens, dtype=np.int64)
    if ids.ndim != 2:
        raise ConfigError(f"prev_tokens must be (B, T), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range for vocab size {config.vocab_size}")
    b, t = ids.shape

    x = tt.embedding(params["decoder.embed_tokens.weight"], ids)
    x = tt.mul(x, Tensor(np.asarray(math.sqrt(config.embed_dim), dtype=x.dtype)))
    x = _add_positions(x, t, config, x.dtype)
    x = _layer_norm(x, params, "decoder.layernorm_embedding")
    x = _dropout(x, config, mode, rng)

    for i in range(config.decoder_layers):
        p = f"decoder.layers.{i}"
        h = _mha_block(_layer_norm(x, params, f"{p}.self_attn_layer_norm"), None, params,
                       f"{p}.self_attn", config, None, True, mode, rng)
        x = tt.add(x, _dropout(h, config, mode, rng))
        h = _mha_block(_layer_norm(x, params, f"{p}.encoder_attn_layer_norm"), encoder_states,
                       params, f"{p}.encoder_attn", config, encoder_mask, False, mode, rng)
        x = tt.add(x, _dropout(h, config, mode, rng))
        h = _ffn_block(_layer_norm(x, params, f"{p}.final_layer_norm"), params, p, config, mode, rng)
        x = tt.add(x, _dropout(h, config, mode, rng))

    x = _layer_norm(x, params, "decoder.layer_norm")
    logits = _linear(x, params, "decoder.output_projection", bias=False)
    return tt.log_softmax(logits, axis=-1)


# -- checkpoint container -----------------------------------------------------
#
# Binary layout: magic "SLTCKPT1"; u32 length + UTF-8 "key=value\n" block;
# u32 tensor count; per tensor u32 name length + name, u32 rank, u32 dims,
# float32 little-endian payload. Load of a save is bit-exact.


def save_checkpoint(path, params: ModelParams, extra_kv: Optional[dict[str, str]] = None,
                    extra_tensors: Optional[dict[str, np.ndarray]] = None) -> None:
    kv = dict(params.config.to_kv())
    if extra_kv:
        kv.update({str(k): str(v) for k, v in extra_kv.items()})
    blob = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")

    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.named()]
    if extra_tensors:
        entries += [(n, a) for n, a in extra_tensors.items()]

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", raw.ndim))
        buf.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
        buf.write(raw.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, kv dict, extra tensor dict).

    Tensors whose names are not model parameters (optimizer moments etc.) are
    returned in the extra dict untouched.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {data[:8]!r}")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint (need {off + n} bytes, have {len(data)})")
        chunk = data[off : off + n]
        off += n
        return chunk

    (kv_len,) = struct.unpack("<I", take(4))
    kv: dict[str, str] = {}
    for line in take(kv_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        kv[key] = value
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_vals = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims)
        tensors[name] = arr.copy()

    config = ModelConfig.from_kv(kv)
    expected = dict(parameter_specs(config))
    model_tensors: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name in expected:
            if arr.shape != expected[name]:
                raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {expected[name]}")
            model_tensors[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            extra[name] = arr
    missing = sorted(set(expected) - set(model_tensors))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:4]}{'...' if len(missing) > 4 else ''}")
    return ModelParams(config, model_tensors), kv, extra
