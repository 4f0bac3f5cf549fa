"""Shared test utilities for full-model gradient checks."""

from __future__ import annotations

import numpy as np

from slt import tensor as tt
from slt.model import ModelConfig, decode_step, encode, init_params
from slt.tensor import Tensor, backward

from oracles import central_difference, gradient_rel_error

TINY_CONFIG = ModelConfig(
    encoder_layers=1,
    decoder_layers=1,
    embed_dim=8,
    ffn_dim=16,
    attention_heads=2,
    activation="gelu",
    dropout=0.0,
    feature_dim=6,
    vocab_size=11,
    max_positions=32,
)


def model_loss(params, config, feats, lengths, tokens, weights) -> float:
    states, mask = encode(Tensor(feats), lengths, params, config, mode="eval")
    logprobs = decode_step(tokens, states, mask, params, config, mode="eval")
    return tt.sum_(tt.mul(logprobs, Tensor(weights)))


def fd_check_model(seed: int, coords_per_param: int = 6, h: float = 1e-4, tol: float = 1e-4,
                   config: ModelConfig = TINY_CONFIG):
    """Backward vs central differences on sampled coordinates of every parameter.

    Runs in float64. Returns the worst relative error over checked coordinates.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, dtype=np.float64)
    b, t_src, t_tgt = 2, 4, 3
    feats = rng.standard_normal((b, t_src, config.feature_dim))
    feats[1, 3:] = 0.0
    lengths = np.array([t_src, 3])
    tokens = rng.integers(0, config.vocab_size, size=(b, t_tgt))
    weights = rng.standard_normal((b, t_tgt, config.vocab_size))

    loss = model_loss(params, config, feats, lengths, tokens, weights)
    backward(loss)

    worst = 0.0
    for name, tensor in params.named():
        assert tensor.grad is not None, f"no gradient reached {name}"
        n = tensor.size
        coords = sorted(rng.choice(n, size=min(coords_per_param, n), replace=False).tolist())

        def f(x, name=name):
            trial = {k: (Tensor(x if k == name else v.data, requires_grad=False))
                     for k, v in params.tensors.items()}
            trial_params = type(params)(config, trial)
            return model_loss(trial_params, config, feats, lengths, tokens, weights).item()

        numeric = central_difference(f, tensor.data, h=h, coords=coords)
        flat_a = tensor.grad.reshape(-1)[coords]
        flat_n = numeric.reshape(-1)[coords]
        err = gradient_rel_error(flat_a, flat_n)
        assert err < tol, f"seed {seed} param {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
