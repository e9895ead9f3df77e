"""Numerical self-checks: finite-difference gradients and loss-mask equivalence."""

from __future__ import annotations

import time

import numpy as np

from .model import LossMaskBatch, ModelConfig, cross_entropy, init_params, loss_and_grads, loss_full, loss_masked


def _loss(params, config, batch) -> float:
    return loss_and_grads(params, config, batch)[0]


def gradient_check(
    config: ModelConfig | None = None,
    n_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    batch_shape: tuple[int, int] = (2, 6),
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled uniformly across all parameter tensors.  The
    relative error is ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    config = config or ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, context_len=16, dtype="float64", seed=seed)
    if config.dtype != "float64":
        raise ValueError("gradient check needs a float64 model")
    rng = np.random.default_rng(seed)
    params = init_params(config)
    # Larger weights than the default init so every path carries signal.
    for k, p in params.items():
        if not k.endswith("norm"):
            p += rng.normal(0.0, 0.05, p.shape)
        else:
            p += rng.normal(0.0, 0.1, p.shape)
    B, T = batch_shape
    tokens = rng.integers(0, 256, (B, T))
    mask = rng.random((B, T)) < 0.7
    mask[:, 1] = True
    batch = LossMaskBatch.from_rows(tokens, mask)
    _, grads = loss_and_grads(params, config, batch)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    worst = 0.0
    for _ in range(n_coords):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = params[k].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        up = _loss(params, config, batch)
        flat[i] = old - h
        down = _loss(params, config, batch)
        flat[i] = old
        num = (up - down) / (2 * h)
        ana = float(grads[k].reshape(-1)[i])
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-8))
    return worst


def mask_equivalence(n_batches: int = 100, seed: int = 0, vocab: int = 259) -> tuple[float, float]:
    """Compare masked and full losses on random 64-bit batches.

    Returns the largest absolute difference with an all-ones mask and the
    largest absolute logit gradient found at a masked-out position.
    """
    rng = np.random.default_rng(seed)
    diff = 0.0
    leak = 0.0
    for _ in range(n_batches):
        B, T = rng.integers(1, 5), rng.integers(1, 12)
        logits = rng.normal(0.0, 3.0, (B, T, vocab))
        targets = rng.integers(0, vocab, (B, T))
        ones = np.ones((B, T), dtype=bool)
        diff = max(diff, abs(loss_masked(logits, targets, ones) - loss_full(logits, targets, ones)))
        mask = rng.random((B, T)) < 0.5
        mask.flat[0] = True
        _, g = cross_entropy(logits, targets, mask)
        if (~mask).any():
            leak = max(leak, float(np.abs(g[~mask]).max()))
    return diff, leak


def run_selftest(seed: int = 0) -> dict:
    t0 = time.perf_counter()
    rel = max(
        gradient_check(ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, context_len=16, dtype="float64", seed=seed, **kw), seed=seed)
        for kw in ({}, {"pos_encoding": "learned", "ffn": "swiglu", "tied_embeddings": False})
    )
    diff, leak = mask_equivalence(seed=seed)
    return {
        "max_relative_error": rel,
        "gradient_ok": rel < 1e-4,
        "mask_max_abs_diff": diff,
        "masked_grad_max": leak,
        "mask_ok": diff <= 1e-12 and leak == 0.0,
        "seconds": round(time.perf_counter() - t0, 3),
    }
