"""Small decoder-only transformer in numpy with an explicit backward pass.

Pre-norm residual blocks with RMSNorm gains, causal multi-head attention
(rotary or learned positions) and a GELU or SwiGLU feed-forward.  Parameters
are a flat ``dict[str, ndarray]`` so the optimizer and checkpoint code can
treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tokenizer import EOS, PAD, VOCAB_SIZE

NORM_EPS = 1e-6
ROPE_BASE = 10000.0
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    context_len: int = 128
    pos_encoding: str = "rotary"
    ffn: str = "gelu"
    tied_embeddings: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pos_encoding not in ("rotary", "learned"):
            raise ValueError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.pos_encoding == "rotary" and self.head_dim % 2:
            raise ValueError("rotary positions need an even head dimension")
        if self.ffn not in ("gelu", "swiglu"):
            raise ValueError(f"unknown ffn {self.ffn!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (config.vocab_size, d)}
    if config.pos_encoding == "learned":
        shapes["pos_emb"] = (config.context_len, d)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_in"] = (d, f)
        if config.ffn == "swiglu":
            shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_out"] = (f, d)
    shapes["final_norm"] = (d,)
    if not config.tied_embeddings:
        shapes["lm_head"] = (d, config.vocab_size)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2L), norm gains at 1."""
    rng = np.random.default_rng(config.seed)
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            w = np.ones(shape)
        elif name.endswith(("wo", "w_out")):
            w = rng.normal(0.0, resid_std, size=shape)
        else:
            w = rng.normal(0.0, 0.02, size=shape)
        params[name] = w.astype(config.dtype)
    return params


# --- primitives ----------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * r
    return xhat * g, (xhat, r)


def _rmsnorm_back(dy, g, cache):
    xhat, r = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _rope_tables(T: int, head_dim: int, dtype):
    half = head_dim // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(T, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_back(dy, cos, sin):
    # Transpose of a rotation is the rotation by the negative angle.
    return _rope(dy, cos, -sin)


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)


# --- forward / backward ----------------------------------------------------


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (B, T), got shape {tokens.shape}")
    if tokens.shape[1] > config.context_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds context_len {config.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    return tokens.astype(np.int64)


def forward(params: dict, config: ModelConfig, tokens: np.ndarray, keep_cache: bool = False):
    """Logits of shape (B, T, V).  With ``keep_cache`` also return activations for :func:`backward`."""
    tokens = _check_tokens(config, tokens)
    B, T = tokens.shape
    dtype = params["tok_emb"].dtype
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    h = params["tok_emb"][tokens]
    if config.pos_encoding == "learned":
        h = h + params["pos_emb"][:T]
    cos = sin = None
    if config.pos_encoding == "rotary":
        cos, sin = _rope_tables(T, config.head_dim, dtype)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    caches = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        c = {}
        a_in, c["n1"] = _rmsnorm(h, params[p + "attn_norm"])
        c["a_in"] = a_in
        q = _split_heads(a_in @ params[p + "wq"], H)
        k = _split_heads(a_in @ params[p + "wk"], H)
        v = _split_heads(a_in @ params[p + "wv"], H)
        if cos is not None:
            q, k = _rope(q, cos, sin), _rope(k, cos, sin)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, -np.inf, s)
        att = softmax(s)
        o = _merge_heads(att @ v)
        c.update(q=q, k=k, v=v, att=att, o=o)
        h = h + o @ params[p + "wo"]
        m_in, c["n2"] = _rmsnorm(h, params[p + "mlp_norm"])
        c["m_in"] = m_in
        u = m_in @ params[p + "w_in"]
        if config.ffn == "gelu":
            act, t = _gelu(u)
            c.update(u=u, t=t)
        else:
            gate = m_in @ params[p + "w_gate"]
            sig = 1.0 / (1.0 + np.exp(-gate))
            act = gate * sig * u
            c.update(u=u, gate=gate, sig=sig)
        c["act"] = act
        h = h + act @ params[p + "w_out"]
        caches.append(c)
    final, nf = _rmsnorm(h, params["final_norm"])
    head = params["tok_emb"].T if config.tied_embeddings else params["lm_head"]
    logits = final @ head
    if not keep_cache:
        return logits
    return logits, {"tokens": tokens, "layers": caches, "final": final, "nf": nf, "cos": cos, "sin": sin}


def backward(params: dict, config: ModelConfig, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dloss/dlogits."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tokens = cache["tokens"]
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    cos, sin = cache["cos"], cache["sin"]
    final = cache["final"]
    d = config.d_model

    if config.tied_embeddings:
        grads["tok_emb"] += (dlogits.reshape(-1, config.vocab_size).T @ final.reshape(-1, d))
        dfinal = dlogits @ params["tok_emb"]
    else:
        grads["lm_head"] += final.reshape(-1, d).T @ dlogits.reshape(-1, config.vocab_size)
        dfinal = dlogits @ params["lm_head"].T
    dh, grads["final_norm"] = _rmsnorm_back(dfinal, params["final_norm"], cache["nf"])

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # feed-forward branch
        act = c["act"]
        grads[p + "w_out"] += act.reshape(-1, act.shape[-1]).T @ dh.reshape(-1, d)
        dact = dh @ params[p + "w_out"].T
        m_in = c["m_in"].reshape(-1, d)
        if config.ffn == "gelu":
            du = _gelu_back(dact, c["u"], c["t"])
        else:
            gate, sig, u = c["gate"], c["sig"], c["u"]
            du = dact * gate * sig
            dgate = dact * u * sig * (1.0 + gate * (1.0 - sig))
            grads[p + "w_gate"] += m_in.T @ dgate.reshape(-1, dgate.shape[-1])
        grads[p + "w_in"] += m_in.T @ du.reshape(-1, du.shape[-1])
        dm_in = du @ params[p + "w_in"].T
        if config.ffn == "swiglu":
            dm_in = dm_in + dgate @ params[p + "w_gate"].T
        dx, grads[p + "mlp_norm"] = _rmsnorm_back(dm_in, params[p + "mlp_norm"], c["n2"])
        dh = dh + dx
        # attention branch
        o = c["o"]
        grads[p + "wo"] += o.reshape(-1, d).T @ dh.reshape(-1, d)
        do = _split_heads(dh @ params[p + "wo"].T, H)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        dv = att.transpose(0, 1, 3, 2) @ do
        datt = do @ v.transpose(0, 1, 3, 2)
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        if cos is not None:
            dq, dk = _rope_back(dq, cos, sin), _rope_back(dk, cos, sin)
        a_in = c["a_in"].reshape(-1, d)
        da_in = np.zeros_like(c["a_in"])
        for name, g in (("wq", dq), ("wk", dk), ("wv", dv)):
            g = _merge_heads(g)
            grads[p + name] += a_in.T @ g.reshape(-1, d)
            da_in += g @ params[p + name].T
        dx, grads[p + "attn_norm"] = _rmsnorm_back(da_in, params[p + "attn_norm"], c["n1"])
        dh = dh + dx

    np.add.at(grads["tok_emb"], tokens, dh)
    if config.pos_encoding == "learned":
        grads["pos_emb"][: tokens.shape[1]] += dh.sum(axis=0)
    return grads


# --- losses ----------------------------------------------------------------


def loss_full(logits: np.ndarray, targets: np.ndarray, pad_mask: np.ndarray) -> float:
    """Mean next-token cross entropy over positions where ``pad_mask`` is True."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    n = int(pad_mask.sum())
    if n == 0:
        raise ValueError("no non-PAD positions to score")
    lp = log_softmax(logits[pad_mask])
    nll = -lp[np.arange(n), np.asarray(targets)[pad_mask]]
    return float(nll.sum() / n)


def loss_masked(logits: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray) -> float:
    return cross_entropy(logits, targets, loss_mask)[0]


def cross_entropy(logits: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked mean cross entropy and its gradient w.r.t. ``logits``.

    Positions with mask 0 get a gradient of exactly zero.
    """
    w = np.asarray(loss_mask).astype(logits.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("loss mask selects no positions")
    lp = log_softmax(logits)
    targets = np.asarray(targets).astype(np.int64)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * w).sum() / count)
    g = np.exp(lp)
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], axis=-1) - 1.0, axis=-1)
    g *= (w / count)[..., None]
    return loss, g


@dataclass
class LossMaskBatch:
    tokens: np.ndarray  # (B, T) model inputs
    targets: np.ndarray  # (B, T) tokens shifted left by one
    mask: np.ndarray  # (B, T) 1 where the target counts toward the loss

    @classmethod
    def from_rows(cls, tokens: np.ndarray, token_mask: np.ndarray) -> "LossMaskBatch":
        """Build from rows plus a per-token mask saying which tokens are to be predicted.

        Target position ``t`` predicts ``tokens[t+1]`` and counts iff
        ``token_mask[t+1]`` is set; the last position never counts.
        """
        tokens = np.asarray(tokens).astype(np.int64)
        targets = np.full_like(tokens, PAD)
        targets[:, :-1] = tokens[:, 1:]
        mask = np.zeros(tokens.shape, dtype=bool)
        mask[:, :-1] = np.asarray(token_mask, dtype=bool)[:, 1:]
        mask &= targets != PAD
        return cls(tokens, targets, mask)


def loss_and_grads(params: dict, config: ModelConfig, batch: LossMaskBatch) -> tuple[float, dict[str, np.ndarray]]:
    logits, cache = forward(params, config, batch.tokens, keep_cache=True)
    loss, dlogits = cross_entropy(logits, batch.targets, batch.mask)
    return loss, backward(params, config, cache, dlogits)


class TransformerLM:
    """Bundles a config with its parameters; what training and evaluation pass around."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def context_len(self) -> int:
        return self.config.context_len

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        return forward(self.params, self.config, tokens)



class UniformLM:
    """Model whose logits are identically zero: every token has probability 1/V."""

    def __init__(self, vocab_size: int = VOCAB_SIZE, context_len: int = 4096):
        self.vocab_size = vocab_size
        self.context_len = context_len

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        return np.zeros(tokens.shape + (self.vocab_size,))


def greedy_decode(model, prompt: list[int], max_new_tokens: int, stop: int = EOS) -> list[int]:
    """Greedy continuation of ``prompt``; stops at ``stop`` (not returned) or the context limit.

    ``model`` is anything with ``logits(tokens)`` and ``context_len``.
    """
    ids = list(prompt)
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(ids) >= model.context_len:
            break
        nxt = int(np.argmax(model.logits(np.array([ids]))[0, -1]))
        if nxt == stop:
            break
        ids.append(nxt)
        out.append(nxt)
    return out
