"""Bidirectional pre-LN transformer denoiser with hand-written backprop.

Parameters live in a flat ``dict[str, ndarray]`` whose key order is the
checkpoint section order (see :func:`param_shapes`).  ``forward`` returns
logits over the full 4-symbol vocabulary; :func:`log_marginals` drops the
MASK column and renormalizes over the data alphabet.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .._kernels import kernels as K

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_heads: int = 4
    model_dim: int = 128
    vocab_size: int = 4
    seq_len: int = 9
    abs_pos: str = "none"
    rope: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.abs_pos not in ("learned", "sinusoidal", "none"):
            raise ValueError("abs_pos must be 'learned', 'sinusoidal' or 'none'")
        if self.rope and self.head_dim % 2:
            raise ValueError("rotary embeddings need an even head_dim")

    @property
    def mask_id(self):
        return self.vocab_size - 1

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg):
    """Ordered (name, shape) list; the order is the serialization order."""
    d, v, f = cfg.model_dim, cfg.vocab_size, cfg.mlp_ratio * cfg.model_dim
    shapes = [("tok_emb", (v, d))]
    if cfg.abs_pos == "learned":
        shapes.append(("pos_emb", (cfg.seq_len, d)))
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.w_qkv", (d, 3 * d)), (p + "attn.b_qkv", (3 * d,)),
            (p + "attn.w_o", (d, d)), (p + "attn.b_o", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w_in", (d, f)), (p + "mlp.b_in", (f,)),
            (p + "mlp.w_out", (f, d)), (p + "mlp.b_out", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, v)), ("head.b", (v,))]
    return shapes


def num_params(cfg):
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def sinusoidal_positions(seq_len, dim):
    pos = np.arange(seq_len)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((seq_len, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def rope_tables(seq_len, head_dim, base=10000.0):
    """cos/sin tables of shape (L, head_dim // 2) for half-split rotary embeddings."""
    half = head_dim // 2
    freq = base ** (-np.arange(half) / half)
    ang = np.arange(seq_len)[:, None] * freq[None]
    return np.cos(ang), np.sin(ang)


def rotate(x, cos, sin, inverse=False):
    """Apply (or undo) the rotary map on the last axis of (..., L, head_dim)."""
    half = x.shape[-1] // 2
    a, b = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def init_params(cfg, rng, dtype=np.float32):
    """Unit-variance embeddings, 1/sqrt(fan_in) matrices, residual outputs
    further scaled by 1/sqrt(2 * num_layers)."""
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 1.0, shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if name.endswith(("attn.w_o", "mlp.w_out")):
                std /= np.sqrt(2 * cfg.num_layers)
            arr = rng.normal(0.0, std, shape)
        params[name] = arr.astype(dtype)
    return params


def _layernorm(x2d, g, b):
    return K.layernorm_forward(x2d, g, b, LN_EPS)


def forward(params, cfg, tokens, keep_cache=False):
    """Run the denoiser on a (B, L) int batch.

    Returns ``(logits, attn, cache)`` where ``attn`` is a list with one
    (B, H, L, L) row-stochastic array per layer.  ``cache`` is None unless
    ``keep_cache`` is set.
    """
    tokens = np.asarray(tokens)
    B, L = tokens.shape
    d, H, hd = cfg.model_dim, cfg.num_heads, cfg.head_dim
    dtype = params["tok_emb"].dtype
    x = params["tok_emb"][tokens]
    if cfg.abs_pos == "learned":
        x = x + params["pos_emb"][None, :L]
    elif cfg.abs_pos == "sinusoidal":
        x = x + sinusoidal_positions(L, d).astype(dtype)[None]
    x = np.ascontiguousarray(x.reshape(B * L, d))
    scale = dtype.type(1.0 / np.sqrt(hd))
    rope = None
    if cfg.rope:
        rope = tuple(t.astype(dtype) for t in rope_tables(L, hd))

    attn = []
    layers = []
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        h1, xhat1, rstd1 = _layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = h1 @ params[p + "attn.w_qkv"] + params[p + "attn.b_qkv"]
        qkv = qkv.reshape(B, L, 3, H, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if rope is not None:
            q, k = rotate(q, *rope), rotate(k, *rope)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = K.softmax_forward(np.ascontiguousarray(scores.reshape(-1, L))).reshape(B, H, L, L)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B * L, d)
        x = x + ctx @ params[p + "attn.w_o"] + params[p + "attn.b_o"]

        h2, xhat2, rstd2 = _layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "mlp.w_in"] + params[p + "mlp.b_in"]
        g, th = K.gelu_forward(u)
        x = x + g @ params[p + "mlp.w_out"] + params[p + "mlp.b_out"]

        attn.append(probs)
        if keep_cache:
            layers.append((h1, xhat1, rstd1, q, k, v, probs, ctx, h2, xhat2, rstd2, u, th, g))

    hf, xhatf, rstdf = _layernorm(x, params["ln_f.g"], params["ln_f.b"])
    logits = (hf @ params["head.w"] + params["head.b"]).reshape(B, L, cfg.vocab_size)
    cache = None
    if keep_cache:
        cache = dict(tokens=tokens, layers=layers, hf=hf, xhatf=xhatf, rstdf=rstdf, scale=scale,
                     rope=rope)
    return logits, attn, cache


def backward(params, cfg, cache, dlogits):
    """Gradients of a scalar loss given d(loss)/d(logits) of shape (B, L, V)."""
    tokens = cache["tokens"]
    B, L = tokens.shape
    d, H, hd = cfg.model_dim, cfg.num_heads, cfg.head_dim
    scale = cache["scale"]
    grads = {}

    dl = np.ascontiguousarray(dlogits.reshape(B * L, cfg.vocab_size))
    grads["head.w"] = cache["hf"].T @ dl
    grads["head.b"] = dl.sum(axis=0)
    dhf = dl @ params["head.w"].T
    dx, grads["ln_f.g"], grads["ln_f.b"] = K.layernorm_backward(
        np.ascontiguousarray(dhf), cache["xhatf"], cache["rstdf"], params["ln_f.g"]
    )

    for i in reversed(range(cfg.num_layers)):
        p = f"blocks.{i}."
        h1, xhat1, rstd1, q, k, v, probs, ctx, h2, xhat2, rstd2, u, th, g = cache["layers"][i]

        # mlp branch
        grads[p + "mlp.w_out"] = g.T @ dx
        grads[p + "mlp.b_out"] = dx.sum(axis=0)
        dg = dx @ params[p + "mlp.w_out"].T
        du = K.gelu_backward(u, th, np.ascontiguousarray(dg))
        grads[p + "mlp.w_in"] = h2.T @ du
        grads[p + "mlp.b_in"] = du.sum(axis=0)
        dh2 = du @ params[p + "mlp.w_in"].T
        dxl, grads[p + "ln2.g"], grads[p + "ln2.b"] = K.layernorm_backward(
            np.ascontiguousarray(dh2), xhat2, rstd2, params[p + "ln2.g"]
        )
        dx = dx + dxl

        # attention branch
        grads[p + "attn.w_o"] = ctx.T @ dx
        grads[p + "attn.b_o"] = dx.sum(axis=0)
        dctx = (dx @ params[p + "attn.w_o"].T).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = K.softmax_backward(
            probs.reshape(-1, L), np.ascontiguousarray(dprobs.reshape(-1, L))
        ).reshape(B, H, L, L) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        if cache["rope"] is not None:
            dq = rotate(dq, *cache["rope"], inverse=True)
            dk = rotate(dk, *cache["rope"], inverse=True)
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B * L, 3 * d)
        grads[p + "attn.w_qkv"] = h1.T @ dqkv
        grads[p + "attn.b_qkv"] = dqkv.sum(axis=0)
        dh1 = dqkv @ params[p + "attn.w_qkv"].T
        dxl, grads[p + "ln1.g"], grads[p + "ln1.b"] = K.layernorm_backward(
            np.ascontiguousarray(dh1), xhat1, rstd1, params[p + "ln1.g"]
        )
        dx = dx + dxl

    dx = dx.reshape(B, L, d)
    if cfg.abs_pos == "learned":
        grads["pos_emb"] = dx.sum(axis=0)
    onehot = np.eye(cfg.vocab_size, dtype=dx.dtype)[tokens.reshape(-1)]
    grads["tok_emb"] = onehot.T @ dx.reshape(B * L, d)
    return grads


def log_marginals(logits, mask_id):
    """Log-probabilities over the data symbols, MASK excluded and renormalized."""
    z = np.delete(logits, mask_id, axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
