"""A small transformer denoiser with hand-written gradients.

Everything runs in float64 numpy.  The forward pass accepts an arbitrary
boolean attention mask over slots, optional per-slot noise-level
conditioning (an additive embedding indexed by level, since noise is
position-dependent here), and an optional weighted token embedding that
interpolates between a token's embedding and MASK's embedding according to
the surviving-probability e^{-gamma * sigma(level)}.

Wiring (aligned vs shifted) lives entirely in the slot layouts built by the
masks module; the forward pass itself is wiring-agnostic.  ``backward``
consumes d(loss)/d(logits) produced by the loss module and returns a
gradient for every parameter tensor.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .process import CumulativeNoiseSchedule
from .rng import RngStream

_NEG = -1e30  # effectively -inf, safe through exp/softmax
_LN_EPS = 1e-6


@dataclass(frozen=True)
class DenoiserConfig:
    vocab: int
    dim: int = 64
    heads: int = 4
    layers: int = 2
    d_max: int = 64
    wiring: str = "aligned"
    time_conditioning: bool = False
    weighted_embedding: bool = False
    levels_max: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.wiring not in ("aligned", "shifted"):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if self.time_conditioning and self.levels_max < 1:
            raise ValueError("time conditioning needs levels_max >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mask_id(self) -> int:
        return self.vocab - 1


def init_params(cfg: DenoiserConfig, rng: RngStream, scale: float = 0.02,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Parameter tensors; training may use float32, tests default to float64."""
    gen = rng.child(0).generator()

    def w(*shape):
        return gen.normal(0.0, scale, shape).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    p = {
        "tok_emb": w(cfg.vocab, cfg.dim),
        "pos_emb": w(cfg.d_max, cfg.dim),
        "lnf.g": ones(cfg.dim),
        "lnf.b": zeros(cfg.dim),
        "wout": w(cfg.dim, cfg.vocab),
        "bout": zeros(cfg.vocab),
    }
    if cfg.time_conditioning:
        p["time_emb"] = w(cfg.levels_max + 1, cfg.dim)
    hidden = 4 * cfg.dim
    for i in range(cfg.layers):
        p[f"l{i}.ln1.g"] = ones(cfg.dim)
        p[f"l{i}.ln1.b"] = zeros(cfg.dim)
        p[f"l{i}.wq"] = w(cfg.dim, cfg.dim)
        p[f"l{i}.bq"] = zeros(cfg.dim)
        p[f"l{i}.wk"] = w(cfg.dim, cfg.dim)
        p[f"l{i}.bk"] = zeros(cfg.dim)
        p[f"l{i}.wv"] = w(cfg.dim, cfg.dim)
        p[f"l{i}.bv"] = zeros(cfg.dim)
        p[f"l{i}.wo"] = w(cfg.dim, cfg.dim)
        p[f"l{i}.bo"] = zeros(cfg.dim)
        p[f"l{i}.ln2.g"] = ones(cfg.dim)
        p[f"l{i}.ln2.b"] = zeros(cfg.dim)
        p[f"l{i}.w1"] = w(cfg.dim, hidden)
        p[f"l{i}.b1"] = zeros(hidden)
        p[f"l{i}.w2"] = w(hidden, cfg.dim)
        p[f"l{i}.b2"] = zeros(cfg.dim)
    return p


# ---------------------------------------------------------------------------
# Primitive forward/backward pieces.


def _layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_grad(x, s):
    """Derivative given the cached sigmoid from the forward pass."""
    return s * (1.0 + x * (1.0 - s))


def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(x, w, dy):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_x.T @ flat_dy
    db = flat_dy.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def _split_heads(x, heads):
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


# ---------------------------------------------------------------------------
# Full forward / backward.


def forward(params, cfg: DenoiserConfig, tokens, allowed, pos_ids,
            levels=None, sigma: CumulativeNoiseSchedule | None = None,
            gamma: float | None = None, want_cache: bool = False):
    """Run the denoiser over staged slots.

    tokens: (B, S) slot token ids; allowed: (S, S) bool attention mask;
    pos_ids: (S,) or (B, S) positional indices; levels: (B, S) noise levels,
    required when time conditioning or weighted embedding is on.
    Returns (logits, cache); cache is None unless requested.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    B, S = tokens.shape
    if tokens.max() >= cfg.vocab:
        raise ValueError("token id outside vocabulary")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (S, S):
        raise ValueError(f"mask shape {allowed.shape} does not match {S} slots")
    pos_ids = np.asarray(pos_ids)
    if pos_ids.ndim == 1:
        pos_ids = np.broadcast_to(pos_ids, (B, S))
    if pos_ids.max() >= cfg.d_max:
        raise ValueError("position id outside d_max")
    needs_levels = cfg.time_conditioning or cfg.weighted_embedding
    if needs_levels and levels is None:
        raise ValueError("levels are required by this configuration")
    if levels is not None:
        levels = np.atleast_2d(np.asarray(levels))

    tok_emb = params["tok_emb"]
    if cfg.weighted_embedding:
        if sigma is None or gamma is None:
            raise ValueError("weighted embedding needs sigma schedule and gamma")
        keep = np.exp(-gamma * sigma.values[levels]).astype(tok_emb.dtype)  # (B, S)
        emb = keep[..., None] * tok_emb[tokens] + (1.0 - keep)[..., None] * tok_emb[cfg.mask_id]
    else:
        keep = None
        emb = tok_emb[tokens]
    x = emb + params["pos_emb"][pos_ids]
    if cfg.time_conditioning:
        x = x + params["time_emb"][levels]

    scale = 1.0 / np.sqrt(cfg.head_dim)
    cache_layers = []
    for i in range(cfg.layers):
        a, ln1c = _layernorm_fwd(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = _linear_fwd(a, params[f"l{i}.wq"], params[f"l{i}.bq"])
        k = _linear_fwd(a, params[f"l{i}.wk"], params[f"l{i}.bk"])
        v = _linear_fwd(a, params[f"l{i}.wv"], params[f"l{i}.bv"])
        qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = np.where(allowed, scores, _NEG)
        scores -= scores.max(-1, keepdims=True)
        ex = np.exp(scores)
        attn = ex / ex.sum(-1, keepdims=True)
        ctx = _merge_heads(attn @ vh)
        out = _linear_fwd(ctx, params[f"l{i}.wo"], params[f"l{i}.bo"])
        x_attn = x + out

        h, ln2c = _layernorm_fwd(x_attn, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        pre = _linear_fwd(h, params[f"l{i}.w1"], params[f"l{i}.b1"])
        act, sig = _silu_fwd(pre)
        ff = _linear_fwd(act, params[f"l{i}.w2"], params[f"l{i}.b2"])
        x_new = x_attn + ff
        if want_cache:
            cache_layers.append((a, ln1c, qh, kh, vh, attn, ctx, x_attn, h, ln2c,
                                 pre, act, sig))
        x = x_new

    f, lnfc = _layernorm_fwd(x, params["lnf.g"], params["lnf.b"])
    logits = _linear_fwd(f, params["wout"], params["bout"])
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    cache = None
    if want_cache:
        cache = {
            "tokens": tokens, "pos_ids": pos_ids, "levels": levels, "keep": keep,
            "allowed": allowed, "layers": cache_layers, "f": f, "lnfc": lnfc,
        }
    return logits, cache


def backward(params, cfg: DenoiserConfig, cache, dlogits) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter, given d(loss)/d(logits)."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    f = cache["f"]
    dx, grads["wout"], grads["bout"] = _linear_bwd(f, params["wout"], dlogits)
    dx, dg, db = _layernorm_bwd(dx, params["lnf.g"], cache["lnfc"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.layers)):
        (a, ln1c, qh, kh, vh, attn, ctx, x_attn, h, ln2c,
         pre, act, sig) = cache["layers"][i]
        # feed-forward block
        dff = dx
        dact, grads[f"l{i}.w2"], grads[f"l{i}.b2"] = _linear_bwd(act, params[f"l{i}.w2"], dff)
        dpre = dact * _silu_grad(pre, sig)
        dh, grads[f"l{i}.w1"], grads[f"l{i}.b1"] = _linear_bwd(h, params[f"l{i}.w1"], dpre)
        dxa, dg, db = _layernorm_bwd(dh, params[f"l{i}.ln2.g"], ln2c)
        grads[f"l{i}.ln2.g"] += dg
        grads[f"l{i}.ln2.b"] += db
        dxa = dxa + dx  # residual

        # attention block
        dout = dxa
        dctx, grads[f"l{i}.wo"], grads[f"l{i}.bo"] = _linear_bwd(ctx, params[f"l{i}.wo"], dout)
        dctx_h = _split_heads(dctx, cfg.heads)
        dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
        dscores = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
        da_q, grads[f"l{i}.wq"], grads[f"l{i}.bq"] = _linear_bwd(a, params[f"l{i}.wq"], dq)
        da_k, grads[f"l{i}.wk"], grads[f"l{i}.bk"] = _linear_bwd(a, params[f"l{i}.wk"], dk)
        da_v, grads[f"l{i}.wv"], grads[f"l{i}.bv"] = _linear_bwd(a, params[f"l{i}.wv"], dv)
        da = da_q + da_k + da_v
        dx_ln, dg, db = _layernorm_bwd(da, params[f"l{i}.ln1.g"], ln1c)
        grads[f"l{i}.ln1.g"] += dg
        grads[f"l{i}.ln1.b"] += db
        dx = dx_ln + dxa  # residual into the block input

    # embeddings (scatter-add via one-hot matmul; much faster than np.add.at)
    tokens, pos_ids, levels, keep = (cache["tokens"], cache["pos_ids"],
                                     cache["levels"], cache["keep"])
    if cfg.time_conditioning:
        grads["time_emb"] += _scatter_rows(levels, dx, grads["time_emb"].shape[0])
    grads["pos_emb"] += _scatter_rows(pos_ids, dx, cfg.d_max)
    if cfg.weighted_embedding:
        grads["tok_emb"] += _scatter_rows(tokens, keep[..., None] * dx, cfg.vocab)
        grads["tok_emb"][cfg.mask_id] += ((1.0 - keep)[..., None] * dx).sum(axis=(0, 1))
    else:
        grads["tok_emb"] += _scatter_rows(tokens, dx, cfg.vocab)
    return grads


def _scatter_rows(ids, values, num_rows):
    flat_ids = np.asarray(ids).reshape(-1)
    flat = values.reshape(-1, values.shape[-1])
    onehot = (flat_ids[:, None] == np.arange(num_rows)[None, :]).astype(flat.dtype)
    return onehot.T @ flat


def loss_and_grads(params, cfg: DenoiserConfig, batch: dict, loss_fn):
    """Forward, apply ``loss_fn(logits) -> result with .total/.dlogits``, backward.

    ``batch`` holds staged slots: tokens, allowed, pos_ids and optional
    levels / sigma / gamma.  Returns (loss result, gradient dict).
    """
    logits, cache = forward(
        params, cfg, batch["tokens"], batch["allowed"], batch["pos_ids"],
        levels=batch.get("levels"), sigma=batch.get("sigma"),
        gamma=batch.get("gamma"), want_cache=True,
    )
    result = loss_fn(logits)
    if not np.isfinite(result.total):
        raise FloatingPointError("non-finite loss")
    dlogits = result.dlogits.astype(params["tok_emb"].dtype, copy=False)
    grads = backward(params, cfg, cache, dlogits)
    return result, grads


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def sgd_step(params, grads, lr: float, clip: float = 0.0,
             momentum: float = 0.0, state: dict | None = None) -> dict | None:
    """In-place SGD update with global-norm clipping and optional momentum.

    Returns the momentum state (pass it back in on the next call).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    factor = 1.0
    if clip > 0:
        norm = global_grad_norm(grads)
        if norm > clip:
            factor = clip / norm
    if momentum > 0.0:
        if state is None:
            state = {k: np.zeros_like(v) for k, v in params.items()}
        for k in params:
            state[k] = momentum * state[k] + factor * grads[k]
            params[k] -= lr * state[k]
        return state
    for k in params:
        params[k] -= lr * factor * grads[k]
    return state


# ---------------------------------------------------------------------------
# Incremental decoding with a settled-prefix KV cache.
#
# Settled slots attend causally among themselves, so their keys/values are
# final the moment their input token is final; they are computed once per
# slot (in blocks, as positions settle) and reused by every later call.
# The no-cache decode path replays the same block-by-block computation from
# scratch each call, which makes cache-on and cache-off outputs bitwise
# identical by construction.


class KvCache:
    """Per-layer key/value arrays for an append-only settled prefix."""

    def __init__(self, cfg: DenoiserConfig, batch: int = 1):
        self.k = [np.zeros((batch, cfg.heads, 0, cfg.head_dim)) for _ in range(cfg.layers)]
        self.v = [np.zeros((batch, cfg.heads, 0, cfg.head_dim)) for _ in range(cfg.layers)]
        self.length = 0


def _embed_slots(params, cfg, tokens, pos_ids, levels, sigma, gamma):
    tok_emb = params["tok_emb"]
    if cfg.weighted_embedding:
        keep = np.exp(-gamma * sigma.values[levels]).astype(tok_emb.dtype)
        x = keep[..., None] * tok_emb[tokens] + (1.0 - keep)[..., None] * tok_emb[cfg.mask_id]
    else:
        x = tok_emb[tokens]
    x = x + params["pos_emb"][pos_ids]
    if cfg.time_conditioning:
        x = x + params["time_emb"][levels]
    return x


def kv_block(params, cfg: DenoiserConfig, cache: KvCache, tokens, pos_ids,
             levels=None, sigma=None, gamma=None, causal: bool = True,
             extend: bool = True, want_logits: bool = False):
    """Process a block of new slots against the cached prefix.

    With ``causal`` the block attends to the full prefix plus itself
    lower-triangularly (settled extension); otherwise the block is dense
    over prefix + block (an active window).  ``extend`` appends the block's
    keys/values to the cache.  Returns logits when requested.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    B, m = tokens.shape
    pos_ids = np.broadcast_to(np.asarray(pos_ids), (B, m))
    if levels is None:
        levels = np.zeros((B, m), dtype=np.int64)
    else:
        levels = np.broadcast_to(np.atleast_2d(levels), (B, m))
    x = _embed_slots(params, cfg, tokens, pos_ids, levels, sigma, gamma)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    if causal and m > 1:
        block_mask = np.tril(np.ones((m, m), dtype=bool))
    else:
        block_mask = np.ones((m, m), dtype=bool)
    for i in range(cfg.layers):
        a, _ = _layernorm_fwd(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = _split_heads(_linear_fwd(a, params[f"l{i}.wq"], params[f"l{i}.bq"]), cfg.heads)
        k = _split_heads(_linear_fwd(a, params[f"l{i}.wk"], params[f"l{i}.bk"]), cfg.heads)
        v = _split_heads(_linear_fwd(a, params[f"l{i}.wv"], params[f"l{i}.bv"]), cfg.heads)
        k_all = np.concatenate([cache.k[i], k], axis=2)
        v_all = np.concatenate([cache.v[i], v], axis=2)
        scores = (q @ k_all.transpose(0, 1, 3, 2)) * scale
        if not block_mask.all():
            full = np.concatenate(
                [np.ones((m, cache.length), dtype=bool), block_mask], axis=1)
            scores = np.where(full, scores, _NEG)
        scores -= scores.max(-1, keepdims=True)
        ex = np.exp(scores)
        attn = ex / ex.sum(-1, keepdims=True)
        ctx = _merge_heads(attn @ v_all)
        x = x + _linear_fwd(ctx, params[f"l{i}.wo"], params[f"l{i}.bo"])
        h, _ = _layernorm_fwd(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        x = x + _linear_fwd(_silu_fwd(_linear_fwd(h, params[f"l{i}.w1"], params[f"l{i}.b1"]))[0],
                            params[f"l{i}.w2"], params[f"l{i}.b2"])
        if extend:
            cache.k[i] = k_all
            cache.v[i] = v_all
    if extend:
        cache.length += m
    if not want_logits:
        return None
    f, _ = _layernorm_fwd(x, params["lnf.g"], params["lnf.b"])
    return _linear_fwd(f, params["wout"], params["bout"])


# ---------------------------------------------------------------------------
# Checkpoints: magic, JSON config block, then named tensors as little-endian
# float32 with shape headers.  Files round-trip bit-exactly.

CKPT_MAGIC = b"HDCKPT1"


def save_checkpoint(path, params: dict[str, np.ndarray], cfg: DenoiserConfig) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    cfg_bytes = json.dumps(asdict(cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        nb = name.encode()
        tensor = np.ascontiguousarray(params[name], dtype="<f4")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], DenoiserConfig]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (clen,) = struct.unpack("<I", fh.read(4))
        cfg = DenoiserConfig(**json.loads(fh.read(clen).decode()))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))), dtype="<f4")
            params[name] = data.reshape(shape).astype(np.float64)
    return params, cfg
