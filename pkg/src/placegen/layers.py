"""Hand-written forward/backward primitives for the tiny denoiser.

Every op returns ``(out, cache)`` from its forward and consumes
``(dout, cache)`` in its backward, returning input gradients and a dict of
parameter gradients.  Layouts are NHWC for images and (B, N, D) for token
sequences.  All code paths are dtype-preserving so the same graph runs in
float32 for training and float64 for finite-difference checks.

Batched matmuls keep the batch axis as a stacked gufunc dimension
((B, N, K) @ (K, M)), so per-example results are bitwise identical to
single-example evaluation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Additive bias for masked-out attention logits. exp(-1e9) underflows to
# exactly 0.0, so masked keys get exactly zero weight and zero gradient.
MASK_BIAS = -1e9


# ---------------------------------------------------------------------------
# elementwise / norm
# ---------------------------------------------------------------------------

def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_backward(dout, cache):
    x, sig = cache
    return dout * (sig * (1.0 + x * (1.0 - sig)))


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain + bias
    return out, (xhat, inv, gain)


def layernorm_backward(dout, cache):
    xhat, inv, gain = cache
    D = xhat.shape[-1]
    dgain = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbias = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gain
    # standard layernorm input gradient
    dx = inv / D * (D * dxhat
                    - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


def linear(x, w, b):
    """x: (..., K) @ w: (K, M) + b."""
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    return dx, dw, db


def softmax(scores):
    """Row softmax over the last axis; safe against large negatives."""
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dout, p):
    inner = (dout * p).sum(axis=-1, keepdims=True)
    return p * (dout - inner)


# ---------------------------------------------------------------------------
# convolutions (3x3, pad 1, stride 1 or 2)
# ---------------------------------------------------------------------------

def _im2col(x, stride):
    """(B, H, W, C) -> (B, P, 9C) column matrix for a padded 3x3 window."""
    B, H, W, _ = x.shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    if stride == 2:
        win = win[:, ::2, ::2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, Ho * Wo, -1)
    return cols, (Ho, Wo)


def conv3x3(x, w, b, stride=1):
    """3x3 convolution, padding 1.  w: (9*Cin, Cout).

    The batch axis is folded into the GEMM rows; per-row results are
    bitwise identical to per-example evaluation (fixed k-loop order).
    """
    B = x.shape[0]
    cols, (Ho, Wo) = _im2col(x, stride)
    K = cols.shape[-1]
    out = (cols.reshape(-1, K) @ w + b).reshape(B, Ho, Wo, -1)
    return out, (cols, w, x.shape, stride)


def conv3x3_backward(dout, cache):
    cols, w, x_shape, stride = cache
    B, H, W, Cin = x_shape
    Ho, Wo = dout.shape[1], dout.shape[2]
    dflat = dout.reshape(B, Ho * Wo, -1)
    K = cols.shape[-1]
    dw = cols.reshape(-1, K).T @ dflat.reshape(-1, dflat.shape[-1])
    db = dflat.sum(axis=(0, 1))
    M = dflat.shape[-1]
    dcols = dflat.reshape(-1, M) @ w.T        # (B*P, 9*Cin)
    dwin = dcols.reshape(B, Ho, Wo, 3, 3, Cin)
    dxp = np.zeros((B, H + 2, W + 2, Cin), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            if stride == 1:
                dxp[:, ky:ky + H, kx:kx + W] += dwin[:, :, :, ky, kx]
            else:
                dxp[:, ky:ky + 2 * Ho:2, kx:kx + 2 * Wo:2] += dwin[:, :, :, ky, kx]
    dx = dxp[:, 1:-1, 1:-1]
    return dx, dw, db


def upsample2x(x):
    """Nearest-neighbor 2x upsample of (B, H, W, C)."""
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample2x_backward(dout, x_shape):
    B, H, W, C = x_shape
    return dout.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# embeddings (no parameters)
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim, dtype=np.float64):
    """Sinusoidal embedding of integer timesteps; t: (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(dtype)


def positional_grid(h, w, dim, dtype=np.float64):
    """Fixed 2D sinusoidal positions for an h×w token grid -> (h*w, dim).

    Half the channels encode x, half encode y.  Added to attention queries
    and keys only, never to values or residuals, so identity contracts on the
    attention blocks are preserved.
    """
    quarter = dim // 4
    freqs = np.exp(-np.log(100.0) * np.arange(quarter) / max(quarter - 1, 1))
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    ay = ys[:, None] * freqs[None, :] * 2.0 * np.pi
    ax = xs[:, None] * freqs[None, :] * 2.0 * np.pi
    pe_y = np.concatenate([np.sin(ay), np.cos(ay)], axis=1)      # (h, dim/2)
    pe_x = np.concatenate([np.sin(ax), np.cos(ax)], axis=1)      # (w, dim/2)
    grid = np.concatenate(
        [np.repeat(pe_y, w, axis=0), np.tile(pe_x, (h, 1))], axis=1)
    if grid.shape[1] < dim:  # dim not divisible by 4: zero-pad the tail
        grid = np.pad(grid, ((0, 0), (0, dim - grid.shape[1])))
    return grid.astype(dtype)


def fourier_box(box, n_freq, dtype=np.float64):
    """NeRF-style embedding of (x0, y0, x1, y1) -> (8*n_freq,)."""
    coords = np.asarray(box, dtype=np.float64)
    scales = (2.0 ** np.arange(n_freq)) * np.pi
    ang = coords[:, None] * scales[None, :]
    emb = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(-1)
    return emb.astype(dtype)


def embed_rows(table, ids):
    """Gather rows of an embedding table; ids: (...,) int array."""
    return table[ids], (table.shape, ids)


def embed_rows_backward(dout, cache):
    shape, ids = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q_in, k_in, v_in, p, key_bias=None):
    """Single-head scaled dot-product attention with projections.

    q_in/k_in/v_in: (B, N, Dq), (B, M, Dk), (B, M, Dk) token inputs; ``p`` is
    a dict with wq, bq, wk, bk, wv, bv, wo, bo.  ``key_bias`` (B, 1, M) or
    (1, 1, M) is added to the logits (use MASK_BIAS entries to hide keys).
    Returns the projected output (B, N, D) plus cache; attention weights are
    exposed in the cache as cache["attn"].
    """
    q, c_q = linear(q_in, p["wq"], p["bq"])
    k, c_k = linear(k_in, p["wk"], p["bk"])
    v, c_v = linear(v_in, p["wv"], p["bv"])
    scale = 1.0 / float(np.sqrt(q.shape[-1]))  # python float: no f64 promotion
    scores = (q @ k.transpose(0, 2, 1)) * scale
    if key_bias is not None:
        scores = scores + key_bias
    attn, c_sm = softmax(scores)
    ctx = attn @ v
    out, c_o = linear(ctx, p["wo"], p["bo"])
    cache = {"cq": c_q, "ck": c_k, "cv": c_v, "co": c_o,
             "attn": attn, "sm": c_sm, "q": q, "k": k, "v": v,
             "scale": scale}
    return out, cache


def attention_backward(dout, cache):
    """Backward of ``attention``; returns (dq_in, dk_in, dv_in, grads dict)."""
    attn, q, k, v, scale = (cache["attn"], cache["q"], cache["k"],
                            cache["v"], cache["scale"])
    dctx, dwo, dbo = linear_backward(dout, cache["co"])
    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    dscores = softmax_backward(dattn, cache["sm"]) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dq_in, dwq, dbq = linear_backward(dq, cache["cq"])
    dk_in, dwk, dbk = linear_backward(dk, cache["ck"])
    dv_in, dwv, dbv = linear_backward(dv, cache["cv"])
    grads = {"wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
             "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo}
    return dq_in, dk_in, dv_in, grads
