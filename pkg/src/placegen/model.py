"""The trainable noise predictor: a tiny U-Net with transformer blocks.

Two resolution levels (channels ch0 -> ch1) with one transformer block at
each of the 1/2 and 1/4 resolutions.  Every block runs three residual
sublayers in order: self-attention, gated self-attention over concatenated
visual + grounding tokens (the adapter), and cross-attention to the prompt
embedding.  The gated sublayer is scaled by tanh(gamma) and is bypassed
entirely when no layout is given.

Forward and backward passes are written by hand against the primitives in
``layers``; ``backward`` returns a gradient for every parameter.  Parameters
live in a flat name -> array dict, split into the ``base.*`` and
``adapter.*`` groups (the adapter group owns the gated attention sublayers
and the grounding MLP).

A fixed 2D sinusoidal positional grid is added to attention queries and keys
(never to values or residuals): visual tokens otherwise carry no absolute
position on a uniform background, and the grounding mechanism needs
queries that know where they are.  Identity contracts (zero output
projection, gamma = 0) are unaffected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .grounding import Layout, ground_mlp_backward, ground_mlp_forward
from .vocab import DEFAULT_VOCAB, MAX_PROMPT_LEN, PromptTokens, encode_phrase

SUBLAYER_ORDER = ("self_attn", "gated_self_attn", "cross_attn")

_ATTN_SUFFIXES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; stored verbatim in checkpoints."""

    image_size: int = 32
    in_channels: int = 3
    ch0: int = 16
    ch1: int = 32
    time_dim: int = 32
    n_fourier: int = 8
    ground_hidden: int = 64
    max_prompt_len: int = MAX_PROMPT_LEN
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    @property
    def d_model(self) -> int:
        return self.ch1

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)


# conv stages: name -> (cin_key, cout_key, stride).  Channel keys are
# resolved against the config below.
_CONV_STAGES = (
    ("stem", "in", "ch0", 1),
    ("e1", "ch0", "ch0", 1),
    ("d1", "ch0", "ch1", 2),
    ("e2", "ch1", "ch1", 1),
    ("d2", "ch1", "ch1", 2),
    ("m1", "ch1", "ch1", 1),
    ("m2", "ch1", "ch1", 1),
    ("u1", "ch1", "ch1", 1),
    ("u2", "ch1", "ch0", 1),
    ("u3", "ch0", "ch0", 1),
)


def _ch(cfg: ModelConfig, key: str) -> int:
    return {"in": cfg.in_channels, "ch0": cfg.ch0, "ch1": cfg.ch1}[key]


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init_kind) list; the single source of truth for
    initialization, flattening and the checkpoint layout."""
    D = cfg.d_model
    td = cfg.time_dim
    specs: list[tuple[str, tuple, str]] = []
    specs.append(("base.text_emb", (len(cfg.vocab), D), "embed"))
    specs.append(("base.time.w1", (td, 2 * td), "linear"))
    specs.append(("base.time.b1", (2 * td,), "zeros"))
    specs.append(("base.time.w2", (2 * td, td), "linear"))
    specs.append(("base.time.b2", (td,), "zeros"))
    for name, cin, cout, _ in _CONV_STAGES:
        ci, co = _ch(cfg, cin), _ch(cfg, cout)
        specs.append((f"base.{name}.w", (9 * ci, co), "conv"))
        specs.append((f"base.{name}.b", (co,), "zeros"))
        specs.append((f"base.{name}.tw", (td, co), "linear"))
        specs.append((f"base.{name}.tb", (co,), "zeros"))
    specs.append(("base.out.w", (9 * cfg.ch0, cfg.in_channels), "zeros"))
    specs.append(("base.out.b", (cfg.in_channels,), "zeros"))
    for blk in ("tf1", "tf2"):
        specs.append((f"base.{blk}.ln1.g", (D,), "ones"))
        specs.append((f"base.{blk}.ln1.b", (D,), "zeros"))
        for s in _ATTN_SUFFIXES:
            shape = (D,) if s.startswith("b") else (D, D)
            specs.append((f"base.{blk}.sa.{s}", shape, "zeros" if s.startswith("b") else "linear"))
        specs.append((f"base.{blk}.ln2.g", (D,), "ones"))
        specs.append((f"base.{blk}.ln2.b", (D,), "zeros"))
        for s in _ATTN_SUFFIXES:
            shape = (D,) if s.startswith("b") else (D, D)
            specs.append((f"base.{blk}.ca.{s}", shape, "zeros" if s.startswith("b") else "linear"))
    gin = D + 8 * cfg.n_fourier
    gh = cfg.ground_hidden
    specs.append(("adapter.ground.w1", (gin, gh), "linear"))
    specs.append(("adapter.ground.b1", (gh,), "zeros"))
    specs.append(("adapter.ground.w2", (gh, gh), "linear"))
    specs.append(("adapter.ground.b2", (gh,), "zeros"))
    specs.append(("adapter.ground.w3", (gh, D), "linear"))
    specs.append(("adapter.ground.b3", (D,), "zeros"))
    for blk in ("tf1", "tf2"):
        specs.append((f"adapter.{blk}.ln.g", (D,), "ones"))
        specs.append((f"adapter.{blk}.ln.b", (D,), "zeros"))
        for s in _ATTN_SUFFIXES:
            shape = (D,) if s.startswith("b") else (D, D)
            specs.append((f"adapter.{blk}.{s}", shape, "zeros" if s.startswith("b") else "linear"))
        specs.append((f"adapter.{blk}.gamma", (1,), "zeros"))
    return specs


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic initialization.

    The output convolution starts at zero (the initial prediction is zero
    noise, so the starting loss is the variance of epsilon) and every gamma
    starts at zero so adapters begin as exact identities.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1F0]))
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in param_specs(cfg):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "embed":
            arr = rng.standard_normal(shape) * 0.3
        elif kind == "conv":
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        elif kind == "linear":
            arr = rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
        else:
            raise ValueError(kind)
        params[name] = arr.astype(np.float32)
    return params


@dataclass
class DenoiserModel:
    """Architecture descriptor plus the flat parameter store."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "DenoiserModel":
        return cls(config=config, params=init_params(config, seed))

    def base_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("base.")]

    def adapter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("adapter.")]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self, group: str | None = None) -> str:
        """SHA-256 over the named group's parameter bytes in spec order."""
        h = hashlib.sha256()
        for name, _, _ in param_specs(self.config):
            if group is None or name.startswith(group):
                h.update(np.ascontiguousarray(self.params[name], dtype=np.float32).tobytes())
        return h.hexdigest()

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(config=self.config,
                             params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(config=self.config,
                             params={k: v.astype(dtype) for k, v in self.params.items()})

    def without_adapters(self) -> "DenoiserModel":
        """A model whose adapter parameters are deleted outright."""
        return DenoiserModel(config=self.config,
                             params={k: v.copy() for k, v in self.params.items()
                                     if k.startswith("base.")})


def _sub(params: dict, prefix: str) -> dict:
    return {s: params[f"{prefix}.{s}"] for s in _ATTN_SUFFIXES}


def prepare_grounding(cfg: ModelConfig, layouts) -> list[list[tuple[np.ndarray, tuple]]] | None:
    """Tokenize layout phrases into per-example (phrase_ids, coords) lists.

    ``layouts`` is None, one Layout (broadcast later), or a list of Layouts.
    Returns None for the bypass path.
    """
    if layouts is None:
        return None
    if isinstance(layouts, list) and layouts and isinstance(layouts[0], list):
        per_example = layouts
    else:
        per_example = [layouts]
    prepared = []
    for layout in per_example:
        if not layout:
            raise ValueError("grounded batch contains an example with no boxes; "
                             "use layout=None for the ungrounded path")
        prepared.append([(encode_phrase(b.phrase, cfg.vocab), b.coords) for b in layout])
    return prepared


def _encode_grounding_batch(params, cfg, prepared, B, dtype):
    """Encode all boxes in a batch; returns tokens (B,K,D), mask (B,K), cache."""
    if len(prepared) == 1 and B > 1:
        prepared = prepared * B
    if len(prepared) != B:
        raise ValueError(f"{len(prepared)} layouts for batch of {B}")
    text_emb = params["base.text_emb"]
    rows, slots = [], []
    for b, boxes in enumerate(prepared):
        for k, (ids, coords) in enumerate(boxes):
            pooled = text_emb[ids].mean(axis=0)
            four = layers.fourier_box(coords, cfg.n_fourier, dtype=dtype)
            rows.append(np.concatenate([pooled, four]))
            slots.append((b, k, ids))
    gin = np.stack(rows).astype(dtype)
    mlp = {s: params[f"adapter.ground.{s}"] for s in ("w1", "b1", "w2", "b2", "w3", "b3")}
    g_rows, mlp_cache = ground_mlp_forward(gin, mlp)
    K = max(len(boxes) for boxes in prepared)
    D = cfg.d_model
    g_tokens = np.zeros((B, K, D), dtype=dtype)
    g_mask = np.zeros((B, K), dtype=bool)
    for row, (b, k, _) in enumerate(slots):
        g_tokens[b, k] = g_rows[row]
        g_mask[b, k] = True
    return g_tokens, g_mask, {"slots": slots, "mlp": mlp_cache, "emb_dim": D}


def _grounding_backward(dg_tokens, cache, grads, dtype):
    slots, mlp_cache = cache["slots"], cache["mlp"]
    dg_rows = np.stack([dg_tokens[b, k] for (b, k, _) in slots])
    dgin, mlp_grads = ground_mlp_backward(dg_rows, mlp_cache)
    for s, g in mlp_grads.items():
        grads[f"adapter.ground.{s}"] += g
    D = cache["emb_dim"]
    dpooled = dgin[:, :D]
    for row, (_, _, ids) in enumerate(slots):
        np.add.at(grads["base.text_emb"], ids, dpooled[row] / len(ids))


def forward(model: DenoiserModel, x, t, prompt_ids, prompt_valid, grounding=None):
    """Run the denoiser; returns (eps_prediction, cache).

    x: (B, H, W, C); t: (B,) integer timesteps; prompt_ids/valid: (B, L);
    grounding: output of ``prepare_grounding`` or None for the bypass path.
    """
    cfg, params = model.config, model.params
    dtype = x.dtype
    B, H, W, _ = x.shape
    if H != cfg.image_size or W != cfg.image_size:
        raise ValueError(f"expected {cfg.image_size}^2 input, got {H}x{W}")
    if np.any(prompt_valid.sum(axis=1) == 0):
        raise ValueError("empty prompt rejected")
    cache: dict = {"trace": [], "x_shape": x.shape, "dtype": dtype}

    temb = layers.timestep_embedding(t, cfg.time_dim, dtype=dtype)
    t1, c_t1 = layers.linear(temb, params["base.time.w1"], params["base.time.b1"])
    a1, c_ts = layers.silu(t1)
    temb2, c_t2 = layers.linear(a1, params["base.time.w2"], params["base.time.b2"])
    cache["time"] = (c_t1, c_ts, c_t2)

    c_emb, c_emb_cache = layers.embed_rows(params["base.text_emb"], prompt_ids)
    c_emb = c_emb.astype(dtype)
    c_bias = np.where(prompt_valid[:, None, :], 0.0, layers.MASK_BIAS).astype(dtype)
    cache["prompt"] = c_emb_cache

    if grounding is not None:
        g_tokens, g_mask, g_cache = _encode_grounding_batch(params, cfg, grounding, B, dtype)
        g_bias = np.where(g_mask[:, None, :], 0.0, layers.MASK_BIAS).astype(dtype)
        cache["ground"] = g_cache
    else:
        g_tokens = g_mask = g_bias = None

    def conv_stage(name, h, stride=1):
        out, c_conv = layers.conv3x3(h, params[f"base.{name}.w"],
                                     params[f"base.{name}.b"], stride=stride)
        tb, c_tb = layers.linear(temb2, params[f"base.{name}.tw"],
                                 params[f"base.{name}.tb"])
        out = out + tb[:, None, None, :]
        out, c_act = layers.silu(out)
        cache[name] = (c_conv, c_tb, c_act)
        return out

    def tfm_block(blk, h):
        Bh, hh, ww, D = h.shape
        N = hh * ww
        v = h.reshape(Bh, N, D)
        pos = layers.positional_grid(hh, ww, D, dtype=dtype)
        blk_cache: dict = {"hw": (hh, ww)}
        ln1, c_ln1 = layers.layernorm(v, params[f"base.{blk}.ln1.g"], params[f"base.{blk}.ln1.b"])
        qk = ln1 + pos
        sa, c_sa = layers.attention(qk, qk, ln1, _sub(params, f"base.{blk}.sa"))
        v = v + sa
        cache["trace"].append(f"{blk}.self_attn")
        blk_cache["ln1"], blk_cache["sa"] = c_ln1, c_sa
        if g_tokens is not None:
            lnA, c_lnA = layers.layernorm(v, params[f"adapter.{blk}.ln.g"],
                                          params[f"adapter.{blk}.ln.b"])
            k_in = np.concatenate([lnA + pos, g_tokens], axis=1)
            v_in = np.concatenate([lnA, g_tokens], axis=1)
            key_bias = np.concatenate(
                [np.zeros((Bh, 1, N), dtype=dtype), g_bias], axis=2)
            ga, c_ga = layers.attention(lnA + pos, k_in, v_in,
                                        _sub(params, f"adapter.{blk}"), key_bias)
            gamma = params[f"adapter.{blk}.gamma"][0]
            gate = np.tanh(gamma)
            v = v + gate * ga
            cache["trace"].append(f"{blk}.gated_self_attn")
            blk_cache.update(lnA=c_lnA, ga=c_ga, ga_out=ga, gate=gate, gamma=gamma, n_vis=N)
        ln2, c_ln2 = layers.layernorm(v, params[f"base.{blk}.ln2.g"], params[f"base.{blk}.ln2.b"])
        ca, c_ca = layers.attention(ln2 + pos, c_emb, c_emb,
                                    _sub(params, f"base.{blk}.ca"), c_bias)
        v = v + ca
        cache["trace"].append(f"{blk}.cross_attn")
        blk_cache["ln2"], blk_cache["ca"] = c_ln2, c_ca
        cache[blk] = blk_cache
        return v.reshape(Bh, hh, ww, D)

    h = conv_stage("stem", x)
    skip0 = conv_stage("e1", h)
    h = conv_stage("d1", skip0, stride=2)
    h = conv_stage("e2", h)
    skip1 = tfm_block("tf1", h)
    h = conv_stage("d2", skip1, stride=2)
    h = conv_stage("m1", h)
    h = tfm_block("tf2", h)
    h = conv_stage("m2", h)
    up1, c_up1 = layers.upsample2x(h)
    cache["up1"] = c_up1
    h = conv_stage("u1", up1) + skip1
    up2, c_up2 = layers.upsample2x(h)
    cache["up2"] = c_up2
    h = conv_stage("u2", up2) + skip0
    h = conv_stage("u3", h)
    eps, c_out = layers.conv3x3(h, params["base.out.w"], params["base.out.b"])
    cache["out"] = c_out
    return eps, cache


def backward(model: DenoiserModel, cache: dict, deps: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(eps) through the cached forward pass.

    Returns a gradient array for every parameter in the model (zeros for
    adapter parameters when the forward ran ungrounded).
    """
    cfg, params = model.config, model.params
    dtype = cache["dtype"]
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    d_temb2 = None
    dg_tokens_total = None

    def conv_stage_backward(name, dout):
        nonlocal d_temb2
        c_conv, c_tb, c_act = cache[name]
        dpre = layers.silu_backward(dout, c_act)
        dtb = dpre.sum(axis=(1, 2))
        dt2, dtw, dtbias = layers.linear_backward(dtb, c_tb)
        d_temb2 = dt2 if d_temb2 is None else d_temb2 + dt2
        grads[f"base.{name}.tw"] += dtw
        grads[f"base.{name}.tb"] += dtbias
        dx, dw, db = layers.conv3x3_backward(dpre, c_conv)
        grads[f"base.{name}.w"] += dw
        grads[f"base.{name}.b"] += db
        return dx

    def attn_backward_into(prefix, dout, c_attn):
        dq_in, dk_in, dv_in, agrads = layers.attention_backward(dout, c_attn)
        for s, g in agrads.items():
            grads[f"{prefix}.{s}"] += g
        return dq_in, dk_in, dv_in

    dc_emb_total = None

    def tfm_block_backward(blk, dout):
        nonlocal dc_emb_total, dg_tokens_total
        bc = cache[blk]
        hh, ww = bc["hw"]
        B = dout.shape[0]
        dv = dout.reshape(B, hh * ww, -1)
        # cross-attention sublayer
        dq, dk, dvv = attn_backward_into(f"base.{blk}.ca", dv, bc["ca"])
        dc = dk + dvv
        dc_emb_total = dc if dc_emb_total is None else dc_emb_total + dc
        dln2, dg_, db_ = layers.layernorm_backward(dq, bc["ln2"])
        grads[f"base.{blk}.ln2.g"] += dg_
        grads[f"base.{blk}.ln2.b"] += db_
        dv = dv + dln2
        # gated self-attention sublayer (adapter)
        if "ga" in bc:
            N = bc["n_vis"]
            d_ga = dv * bc["gate"]
            grads[f"adapter.{blk}.gamma"] += np.array(
                [(dv * bc["ga_out"]).sum() * (1.0 - np.tanh(bc["gamma"]) ** 2)],
                dtype=grads[f"adapter.{blk}.gamma"].dtype)
            dq, dk, dvv = attn_backward_into(f"adapter.{blk}", d_ga, bc["ga"])
            dlnA = dq + dk[:, :N] + dvv[:, :N]
            dg_tok = dk[:, N:] + dvv[:, N:]
            dg_tokens_total = dg_tok if dg_tokens_total is None else dg_tokens_total + dg_tok
            dlnA_in, dg_, db_ = layers.layernorm_backward(dlnA, bc["lnA"])
            grads[f"adapter.{blk}.ln.g"] += dg_
            grads[f"adapter.{blk}.ln.b"] += db_
            dv = dv + dlnA_in
        # self-attention sublayer
        dq, dk, dvv = attn_backward_into(f"base.{blk}.sa", dv, bc["sa"])
        dln1, dg_, db_ = layers.layernorm_backward(dq + dk + dvv, bc["ln1"])
        grads[f"base.{blk}.ln1.g"] += dg_
        grads[f"base.{blk}.ln1.b"] += db_
        dv = dv + dln1
        return dv.reshape(B, hh, ww, -1)

    dh, dw, db = layers.conv3x3_backward(deps, cache["out"])
    grads["base.out.w"] += dw
    grads["base.out.b"] += db
    dh = conv_stage_backward("u3", dh)
    dskip0 = dh
    dup2 = conv_stage_backward("u2", dh)
    dh = layers.upsample2x_backward(dup2, cache["up2"])
    dskip1 = dh
    dup1 = conv_stage_backward("u1", dh)
    dh = layers.upsample2x_backward(dup1, cache["up1"])
    dh = conv_stage_backward("m2", dh)
    dh = tfm_block_backward("tf2", dh)
    dh = conv_stage_backward("m1", dh)
    dh = conv_stage_backward("d2", dh)
    dh = tfm_block_backward("tf1", dh + dskip1)
    dh = conv_stage_backward("e2", dh)
    dh = conv_stage_backward("d1", dh)
    dh = conv_stage_backward("e1", dh + dskip0)
    dh = conv_stage_backward("stem", dh)

    # prompt embedding rows (cross-attention keys/values)
    grads["base.text_emb"] += layers.embed_rows_backward(
        dc_emb_total.astype(grads["base.text_emb"].dtype), cache["prompt"])
    # grounding tokens -> MLP -> pooled phrase embeddings
    if dg_tokens_total is not None:
        _grounding_backward(dg_tokens_total, cache["ground"], grads, dtype)
    # time MLP
    c_t1, c_ts, c_t2 = cache["time"]
    da1, dw2, db2 = layers.linear_backward(d_temb2, c_t2)
    grads["base.time.w2"] += dw2
    grads["base.time.b2"] += db2
    dt1 = layers.silu_backward(da1, c_ts)
    _, dw1, db1 = layers.linear_backward(dt1, c_t1)
    grads["base.time.w1"] += dw1
    grads["base.time.b1"] += db1
    return grads


def predict_noise(model: DenoiserModel, x_t: np.ndarray, t, prompt, layout=None) -> np.ndarray:
    """Predict the noise in ``x_t`` conditioned on timestep, prompt, layout.

    Accepts a single (H, W, C) image or a (B, H, W, C) batch; ``prompt`` is a
    PromptTokens or a list of them; ``layout`` is None (adapters bypassed), a
    Layout shared by the batch, or one Layout per example.  Pure function of
    its inputs.
    """
    single = x_t.ndim == 3
    xb = x_t[None] if single else x_t
    B = xb.shape[0]
    prompts = [prompt] * B if isinstance(prompt, PromptTokens) else list(prompt)
    if len(prompts) != B:
        raise ValueError(f"{len(prompts)} prompts for batch of {B}")
    ids = np.stack([p.ids for p in prompts])
    valid = np.stack([p.valid for p in prompts])
    tb = np.full(B, t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
    if np.any(tb < 0):
        raise ValueError(f"negative timestep {t}")
    grounding = prepare_grounding(model.config, layout)
    eps, _ = forward(model, xb, tb, ids, valid, grounding)
    return eps[0] if single else eps
