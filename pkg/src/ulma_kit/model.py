"""Toy self-supervised audio encoder and fine-tuning heads.

Architecture: a strided 1-D conv front end producing representations at
50 frames per second, sinusoidal positional encodings, a small pre-norm
transformer encoder, and a cosine-similarity unit-prediction head for
masked pretraining.  Fine-tuning adds linear heads over mean-pooled
hidden states (softmax classification or per-class sigmoid detection)
with the conv front end frozen.

Everything runs in float64 with explicit forward/backward passes and a
plain fixed-step gradient-descent update, so training is bitwise
deterministic given seeds and every gradient is finite-difference
checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ClipTooShortError,
    EmptyMaskError,
    EmptySequenceError,
    LabelOutOfRangeError,
    LayerOutOfRangeError,
    NonFiniteLossError,
    OddDimError,
    RateMismatchError,
    ShapeMismatchError,
    TargetLengthMismatchError,
)
from .signal import AudioClip

FRAME_RATE = 50  # conv front-end output frames per second
LN_EPS = 1e-5
NORM_FLOOR = 1e-12

DEFAULT_CONV_LAYERS = ((10, 5, 16), (8, 4, 16), (4, 4, 16), (4, 4, 16))


@dataclass
class EncoderConfig:
    """Hyperparameters of the toy encoder."""

    sample_rate: int = 16000
    conv_layers: tuple = DEFAULT_CONV_LAYERS
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    k_units: int = 16
    proj_dim: int = 16
    temperature: float = 0.1
    mask_span: int = 10
    mask_start_prob: float = 0.08
    max_pos: int = 512

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise OddDimError("d_model must be even for positional encoding")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.mask_start_prob <= 1:
            raise ValueError("mask_start_prob must lie in [0, 1]")
        stride_product = math.prod(s for _, s, _ in self.conv_layers)
        if self.sample_rate % FRAME_RATE or \
                stride_product != self.sample_rate // FRAME_RATE:
            raise ValueError(
                f"conv strides must multiply to sample_rate/{FRAME_RATE} "
                f"= {self.sample_rate / FRAME_RATE}, got {stride_product}"
            )

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for kernel, stride, _ in self.conv_layers:
            rf += (kernel - 1) * jump
            jump *= stride
        return rf


@dataclass(eq=False)
class EncoderModel:
    """Parameter container; all state lives in the ``params`` dict."""

    config: EncoderConfig
    params: dict
    rng_seed: int

    @property
    def depth(self) -> int:
        return self.config.n_layers


@dataclass(eq=False)
class FineTuneHead:
    """Linear head over the mean-pooled representation."""

    kind: str  # "classify" | "detect"
    weights: np.ndarray  # (d_model, n_classes)
    bias: np.ndarray     # (n_classes,)

    def __post_init__(self):
        if self.kind not in ("classify", "detect"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


def init_head(kind: str, d_model: int, n_classes: int, seed: int) -> FineTuneHead:
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((d_model, n_classes)) / math.sqrt(d_model)
    return FineTuneHead(kind=kind, weights=weights, bias=np.zeros(n_classes))


def init_model(cfg: EncoderConfig, seed: int) -> EncoderModel:
    """Draw all parameters from one seeded generator in a fixed order."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    c_in = 1
    for i, (kernel, _, c_out) in enumerate(cfg.conv_layers):
        scale = 1.0 / math.sqrt(kernel * c_in)
        params[f"conv{i}.w"] = rng.standard_normal((kernel, c_in, c_out)) * scale
        # Small positive bias keeps rectifier channels alive at init, which
        # finite-difference gradient checks rely on.
        params[f"conv{i}.b"] = np.full(c_out, 0.05)
        c_in = c_out
    params["conv_proj.w"] = rng.standard_normal((c_in, cfg.d_model)) / math.sqrt(c_in)
    params["conv_proj.b"] = np.zeros(cfg.d_model)
    params["mask_emb"] = 0.1 * rng.standard_normal(cfg.d_model)

    scale_d = 1.0 / math.sqrt(cfg.d_model)
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        params[p + "ln1.g"] = np.ones(cfg.d_model)
        params[p + "ln1.b"] = np.zeros(cfg.d_model)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = (
                rng.standard_normal((cfg.d_model, cfg.d_model)) * scale_d
            )
        # No key bias: a constant added to every key shifts each softmax
        # row uniformly, so such a parameter could never affect the output.
        for name in ("bq", "bv", "bo"):
            params[p + "attn." + name] = np.zeros(cfg.d_model)
        params[p + "ln2.g"] = np.ones(cfg.d_model)
        params[p + "ln2.b"] = np.zeros(cfg.d_model)
        params[p + "ff.w1"] = rng.standard_normal((cfg.d_model, cfg.d_ff)) * scale_d
        params[p + "ff.b1"] = np.zeros(cfg.d_ff)
        params[p + "ff.w2"] = (
            rng.standard_normal((cfg.d_ff, cfg.d_model)) / math.sqrt(cfg.d_ff)
        )
        params[p + "ff.b2"] = np.zeros(cfg.d_model)

    params["final_ln.g"] = np.ones(cfg.d_model)
    params["final_ln.b"] = np.zeros(cfg.d_model)
    params["out_proj.w"] = (
        rng.standard_normal((cfg.d_model, cfg.proj_dim)) * scale_d
    )
    params["out_proj.b"] = np.zeros(cfg.proj_dim)
    unit_emb = rng.standard_normal((cfg.k_units, cfg.proj_dim))
    params["unit_emb"] = unit_emb / np.linalg.norm(unit_emb, axis=1, keepdims=True)

    return EncoderModel(config=cfg, params=params, rng_seed=seed)


# --- building blocks ---

_PE_CACHE: dict = {}


def positional_encoding(max_pos: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
    PE[pos, 2i+1] = cos(pos / 10000^(2i/d))."""
    if d_model % 2:
        raise OddDimError(f"d_model must be even, got {d_model}")
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    inv_freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angles = pos * inv_freq[None, :]
    table = np.empty((max_pos, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def _pe_table(cfg: EncoderConfig) -> np.ndarray:
    key = (cfg.max_pos, cfg.d_model)
    if key not in _PE_CACHE:
        table = positional_encoding(*key)
        table.setflags(write=False)
        _PE_CACHE[key] = table
    return _PE_CACHE[key]


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def scaled_dot_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(QK^T / sqrt(d_k)) V for 2-D operands."""
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeMismatchError("Q, K, V must be 2-D matrices")
    if Q.shape[1] != K.shape[1] or Q.shape[1] < 1:
        raise ShapeMismatchError(
            f"key dim mismatch: Q has {Q.shape[1]}, K has {K.shape[1]}"
        )
    if K.shape[0] != V.shape[0]:
        raise ShapeMismatchError(
            f"K has {K.shape[0]} rows but V has {V.shape[0]}"
        )
    scores = Q @ K.T / math.sqrt(Q.shape[1])
    return _softmax(scores) @ V


def component_attention(ism_feats: np.ndarray, fil_feats: np.ndarray,
                        harf_feats: np.ndarray,
                        chirps_bias: Optional[float] = None) -> np.ndarray:
    """Attention with Q from the ism, K from the fil, V from the harf.

    ``chirps_bias`` is added to every pre-softmax score when given; a
    constant shift leaves the softmax (and the output) unchanged, so it
    only matters for callers that later vary it per pair.
    """
    Q, K, V = (np.asarray(m, dtype=np.float64)
               for m in (ism_feats, fil_feats, harf_feats))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeMismatchError("component features must be 2-D")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeMismatchError("component feature shapes not conformable")
    scores = Q @ K.T / math.sqrt(Q.shape[1])
    if chirps_bias is not None:
        scores = scores + chirps_bias
    return _softmax(scores) @ V


# --- conv front end ---

def conv_output_length(cfg: EncoderConfig, n_samples: int) -> int:
    length = n_samples
    for _, stride, _ in cfg.conv_layers:
        length = -(-length // stride)  # ceil division ("same" padding)
    return length


def _conv_forward(model: EncoderModel, samples: np.ndarray):
    cfg = model.config
    x = samples[:, None]  # (n, 1)
    caches = []
    for i, (kernel, stride, c_out) in enumerate(cfg.conv_layers):
        w = model.params[f"conv{i}.w"].reshape(kernel * x.shape[1], c_out)
        b = model.params[f"conv{i}.b"]
        t_out = -(-x.shape[0] // stride)
        pad_total = max((t_out - 1) * stride + kernel - x.shape[0], 0)
        pad_l = pad_total // 2
        padded = np.zeros((x.shape[0] + pad_total, x.shape[1]))
        padded[pad_l:pad_l + x.shape[0]] = x
        idx = stride * np.arange(t_out)[:, None] + np.arange(kernel)[None, :]
        patches = padded[idx]  # (t_out, kernel, c_in)
        z = patches.reshape(t_out, -1) @ w + b
        relu_mask = z > 0
        caches.append((patches, relu_mask, idx, pad_l, padded.shape, x.shape[0], i))
        x = z * relu_mask
    feats = x @ model.params["conv_proj.w"] + model.params["conv_proj.b"]
    caches.append(("proj", x))
    return feats, caches


def _conv_backward(model: EncoderModel, caches, dfeats):
    cfg = model.config
    grads = {}
    tag, last_hidden = caches[-1]
    assert tag == "proj"
    grads["conv_proj.w"] = last_hidden.T @ dfeats
    grads["conv_proj.b"] = dfeats.sum(axis=0)
    dx = dfeats @ model.params["conv_proj.w"].T
    for patches, relu_mask, idx, pad_l, padded_shape, in_len, i in reversed(
        caches[:-1]
    ):
        _, _, c_out = cfg.conv_layers[i]
        w = model.params[f"conv{i}.w"].reshape(-1, c_out)
        dz = dx * relu_mask
        flat_patches = patches.reshape(patches.shape[0], -1)
        grads[f"conv{i}.w"] = (flat_patches.T @ dz).reshape(
            model.params[f"conv{i}.w"].shape
        )
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        dpatches = (dz @ w.T).reshape(patches.shape)
        dpadded = np.zeros(padded_shape)
        np.add.at(dpadded, idx, dpatches)
        dx = dpadded[pad_l:pad_l + in_len]
    return grads, dx


def conv_frontend(model: EncoderModel, clip: AudioClip) -> np.ndarray:
    """Strided conv stack with rectifier activations plus a linear map to
    d_model; a 1-second clip yields exactly 50 frames."""
    cfg = model.config
    if clip.sample_rate != cfg.sample_rate:
        raise RateMismatchError(
            f"clip rate {clip.sample_rate} != model rate {cfg.sample_rate}"
        )
    if clip.samples.size < cfg.receptive_field:
        raise ClipTooShortError(
            f"need {cfg.receptive_field} samples, got {clip.samples.size}"
        )
    feats, _ = _conv_forward(model, clip.samples)
    return feats


# --- transformer encoder (pre-norm) ---

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(m, n_heads):
    t, d = m.shape
    return m.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(m):
    h, t, dh = m.shape
    return m.transpose(1, 0, 2).reshape(t, h * dh)


def _mha_forward(params, prefix, u, n_heads):
    q = u @ params[prefix + "wq"] + params[prefix + "bq"]
    k = u @ params[prefix + "wk"]
    v = u @ params[prefix + "wv"] + params[prefix + "bv"]
    qh, kh, vh = (_split_heads(m, n_heads) for m in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[2])
    scores = qh @ kh.transpose(0, 2, 1) * scale
    probs = _softmax(scores)
    oh = probs @ vh
    o = _merge_heads(oh)
    out = o @ params[prefix + "wo"] + params[prefix + "bo"]
    return out, (u, qh, kh, vh, probs, o, scale)


def _mha_backward(params, prefix, dout, cache, n_heads, grads):
    u, qh, kh, vh, probs, o, scale = cache
    grads[prefix + "wo"] = o.T @ dout
    grads[prefix + "bo"] = dout.sum(axis=0)
    do = dout @ params[prefix + "wo"].T
    doh = _split_heads(do, n_heads)
    dprobs = doh @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ doh
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 2, 1) @ qh * scale
    du = np.zeros_like(u)
    for name, dm in (("wq", _merge_heads(dqh)), ("wk", _merge_heads(dkh)),
                     ("wv", _merge_heads(dvh))):
        grads[prefix + name] = u.T @ dm
        if name != "wk":  # keys carry no bias
            grads[prefix + "b" + name[1]] = dm.sum(axis=0)
        du += dm @ params[prefix + name].T
    return du


def _block_forward(params, l, x, n_heads):
    p = f"layer{l}."
    u, ln1_cache = _ln_forward(x, params[p + "ln1.g"], params[p + "ln1.b"])
    attn_out, attn_cache = _mha_forward(params, p + "attn.", u, n_heads)
    x1 = x + attn_out
    v, ln2_cache = _ln_forward(x1, params[p + "ln2.g"], params[p + "ln2.b"])
    h_pre = v @ params[p + "ff.w1"] + params[p + "ff.b1"]
    relu_mask = h_pre > 0
    h = h_pre * relu_mask
    ff_out = h @ params[p + "ff.w2"] + params[p + "ff.b2"]
    x2 = x1 + ff_out
    return x2, (ln1_cache, attn_cache, ln2_cache, v, relu_mask, h)


def _block_backward(params, l, dx2, cache, n_heads, grads):
    p = f"layer{l}."
    ln1_cache, attn_cache, ln2_cache, v, relu_mask, h = cache
    grads[p + "ff.w2"] = h.T @ dx2
    grads[p + "ff.b2"] = dx2.sum(axis=0)
    dh = dx2 @ params[p + "ff.w2"].T
    dh_pre = dh * relu_mask
    grads[p + "ff.w1"] = v.T @ dh_pre
    grads[p + "ff.b1"] = dh_pre.sum(axis=0)
    dv = dh_pre @ params[p + "ff.w1"].T
    dx1_ln, dg2, db2 = _ln_backward(dv, ln2_cache)
    grads[p + "ln2.g"] = dg2
    grads[p + "ln2.b"] = db2
    dx1 = dx2 + dx1_ln
    du = _mha_backward(params, p + "attn.", dx1, attn_cache, n_heads, grads)
    dx_ln, dg1, db1 = _ln_backward(du, ln1_cache)
    grads[p + "ln1.g"] = dg1
    grads[p + "ln1.b"] = db1
    return dx1 + dx_ln


def _encode_forward(model: EncoderModel, clip: AudioClip,
                    mask_positions: Optional[np.ndarray] = None):
    cfg = model.config
    if clip.sample_rate != cfg.sample_rate:
        raise RateMismatchError(
            f"clip rate {clip.sample_rate} != model rate {cfg.sample_rate}"
        )
    if clip.samples.size < cfg.receptive_field:
        raise ClipTooShortError(
            f"need {cfg.receptive_field} samples, got {clip.samples.size}"
        )
    feats, conv_caches = _conv_forward(model, clip.samples)
    t = feats.shape[0]
    if t > cfg.max_pos:
        raise ValueError(f"{t} frames exceed max_pos {cfg.max_pos}")

    inputs = feats
    if mask_positions is not None and mask_positions.size:
        inputs = feats.copy()
        inputs[mask_positions] = model.params["mask_emb"]
    x = inputs + _pe_table(cfg)[:t]

    block_caches = []
    hidden = []
    for l in range(cfg.n_layers):
        x, cache = _block_forward(model.params, l, x, cfg.n_heads)
        block_caches.append(cache)
        hidden.append(x)
    y, final_cache = _ln_forward(
        x, model.params["final_ln.g"], model.params["final_ln.b"]
    )
    return {
        "conv_caches": conv_caches,
        "mask_positions": mask_positions,
        "block_caches": block_caches,
        "hidden": hidden,
        "final_cache": final_cache,
        "y": y,
        "t": t,
    }


def _encode_backward(model: EncoderModel, ctx, dy,
                     include_conv: bool) -> dict:
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    dx, dg, db = _ln_backward(dy, ctx["final_cache"])
    grads["final_ln.g"] = dg
    grads["final_ln.b"] = db
    for l in reversed(range(cfg.n_layers)):
        dx = _block_backward(model.params, l, dx, ctx["block_caches"][l],
                             cfg.n_heads, grads)
    dfeats = dx  # positional table is constant
    mask_positions = ctx["mask_positions"]
    if mask_positions is not None and mask_positions.size:
        grads["mask_emb"] = dfeats[mask_positions].sum(axis=0)
        dfeats = dfeats.copy()
        dfeats[mask_positions] = 0.0
    if include_conv:
        conv_grads, _ = _conv_backward(model, ctx["conv_caches"], dfeats)
        grads.update(conv_grads)
    return grads


def encode(model: EncoderModel, clip: AudioClip) -> np.ndarray:
    """Final hidden representation (T x d_model), no masking."""
    return _encode_forward(model, clip)["y"]


def hidden_states(model: EncoderModel, clip: AudioClip) -> list[np.ndarray]:
    """Residual-stream output of each transformer block, depth entries."""
    return _encode_forward(model, clip)["hidden"]


# --- masked pretraining ---

def mask_spans(t: int, cfg: EncoderConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample masked positions: each frame starts a span of length
    ``mask_span`` with probability ``mask_start_prob``; spans clip at T
    and the union is returned (sorted, possibly empty)."""
    if t < 1:
        raise ValueError("need at least one frame")
    starts = np.flatnonzero(rng.random(t) < cfg.mask_start_prob)
    masked = np.zeros(t, dtype=bool)
    for s in starts:
        masked[s:s + cfg.mask_span] = True
    return np.flatnonzero(masked)


def _unit_logits(model, y):
    """Cosine-similarity logits against the unit embedding table."""
    z = y @ model.params["out_proj.w"] + model.params["out_proj.b"]
    z_norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    zn = z / z_norm
    e = model.params["unit_emb"]
    e_norm = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), NORM_FLOOR)
    en = e / e_norm
    logits = zn @ en.T / model.config.temperature
    return logits, (y, z, z_norm, zn, en, e_norm)


def _unit_logits_backward(model, dlogits, cache, grads):
    y, z, z_norm, zn, en, e_norm = cache
    tau = model.config.temperature
    dcos = dlogits / tau
    dzn = dcos @ en
    den = dcos.T @ zn
    dz = (dzn - zn * (dzn * zn).sum(axis=1, keepdims=True)) / z_norm
    de = (den - en * (den * en).sum(axis=1, keepdims=True)) / e_norm
    grads["unit_emb"] = de
    grads["out_proj.w"] = y.T @ dz
    grads["out_proj.b"] = dz.sum(axis=0)
    return dz @ model.params["out_proj.w"].T


def pretrain_loss(model: EncoderModel, clip: AudioClip,
                  unit_labels: Sequence[int],
                  mask_positions: np.ndarray) -> tuple[float, dict]:
    """Masked-prediction cross-entropy and gradients for all parameters.

    The loss averages over masked positions only; unmasked labels do not
    enter it.  Deterministic given the mask, so it is the quantity used
    for finite-difference gradient checks.
    """
    labels = np.asarray(unit_labels, dtype=np.int64)
    mask_positions = np.asarray(mask_positions, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.config.k_units:
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {model.config.k_units})"
        )
    if mask_positions.size == 0:
        raise EmptyMaskError("no masked positions")

    ctx = _encode_forward(model, clip, mask_positions)
    if labels.size != ctx["t"]:
        raise ValueError(
            f"need one label per frame: {labels.size} labels, {ctx['t']} frames"
        )
    logits, logit_cache = _unit_logits(model, ctx["y"])
    probs = _softmax(logits[mask_positions])
    picked = probs[np.arange(mask_positions.size), labels[mask_positions]]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())

    dlogits = np.zeros_like(logits)
    dmasked = probs.copy()
    dmasked[np.arange(mask_positions.size), labels[mask_positions]] -= 1.0
    dlogits[mask_positions] = dmasked / mask_positions.size

    grads: dict[str, np.ndarray] = {}
    dy = _unit_logits_backward(model, dlogits, logit_cache, grads)
    grads.update(_encode_backward(model, ctx, dy, include_conv=True))
    return loss, grads


def predict_units(model: EncoderModel, clip: AudioClip,
                  mask_positions: np.ndarray) -> np.ndarray:
    """Argmax unit predictions at the masked positions (forward only)."""
    ctx = _encode_forward(model, clip, np.asarray(mask_positions, dtype=np.int64))
    logits, _ = _unit_logits(model, ctx["y"])
    return np.argmax(logits[mask_positions], axis=1)


def _apply_update(params: dict, grads: dict, step_size: float,
                  frozen_prefixes: tuple = ()) -> None:
    for name in sorted(grads):
        if any(name.startswith(p) for p in frozen_prefixes):
            continue
        params[name] -= step_size * grads[name]


def _renormalize_units(params: dict) -> None:
    e = params["unit_emb"]
    params["unit_emb"] = e / np.maximum(
        np.linalg.norm(e, axis=1, keepdims=True), NORM_FLOOR
    )


def pretrain_step(model: EncoderModel, clip: AudioClip,
                  unit_labels: Sequence[int], rng: np.random.Generator,
                  step_size: float) -> float:
    """One masked-prediction step: sample spans, evaluate the masked
    cross-entropy, apply a gradient-descent update to every parameter,
    renormalize the unit embedding rows, and return the pre-update loss.

    Raises EmptyMaskError when the span draw selects nothing; the caller
    retries with the advanced generator.
    """
    t = conv_output_length(model.config, clip.samples.size)
    mask_positions = mask_spans(t, model.config, rng)
    loss, grads = pretrain_loss(model, clip, unit_labels, mask_positions)
    _apply_update(model.params, grads, step_size)
    _renormalize_units(model.params)
    return loss


# --- fine-tuning ---

def mean_pool(hidden: np.ndarray) -> np.ndarray:
    """Mean over frames; the clip-level summary vector."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise EmptySequenceError("need a nonempty T x d matrix")
    return hidden.mean(axis=0)


def pooled_forward(model: EncoderModel, clip: AudioClip):
    """Mean-pooled final representation plus the backward context."""
    ctx = _encode_forward(model, clip)
    return mean_pool(ctx["y"]), ctx


def pooled_backward(model: EncoderModel, ctx, dpooled: np.ndarray) -> dict:
    """Gradients of a loss on the pooled vector w.r.t. transformer
    parameters.  The conv front end stays frozen (no gradients)."""
    dy = np.broadcast_to(dpooled / ctx["t"], ctx["y"].shape)
    return _encode_backward(model, ctx, dy, include_conv=False)


CONV_PREFIXES = ("conv",)


def classify_loss(model: EncoderModel, head: FineTuneHead, clip: AudioClip,
                  label: int) -> tuple[float, dict, dict]:
    """Softmax cross-entropy on the pooled representation.

    Returns (loss, model_grads, head_grads); model_grads never contain
    conv parameters (frozen front end).
    """
    if head.kind != "classify":
        raise ValueError("head kind must be 'classify'")
    if not 0 <= label < head.n_classes:
        raise LabelOutOfRangeError(f"label {label} outside [0, {head.n_classes})")
    pooled, ctx = pooled_forward(model, clip)
    logits = pooled @ head.weights + head.bias
    probs = _softmax(logits)
    loss = float(-math.log(max(probs[label], 1e-300)))
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    head_grads = {"weights": np.outer(pooled, dlogits), "bias": dlogits}
    dpooled = head.weights @ dlogits
    return loss, pooled_backward(model, ctx, dpooled), head_grads


def detect_loss(model: EncoderModel, head: FineTuneHead, clip: AudioClip,
                targets: Sequence[float]) -> tuple[float, dict, dict]:
    """Mean per-class sigmoid binary cross-entropy on the pooled
    representation; same freezing rule as classification."""
    if head.kind != "detect":
        raise ValueError("head kind must be 'detect'")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (head.n_classes,):
        raise TargetLengthMismatchError(
            f"targets length {targets.size} != {head.n_classes} classes"
        )
    pooled, ctx = pooled_forward(model, clip)
    logits = pooled @ head.weights + head.bias
    loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
    dlogits = (1.0 / (1.0 + np.exp(-logits)) - targets) / head.n_classes
    head_grads = {"weights": np.outer(pooled, dlogits), "bias": dlogits}
    dpooled = head.weights @ dlogits
    return loss, pooled_backward(model, ctx, dpooled), head_grads


def _finetune_step(model, head, loss_fn, step_size):
    loss, model_grads, head_grads = loss_fn()
    _apply_update(model.params, model_grads, step_size,
                  frozen_prefixes=CONV_PREFIXES)
    head.weights -= step_size * head_grads["weights"]
    head.bias -= step_size * head_grads["bias"]
    return loss


def finetune_classify_step(model: EncoderModel, head: FineTuneHead,
                           clip: AudioClip, label: int,
                           step_size: float) -> float:
    """One classification fine-tune step; conv parameters bit-identical
    before and after."""
    return _finetune_step(
        model, head, lambda: classify_loss(model, head, clip, label), step_size
    )


def finetune_detect_step(model: EncoderModel, head: FineTuneHead,
                         clip: AudioClip, targets: Sequence[float],
                         step_size: float) -> float:
    """One multi-label detection fine-tune step with the same freezing
    rule."""
    return _finetune_step(
        model, head, lambda: detect_loss(model, head, clip, targets), step_size
    )


def export_embeddings(model: EncoderModel, clips: Iterable[AudioClip],
                      layer: int):
    """Hidden representations flattened to (clip_id, frame, *vector) rows
    in deterministic clip-then-frame order."""
    if not 0 <= layer < model.config.n_layers:
        raise LayerOutOfRangeError(
            f"layer {layer} outside [0, {model.config.n_layers})"
        )
    rows = []
    for clip in clips:
        h = hidden_states(model, clip)[layer]
        for frame in range(h.shape[0]):
            rows.append((clip.source_id, frame, *h[frame]))
    return rows


# --- gradient checking ---

def grad_check(params_owner, loss_and_grad, eps: float = 1e-5,
               max_checks: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``params_owner`` is a parameter dict, an EncoderModel, or a
    FineTuneHead.  ``loss_and_grad`` re-evaluates the loss and analytic
    gradients at the current parameters; only parameters present in the
    returned gradient dict are checked.  When the total scalar count
    exceeds ``max_checks``, a seeded random subset of that size is
    probed.  Returns the maximum relative error
    |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    """
    if isinstance(params_owner, EncoderModel):
        params = params_owner.params
    elif isinstance(params_owner, FineTuneHead):
        params = {"weights": params_owner.weights, "bias": params_owner.bias}
    else:
        params = params_owner

    loss0, grads = loss_and_grad()
    if not math.isfinite(loss0):
        raise NonFiniteLossError(f"loss is {loss0}")

    coords = [
        (name, idx)
        for name in sorted(grads)
        for idx in range(params[name].size)
    ]
    if len(coords) > max_checks:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    max_rel = 0.0
    for name, idx in coords:
        flat = params[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + eps
        loss_plus = loss_and_grad()[0]
        flat[idx] = original - eps
        loss_minus = loss_and_grad()[0]
        flat[idx] = original
        if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
            raise NonFiniteLossError("perturbed loss is not finite")
        fd = (loss_plus - loss_minus) / (2.0 * eps)
        analytic = grads[name].reshape(-1)[idx]
        rel = abs(analytic - fd) / max(1e-8, abs(analytic) + abs(fd))
        max_rel = max(max_rel, rel)
    return max_rel
