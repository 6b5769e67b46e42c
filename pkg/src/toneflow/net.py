"""Toy diffusion-transformer velocity field with hand-written backprop.

The network maps standardized latent tokens (B, 64, 64) plus a time
coordinate and a label conditioning to a velocity of the same shape. Double
blocks process text and audio streams with separate projections but a joint
attention; single blocks run self-attention over the concatenated sequence
and are the only blocks whose K/V tensors can be recorded or replaced
through an AttentionTap. Conditioning and time enter through per-block
scale-and-shift modulation of normalized hidden states.

Shapes follow (B, T, D) = batch, tokens, model dim throughout. Parameters
live in a flat name -> array dict; every forward helper returns a cache
consumed by the matching backward helper. Gradients are exact reverse-mode
derivatives of the velocity-matching loss and are guarded by
``gradient_check``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CacheMissError

TIMBRE_CLASS_COUNT = 4
STYLE_CLASS_COUNT = 4
NULL_TOKEN = TIMBRE_CLASS_COUNT + STYLE_CLASS_COUNT  # one shared learned null slot
LN_EPS = 1e-6


@dataclass(frozen=True)
class NetConfig:
    model_dim: int = 64
    head_count: int = 4
    double_blocks: int = 2
    single_blocks: int = 4
    audio_tokens: int = 64
    text_tokens: int = 2
    vocab_size: int = NULL_TOKEN + 1
    channels: int = 64
    time_features: int = 32
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model_dim % self.head_count != 0:
            raise ValueError("model_dim must divide evenly into heads")
        if self.single_blocks < 1 or self.double_blocks < 1:
            raise ValueError("need at least one block of each kind")
        if self.time_features % 2 != 0:
            raise ValueError("time_features must be even")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.model_dim


@dataclass(frozen=True)
class Conditioning:
    """Label conditioning as embedding-table token ids.

    Slot 0 carries the timbre id (0..3), slot 1 the style id (4..7); the
    null conditioning uses the shared learned null token in both slots, so
    it is a constant learned embedding, identical across calls.
    """

    token_ids: np.ndarray
    is_null: bool = False

    def __post_init__(self) -> None:
        ids = np.asarray(self.token_ids, dtype=np.int64)
        object.__setattr__(self, "token_ids", ids)
        if ids.shape[-1] != 2:
            raise ValueError("conditioning uses exactly 2 token slots")

    @classmethod
    def for_labels(cls, timbre_idx, style_idx) -> "Conditioning":
        timbre = np.asarray(timbre_idx, dtype=np.int64)
        style = np.asarray(style_idx, dtype=np.int64)
        if np.any((timbre < 0) | (timbre >= TIMBRE_CLASS_COUNT)):
            raise ValueError("timbre index out of range")
        if np.any((style < 0) | (style >= STYLE_CLASS_COUNT)):
            raise ValueError("style index out of range")
        return cls(token_ids=np.stack([timbre, TIMBRE_CLASS_COUNT + style], axis=-1))

    @classmethod
    def null(cls, batch: Optional[int] = None) -> "Conditioning":
        ids = np.array([NULL_TOKEN, NULL_TOKEN], dtype=np.int64)
        if batch is not None:
            ids = np.tile(ids, (batch, 1))
        return cls(token_ids=ids, is_null=True)


@dataclass
class AttentionTap:
    """Observation/replacement hook for single-block self-attention.

    ``record`` stores copies of Q/K/V (and attention probabilities when
    ``record_probs`` is set) under (step_key, block) without touching the
    computation. ``replace`` substitutes K and/or V from ``cache`` according
    to ``strategy`` before attention; a missing slot is a hard error.
    """

    mode: str = "passthrough"
    strategy: str = "KV"
    blocks: tuple[int, ...] = ()
    step_key: object = None
    cache: dict = field(default_factory=dict)
    store: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)
    record_probs: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("passthrough", "record", "replace"):
            raise ValueError(f"unknown tap mode {self.mode!r}")
        if self.strategy not in ("V", "K", "KV"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def wants(self, block: int) -> bool:
        return self.mode != "passthrough" and block in self.blocks

    def lookup(self, block: int) -> dict:
        slot = self.cache.get((self.step_key, block))
        if slot is None:
            raise CacheMissError(f"no cached attention slot for step {self.step_key!r}, block {block}")
        return slot


# --- primitive layers (forward + backward pairs) ----------------------------


def _silu(x):
    # in-place chain; large fresh temporaries cost real time at these sizes
    sig = np.negative(x)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    return x * sig, sig


def _silu_backward(dy, x, sig):
    return dy * sig * (1.0 + x * (1.0 - sig))


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat, inv


def _layernorm_backward(dy, xhat, inv):
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return (dy - m1 - xhat * m2) * inv


def _linear(x, w, b):
    # one flat GEMM; numpy would otherwise run (B, T, D) @ (D, K) as B
    # separate small products
    if x.ndim == 2:
        return x @ w + b
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def _linear_backward(dy, x, w, grads, wname, bname):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    grads[wname] += flat_x.T @ flat_dy
    grads[bname] += flat_dy.sum(axis=0)
    return (flat_dy @ w.T).reshape(x.shape)


def time_features(t, count: int, batch: int) -> np.ndarray:
    """Sinusoidal features of t: (sin(pi k t), cos(pi k t)) for k = 1..count/2."""
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    k = np.arange(1, count // 2 + 1)
    angles = np.pi * tt[:, None] * k[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, head_count: int = 1) -> np.ndarray:
    """Multi-head scaled dot-product attention over (..., T, D) tensors.

    Heads are split from the last axis; softmax(Q K^T / sqrt(d_head)) V per
    head, concatenated back. Also usable standalone on single matrices.
    """
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[:-2] != v.shape[:-2] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] % head_count != 0 or q.shape[-1] // head_count == 0:
        raise ValueError("feature dimension must split into positive head dimensions")
    out, _ = _attention_forward(
        q[None] if q.ndim == 2 else q,
        k[None] if k.ndim == 2 else k,
        v[None] if v.ndim == 2 else v,
        head_count,
    )
    return out[0] if q.ndim == 2 else out


def _split_heads(x, heads):
    b, t, d = x.shape
    # contiguous copy: strided head views make the stacked matmuls crawl
    return np.ascontiguousarray(x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention_forward(q, k, v, heads):
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = qh @ kh.transpose(0, 1, 3, 2)
    scores *= scale
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    out = _merge_heads(scores @ vh)
    cache = {"qh": qh, "kh": kh, "vh": vh, "probs": scores, "scale": scale}
    return out, cache


def _attention_backward(dout, cache):
    qh, kh, vh, probs, scale = cache["qh"], cache["kh"], cache["vh"], cache["probs"], cache["scale"]
    heads = qh.shape[1]
    do = _split_heads(dout, heads)
    dv = probs.transpose(0, 1, 3, 2) @ do
    dprobs = do @ vh.transpose(0, 1, 3, 2)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = (dscores @ kh) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


# --- the network -------------------------------------------------------------


class VelocityNet:
    """Velocity field v(z, t, cond) with recordable single-block attention."""

    def __init__(self, config: NetConfig, params: Optional[dict] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    # complete parameter layout, in construction order
    @staticmethod
    def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
        d, f = cfg.model_dim, cfg.time_features
        m = cfg.mlp_dim
        shapes: dict[str, tuple[int, ...]] = {
            "audio_in.w": (cfg.channels, d),
            "audio_in.b": (d,),
            "audio_pos": (cfg.audio_tokens, d),
            "token_table": (cfg.vocab_size, d),
            "time_mlp.w1": (f, d),
            "time_mlp.b1": (d,),
            "time_mlp.w2": (d, d),
            "time_mlp.b2": (d,),
        }
        def block_shapes(prefix: str) -> None:
            shapes[f"{prefix}.mod1.w"] = (d, 2 * d)
            shapes[f"{prefix}.mod1.b"] = (2 * d,)
            shapes[f"{prefix}.qkv.w"] = (d, 3 * d)
            shapes[f"{prefix}.qkv.b"] = (3 * d,)
            shapes[f"{prefix}.proj.w"] = (d, d)
            shapes[f"{prefix}.proj.b"] = (d,)
            shapes[f"{prefix}.mod2.w"] = (d, 2 * d)
            shapes[f"{prefix}.mod2.b"] = (2 * d,)
            shapes[f"{prefix}.mlp.w1"] = (d, m)
            shapes[f"{prefix}.mlp.b1"] = (m,)
            shapes[f"{prefix}.mlp.w2"] = (m, d)
            shapes[f"{prefix}.mlp.b2"] = (d,)

        for i in range(cfg.double_blocks):
            block_shapes(f"dbl{i}.a")
            block_shapes(f"dbl{i}.x")
        for j in range(cfg.single_blocks):
            block_shapes(f"sgl{j}")
        shapes["out.mod.w"] = (d, 2 * d)
        shapes["out.mod.b"] = (2 * d,)
        shapes["head.w"] = (d, cfg.channels)
        shapes["head.b"] = (cfg.channels,)
        return shapes

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- conditioning helpers -------------------------------------------

    def make_conditioning(self, timbre_idx, style_idx) -> Conditioning:
        return Conditioning.for_labels(timbre_idx, style_idx)

    def null_conditioning(self, batch: Optional[int] = None) -> Conditioning:
        return Conditioning.null(batch)

    # --- forward ----------------------------------------------------------

    def forward(self, latent_tokens, t, cond: Optional[Conditioning] = None, tap: Optional[AttentionTap] = None):
        """Velocity prediction; accepts (Ta, C) or (B, Ta, C) token arrays."""
        out, _ = self._forward(latent_tokens, t, cond, tap, keep_cache=False)
        return out

    def velocity(self, z, t, cond: Optional[Conditioning] = None, tap: Optional[AttentionTap] = None):
        """Field-callable alias: velocity(z, t, cond) -> same shape as z."""
        return self.forward(z, t, cond, tap)

    def _forward(self, latent_tokens, t, cond, tap, keep_cache: bool):
        cfg = self.config
        p = self.params
        z = np.asarray(latent_tokens, dtype=np.float64)
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
        batch, ta, ch = z.shape
        if (ta, ch) != (cfg.audio_tokens, cfg.channels):
            raise ValueError(f"expected tokens {(cfg.audio_tokens, cfg.channels)}, got {(ta, ch)}")
        if cond is None:
            cond = Conditioning.null()
        ids = cond.token_ids
        if ids.ndim == 1:
            ids = np.broadcast_to(ids, (batch, 2))
        cache: dict = {"ids": ids, "squeeze": squeeze}

        # conditioning vector: time MLP plus coarse label embedding
        tfeat = time_features(t, cfg.time_features, batch)
        h1 = _linear(tfeat, p["time_mlp.w1"], p["time_mlp.b1"])
        a1, sig1 = _silu(h1)
        tvec = _linear(a1, p["time_mlp.w2"], p["time_mlp.b2"])
        text = p["token_table"][ids]  # (B, 2, D)
        coarse = text.mean(axis=1)
        c = tvec + coarse
        cache.update(tfeat=tfeat, h1=h1, sig1=sig1, a1=a1, text_in=text, c=c)

        a = _linear(z, p["audio_in.w"], p["audio_in.b"]) + p["audio_pos"][None]
        x = text
        cache.update(z_in=z)

        dbl_caches = []
        for i in range(cfg.double_blocks):
            a, x, bc = self._double_block_forward(f"dbl{i}", a, x, c)
            dbl_caches.append(bc)
        cache["dbl"] = dbl_caches

        u = np.concatenate([x, a], axis=1)
        sgl_caches = []
        for j in range(cfg.single_blocks):
            u, bc = self._single_block_forward(f"sgl{j}", j, u, c, tap)
            sgl_caches.append(bc)
        cache["sgl"] = sgl_caches

        audio = u[:, cfg.text_tokens :, :]
        normed, gmod, fc = self._modln_forward("out.mod", audio, c)
        cache["out_mod"] = fc
        out = _linear(normed, p["head.w"], p["head.b"])
        cache["head_in"] = normed
        if squeeze:
            return out[0], (cache if keep_cache else None)
        return out, (cache if keep_cache else None)

    def _modln_forward(self, prefix, x, c):
        p = self.params
        gb = _linear(c, p[f"{prefix}.w"], p[f"{prefix}.b"])
        d = x.shape[-1]
        gamma, beta = gb[:, :d], gb[:, d:]
        xhat, inv = _layernorm(x)
        y = xhat * (1.0 + gamma[:, None, :]) + beta[:, None, :]
        return y, gb, {"xhat": xhat, "inv": inv, "gamma": gamma, "c": c, "x_shape": x.shape}

    def _modln_backward(self, prefix, dy, fc, grads, dc):
        p = self.params
        xhat, inv, gamma = fc["xhat"], fc["inv"], fc["gamma"]
        dgamma = (dy * xhat).sum(axis=1)
        dbeta = dy.sum(axis=1)
        dxhat = dy * (1.0 + gamma[:, None, :])
        dx = _layernorm_backward(dxhat, xhat, inv)
        dgb = np.concatenate([dgamma, dbeta], axis=1)
        grads[f"{prefix}.w"] += fc["c"].T @ dgb
        grads[f"{prefix}.b"] += dgb.sum(axis=0)
        dc += dgb @ p[f"{prefix}.w"].T
        return dx

    def _mlp_forward(self, prefix, x):
        p = self.params
        h = _linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])
        act, sig = _silu(h)
        y = _linear(act, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
        return y, {"x": x, "h": h, "sig": sig, "act": act}

    def _mlp_backward(self, prefix, dy, fc, grads):
        p = self.params
        dact = _linear_backward(dy, fc["act"], p[f"{prefix}.w2"], grads, f"{prefix}.w2", f"{prefix}.b2")
        dh = _silu_backward(dact, fc["h"], fc["sig"])
        return _linear_backward(dh, fc["x"], p[f"{prefix}.w1"], grads, f"{prefix}.w1", f"{prefix}.b1")

    def _double_block_forward(self, prefix, a, x, c):
        cfg, p = self.config, self.params
        an, _, fca = self._modln_forward(f"{prefix}.a.mod1", a, c)
        xn, _, fcx = self._modln_forward(f"{prefix}.x.mod1", x, c)
        qkv_a = _linear(an, p[f"{prefix}.a.qkv.w"], p[f"{prefix}.a.qkv.b"])
        qkv_x = _linear(xn, p[f"{prefix}.x.qkv.w"], p[f"{prefix}.x.qkv.b"])
        d = cfg.model_dim
        q = np.concatenate([qkv_x[..., :d], qkv_a[..., :d]], axis=1)
        k = np.concatenate([qkv_x[..., d : 2 * d], qkv_a[..., d : 2 * d]], axis=1)
        v = np.concatenate([qkv_x[..., 2 * d :], qkv_a[..., 2 * d :]], axis=1)
        attn, ac = _attention_forward(q, k, v, cfg.head_count)
        tx = x.shape[1]
        ox, oa = attn[:, :tx], attn[:, tx:]
        a2 = a + _linear(oa, p[f"{prefix}.a.proj.w"], p[f"{prefix}.a.proj.b"])
        x2 = x + _linear(ox, p[f"{prefix}.x.proj.w"], p[f"{prefix}.x.proj.b"])
        an2, _, fca2 = self._modln_forward(f"{prefix}.a.mod2", a2, c)
        xn2, _, fcx2 = self._modln_forward(f"{prefix}.x.mod2", x2, c)
        am, fcam = self._mlp_forward(f"{prefix}.a.mlp", an2)
        xm, fcxm = self._mlp_forward(f"{prefix}.x.mlp", xn2)
        a3 = a2 + am
        x3 = x2 + xm
        bc = {
            "fca": fca, "fcx": fcx, "an": an, "xn": xn, "attn": ac, "tx": tx,
            "oa": oa, "ox": ox, "fca2": fca2, "fcx2": fcx2, "fcam": fcam, "fcxm": fcxm,
        }
        return a3, x3, bc

    def _double_block_backward(self, prefix, da3, dx3, bc, grads, dc):
        cfg, p = self.config, self.params
        dan2 = self._mlp_backward(f"{prefix}.a.mlp", da3, bc["fcam"], grads)
        dxn2 = self._mlp_backward(f"{prefix}.x.mlp", dx3, bc["fcxm"], grads)
        da2 = da3 + self._modln_backward(f"{prefix}.a.mod2", dan2, bc["fca2"], grads, dc)
        dx2 = dx3 + self._modln_backward(f"{prefix}.x.mod2", dxn2, bc["fcx2"], grads, dc)
        doa = _linear_backward(da2, bc["oa"], p[f"{prefix}.a.proj.w"], grads, f"{prefix}.a.proj.w", f"{prefix}.a.proj.b")
        dox = _linear_backward(dx2, bc["ox"], p[f"{prefix}.x.proj.w"], grads, f"{prefix}.x.proj.w", f"{prefix}.x.proj.b")
        dattn = np.concatenate([dox, doa], axis=1)
        dq, dk, dv = _attention_backward(dattn, bc["attn"])
        tx, d = bc["tx"], cfg.model_dim
        dqkv_x = np.concatenate([dq[:, :tx], dk[:, :tx], dv[:, :tx]], axis=-1)
        dqkv_a = np.concatenate([dq[:, tx:], dk[:, tx:], dv[:, tx:]], axis=-1)
        dan = _linear_backward(dqkv_a, bc["an"], p[f"{prefix}.a.qkv.w"], grads, f"{prefix}.a.qkv.w", f"{prefix}.a.qkv.b")
        dxn = _linear_backward(dqkv_x, bc["xn"], p[f"{prefix}.x.qkv.w"], grads, f"{prefix}.x.qkv.w", f"{prefix}.x.qkv.b")
        da = da2 + self._modln_backward(f"{prefix}.a.mod1", dan, bc["fca"], grads, dc)
        dx = dx2 + self._modln_backward(f"{prefix}.x.mod1", dxn, bc["fcx"], grads, dc)
        return da, dx

    def _single_block_forward(self, prefix, block_index, u, c, tap: Optional[AttentionTap]):
        cfg, p = self.config, self.params
        un, _, fc1 = self._modln_forward(f"{prefix}.mod1", u, c)
        qkv = _linear(un, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
        d = cfg.model_dim
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        if tap is not None and tap.wants(block_index):
            if tap.mode == "record":
                tap.store[(tap.step_key, block_index)] = {"q": q.copy(), "k": k.copy(), "v": v.copy()}
            elif tap.mode == "replace":
                # only the audio token rows are substituted: the text rows
                # carry the live conditioning, which replacement must not
                # overwrite with the cached source labels
                slot = tap.lookup(block_index)
                tx = cfg.text_tokens
                if "K" in tap.strategy:
                    cached = self._check_replacement(slot["k"], k, block_index)
                    k = np.concatenate([k[:, :tx], cached[:, tx:]], axis=1)
                if "V" in tap.strategy:
                    cached = self._check_replacement(slot["v"], v, block_index)
                    v = np.concatenate([v[:, :tx], cached[:, tx:]], axis=1)
        attn, ac = _attention_forward(q, k, v, cfg.head_count)
        if tap is not None and tap.record_probs and (tap.mode == "passthrough" or tap.wants(block_index)):
            tap.probs[(tap.step_key, block_index)] = ac["probs"].copy()
        u2 = u + _linear(attn, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
        un2, _, fc2 = self._modln_forward(f"{prefix}.mod2", u2, c)
        mlp_out, fcm = self._mlp_forward(f"{prefix}.mlp", un2)
        u3 = u2 + mlp_out
        return u3, {"fc1": fc1, "un": un, "attn": ac, "attn_out": attn, "fc2": fc2, "fcm": fcm}

    @staticmethod
    def _check_replacement(cached, current, block_index):
        cached = np.asarray(cached, dtype=np.float64)
        if cached.shape != current.shape:
            raise CacheMissError(
                f"cached tensor shape {cached.shape} does not match live shape {current.shape} at block {block_index}"
            )
        return cached

    def _single_block_backward(self, prefix, du3, bc, grads, dc):
        p = self.params
        dun2 = self._mlp_backward(f"{prefix}.mlp", du3, bc["fcm"], grads)
        du2 = du3 + self._modln_backward(f"{prefix}.mod2", dun2, bc["fc2"], grads, dc)
        dattn = _linear_backward(du2, bc["attn_out"], p[f"{prefix}.proj.w"], grads, f"{prefix}.proj.w", f"{prefix}.proj.b")
        dq, dk, dv = _attention_backward(dattn, bc["attn"])
        dqkv = np.concatenate([dq, dk, dv], axis=-1)
        dun = _linear_backward(dqkv, bc["un"], p[f"{prefix}.qkv.w"], grads, f"{prefix}.qkv.w", f"{prefix}.qkv.b")
        du = du2 + self._modln_backward(f"{prefix}.mod1", dun, bc["fc1"], grads, dc)
        return du

    # --- loss and gradients ------------------------------------------------

    @staticmethod
    def _matching_batch(z0, z1, t):
        z0 = np.asarray(z0, dtype=np.float64)
        z1 = np.asarray(z1, dtype=np.float64)
        if z0.ndim == 2:
            z0, z1 = z0[None], z1[None]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (z0.shape[0],))
        zt = (1.0 - tt)[:, None, None] * z0 + tt[:, None, None] * z1
        return zt, tt, z1 - z0

    def loss(self, z0, z1, t, cond: Conditioning, loss_scale: float = 1.0) -> float:
        """Velocity-matching loss only (no gradients); per-element MSE."""
        zt, tt, target = self._matching_batch(z0, z1, t)
        pred, _ = self._forward(zt, tt, cond, None, keep_cache=False)
        diff = pred - target
        return loss_scale * float(np.mean(diff * diff))

    def loss_and_grads(self, z0, z1, t, cond: Conditioning, loss_scale: float = 1.0):
        """Velocity-matching loss (per-element MSE) and exact parameter grads.

        The target velocity is the canonical straight-path derivative
        z1 - z0; t may be a scalar or one value per batch item.
        """
        zt, tt, target = self._matching_batch(z0, z1, t)
        pred, cache = self._forward(zt, tt, cond, None, keep_cache=True)
        diff = pred - target
        loss = loss_scale * float(np.mean(diff * diff))
        dout = loss_scale * 2.0 * diff / diff.size

        grads = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        self._backward(dout, cache, grads)
        return loss, grads

    def _backward(self, dout, cache, grads):
        cfg, p = self.config, self.params
        batch = dout.shape[0]
        dc = np.zeros((batch, cfg.model_dim))

        dnormed = _linear_backward(dout, cache["head_in"], p["head.w"], grads, "head.w", "head.b")
        daudio = self._modln_backward("out.mod", dnormed, cache["out_mod"], grads, dc)

        du = np.concatenate([np.zeros((batch, cfg.text_tokens, cfg.model_dim)), daudio], axis=1)
        for j in reversed(range(cfg.single_blocks)):
            du = self._single_block_backward(f"sgl{j}", du, cache["sgl"][j], grads, dc)
        dx = du[:, : cfg.text_tokens]
        da = du[:, cfg.text_tokens :]
        for i in reversed(range(cfg.double_blocks)):
            da, dx = self._double_block_backward(f"dbl{i}", da, dx, cache["dbl"][i], grads, dc)

        # audio input path (positional embedding and input projection)
        grads["audio_pos"] += da.sum(axis=0)
        _linear_backward(da, cache["z_in"], p["audio_in.w"], grads, "audio_in.w", "audio_in.b")

        # conditioning vector: time MLP branch plus coarse text mean
        da1 = _linear_backward(dc, cache["a1"], p["time_mlp.w2"], grads, "time_mlp.w2", "time_mlp.b2")
        dh1 = _silu_backward(da1, cache["h1"], cache["sig1"])
        _linear_backward(dh1, cache["tfeat"], p["time_mlp.w1"], grads, "time_mlp.w1", "time_mlp.b1")
        dtext = dx + dc[:, None, :] / self.config.text_tokens
        np.add.at(grads["token_table"], cache["ids"].reshape(-1), dtext.reshape(-1, cfg.model_dim))

    # --- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "VelocityNet":
        return load_checkpoint(path)


def init_params(cfg: NetConfig) -> dict[str, np.ndarray]:
    """Deterministic initialization; the output head starts at exactly zero.

    Modulation projections also start at zero, so the initial velocity field
    is the zero field and conditioning influence is learned from scratch.
    """
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in VelocityNet.param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape)
        elif name.startswith("head.") or ".mod" in name:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def gradient_check(
    net: VelocityNet,
    batch_size: int = 2,
    coords: int = 120,
    eps: float = 1e-5,
    seed: int = 0,
    denom_floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``coords`` randomly chosen parameter coordinates on a random
    velocity-matching batch. The relative error uses
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor); the floor
    marks the magnitude below which a central difference at this eps is pure
    float64 roundoff (loss is O(1), so the difference quotient carries an
    absolute noise floor near 1e-11).
    """
    rng = np.random.default_rng(seed)
    cfg = net.config
    z0 = rng.normal(size=(batch_size, cfg.audio_tokens, cfg.channels))
    z1 = rng.normal(size=(batch_size, cfg.audio_tokens, cfg.channels))
    t = rng.uniform(size=batch_size)
    cond = Conditioning.for_labels(
        rng.integers(0, TIMBRE_CLASS_COUNT, size=batch_size),
        rng.integers(0, STYLE_CLASS_COUNT, size=batch_size),
    )

    _, grads = net.loss_and_grads(z0, z1, t, cond)
    names = sorted(net.params)
    sizes = np.array([net.params[n].size for n in names])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat_index in rng.choice(total, size=min(coords, total), replace=False):
        slot = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name = names[slot]
        local = int(flat_index - offsets[slot])
        index = np.unravel_index(local, net.params[name].shape)

        original = net.params[name][index]
        net.params[name][index] = original + eps
        up = net.loss(z0, z1, t, cond)
        net.params[name][index] = original - eps
        down = net.loss(z0, z1, t, cond)
        net.params[name][index] = original

        numeric = (up - down) / (2.0 * eps)
        analytic = grads[name][index]
        denom = max(abs(numeric), abs(analytic), denom_floor)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# --- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: VelocityNet) -> None:
    """Versioned little-endian container: config header, named float64
    parameter blocks, trailing CRC32 of everything before it."""
    cfg_json = json.dumps(net.config.__dict__, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, 0)]
    chunks.append(struct.pack("<I", len(cfg_json)))
    chunks.append(cfg_json)
    chunks.append(struct.pack("<I", len(net.params)))
    for name in sorted(net.params):
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        name_bytes = name.encode()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<H", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_checkpoint(path) -> VelocityNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: checksum mismatch, file corrupted")
    version, _ = struct.unpack_from("<HH", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    cfg = NetConfig(**json.loads(blob[offset : offset + cfg_len].decode()))
    offset += cfg_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset += 8 * size
    expected = VelocityNet.param_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError(f"{path}: parameter names do not match the config")
    return VelocityNet(cfg, params)
