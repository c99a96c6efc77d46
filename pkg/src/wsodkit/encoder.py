"""Tiny transformer encoder over proposal feature vectors.

Learned position embeddings are added to the input features (row i of the
embedding table attaches to proposal i in bag order), then a stack of
pre-norm blocks runs multi-head self-attention and a GELU feed-forward, each
with a residual connection. There is no class token and no final norm:
aggregation over proposals happens downstream in the MIL head.

Everything is float64 numpy with hand-derived backward passes; the forward
returns a cache that the backward consumes. The GELU is the tanh
approximation, which is smooth everywhere and therefore safe to validate
with central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the encoder stack (desk-scale defaults)."""

    feature_dim: int = 32
    heads: int = 4
    layers: int = 2
    n_max: int = 64
    ffn_ratio: float = 2.0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers!r}")
        if self.feature_dim < 1 or self.n_max < 1 or self.heads < 1:
            raise ValueError("feature_dim, heads and n_max must be >= 1")
        if self.feature_dim % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide feature_dim ({self.feature_dim})"
            )
        if self.ffn_dim < 1:
            raise ValueError(f"ffn_ratio {self.ffn_ratio!r} gives an empty hidden layer")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return int(round(self.feature_dim * self.ffn_ratio))


def init_encoder_params(
    cfg: EncoderConfig, rng: np.random.Generator, proj_std: float = 0.05
) -> dict[str, np.ndarray]:
    """Fresh parameter dict; keys are namespaced under "enc."."""
    d, f = cfg.feature_dim, cfg.ffn_dim
    params: dict[str, np.ndarray] = {
        "enc.pos": rng.normal(0.0, 0.01, size=(cfg.n_max, d))
    }
    for l in range(cfg.layers):
        p = f"enc.{l}."
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = rng.normal(0.0, proj_std, size=(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + name] = np.zeros(d)
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "ffn.w1"] = rng.normal(0.0, proj_std, size=(d, f))
        params[p + "ffn.b1"] = np.zeros(f)
        params[p + "ffn.w2"] = rng.normal(0.0, proj_std, size=(f, d))
        params[p + "ffn.b2"] = np.zeros(d)
    return params


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy, xhat, inv, g):
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(u: np.ndarray):
    inner = _GELU_C * (u + _GELU_A * u**3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def encoder_forward(
    features: np.ndarray, params: dict[str, np.ndarray], cfg: EncoderConfig
) -> tuple[np.ndarray, dict]:
    """Run the stack; returns (output N x D, cache for the backward pass)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ValueError(
            f"features must be (N, {cfg.feature_dim}), got {x.shape}"
        )
    n = x.shape[0]
    if n < 1 or n > cfg.n_max:
        raise ValueError(f"proposal count {n} outside [1, n_max={cfg.n_max}]")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")

    scale = 1.0 / np.sqrt(cfg.head_dim)
    x = x + params["enc.pos"][:n]
    layers = []
    for l in range(cfg.layers):
        p = f"enc.{l}."
        x_in = x
        h, xhat1, inv1 = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(h @ params[p + "attn.wq"] + params[p + "attn.bq"], cfg.heads)
        k = _split_heads(h @ params[p + "attn.wk"] + params[p + "attn.bk"], cfg.heads)
        v = _split_heads(h @ params[p + "attn.wv"] + params[p + "attn.bv"], cfg.heads)
        logits = np.matmul(q, k.transpose(0, 2, 1)) * scale
        logits -= logits.max(axis=2, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=2, keepdims=True)
        out_h = np.matmul(attn, v)
        o = _merge_heads(out_h)
        x = x_in + (o @ params[p + "attn.wo"] + params[p + "attn.bo"])

        x_mid = x
        h2, xhat2, inv2 = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        a, t = _gelu(u)
        x = x_mid + (a @ params[p + "ffn.w2"] + params[p + "ffn.b2"])

        layers.append(
            dict(h=h, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, attn=attn, o=o,
                 h2=h2, xhat2=xhat2, inv2=inv2, u=u, a=a, t=t)
        )
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("encoder produced non-finite values (numeric blow-up)")
    return x, {"n": n, "layers": layers, "scale": scale}


def encode(
    features: np.ndarray, params: dict[str, np.ndarray], cfg: EncoderConfig
) -> np.ndarray:
    """Forward pass only; same shape out as in."""
    out, _ = encoder_forward(features, params, cfg)
    return out


def encoder_backward(
    upstream: np.ndarray,
    cache: dict,
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of (upstream . output) w.r.t. input features and parameters."""
    n = cache["n"]
    scale = cache["scale"]
    dx = np.asarray(upstream, dtype=np.float64)
    if dx.shape != (n, cfg.feature_dim):
        raise ValueError(f"upstream must be ({n}, {cfg.feature_dim}), got {dx.shape}")
    grads: dict[str, np.ndarray] = {}

    for l in range(cfg.layers - 1, -1, -1):
        p = f"enc.{l}."
        c = cache["layers"][l]

        # feed-forward branch: x = x_mid + gelu(LN(x_mid) w1 + b1) w2 + b2
        da = dx @ params[p + "ffn.w2"].T
        grads[p + "ffn.w2"] = c["a"].T @ dx
        grads[p + "ffn.b2"] = dx.sum(axis=0)
        du = _gelu_backward(da, c["u"], c["t"])
        dh2 = du @ params[p + "ffn.w1"].T
        grads[p + "ffn.w1"] = c["h2"].T @ du
        grads[p + "ffn.b1"] = du.sum(axis=0)
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, c["xhat2"], c["inv2"], params[p + "ln2.g"])
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dx = dx + dx_mid

        # attention branch: x_mid = x_in + (heads(LN(x_in)) merged) wo + bo
        do = dx @ params[p + "attn.wo"].T
        grads[p + "attn.wo"] = c["o"].T @ dx
        grads[p + "attn.bo"] = dx.sum(axis=0)
        do_h = _split_heads(do, cfg.heads)
        dattn = np.matmul(do_h, c["v"].transpose(0, 2, 1))
        dv = np.matmul(c["attn"].transpose(0, 2, 1), do_h)
        tmp = (dattn * c["attn"]).sum(axis=2, keepdims=True)
        dlogits = c["attn"] * (dattn - tmp)
        dq = np.matmul(dlogits, c["k"]) * scale
        dk = np.matmul(dlogits.transpose(0, 2, 1), c["q"]) * scale

        dh = np.zeros_like(c["h"])
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            flat = _merge_heads(dmat)
            grads[p + "attn." + name] = c["h"].T @ flat
            grads[p + "attn.b" + name[1]] = flat.sum(axis=0)
            dh += flat @ params[p + "attn." + name].T
        dx_in, dg1, db1 = _layer_norm_backward(dh, c["xhat1"], c["inv1"], params[p + "ln1.g"])
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dx = dx + dx_in

    dpos = np.zeros_like(params["enc.pos"])
    dpos[:n] = dx
    grads["enc.pos"] = dpos
    return dx, grads


def attention_maps(cache: dict) -> list[np.ndarray]:
    """Per-layer attention tensors (heads, N, N) from a forward cache."""
    return [c["attn"] for c in cache["layers"]]
