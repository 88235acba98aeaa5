"""Desk-scale ViT encoder with hand-written forward and backward passes.

Every GEMM input is fake-quantized: weights row-wise with their precision
tags, activations per sample with a dynamic symmetric scale. The two
activation-by-activation products inside attention run on integer codes.
Layer norm, softmax and GELU stay in floating point. Each residual branch is
scaled channel-wise by its SLS vector before being added back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .quant import fake_quantize, leading_tags, round_half_away

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class QuantMode:
    weights: bool = True
    acts: bool = True
    act_bits: int = 6

    @classmethod
    def off(cls) -> "QuantMode":
        return cls(False, False)


@dataclass
class Linear:
    weight: np.ndarray  # (out, in); may alias supernet storage
    bits: np.ndarray  # per-row 4 or 8


@dataclass
class Block:
    q: Linear
    k: Linear
    v: Linear
    proj: Linear
    mlp1: Linear
    mlp2: Linear
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    sls_msa: np.ndarray
    sls_mlp: np.ndarray


@dataclass
class ViTParams:
    embed: Linear
    blocks: list[Block]
    head: Linear
    head_b: np.ndarray
    head_dim: int

    def named(self) -> dict[str, np.ndarray]:
        """Every trainable array keyed by a dotted name (views, not copies)."""
        out = {"embed.weight": self.embed.weight}
        for i, b in enumerate(self.blocks):
            for nm in ("q", "k", "v", "proj", "mlp1", "mlp2"):
                out[f"blocks.{i}.{nm}.weight"] = getattr(b, nm).weight
            for nm in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "sls_msa", "sls_mlp"):
                out[f"blocks.{i}.{nm}"] = getattr(b, nm)
        out["head.weight"] = self.head.weight
        out["head.b"] = self.head_b
        return out

    def linears(self) -> Iterator[tuple[str, Linear]]:
        yield "embed", self.embed
        for i, b in enumerate(self.blocks):
            for nm in ("q", "k", "v", "proj", "mlp1", "mlp2"):
                yield f"blocks.{i}.{nm}", getattr(b, nm)
        yield "head", self.head


@dataclass
class ToyModelConfig:
    embed_dim: int = 16
    depth: int = 2
    head_dim: int = 8
    hidden_dims: tuple[int, ...] = (16, 16)
    expansion_ratios: tuple[float, ...] = (2.0, 2.0)
    mixed_ratios: tuple[float, ...] = (0.5, 0.5)
    token_dim: int = 16
    num_classes: int = 4
    act_bits: int = 6
    sls_init: float = 0.5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        for name in ("hidden_dims", "expansion_ratios", "mixed_ratios"):
            if len(getattr(self, name)) != self.depth:
                raise ValueError(f"{name} needs one entry per layer")
        for h in self.hidden_dims:
            if h % self.head_dim:
                raise ValueError(f"hidden dim {h} not divisible by head_dim {self.head_dim}")


def _init_linear(rng, out_dim, in_dim, ratio) -> Linear:
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
    return Linear(w, leading_tags(out_dim, ratio))


def init_params(cfg: ToyModelConfig, seed) -> ViTParams:
    rng = np.random.default_rng(seed)
    e = cfg.embed_dim
    blocks = []
    for i in range(cfg.depth):
        h, rho = cfg.hidden_dims[i], cfg.mixed_ratios[i]
        m = int(round(e * cfg.expansion_ratios[i]))
        blocks.append(Block(
            q=_init_linear(rng, h, e, rho), k=_init_linear(rng, h, e, rho), v=_init_linear(rng, h, e, rho),
            proj=_init_linear(rng, e, h, rho), mlp1=_init_linear(rng, m, e, rho),
            mlp2=_init_linear(rng, e, m, rho),
            ln1_g=np.ones(e), ln1_b=np.zeros(e), ln2_g=np.ones(e), ln2_b=np.zeros(e),
            sls_msa=np.full(e, cfg.sls_init), sls_mlp=np.full(e, cfg.sls_init),
        ))
    return ViTParams(
        embed=_init_linear(rng, e, cfg.token_dim, 1.0),
        blocks=blocks,
        head=_init_linear(rng, cfg.num_classes, e, 1.0),
        head_b=np.zeros(cfg.num_classes),
        head_dim=cfg.head_dim,
    )


# -- primitive layers -------------------------------------------------------

def _act_codes(x: np.ndarray, bits: int, sample_axes: int = 1):
    """Symmetric dynamic quantization with one scale per leading index."""
    qmax = (1 << (bits - 1)) - 1
    red = tuple(range(sample_axes, x.ndim))
    amax = np.max(np.abs(x), axis=red, keepdims=True)
    safe = np.where(amax > 0, amax, 1.0)
    codes = np.clip(round_half_away(x * qmax / safe), -qmax - 1, qmax)
    scale = np.where(amax > 0, amax / qmax, 1.0)
    return codes, scale


def fq_act(x: np.ndarray, qm: QuantMode) -> np.ndarray:
    if not qm.acts:
        return x
    codes, scale = _act_codes(x, qm.act_bits)
    return codes * scale


def linear_fwd(x, lin: Linear, qm: QuantMode):
    xq = fq_act(x, qm)
    if qm.weights:
        wq, mask = fake_quantize(lin.weight, lin.bits)
    else:
        wq, mask = lin.weight, None
    return xq @ wq.T, (xq, wq, mask)


def linear_bwd(cache, dy):
    xq, wq, mask = cache
    dx = dy @ wq
    dw = dy.reshape(-1, dy.shape[-1]).T @ xq.reshape(-1, xq.shape[-1])
    if mask is not None:
        dw = dw * mask
    return dx, dw


def ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def ln_bwd(cache, dy):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(cache, dy):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def act_matmul(a, b, qm: QuantMode):
    """``a @ b`` over the last two axes with both operands quantized per (sample, head)."""
    if not qm.acts:
        return a @ b, (a, b)
    ca, sa = _act_codes(a, qm.act_bits, sample_axes=2)
    cb, sb = _act_codes(b, qm.act_bits, sample_axes=2)
    prod = np.matmul(ca.astype(np.int64), cb.astype(np.int64))
    return prod * (sa * sb), (ca * sa, cb * sb)


def act_matmul_bwd(cache, dy):
    a, b = cache
    return dy @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dy


# -- model ------------------------------------------------------------------

def _split_heads(x, dh):
    bsz, f, h = x.shape
    return x.reshape(bsz, f, h // dh, dh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    bsz, nh, f, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(bsz, f, nh * dh)


def _block_fwd(x, blk: Block, dh: int, qm: QuantMode):
    c = {}
    a, c["ln1"] = ln_fwd(x, blk.ln1_g, blk.ln1_b)
    q, c["q"] = linear_fwd(a, blk.q, qm)
    k, c["k"] = linear_fwd(a, blk.k, qm)
    v, c["v"] = linear_fwd(a, blk.v, qm)
    qh, kh, vh = _split_heads(q, dh), _split_heads(k, dh), _split_heads(v, dh)
    s, c["score"] = act_matmul(qh, np.swapaxes(kh, -1, -2), qm)
    p = softmax(s / np.sqrt(dh))
    c["p"] = p
    o, c["ctx"] = act_matmul(p, vh, qm)
    y, c["proj"] = linear_fwd(_merge_heads(o), blk.proj, qm)
    c["y"] = y
    x = x + blk.sls_msa * y
    a2, c["ln2"] = ln_fwd(x, blk.ln2_g, blk.ln2_b)
    u, c["mlp1"] = linear_fwd(a2, blk.mlp1, qm)
    g, c["gelu"] = gelu_fwd(u)
    z, c["mlp2"] = linear_fwd(g, blk.mlp2, qm)
    c["z"] = z
    x = x + blk.sls_mlp * z
    return x, c


def _block_bwd(c, dx, blk: Block, dh: int, prefix: str, grads: dict):
    grads[prefix + "sls_mlp"] = (dx * c["z"]).reshape(-1, dx.shape[-1]).sum(0)
    dz = dx * blk.sls_mlp
    dg, grads[prefix + "mlp2.weight"] = linear_bwd(c["mlp2"], dz)
    du = gelu_bwd(c["gelu"], dg)
    da2, grads[prefix + "mlp1.weight"] = linear_bwd(c["mlp1"], du)
    dres, grads[prefix + "ln2_g"], grads[prefix + "ln2_b"] = ln_bwd(c["ln2"], da2)
    dx = dx + dres

    grads[prefix + "sls_msa"] = (dx * c["y"]).reshape(-1, dx.shape[-1]).sum(0)
    dy = dx * blk.sls_msa
    do, grads[prefix + "proj.weight"] = linear_bwd(c["proj"], dy)
    do = _split_heads(do, dh)
    dp, dvh = act_matmul_bwd(c["ctx"], do)
    p = c["p"]
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) / np.sqrt(dh)
    dqh, dkt = act_matmul_bwd(c["score"], ds)
    dkh = np.swapaxes(dkt, -1, -2)
    da = 0.0
    for nm, dh_ in (("q", dqh), ("k", dkh), ("v", dvh)):
        d_in, grads[prefix + nm + ".weight"] = linear_bwd(c[nm], _merge_heads(dh_))
        da = da + d_in
    dres, grads[prefix + "ln1_g"], grads[prefix + "ln1_b"] = ln_bwd(c["ln1"], da)
    return dx + dres


def encode(params: ViTParams, x: np.ndarray, qm: QuantMode):
    """Embedding plus encoder blocks; returns token features and caches."""
    h, emb = linear_fwd(x, params.embed, qm)
    caches = []
    for blk in params.blocks:
        h, c = _block_fwd(h, blk, params.head_dim, qm)
        caches.append(c)
    return h, (emb, caches)


def forward(params: ViTParams, x: np.ndarray, qm: QuantMode = QuantMode()):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != params.embed.weight.shape[1]:
        raise ValueError(f"expected tokens shaped (B, F, {params.embed.weight.shape[1]}), got {x.shape}")
    h, (emb, caches) = encode(params, x, qm)
    pooled = h.mean(axis=1)
    logits, head = linear_fwd(pooled, params.head, qm)
    logits = logits + params.head_b
    return logits, {"emb": emb, "blocks": caches, "head": head, "tokens": h.shape[1], "qm": qm}


def backward(params: ViTParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    grads["head.b"] = dlogits.sum(0)
    dpooled, grads["head.weight"] = linear_bwd(cache["head"], dlogits)
    dh = np.repeat(dpooled[:, None, :], cache["tokens"], axis=1) / cache["tokens"]
    for i in reversed(range(len(params.blocks))):
        dh = _block_bwd(cache["blocks"][i], dh, params.blocks[i], params.head_dim, f"blocks.{i}.", grads)
    _, grads["embed.weight"] = linear_bwd(cache["emb"], dh)
    return grads


# -- loss -------------------------------------------------------------------

@dataclass
class KdConfig:
    alpha: float = 0.0
    tau: float = 1.0
    teacher_logits: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def kd_loss(student_logits, labels, kd: KdConfig, teacher_logits=None):
    """Soft distillation loss (batch mean) and its gradient w.r.t. the student logits.

    ``(1 - alpha) * CE(softmax(z_s), y) + alpha * tau^2 * KL(p_t || p_s)`` with
    both distributions softened by ``tau``.
    """
    zs = np.asarray(student_logits, dtype=np.float64)
    bsz = zs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(zs)):
        raise ValueError("non-finite student logits")
    zt = kd.teacher_logits if teacher_logits is None else teacher_logits
    if kd.alpha > 0 and zt is None:
        raise ValueError("alpha > 0 needs teacher logits")
    logp = _log_softmax(zs)
    ce = -logp[np.arange(bsz), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(bsz), labels] -= 1.0
    grad *= (1.0 - kd.alpha) / bsz
    loss = (1.0 - kd.alpha) * ce
    if kd.alpha > 0:
        tau = kd.tau
        log_ps = _log_softmax(zs / tau)
        log_pt = _log_softmax(np.asarray(zt, dtype=np.float64) / tau)
        pt = np.exp(log_pt)
        kl = (pt * (log_pt - log_ps)).sum(-1).mean()
        loss += kd.alpha * tau * tau * kl
        grad += kd.alpha * tau * (np.exp(log_ps) - pt) / bsz
    return float(loss), grad


def kl_term(student_logits, teacher_logits, tau: float = 1.0) -> float:
    log_ps = _log_softmax(np.asarray(student_logits, dtype=np.float64) / tau)
    log_pt = _log_softmax(np.asarray(teacher_logits, dtype=np.float64) / tau)
    return float((np.exp(log_pt) * (log_pt - log_ps)).sum(-1).mean())


def predict(params: ViTParams, x: np.ndarray, qm: QuantMode = QuantMode(), batch: int = 256) -> np.ndarray:
    out = [forward(params, x[i:i + batch], qm)[0] for i in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


def evaluate(params: ViTParams, x: np.ndarray, y: np.ndarray, qm: QuantMode = QuantMode()) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.mean(predict(params, x, qm).argmax(-1) == y))
