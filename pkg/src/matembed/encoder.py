"""Material and part encoders with hand-written backward passes.

The material encoder maps a ``(V, D_in)`` view-feature sequence to a unit
embedding: linear input projection, a learned CLS token, learned positional
embeddings, ``n_blocks`` pre-norm transformer blocks (multi-head self-attention
and a GELU MLP), then a linear projection of the CLS output. The part encoder is
a two-layer GELU MLP. Parameters live in a flat ``dict`` of numpy arrays whose
dtype sets the arithmetic precision (float32 for training, float64 for gradient
checks).
"""
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, NonFiniteActivation, VersionMismatch
from .loss import MAX_LOGIT_SCALE, info_nce_and_grads

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 32
    d_model: int = 64
    d_emb: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    n_views: int = 42
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("d_in", "d_model", "d_emb", "n_heads", "n_views", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def d_hidden(self):
        return self.mlp_ratio * self.d_model


def param_shapes(config):
    """Ordered ``name -> shape`` listing of every learnable tensor."""
    d, dh = config.d_model, config.d_hidden
    shapes = {
        "mat.in.w": (config.d_in, d),
        "mat.in.b": (d,),
        "mat.cls": (d,),
        "mat.pos": (config.n_views + 1, d),
    }
    for i in range(config.n_blocks):
        p = f"mat.block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, dh), p + "mlp.b1": (dh,),
            p + "mlp.w2": (dh, d), p + "mlp.b2": (d,),
        })
    shapes.update({
        "mat.out.w": (d, config.d_emb),
        "mat.out.b": (config.d_emb,),
        "part.w1": (config.d_in, d),
        "part.b1": (d,),
        "part.w2": (d, config.d_emb),
        "part.b2": (config.d_emb,),
        "logit_scale": (),
    })
    return shapes


def _fan_in(name, shape, config):
    if len(shape) == 2 and name != "mat.pos":
        return shape[0]
    # biases take the fan-in of their weight matrix
    if name in ("mat.in.b", "part.b1"):
        return config.d_in
    if name.endswith("mlp.b2"):
        return config.d_hidden
    return config.d_model


def init_params(config, seed):
    """Deterministic init: uniform(+-1/sqrt(fan_in)), unit LayerNorm gains,
    zero LayerNorm biases, and a logit scale of ln(1/0.07)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "logit_scale":
            params[name] = np.asarray(math.log(1.0 / 0.07), dtype=np.float32)
        elif ".ln" in name:
            fill = 1.0 if name.endswith(".g") else 0.0
            params[name] = np.full(shape, fill, dtype=np.float32)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def config_from_params(params, n_heads, mlp_ratio=None):
    d_in, d_model = params["mat.in.w"].shape
    n_blocks = sum(1 for k in params if k.endswith(".ln1.g"))
    if mlp_ratio is None:
        mlp_ratio = params["mat.block0.mlp.w1"].shape[1] // d_model if n_blocks else 4
    return EncoderConfig(
        d_in=d_in, d_model=d_model, d_emb=params["mat.out.w"].shape[1], n_heads=n_heads,
        n_blocks=n_blocks, n_views=params["mat.pos"].shape[0] - 1, mlp_ratio=mlp_ratio,
    )


def cast_params(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# --- elementwise pieces -----------------------------------------------------

def _gelu(u):
    inner = _GELU_C * (u + 0.044715 * (u * u * u))
    th = np.tanh(inner)
    return 0.5 * u * (1.0 + th), th


def _gelu_grad(u, th):
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * (u * u))
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * d_inner


def _layer_norm(x, g, b):
    inv_d = 1.0 / x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * inv_d + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    inv_d = 1.0 / dy.shape[-1]
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * inv_d
                - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def _unit(e):
    norm = np.sqrt((e * e).sum(axis=-1, keepdims=True))
    return e / np.maximum(norm, _NORM_EPS), norm


def _unit_back(dy, y, norm):
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / np.maximum(norm, _NORM_EPS)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivation(f"non-finite activation in {where}")


# --- material encoder --------------------------------------------------------

def _material_forward(params, views, n_heads):
    """Batched forward over ``views`` of shape ``(B, V, D_in)``; returns output and cache."""
    dtype = params["mat.in.w"].dtype
    x_in = np.asarray(views, dtype=dtype)
    if x_in.ndim != 3 or x_in.shape[2] != params["mat.in.w"].shape[0]:
        raise DimensionMismatch(
            f"view features must be (B, V, {params['mat.in.w'].shape[0]}), got {x_in.shape}")
    bsz, n_views, _ = x_in.shape
    if n_views + 1 > params["mat.pos"].shape[0]:
        raise DimensionMismatch(f"{n_views} views exceed the {params['mat.pos'].shape[0] - 1} positions")
    d = params["mat.in.w"].shape[1]
    dh = d // n_heads
    tokens = x_in @ params["mat.in.w"] + params["mat.in.b"]
    x = np.concatenate([np.broadcast_to(params["mat.cls"], (bsz, 1, d)), tokens], axis=1)
    x = x + params["mat.pos"][: n_views + 1]
    n_tok = n_views + 1
    blocks = []
    i = 0
    while f"mat.block{i}.ln1.g" in params:
        p = f"mat.block{i}."
        a, ln1 = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = (a @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(bsz, n_tok, n_heads, dh).transpose(0, 2, 1, 3)
        k = (a @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(bsz, n_tok, n_heads, dh).transpose(0, 2, 1, 3)
        v = (a @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(bsz, n_tok, n_heads, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * dtype.type(1.0 / math.sqrt(dh))
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, n_tok, d)
        x = x + ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        c, ln2 = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = c @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        gel, th = _gelu(u)
        x = x + gel @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        blocks.append((a, ln1, q, k, v, probs, ctx, c, ln2, u, gel, th))
        i += 1
    cls = x[:, 0]
    e = cls @ params["mat.out.w"] + params["mat.out.b"]
    y, norm = _unit(e)
    _check_finite(y, "material encoder")
    return y, (x_in, blocks, cls, y, norm, n_heads)


def _material_backward(params, dy, cache, grads):
    x_in, blocks, cls, y, norm, n_heads = cache
    bsz, n_views, _ = x_in.shape
    n_tok = n_views + 1
    d = params["mat.in.w"].shape[1]
    dh = d // n_heads
    scale = x_in.dtype.type(1.0 / math.sqrt(dh))

    de = _unit_back(dy, y, norm)
    grads["mat.out.w"] += cls.T @ de
    grads["mat.out.b"] += de.sum(axis=0)
    dx = np.zeros((bsz, n_tok, d), dtype=x_in.dtype)
    dx[:, 0] = de @ params["mat.out.w"].T

    for i in range(len(blocks) - 1, -1, -1):
        p = f"mat.block{i}."
        a, ln1, q, k, v, probs, ctx, c, ln2, u, gel, th = blocks[i]
        # MLP branch
        grads[p + "mlp.w2"] += gel.reshape(-1, gel.shape[-1]).T @ dx.reshape(-1, d)
        grads[p + "mlp.b2"] += dx.sum(axis=(0, 1))
        du = (dx @ params[p + "mlp.w2"].T) * _gelu_grad(u, th)
        grads[p + "mlp.w1"] += c.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "mlp.b1"] += du.sum(axis=(0, 1))
        dc = du @ params[p + "mlp.w1"].T
        dxln, dg, db = _layer_norm_back(dc, params[p + "ln2.g"], ln2)
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dxln
        # attention branch
        grads[p + "attn.wo"] += ctx.reshape(-1, d).T @ dx.reshape(-1, d)
        grads[p + "attn.bo"] += dx.sum(axis=(0, 1))
        dctx = (dx @ params[p + "attn.wo"].T).reshape(bsz, n_tok, n_heads, dh).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        a2 = a.reshape(-1, d)
        da = np.zeros_like(a)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            flat = dproj.transpose(0, 2, 1, 3).reshape(bsz, n_tok, d)
            grads[p + f"attn.w{name}"] += a2.T @ flat.reshape(-1, d)
            grads[p + f"attn.b{name}"] += flat.sum(axis=(0, 1))
            da += flat @ params[p + f"attn.w{name}"].T
        dxln, dg, db = _layer_norm_back(da, params[p + "ln1.g"], ln1)
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + dxln

    grads["mat.pos"][:n_tok] += dx.sum(axis=0)
    grads["mat.cls"] += dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:]
    grads["mat.in.w"] += x_in.reshape(-1, x_in.shape[-1]).T @ dtok.reshape(-1, d)
    grads["mat.in.b"] += dtok.sum(axis=(0, 1))


# --- part encoder ------------------------------------------------------------

def _part_forward(params, descriptors):
    dtype = params["part.w1"].dtype
    x = np.asarray(descriptors, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != params["part.w1"].shape[0]:
        raise DimensionMismatch(f"part descriptors must be (B, {params['part.w1'].shape[0]}), got {x.shape}")
    u = x @ params["part.w1"] + params["part.b1"]
    h, th = _gelu(u)
    e = h @ params["part.w2"] + params["part.b2"]
    y, norm = _unit(e)
    _check_finite(y, "part encoder")
    return y, (x, u, th, h, y, norm)


def _part_backward(params, dy, cache, grads):
    x, u, th, h, y, norm = cache
    de = _unit_back(dy, y, norm)
    grads["part.w2"] += h.T @ de
    grads["part.b2"] += de.sum(axis=0)
    du = (de @ params["part.w2"].T) * _gelu_grad(u, th)
    grads["part.w1"] += x.T @ du
    grads["part.b1"] += du.sum(axis=0)


# --- public API --------------------------------------------------------------

def encode_materials(params, views, n_heads):
    """Unit embeddings for a batch of view sets, ``(B, V, D_in) -> (B, D_emb)``."""
    return _material_forward(params, views, n_heads)[0]


def encode_parts(params, descriptors):
    """Unit embeddings for a batch of part descriptors, ``(B, D_in) -> (B, D_emb)``."""
    return _part_forward(params, descriptors)[0]


def material_forward(params, views, n_heads):
    """Embed a single ``(V, D_in)`` view set."""
    views = np.asarray(views)
    if views.ndim != 2:
        raise DimensionMismatch(f"a view set must be 2-D (V, D_in), got {views.shape}")
    return encode_materials(params, views[None], n_heads)[0]


def part_forward(params, descriptor):
    descriptor = np.asarray(descriptor)
    if descriptor.ndim != 1:
        raise DimensionMismatch(f"a part descriptor must be 1-D, got {descriptor.shape}")
    return encode_parts(params, descriptor[None])[0]


def batch_forward_backward(params, views, descriptors, n_heads):
    """Contrastive loss for paired batches and its gradient for every parameter.

    ``views`` is ``(B, V, D_in)`` and ``descriptors`` is ``(B, D_in)``; row ``i``
    of each side forms a positive pair.
    """
    views = np.asarray(views)
    descriptors = np.asarray(descriptors)
    if len(views) != len(descriptors) or len(views) < 1:
        raise DimensionMismatch(f"batch sizes differ or are empty: {len(views)} vs {len(descriptors)}")
    mat, mcache = _material_forward(params, views, n_heads)
    part, pcache = _part_forward(params, descriptors)
    loss, d_mat, d_part, d_t = info_nce_and_grads(mat, part, params["logit_scale"])
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    _material_backward(params, d_mat, mcache, grads)
    _part_backward(params, d_part, pcache, grads)
    grads["logit_scale"] = np.asarray(d_t, dtype=params["logit_scale"].dtype)
    return loss, grads


def clamp_logit_scale(params):
    if float(params["logit_scale"]) > MAX_LOGIT_SCALE:
        params["logit_scale"] = np.asarray(MAX_LOGIT_SCALE, dtype=params["logit_scale"].dtype)


# --- checkpoint file ---------------------------------------------------------

CKPT_MAGIC = b"MCPT"
CKPT_VERSION = 1


def write_tensors(path, tensors):
    """Write named float32 tensors: magic, u32 version, u32 count, then records."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not an MCPT checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise struct.error("name runs past end of file")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise struct.error("payload runs past end of file")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(shape)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise BadMagic(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(data):
        raise BadMagic(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return tensors
