"""Finite-difference oracle shared by the encoder tests and the acceptance suite."""
import numpy as np

from matembed.encoder import EncoderConfig, cast_params, encode_materials, encode_parts, init_params
from matembed.loss import info_nce


def gradcheck_problem(seed, batch=4, d_model=16, d_emb=8, d_in=6, n_views=4, mlp_ratio=2):
    """Random float64 parameters and inputs; LayerNorm params are jittered off their init."""
    cfg = EncoderConfig(d_in=d_in, d_model=d_model, d_emb=d_emb, n_heads=4, n_blocks=2,
                        n_views=n_views, mlp_ratio=mlp_ratio)
    params = cast_params(init_params(cfg, seed), np.float64)
    r = np.random.default_rng(seed + 1000)
    for k in params:
        if ".ln" in k:
            params[k] = params[k] + r.normal(0.0, 0.2, size=params[k].shape)
    params["logit_scale"] = np.asarray(r.uniform(0.5, 2.5))
    views = r.normal(size=(batch, n_views, d_in))
    descriptors = r.normal(size=(batch, d_in))
    return cfg, params, views, descriptors


def fd_gradients(params, views, descriptors, n_heads, h=1e-3):
    """Central differences of the contrastive loss w.r.t. every parameter entry.

    Evaluates the loss only through the forward encoders; material-side
    perturbations reuse the fixed part embeddings and vice versa.
    """
    mat = encode_materials(params, views, n_heads)
    part = encode_parts(params, descriptors)
    grads = {}
    for name, value in params.items():
        arr = value.reshape(-1) if value.ndim else value.reshape(1)
        params[name] = arr.reshape(value.shape)
        g = np.zeros(arr.size)
        for i in range(arr.size):
            losses = []
            for step in (h, -h):
                old = arr[i]
                arr[i] = old + step
                if name == "logit_scale":
                    loss = info_nce(mat, part, float(arr[i]))
                elif name.startswith("part."):
                    loss = info_nce(mat, encode_parts(params, descriptors), params["logit_scale"])
                else:
                    loss = info_nce(encode_materials(params, views, n_heads), part, params["logit_scale"])
                arr[i] = old
                losses.append(loss)
            g[i] = (losses[0] - losses[1]) / (2 * h)
        params[name] = value
        grads[name] = g.reshape(value.shape)
    return grads


def relative_error(analytic, numeric):
    """Norm-relative error of one gradient tensor; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom <= 1e-8:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
