"""Residual MLP with hand-written forward and backward passes.

Layout: stem linear (d_in -> width), then ``n_blocks`` residual blocks
``h + dropout(relu(bn(h W + b)))``, then a linear head (width -> d_out).
The embedding is the activation entering the head.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..core import ContractError, NumericError, make_rng

EMBED_DIM = 128
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Network:
    d_in: int
    d_out: int
    n_blocks: int
    width: int = EMBED_DIM
    dropout: float = 0.1
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def param_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_network(
    d_in: int, d_out: int, n_blocks: int, seed: int, width: int = EMBED_DIM, dropout: float = 0.1
) -> Network:
    if d_in < 1 or d_out < 1 or n_blocks < 1 or width < 1:
        raise ContractError(f"invalid network shape d_in={d_in}, d_out={d_out}, n_blocks={n_blocks}")
    if not 0.0 <= dropout < 1.0:
        raise ContractError(f"dropout must lie in [0, 1), got {dropout}")
    rng = make_rng(seed)
    p = {
        "stem.W": _uniform(rng, d_in, (d_in, width)),
        "stem.b": _uniform(rng, d_in, (width,)),
    }
    buffers = {}
    for i in range(n_blocks):
        p[f"block{i}.W"] = _uniform(rng, width, (width, width))
        p[f"block{i}.b"] = _uniform(rng, width, (width,))
        p[f"block{i}.gamma"] = np.ones(width)
        p[f"block{i}.beta"] = np.zeros(width)
        buffers[f"block{i}.running_mean"] = np.zeros(width)
        buffers[f"block{i}.running_var"] = np.ones(width)
    p["head.W"] = _uniform(rng, width, (width, d_out))
    p["head.b"] = _uniform(rng, width, (d_out,))
    return Network(d_in, d_out, n_blocks, width, dropout, p, buffers)


def _check_finite(a: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation in {layer}")


def forward(net: Network, X, mode: str = "eval", rng: np.random.Generator | None = None):
    """Return (outputs, embeddings, cache).

    Train mode normalises with batch statistics, updates the running
    statistics and applies dropout (which needs ``rng``); eval mode uses the
    running statistics and no dropout.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.d_in:
        raise ContractError(f"expected input of width {net.d_in}, got shape {X.shape}")
    p = net.params
    train = mode == "train"
    if train and net.dropout > 0 and rng is None:
        raise ContractError("train-mode forward with dropout needs an rng")

    cache = {"X": X, "mode": mode, "blocks": []}
    h = X @ p["stem.W"] + p["stem.b"]
    _check_finite(h, "stem")
    for i in range(net.n_blocks):
        z = h @ p[f"block{i}.W"] + p[f"block{i}.b"]
        if train:
            if z.shape[0] < 2:
                raise ContractError("train-mode batch norm needs at least 2 rows")
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            rm, rv = f"block{i}.running_mean", f"block{i}.running_var"
            n = z.shape[0]
            net.buffers[rm] = (1 - BN_MOMENTUM) * net.buffers[rm] + BN_MOMENTUM * mu
            net.buffers[rv] = (1 - BN_MOMENTUM) * net.buffers[rv] + BN_MOMENTUM * var * n / (n - 1)
        else:
            mu = net.buffers[f"block{i}.running_mean"]
            var = net.buffers[f"block{i}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        bn = xhat * p[f"block{i}.gamma"] + p[f"block{i}.beta"]
        r = np.maximum(bn, 0.0)
        if train and net.dropout > 0:
            keep = (rng.random(r.shape) >= net.dropout) / (1.0 - net.dropout)
        else:
            keep = None
        out = r * keep if keep is not None else r
        cache["blocks"].append({"h": h, "xhat": xhat, "inv_std": inv_std, "bn": bn, "keep": keep})
        h = h + out
        _check_finite(h, f"block{i}")
    emb = h
    outputs = emb @ p["head.W"] + p["head.b"]
    _check_finite(outputs, "head")
    cache["emb"] = emb
    return outputs, emb, cache


def backward(net: Network, cache: dict, d_outputs=None, d_embeddings=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given its gradients w.r.t. the
    outputs and (optionally) directly w.r.t. the embeddings."""
    p = net.params
    emb = cache["emb"]
    grads = {}
    dh = np.zeros_like(emb) if d_embeddings is None else np.array(d_embeddings, dtype=np.float64)
    if d_outputs is not None:
        grads["head.W"] = emb.T @ d_outputs
        grads["head.b"] = d_outputs.sum(axis=0)
        dh = dh + d_outputs @ p["head.W"].T
    else:
        grads["head.W"] = np.zeros_like(p["head.W"])
        grads["head.b"] = np.zeros_like(p["head.b"])
    train = cache["mode"] == "train"
    for i in reversed(range(net.n_blocks)):
        c = cache["blocks"][i]
        dr = dh * c["keep"] if c["keep"] is not None else dh
        dbn = dr * (c["bn"] > 0)
        grads[f"block{i}.gamma"] = (dbn * c["xhat"]).sum(axis=0)
        grads[f"block{i}.beta"] = dbn.sum(axis=0)
        dxhat = dbn * p[f"block{i}.gamma"]
        if train:
            dz = c["inv_std"] * (dxhat - dxhat.mean(axis=0) - c["xhat"] * (dxhat * c["xhat"]).mean(axis=0))
        else:
            dz = dxhat * c["inv_std"]
        grads[f"block{i}.W"] = c["h"].T @ dz
        grads[f"block{i}.b"] = dz.sum(axis=0)
        dh = dh + dz @ p[f"block{i}.W"].T
    grads["stem.W"] = cache["X"].T @ dh
    grads["stem.b"] = dh.sum(axis=0)
    return grads


def forward_embed(net: Network, X, mode: str = "eval", rng: np.random.Generator | None = None):
    outputs, emb, _ = forward(net, X, mode, rng)
    return outputs, emb
