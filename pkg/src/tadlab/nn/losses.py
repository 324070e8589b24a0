"""Loss functions with analytic gradients.

Every loss returns ``(value, grads)`` where ``grads`` may hold the keys
``outputs``, ``embeddings``, ``views`` (gradients w.r.t. those inputs),
``head.W`` (AAM reuses the head weights as class centres) and ``loss.*``
(trainable loss parameters, e.g. ARPL reciprocal points).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from ..core import ContractError, make_rng

LOSS_KINDS = ("cross_entropy", "arpl", "aam", "bce_multilabel", "mse", "mae", "infonce", "vicreg")
CLASSIFICATION_LOSSES = ("cross_entropy", "arpl", "aam")
PAIR_LOSSES = ("infonce", "vicreg")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    arpl_gamma: float = 0.1
    arpl_margin_weight: float = 0.1
    aam_scale: float = 10.0
    aam_margin: float = 0.2
    temperature: float = 0.2
    vicreg_weights: tuple[float, float, float] = (25.0, 25.0, 1.0)
    vicreg_eps: float = 1e-4

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}")
        positive = [self.arpl_gamma, self.arpl_margin_weight, self.aam_scale, self.temperature, *self.vicreg_weights]
        if min(positive) <= 0:
            raise ContractError("loss hyperparameters must be strictly positive")
        if not 0.0 <= self.aam_margin < np.pi / 2:
            raise ContractError(f"AAM margin must lie in [0, pi/2), got {self.aam_margin}")
        if self.vicreg_eps < 0:
            raise ContractError("vicreg_eps must be >= 0")


def init_loss_params(spec: LossSpec, n_classes: int, width: int, seed: int) -> dict[str, np.ndarray]:
    """Trainable parameters owned by the loss (only ARPL has any)."""
    if spec.kind != "arpl":
        return {}
    rng = make_rng(seed)
    return {"loss.points": rng.normal(scale=0.1, size=(n_classes, width)), "loss.radius": np.ones(1)}


def _nll(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    B = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(B), targets].mean()
    g = np.exp(logp)
    g[np.arange(B), targets] -= 1.0
    return float(loss), g / B


def cross_entropy(outputs, targets):
    loss, g = _nll(outputs, targets)
    return loss, {"outputs": g}


def arpl(spec: LossSpec, embeddings, targets, points, radius):
    """Reciprocal-point loss: logits gamma * ||e - P_k||^2, plus
    lambda * max(0, R - d(e, P_y))^2 on the true class."""
    B = embeddings.shape[0]
    diff = embeddings[:, None, :] - points[None, :, :]  # B x C x h
    dist = np.einsum("bch,bch->bc", diff, diff)
    ce, g_logits = _nll(spec.arpl_gamma * dist, targets)
    d_true = dist[np.arange(B), targets]
    gap = np.maximum(radius[0] - d_true, 0.0)
    margin = spec.arpl_margin_weight * float(np.mean(gap**2))

    g_dist = spec.arpl_gamma * g_logits
    g_dist[np.arange(B), targets] += -2.0 * spec.arpl_margin_weight * gap / B
    g_diff = 2.0 * g_dist[:, :, None] * diff
    return ce + margin, {
        "embeddings": g_diff.sum(axis=1),
        "loss.points": -g_diff.sum(axis=0),
        "loss.radius": np.array([2.0 * spec.arpl_margin_weight * gap.sum() / B]),
    }


def _normalize(a: np.ndarray, axis: int):
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    return a / norm, norm


def _normalize_backward(unit: np.ndarray, norm: np.ndarray, g_unit: np.ndarray, axis: int) -> np.ndarray:
    return (g_unit - unit * (unit * g_unit).sum(axis=axis, keepdims=True)) / norm


def aam(spec: LossSpec, embeddings, targets, W):
    """Additive angular margin: true-class logit s cos(theta_y + m), others s cos(theta_j).

    ``W`` (width x C) holds one class centre per column.
    """
    B = embeddings.shape[0]
    e_hat, e_norm = _normalize(embeddings, 1)
    w_hat, w_norm = _normalize(W, 0)
    cos = e_hat @ w_hat
    rows = np.arange(B)
    ct = cos[rows, targets]
    sin = np.sqrt(np.maximum(1.0 - ct * ct, 1e-12))
    cm, sm = np.cos(spec.aam_margin), np.sin(spec.aam_margin)
    logits = spec.aam_scale * cos
    logits[rows, targets] = spec.aam_scale * (ct * cm - sin * sm)
    loss, g_logits = _nll(logits, targets)

    g_cos = spec.aam_scale * g_logits
    dtrue = cm + sm * ct / sin
    g_cos[rows, targets] = spec.aam_scale * g_logits[rows, targets] * dtrue
    g_e_hat = g_cos @ w_hat.T
    g_w_hat = e_hat.T @ g_cos
    return loss, {
        "embeddings": _normalize_backward(e_hat, e_norm, g_e_hat, 1),
        "head.W": _normalize_backward(w_hat, w_norm, g_w_hat, 0),
    }


def bce_multilabel(outputs, targets):
    t = np.asarray(targets, dtype=np.float64)
    # mean of softplus(x) - t x, stable form
    loss = np.mean(np.maximum(outputs, 0) - outputs * t + np.log1p(np.exp(-np.abs(outputs))))
    sig = 0.5 * (1.0 + np.tanh(0.5 * outputs))
    return float(loss), {"outputs": (sig - t) / outputs.size}


def mse(outputs, targets):
    r = outputs - targets
    return float(np.mean(r * r)), {"outputs": 2.0 * r / r.size}


def mae(outputs, targets):
    r = outputs - targets
    return float(np.mean(np.abs(r))), {"outputs": np.sign(r) / r.size}


def infonce(spec: LossSpec, za, zb):
    """Symmetric NT-Xent over 2B embeddings: each row's positive is its other
    view; every other embedding in the batch is a negative."""
    B = za.shape[0]
    if B < 2:
        raise ContractError("InfoNCE needs a batch of at least 2")
    z = np.concatenate([za, zb])
    u, norm = _normalize(z, 1)
    s = u @ u.T / spec.temperature
    n = 2 * B
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(B, n), np.arange(B)])
    logp = log_softmax(s, axis=1)
    loss = -logp[np.arange(n), pos].mean()
    g = np.exp(logp)
    g[np.arange(n), pos] -= 1.0
    g /= n
    g_u = (g + g.T) @ u / spec.temperature
    g_z = _normalize_backward(u, norm, g_u, 1)
    return float(loss), {"outputs": g_z[:B], "views": g_z[B:]}


def window_infonce(spec: LossSpec, anchors, candidates, positive):
    """Per-row InfoNCE: anchor i against candidates[i, j]; ``positive[i]`` is
    the matching j, all other j are negatives."""
    B, J, _ = candidates.shape
    if J < 2:
        raise ContractError("window InfoNCE needs at least 2 candidates per row")
    ua, na = _normalize(anchors, 1)
    uc, nc = _normalize(candidates, 2)
    s = np.einsum("bw,bjw->bj", ua, uc) / spec.temperature
    loss, g = _nll(s, positive)
    g = g / spec.temperature
    g_ua = np.einsum("bj,bjw->bw", g, uc)
    g_uc = g[:, :, None] * ua[:, None, :]
    return loss, {
        "anchors": _normalize_backward(ua, na, g_ua, 1),
        "candidates": _normalize_backward(uc, nc, g_uc, 2),
    }


def _vicreg_branch(z: np.ndarray, eps: float):
    n, w = z.shape
    zc = z - z.mean(axis=0)
    var = (zc * zc).sum(axis=0) / (n - 1)
    std = np.sqrt(var + eps)
    hinge = np.maximum(1.0 - std, 0.0)
    cov = zc.T @ zc / (n - 1)
    off = cov - np.diag(np.diag(cov))
    var_term = hinge.mean()
    cov_term = (off * off).sum() / w
    safe = np.where(std > 0, std, 1.0)
    g_var = np.where((hinge > 0) & (std > 0), -1.0 / (w * safe * (n - 1)), 0.0) * zc
    g_cov = 4.0 * zc @ off / (w * (n - 1))
    return var_term, cov_term, g_var, g_cov


def vicreg(spec: LossSpec, za, zb):
    """lam_inv * MSE(za, zb) + lam_var * mean of the two views' variance hinges
    + lam_cov * sum of both views' squared off-diagonal covariances / width."""
    if za.shape[0] < 2:
        raise ContractError("VICReg needs a batch of at least 2")
    li, lv, lc = spec.vicreg_weights
    r = za - zb
    inv = np.mean(r * r)
    va, ca, gva, gca = _vicreg_branch(za, spec.vicreg_eps)
    vb, cb, gvb, gcb = _vicreg_branch(zb, spec.vicreg_eps)
    loss = li * inv + lv * 0.5 * (va + vb) + lc * (ca + cb)
    g_inv = 2.0 * r / r.size
    ga = li * g_inv + lv * 0.5 * gva + lc * gca
    gb = -li * g_inv + lv * 0.5 * gvb + lc * gcb
    return float(loss), {"outputs": ga, "views": gb}


def vicreg_terms(spec: LossSpec, za, zb) -> tuple[float, float, float]:
    """Unweighted (invariance, variance, covariance) terms, for reporting."""
    va, ca, *_ = _vicreg_branch(za, spec.vicreg_eps)
    vb, cb, *_ = _vicreg_branch(zb, spec.vicreg_eps)
    return float(np.mean((za - zb) ** 2)), 0.5 * (va + vb), ca + cb


def loss_terms(
    spec: LossSpec,
    outputs,
    embeddings,
    targets=None,
    views=None,
    loss_params: dict | None = None,
    head_W=None,
):
    """Dispatch on ``spec.kind``; see module docstring for the gradient keys."""
    k = spec.kind
    if k == "cross_entropy":
        return cross_entropy(outputs, targets)
    if k == "arpl":
        return arpl(spec, embeddings, targets, loss_params["loss.points"], loss_params["loss.radius"])
    if k == "aam":
        return aam(spec, embeddings, targets, head_W)
    if k == "bce_multilabel":
        return bce_multilabel(outputs, targets)
    if k == "mse":
        return mse(outputs, targets)
    if k == "mae":
        return mae(outputs, targets)
    if k == "infonce":
        return infonce(spec, outputs, views)
    return vicreg(spec, outputs, views)


__all__ = [
    "LOSS_KINDS",
    "LossSpec",
    "init_loss_params",
    "loss_terms",
    "vicreg_terms",
    "window_infonce",
]
