"""Pretext training with Adam, validation-loss model selection and embedding extraction."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import ContractError, NumericError, make_rng, split_seeds
from ..pretext import CLASSIFICATION_TASKS, TASK_LOSSES, PretextTask, all_windows, make_batch
from .losses import LossSpec, init_loss_params, loss_terms, window_infonce
from .network import EMBED_DIM, Network, backward, build_network, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch: int = 64
    patience: int = 10
    seed: int = 0
    n_blocks: int = 2
    dropout: float = 0.1
    head_width: int | None = None  # contrastive/EICL projector width; None = task default


@dataclass
class Encoder:
    """The trainable model for one task: a single network, or the two EICL
    towers (window of width k_w and its complement)."""

    nets: dict[str, Network]
    loss_params: dict[str, np.ndarray] = field(default_factory=dict)

    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"{name}.{k}": v for name, net in self.nets.items() for k, v in net.params.items()}
        out.update(self.loss_params)
        return out

    def copy(self) -> Encoder:
        return Encoder(
            {k: n.copy() for k, n in self.nets.items()},
            {k: v.copy() for k, v in self.loss_params.items()},
        )


def build_encoder(task: PretextTask, loss: LossSpec, config: TrainConfig) -> Encoder:
    if loss.kind not in TASK_LOSSES[task.kind]:
        raise ContractError(f"loss {loss.kind!r} is not defined for task {task.kind!r}")
    d_out = config.head_width or task.default_d_out()
    seeds = split_seeds(config.seed, 3)
    if task.kind == "eicl":
        nets = {
            "a": build_network(task.window, d_out, config.n_blocks, seeds[0], dropout=config.dropout),
            "b": build_network(task.d - task.window, d_out, config.n_blocks, seeds[1], dropout=config.dropout),
        }
    else:
        nets = {"net": build_network(task.d, d_out, config.n_blocks, seeds[0], dropout=config.dropout)}
    width = next(iter(nets.values())).width
    return Encoder(nets, init_loss_params(loss, task.n_classes, width, seeds[2]))


def _merge(into: dict, prefix: str, grads: dict) -> None:
    for k, v in grads.items():
        key = f"{prefix}.{k}"
        into[key] = into[key] + v if key in into else v


def batch_loss(
    enc: Encoder,
    task: PretextTask,
    loss: LossSpec,
    batch,
    mode: str,
    rng: np.random.Generator | None,
    need_grad: bool = True,
):
    """Loss of one pretext batch and (optionally) gradients for every parameter."""
    grads: dict[str, np.ndarray] = {}
    if task.kind == "eicl":
        a_net, b_net = enc.nets["a"], enc.nets["b"]
        B, J, kw = batch.inputs.shape
        out_a, _, cache_a = forward(a_net, batch.inputs.reshape(B * J, kw), mode, rng)
        out_b, _, cache_b = forward(b_net, batch.views, mode, rng)
        cand = out_a.reshape(B, J, -1)
        if loss.kind == "infonce":
            value, g = window_infonce(loss, out_b, cand, batch.targets)
            g_a, g_b = g["candidates"].reshape(B * J, -1), g["anchors"]
        else:
            pos = cand[np.arange(B), batch.targets]
            value, g = loss_terms(loss, pos, None, views=out_b)
            g_a = np.zeros_like(cand)
            g_a[np.arange(B), batch.targets] = g["outputs"]
            g_a, g_b = g_a.reshape(B * J, -1), g["views"]
        if need_grad:
            _merge(grads, "a", backward(a_net, cache_a, g_a))
            _merge(grads, "b", backward(b_net, cache_b, g_b))
        return value, grads

    net = enc.nets["net"]
    out, emb, cache = forward(net, batch.inputs, mode, rng)
    if task.is_pair:
        out_v, _, cache_v = forward(net, batch.views, mode, rng)
        value, g = loss_terms(loss, out, emb, views=out_v)
        if need_grad:
            _merge(grads, "net", backward(net, cache, g["outputs"]))
            _merge(grads, "net", backward(net, cache_v, g["views"]))
        return value, grads

    value, g = loss_terms(loss, out, emb, batch.targets, loss_params=enc.loss_params, head_W=net.params["head.W"])
    if need_grad:
        _merge(grads, "net", backward(net, cache, g.get("outputs"), g.get("embeddings")))
        if "head.W" in g:
            grads["net.head.W"] = grads["net.head.W"] + g["head.W"]
        for k, v in g.items():
            if k.startswith("loss."):
                grads[k] = v
    return value, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(grads):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainedEncoder:
    encoder: Encoder
    task: PretextTask
    loss: LossSpec
    config: TrainConfig
    best_val_loss: float
    best_epoch: int
    seed: int
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return self.task.d

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in self.curve:
            w.writerow([e, repr(tr), repr(va)])
        return buf.getvalue()


def _batches(n: int, size: int, order: np.ndarray):
    size = min(size, n)
    for lo in range(0, n, size):
        idx = order[lo : lo + size]
        if idx.size >= 2:
            yield idx


def evaluate_loss(enc: Encoder, task: PretextTask, loss: LossSpec, X, pool, batch: int, seed: int) -> float:
    """Mean eval-mode task loss over X, with augmentations drawn from a fixed seed."""
    rng = make_rng(seed)
    total, count = 0.0, 0
    for idx in _batches(X.shape[0], batch, np.arange(X.shape[0])):
        b = make_batch(task, X[idx], pool, rng)
        value, _ = batch_loss(enc, task, loss, b, "eval", None, need_grad=False)
        total += value * idx.size
        count += idx.size
    if count == 0:
        raise ContractError("validation set needs at least 2 rows")
    return total / count


def train_pretext(
    task: PretextTask,
    loss: LossSpec,
    X_train,
    X_val,
    config: TrainConfig | None = None,
    encoder: Encoder | None = None,
) -> TrainedEncoder:
    """Adam on the pretext loss; keeps the snapshot with the lowest validation loss
    and stops after ``patience`` epochs without improvement."""
    config = config or TrainConfig()
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    if X_train.shape[0] < 2 or X_val.shape[0] < 2:
        raise ContractError("train and validation splits need at least 2 rows each")
    if X_train.shape[1] != task.d or X_val.shape[1] != task.d:
        raise ContractError(f"data width does not match task width {task.d}")
    if config.epochs < 1 or config.patience < 0:
        raise ContractError("epochs must be >= 1 and patience >= 0")
    enc = encoder or build_encoder(task, loss, config)
    seeds = split_seeds(config.seed, 3)
    shuffle_rng = make_rng(seeds[0])
    aug_rng = make_rng(seeds[1])
    val_seed = seeds[2]
    params = enc.named_params()
    opt = Adam(params, config.lr)

    best_val, best_epoch, best_enc = np.inf, 0, enc.copy()
    curve = []
    since = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(X_train.shape[0])
        total, count = 0.0, 0
        for b_i, idx in enumerate(_batches(X_train.shape[0], config.batch, order)):
            batch = make_batch(task, X_train[idx], X_train, aug_rng)
            value, grads = batch_loss(enc, task, loss, batch, "train", aug_rng)
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch}, batch {b_i}")
            opt.step(params, grads)
            total += value * idx.size
            count += idx.size
        train_loss = total / count
        val_loss = evaluate_loss(enc, task, loss, X_val, X_train, config.batch, val_seed)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss became {val_loss} at epoch {epoch}")
        curve.append((epoch, float(train_loss), float(val_loss)))
        if val_loss < best_val:
            best_val, best_epoch, best_enc = val_loss, epoch, enc.copy()
            since = 0
        else:
            since += 1
        if since >= config.patience:
            break
    log.debug("trained %s/%s: best val %.4g at epoch %d", task.kind, loss.kind, best_val, best_epoch)
    return TrainedEncoder(best_enc, task, loss, config, float(best_val), best_epoch, config.seed, curve)


def extract_embeddings(enc: TrainedEncoder, X) -> np.ndarray:
    """Eval-mode penultimate activations (n x 128), no augmentation.

    EICL has two towers over partial inputs; its embedding averages each
    tower's embedding over every window position, then averages the towers.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != enc.task.d:
        raise ContractError(f"expected input of width {enc.task.d}, got shape {X.shape}")
    nets = enc.encoder.nets
    out = np.empty((X.shape[0], EMBED_DIM))
    for lo in range(0, X.shape[0], 8192):
        chunk = X[lo : lo + 8192]
        if enc.task.kind != "eicl":
            _, emb, _ = forward(nets["net"], chunk, "eval")
        else:
            k_w, J = enc.task.window, enc.task.n_windows
            wins = all_windows(chunk, k_w)
            _, ea, _ = forward(nets["a"], wins.reshape(-1, k_w), "eval")
            starts = np.repeat(np.arange(J)[None, :], chunk.shape[0], axis=0).ravel()
            rows = np.repeat(chunk, J, axis=0)
            inside = (np.arange(enc.task.d)[None, :] >= starts[:, None]) & (
                np.arange(enc.task.d)[None, :] < starts[:, None] + k_w
            )
            comp = rows[~inside].reshape(rows.shape[0], enc.task.d - k_w)
            _, eb, _ = forward(nets["b"], comp, "eval")
            n = chunk.shape[0]
            emb = 0.5 * (ea.reshape(n, J, -1).mean(axis=1) + eb.reshape(n, J, -1).mean(axis=1))
        out[lo : lo + 8192] = emb
    return out


SEARCH_LR = (1e-4, 1e-2)
SEARCH_BATCH = (64, 256)
SEARCH_BLOCKS = (2, 3)
SEARCH_HEAD = (128, 256, 512)


def sample_configs(task: PretextTask, draws: int, seed: int, epochs: int = 200, patience: int = 10) -> list[TrainConfig]:
    rng = make_rng(seed)
    configs = []
    for s in split_seeds(seed, draws):
        lr = float(np.exp(rng.uniform(np.log(SEARCH_LR[0]), np.log(SEARCH_LR[1]))))
        batch = int(rng.choice(SEARCH_BATCH))
        blocks = int(rng.choice(SEARCH_BLOCKS))
        head = int(rng.choice(SEARCH_HEAD)) if task.is_pair else None
        configs.append(TrainConfig(lr=lr, epochs=epochs, batch=batch, patience=patience, seed=s, n_blocks=blocks, head_width=head))
    return configs


def random_search(
    task: PretextTask,
    loss: LossSpec,
    X_train,
    X_val,
    draws: int = 8,
    seed: int = 0,
    epochs: int = 200,
    patience: int = 10,
) -> TrainedEncoder:
    """Train ``draws`` random configurations and keep the lowest validation loss."""
    best = None
    for cfg in sample_configs(task, draws, seed, epochs, patience):
        enc = train_pretext(task, loss, X_train, X_val, cfg)
        if best is None or enc.best_val_loss < best.best_val_loss:
            best = enc
    return best


MAGIC = b"TADNET1\0"


def save_checkpoint(enc: TrainedEncoder, path) -> None:
    """Binary checkpoint: magic, header length, JSON header (dims, blocks, loss
    kind, tensor names/shapes), then a little-endian float64 blob holding the
    parameters and batch-norm running statistics in header order."""
    tensors = []
    for name, net in enc.encoder.nets.items():
        for k in sorted(net.params):
            tensors.append((f"{name}.{k}", net.params[k]))
        for k in sorted(net.buffers):
            tensors.append((f"{name}.buffer.{k}", net.buffers[k]))
    for k in sorted(enc.encoder.loss_params):
        tensors.append((k, enc.encoder.loss_params[k]))
    header = {
        "nets": {
            name: {"d_in": n.d_in, "d_out": n.d_out, "n_blocks": n.n_blocks, "width": n.width, "dropout": n.dropout}
            for name, n in enc.encoder.nets.items()
        },
        "loss": asdict(enc.loss),
        "task": json.loads(enc.task.to_json()),
        "rotations": [r.tolist() for r in enc.task.rotations],
        "config": asdict(enc.config),
        "best_val_loss": enc.best_val_loss,
        "best_epoch": enc.best_epoch,
        "curve": enc.curve,
        "tensors": [[name, list(a.shape)] for name, a in tensors],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = np.concatenate([a.ravel() for _, a in tensors]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(blob)


def load_checkpoint(path) -> TrainedEncoder:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ContractError(f"{path} is not an encoder checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    task = PretextTask.from_json(json.dumps(header["task"]))
    task.rotations = [np.array(r) for r in header["rotations"]]
    nets = {name: Network(**spec) for name, spec in header["nets"].items()}
    loss_params = {}
    pos = 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        arr = blob[pos : pos + size].reshape(shape).copy()
        pos += size
        if name.startswith("loss."):
            loss_params[name] = arr
            continue
        net_name, rest = name.split(".", 1)
        if rest.startswith("buffer."):
            nets[net_name].buffers[rest[len("buffer.") :]] = arr
        else:
            nets[net_name].params[rest] = arr
    loss_spec = header["loss"]
    loss_spec["vicreg_weights"] = tuple(loss_spec["vicreg_weights"])
    return TrainedEncoder(
        Encoder(nets, loss_params),
        task,
        LossSpec(**loss_spec),
        TrainConfig(**header["config"]),
        header["best_val_loss"],
        header["best_epoch"],
        header["config"]["seed"],
        [tuple(c) for c in header["curve"]],
    )


__all__ = [
    "Adam",
    "CLASSIFICATION_TASKS",
    "Encoder",
    "TrainConfig",
    "TrainedEncoder",
    "batch_loss",
    "build_encoder",
    "evaluate_loss",
    "extract_embeddings",
    "load_checkpoint",
    "random_search",
    "sample_configs",
    "save_checkpoint",
    "train_pretext",
]
