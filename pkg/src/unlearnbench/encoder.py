"""MLP embedding model with a CosFace head, its trainer and nearest-centroid classifier."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .data import flip_inputs

log = logging.getLogger(__name__)

HEAD = "head"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderModel:
    params: dict[str, np.ndarray]
    D_in: int
    hidden: tuple[int, ...]
    d: int
    K: int
    s: float = 64.0
    m_cos: float = 0.4
    seed: int = 0

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def arch(self) -> dict:
        return {"D_in": self.D_in, "hidden": list(self.hidden), "d": self.d, "K": self.K,
                "s": self.s, "m_cos": self.m_cos, "seed": self.seed}


def init_model(D_in: int, K: int, d: int = 32, hidden=(128, 128), s: float = 64.0,
               m_cos: float = 0.4, seed: int = 0) -> EncoderModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0C]))
    dims = [D_in, *hidden, d]
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        params[f"b{i}"] = np.zeros(fan_out)
    params[HEAD] = rng.standard_normal((K, d)) * 0.01
    return EncoderModel(params, D_in, tuple(hidden), d, K, float(s), float(m_cos), seed)


def as_tensors(model: EncoderModel, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in model.params.items()}


def forward(params: dict[str, ad.Tensor], x) -> ad.Tensor:
    """Raw (unnormalized) embedding f(x)."""
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    n_layers = sum(1 for k in params if k.startswith("W"))
    for i in range(n_layers):
        h = ad.matmul(h, ad.transpose(params[f"W{i}"])) + params[f"b{i}"]
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def embed_tensor(params: dict[str, ad.Tensor], x) -> ad.Tensor:
    return ad.l2_normalize(forward(params, x))


def embed(model: EncoderModel, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Unit-norm embeddings as a plain array (no tape)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.D_in:
        raise ad.ShapeError(f"model expects inputs of width {model.D_in}, got {inputs.shape}")
    params = as_tensors(model, requires_grad=False)
    parts = [embed_tensor(params, inputs[i:i + chunk]).data for i in range(0, len(inputs), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.d))


def cosface_logits(emb_unit: ad.Tensor, head: ad.Tensor, labels, s: float, m_cos: float) -> ad.Tensor:
    cos = ad.cosine_matrix(emb_unit, ad.l2_normalize(head))
    margin = np.zeros(cos.shape)
    margin[np.arange(cos.shape[0]), np.asarray(labels, dtype=np.intp)] = m_cos
    return (cos - margin) * s


def cosface_from_embeddings(emb_unit: ad.Tensor, head: ad.Tensor, labels, s: float, m_cos: float) -> ad.Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= head.shape[0]):
        raise IndexError(f"labels must lie in [0, {head.shape[0]})")
    return ad.log_sum_exp_ce(cosface_logits(emb_unit, head, labels, s, m_cos), labels)


def cosface_loss(model: EncoderModel, inputs, labels, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    params = params if params is not None else as_tensors(model, requires_grad=False)
    return cosface_from_embeddings(embed_tensor(params, inputs), params[HEAD], labels, model.s, model.m_cos)


# optimizer ----------------------------------------------------------------

class SGD:
    """SGD with momentum and coupled weight decay; optional per-parameter 0/1 update masks."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             masks: dict[str, np.ndarray] | None = None, frozen=()) -> None:
        for name, p in params.items():
            if name in frozen:
                continue
            g = grads[name] + self.weight_decay * p
            buf = self.buffers.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            update = lr * buf
            if masks is not None:
                update = update * masks[name]
            p -= update


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    lr_schedule: str = "linear"
    flip_augment: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"lr_schedule must be 'linear' or 'constant', got {self.lr_schedule!r}")


def lr_at(base: float, step: int, total: int, schedule: str) -> float:
    if schedule == "linear" and total > 0:
        return base * (1.0 - step / total)
    return base


def maybe_flip(x: np.ndarray, enabled: bool, rng: np.random.Generator) -> np.ndarray:
    if not enabled:
        return x
    flip = rng.random(len(x)) < 0.5
    return np.where(flip[:, None], flip_inputs(x), x)


def params_finite(model: EncoderModel) -> bool:
    return all(np.isfinite(p).all() for p in model.params.values())


def train(model: EncoderModel, inputs: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> tuple[EncoderModel, list[float]]:
    """Minibatch CosFace training; returns the trained copy and per-epoch mean loss."""
    if len(labels) == 0:
        raise ValueError("training set is empty")
    model = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    opt = SGD(cfg.momentum, cfg.weight_decay)
    n = len(labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tensors = as_tensors(model)
            x = maybe_flip(inputs[idx], cfg.flip_augment, rng)
            loss = cosface_loss(model, x, labels[idx], tensors)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(loss)
            opt.step(model.params, {k: t.grad for k, t in tensors.items()},
                     lr_at(cfg.lr, step, total, cfg.lr_schedule))
            if not params_finite(model):
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch}, step {step}")
            losses.append(loss.item() * len(idx))
            step += 1
        curve.append(float(np.sum(losses) / n))
        log.debug("epoch %d loss %.4f", epoch, curve[-1])
    return model, curve


def centroid_classify(train_emb: np.ndarray, train_labels: np.ndarray, test_emb: np.ndarray,
                      classes: np.ndarray | None = None) -> np.ndarray:
    """Nearest normalized class-mean by cosine; ties go to the lowest class id."""
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels) if classes is None else np.sort(np.asarray(classes))
    cents = np.zeros((len(classes), train_emb.shape[1]))
    for i, c in enumerate(classes):
        members = train_emb[train_labels == c]
        if len(members) == 0:
            raise ValueError(f"class {c} has no training embeddings")
        cents[i] = members.mean(axis=0)
    cents /= np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
    return classes[np.argmax(test_emb @ cents.T, axis=1)]


# snapshots -------------------------------------------------------------------

def save_model(model: EncoderModel, path, extra: dict | None = None) -> Path:
    header = {"version": 1, "arch": model.arch(), "param_order": model.param_names}
    if extra:
        header["meta"] = extra
    return container.write(path, "encoder", header, model.params)


def load_model(path) -> tuple[EncoderModel, dict]:
    h, arrays = container.read(path, "encoder")
    a = h["arch"]
    params = {k: arrays[k] for k in h["param_order"]}
    model = EncoderModel(params, a["D_in"], tuple(a["hidden"]), a["d"], a["K"], a["s"], a["m_cos"], a["seed"])
    return model, h.get("meta", {})


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
