"""Identity-unlearning losses and the seven unlearning procedures.

Every runner takes the shared original model and returns a new model; the
input model is never modified. All randomness comes from ``cfg.seed``.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import SplitPlan, SyntheticDataset, sample_batch
from .encoder import (HEAD, SGD, EncoderModel, as_tensors, cosface_from_embeddings, embed_tensor, forward,
                      maybe_flip, params_finite)

log = logging.getLogger(__name__)

DISPERSION = "Dispersion"
HARD_DISPERSION = "HardDispersion"
RANDOM_LABELING = "RandomLabeling"
GRADIENT_ASCENT = "GradientAscent"
BOUNDARY_SHRINK = "BoundaryShrink"
LIPSCHITZ = "Lipschitz"
CONTRASTIVE = "Contrastive"
METHODS = (DISPERSION, HARD_DISPERSION, RANDOM_LABELING, GRADIENT_ASCENT, BOUNDARY_SHRINK, LIPSCHITZ,
           CONTRASTIVE)
ALIASES = {"disp": DISPERSION, "harddisp": HARD_DISPERSION, "rl": RANDOM_LABELING, "ga": GRADIENT_ASCENT,
           "bs": BOUNDARY_SHRINK, "lu": LIPSCHITZ, "cu": CONTRASTIVE}
SALIENCY_LOSSES = ("CosFaceGA", "Lipschitz", "EmbNorm")


class UnlearningDiverged(RuntimeError):
    """Raised when the loss or the parameters stop being finite; carries the partial trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def canonical_method(name: str) -> str:
    for m in METHODS:
        if name.lower() == m.lower():
            return m
    if name.lower() in ALIASES:
        return ALIASES[name.lower()]
    raise ValueError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")


@dataclass
class UnlearnConfig:
    method: str = DISPERSION
    lr: float = 1e-4
    iterations: int = 1000
    batch_size: int = 32
    identities_per_batch: int = 8
    m_disp: float = 0.2
    lambda_retain: float = 0.0
    epsilon_fgsm: float = 0.5
    lip_noise_std: float = 0.1
    lip_n: int = 25
    salun_fraction: float = 0.0
    salun_loss: str = "EmbNorm"
    tau: float = 0.1
    seed: int = 0
    head_freeze: bool = False
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip_augment: bool = False

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 2 or self.batch_size % self.identities_per_batch:
            raise ValueError("batch_size must be >= 2 and divisible by identities_per_batch")
        for name in ("m_disp", "lambda_retain", "epsilon_fgsm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.salun_fraction <= 1.0:
            raise ValueError("salun_fraction must lie in [0, 1]")
        if self.salun_loss not in SALIENCY_LOSSES:
            raise ValueError(f"salun_loss must be one of {SALIENCY_LOSSES}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lip_n < 1 or self.lip_noise_std <= 0:
            raise ValueError("lip_n must be >= 1 and lip_noise_std > 0")

    def to_dict(self) -> dict:
        return asdict(self)


# per-method settings from the shared protocol (lr, length, retain weight, extras)
DEFAULT_CONFIGS = {
    DISPERSION: dict(lr=1e-4, iterations=1000, m_disp=0.2, lambda_retain=0.0),
    HARD_DISPERSION: dict(lr=1e-4, iterations=1000, m_disp=0.2, lambda_retain=0.0),
    RANDOM_LABELING: dict(lr=1e-4, iterations=25, lambda_retain=1.0),
    GRADIENT_ASCENT: dict(lr=1e-5, iterations=50, lambda_retain=0.0),
    BOUNDARY_SHRINK: dict(lr=1e-5, iterations=500, lambda_retain=0.0),
    LIPSCHITZ: dict(lr=1e-4, iterations=1000, lambda_retain=0.05, salun_fraction=0.5, salun_loss="EmbNorm",
                    lip_noise_std=0.1, lip_n=25),
    CONTRASTIVE: dict(lr=1e-4, iterations=250, tau=0.1, lambda_retain=0.0),
}


def default_config(method: str, **overrides) -> UnlearnConfig:
    method = canonical_method(method)
    return UnlearnConfig(method=method, **{**DEFAULT_CONFIGS[method], **overrides})


@dataclass
class UnlearnResult:
    model: EncoderModel
    losses: list[float]
    config: UnlearnConfig
    wall_time: float
    abort_reason: str | None = None
    mask_size: int | None = None
    extras: dict = field(default_factory=dict)


# losses ------------------------------------------------------------------------

def _positive_mask(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same


def _zero_like_graph(t: ad.Tensor) -> ad.Tensor:
    return ad.sum(t * 0.0)


def dispersion_loss(emb: ad.Tensor, labels, m_disp: float) -> ad.Tensor:
    """Mean over anchors with positives of the mean hinge max(0, m + cos) over their positives."""
    pos = _positive_mask(labels)
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        warnings.warn("no anchor has an in-batch positive; dispersion loss defined as 0", stacklevel=2)
        return _zero_like_graph(emb)
    weights = np.zeros(pos.shape)
    weights[anchors] = pos[anchors] / counts[anchors, None]
    weights /= anchors.sum()
    cos = ad.cosine_matrix(emb, emb)
    return ad.sum(ad.hinge(cos + m_disp) * weights)


def hardest_positives(cos: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """(anchor rows, index of each anchor's most similar positive); ties go to the lower index."""
    pos = _positive_mask(labels)
    anchors = np.flatnonzero(pos.any(axis=1))
    masked = np.where(pos, cos, -np.inf)
    return anchors, np.argmax(masked[anchors], axis=1)


def hard_dispersion_loss(emb: ad.Tensor, labels, m_disp: float) -> ad.Tensor:
    """Mean over anchors of max(0, m + cos to the hardest positive)."""
    cos = ad.cosine_matrix(emb, emb)
    rows, cols = hardest_positives(cos.data, labels)
    if len(rows) == 0:
        warnings.warn("no anchor has an in-batch positive; hard dispersion loss defined as 0", stacklevel=2)
        return _zero_like_graph(emb)
    return ad.mean(ad.hinge(ad.take(cos, rows, cols) + m_disp))


def contrastive_unlearn_loss(forget_emb: ad.Tensor, retain_emb: ad.Tensor, forget_labels, tau: float) -> ad.Tensor:
    """Mean over forget anchors of log(sum_pos exp(cos/tau) / sum_retain exp(cos/tau))."""
    if forget_emb.shape[0] == 0 or retain_emb.shape[0] == 0:
        raise ValueError("contrastive loss needs non-empty forget and retain batches")
    pos = _positive_mask(forget_labels)
    anchors = pos.any(axis=1)
    if not anchors.any():
        warnings.warn("no forget anchor has a positive; contrastive loss defined as 0", stacklevel=2)
        return _zero_like_graph(forget_emb)
    # rows without positives get a placeholder mask and zero weight
    mask = pos.copy()
    mask[~anchors, 0] = True
    num = ad.masked_logsumexp(ad.cosine_matrix(forget_emb, forget_emb) * (1.0 / tau), mask)
    cross = ad.cosine_matrix(forget_emb, retain_emb) * (1.0 / tau)
    den = ad.masked_logsumexp(cross, np.ones(cross.shape, dtype=bool))
    weights = anchors / anchors.sum()
    return ad.sum((num - den) * weights)


def draw_deltas(rng: np.random.Generator, shape: tuple, noise_std: float, n: int, eps: float = 1e-12) -> np.ndarray:
    deltas = rng.standard_normal((n, *shape)) * noise_std
    norms = np.linalg.norm(deltas, axis=-1)
    while (norms < eps).any():
        bad = norms < eps
        deltas[bad] = rng.standard_normal((int(bad.sum()), shape[-1])) * noise_std
        norms = np.linalg.norm(deltas, axis=-1)
    return deltas


def lipschitz_loss(params: dict[str, ad.Tensor], inputs: np.ndarray, noise_std: float, n: int,
                   rng: np.random.Generator, embed_fn=None) -> ad.Tensor:
    """(1/n) sum_k mean_i ||f(I_i + d_ik) - f(I_i)|| / ||d_ik|| over Gaussian draws d."""
    embed_fn = embed_fn or embed_tensor
    B = len(inputs)
    deltas = draw_deltas(rng, inputs.shape, noise_std, n)
    stacked = np.concatenate([inputs, (inputs[None] + deltas).reshape(n * B, -1)])
    emb = embed_fn(params, stacked)
    base = ad.index_rows(emb, np.tile(np.arange(B), n))
    pert = ad.index_rows(emb, B + np.arange(n * B))
    ratio = ad.row_norm(pert - base) * (1.0 / np.linalg.norm(deltas, axis=-1).reshape(-1))
    return ad.mean(ratio)


def embedding_norm_loss(params: dict[str, ad.Tensor], inputs: np.ndarray) -> ad.Tensor:
    return ad.mean(ad.row_norm(forward(params, inputs)))


# FGSM / boundary labels ---------------------------------------------------------------

def fgsm_perturb(model: EncoderModel, inputs: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """inputs + epsilon * sign(d CosFace / d inputs); sign(0) = 0, parameters untouched."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if epsilon == 0:
        return inputs.copy()
    x = ad.Tensor(inputs.copy(), requires_grad=True)
    params = as_tensors(model, requires_grad=False)
    loss = cosface_from_embeddings(embed_tensor(params, x), params[HEAD], labels, model.s, model.m_cos)
    ad.backward(loss)
    return inputs + epsilon * np.sign(x.grad)


def adversarial_labels(model: EncoderModel, perturbed: np.ndarray) -> np.ndarray:
    """argmax_k cos(W_k, f(I')) with ties to the lowest class id."""
    params = as_tensors(model, requires_grad=False)
    emb = embed_tensor(params, perturbed).data
    head = model.params[HEAD]
    head = head / np.maximum(np.linalg.norm(head, axis=1, keepdims=True), ad.NORM_EPS)
    return np.argmax(emb @ head.T, axis=1)


# SalUn masks ----------------------------------------------------------------------------

def _saliency_objective(kind: str, model: EncoderModel, params, x, y, cfg: UnlearnConfig, rng) -> ad.Tensor:
    if kind == "CosFaceGA":
        return -cosface_from_embeddings(embed_tensor(params, x), params[HEAD], y, model.s, model.m_cos)
    if kind == "Lipschitz":
        return lipschitz_loss(params, x, cfg.lip_noise_std, cfg.lip_n, rng)
    return embedding_norm_loss(params, x)


def mask_from_scores(scores: dict[str, np.ndarray], fraction: float) -> dict[str, np.ndarray]:
    """Keep the top ceil(fraction * P) entries globally; ties go to the lower flat index."""
    names = list(scores)
    flat = np.concatenate([scores[k].reshape(-1) for k in names])
    keep = math.ceil(fraction * flat.size - 1e-9)
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size, dtype=np.float64)
    chosen[order[:keep]] = 1.0
    masks, pos = {}, 0
    for k in names:
        size = scores[k].size
        masks[k] = chosen[pos:pos + size].reshape(scores[k].shape)
        pos += size
    return masks


def salun_mask(model: EncoderModel, inputs: np.ndarray, labels: np.ndarray, fraction: float,
               saliency_loss: str = "EmbNorm", cfg: UnlearnConfig | None = None) -> dict[str, np.ndarray]:
    """Accumulate |grad| of a saliency loss over one ordered pass of the forget set."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    cfg = cfg or UnlearnConfig()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A1]))
    scores = {k: np.zeros_like(v) for k, v in model.params.items()}
    for start in range(0, len(labels), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        params = as_tensors(model)
        ad.backward(_saliency_objective(saliency_loss, model, params, inputs[sl], labels[sl], cfg, rng))
        for k, t in params.items():
            scores[k] += np.abs(t.grad)
    return mask_from_scores(scores, fraction)


# driver ---------------------------------------------------------------------------------

class RetainStream:
    """Round-robin batches over a pool that is reshuffled after every full pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("retain pool is empty")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(need, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class Pools:
    forget_x: np.ndarray
    forget_y: np.ndarray
    retain_x: np.ndarray
    retain_y: np.ndarray


def pools_from_split(ds: SyntheticDataset, plan: SplitPlan) -> Pools:
    f, r = plan.forget_train, plan.retain_train
    return Pools(ds.inputs[f], ds.labels[f], ds.inputs[r], ds.labels[r])


class _Context:
    def __init__(self, model: EncoderModel, pools: Pools, cfg: UnlearnConfig):
        self.model, self.pools, self.cfg = model, pools, cfg
        batch_ss, retain_ss, label_ss, noise_ss, aug_ss = np.random.SeedSequence([cfg.seed, 0x0A1]).spawn(5)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.label_rng = np.random.default_rng(label_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.aug_rng = np.random.default_rng(aug_ss)
        self._retain_ss = retain_ss
        self._retain: RetainStream | None = None

    def forget_batch(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.pools
        idx = sample_batch(p.forget_y, self.cfg.batch_size, self.cfg.identities_per_batch, self.batch_rng)
        return maybe_flip(p.forget_x[idx], self.cfg.flip_augment, self.aug_rng), p.forget_y[idx]

    def retain_batch(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.pools
        if self._retain is None:
            self._retain = RetainStream(len(p.retain_y), self.cfg.batch_size, np.random.default_rng(self._retain_ss))
        idx = self._retain.next()
        return maybe_flip(p.retain_x[idx], self.cfg.flip_augment, self.aug_rng), p.retain_y[idx]

    def cosface(self, params, x, y) -> ad.Tensor:
        m = self.model
        return cosface_from_embeddings(embed_tensor(params, x), params[HEAD], y, m.s, m.m_cos)

    def with_retain(self, loss: ad.Tensor, params) -> ad.Tensor:
        if self.cfg.lambda_retain > 0:
            xr, yr = self.retain_batch()
            loss = loss + self.cosface(params, xr, yr) * self.cfg.lambda_retain
        return loss


def _drive(model: EncoderModel, pools: Pools, cfg: UnlearnConfig, step_loss, masks=None) -> UnlearnResult:
    t0 = time.perf_counter()
    work = model.copy()
    ctx = _Context(work, pools, cfg)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    frozen = (HEAD,) if cfg.head_freeze else ()
    losses: list[float] = []
    # overflow is detected explicitly below, so numpy's warnings would only be noise
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations):
            params = as_tensors(work)
            loss = step_loss(ctx, params)
            value = loss.item()
            if not math.isfinite(value):
                raise UnlearningDiverged(f"non-finite loss at iteration {it}", losses)
            ad.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            opt.step(work.params, grads, cfg.lr, masks, frozen)
            losses.append(value)
            if not params_finite(work):
                raise UnlearningDiverged(f"non-finite loss: parameters overflowed at iteration {it}", losses)
    mask_size = int(sum(m.sum() for m in masks.values())) if masks is not None else None
    return UnlearnResult(work, losses, cfg, time.perf_counter() - t0, mask_size=mask_size)


def _check_method(cfg: UnlearnConfig, *allowed: str) -> None:
    if cfg.method not in allowed:
        raise ValueError(f"config method {cfg.method} cannot be run by this runner (expects {allowed})")


def _maybe_mask(model: EncoderModel, pools: Pools, cfg: UnlearnConfig):
    if cfg.salun_fraction <= 0:
        return None
    return salun_mask(model, pools.forget_x, pools.forget_y, cfg.salun_fraction, cfg.salun_loss, cfg)


def run_dispersion(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, DISPERSION, HARD_DISPERSION)
    loss_fn = hard_dispersion_loss if cfg.method == HARD_DISPERSION else dispersion_loss

    def step(ctx, params):
        x, y = ctx.forget_batch()
        return ctx.with_retain(loss_fn(embed_tensor(params, x), y, cfg.m_disp), params)

    return _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))


def run_random_labeling(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, RANDOM_LABELING)

    def step(ctx, params):
        x, _ = ctx.forget_batch()
        y_rand = ctx.label_rng.integers(0, model.K, size=len(x))
        return ctx.with_retain(ctx.cosface(params, x, y_rand), params)

    return _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))


def run_gradient_ascent(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, GRADIENT_ASCENT)

    def step(ctx, params):
        x, y = ctx.forget_batch()
        return ctx.with_retain(-ctx.cosface(params, x, y), params)

    return _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))


def run_boundary_shrink(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, BOUNDARY_SHRINK)
    flips = []

    def step(ctx, params):
        x, y = ctx.forget_batch()
        # adversarial labels come from the current weights, outside the tape
        snapshot = ctx.model
        y_adv = adversarial_labels(snapshot, fgsm_perturb(snapshot, x, y, cfg.epsilon_fgsm))
        flips.append(float(np.mean(y_adv != y)))
        return ctx.with_retain(ctx.cosface(params, x, y_adv), params)

    result = _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))
    result.extras["label_flip_rate"] = flips
    return result


def run_lipschitz(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, LIPSCHITZ)

    def step(ctx, params):
        x, _ = ctx.forget_batch()
        return ctx.with_retain(lipschitz_loss(params, x, cfg.lip_noise_std, cfg.lip_n, ctx.noise_rng), params)

    return _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))


def run_contrastive(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    _check_method(cfg, CONTRASTIVE)

    def step(ctx, params):
        xf, yf = ctx.forget_batch()
        xr, yr = ctx.retain_batch()
        emb = embed_tensor(params, np.concatenate([xf, xr]))
        n = len(xf)
        fe = ad.index_rows(emb, np.arange(n))
        re = ad.index_rows(emb, n + np.arange(len(xr)))
        loss = contrastive_unlearn_loss(fe, re, yf, cfg.tau)
        if cfg.lambda_retain > 0:
            loss = loss + cosface_from_embeddings(re, params[HEAD], yr, model.s, model.m_cos) * cfg.lambda_retain
        return loss

    return _drive(model, pools, cfg, step, _maybe_mask(model, pools, cfg))


RUNNERS = {
    DISPERSION: run_dispersion,
    HARD_DISPERSION: run_dispersion,
    RANDOM_LABELING: run_random_labeling,
    GRADIENT_ASCENT: run_gradient_ascent,
    BOUNDARY_SHRINK: run_boundary_shrink,
    LIPSCHITZ: run_lipschitz,
    CONTRASTIVE: run_contrastive,
}


def run(model: EncoderModel, pools: Pools, cfg: UnlearnConfig) -> UnlearnResult:
    return RUNNERS[cfg.method](model, pools, cfg)


def with_seed(cfg: UnlearnConfig, seed: int) -> UnlearnConfig:
    return replace(cfg, seed=seed)
