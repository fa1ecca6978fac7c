"""Synthetic identity-clustered data, forget/retain splits and the PK sampler."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

log = logging.getLogger(__name__)

FORGET_TRAIN, FORGET_TEST, RETAIN_TRAIN, RETAIN_TEST = 0, 1, 2, 3
PART_NAMES = ("forget-train", "forget-test", "retain-train", "retain-test")


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray
    label: int
    sample_id: int


@dataclass
class WorldTransform:
    """Fixed random map prototype space -> input space: w2 @ tanh(w1 @ z + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.w1.T + self.b1) @ self.w2.T + self.b2


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    labels: np.ndarray
    K: int
    D_in: int
    seed: int
    prototype_dim: int
    noise_std: float
    world: WorldTransform
    hidden: int = 64
    duplicate_prob: float = 0.0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(self.inputs[i], int(self.labels[i]), i) for i in range(len(self))]

    @property
    def generator_params(self) -> dict:
        return {"prototype_dim": self.prototype_dim, "intra_class_noise_std": self.noise_std,
                "hidden": self.hidden, "duplicate_prob": self.duplicate_prob}

    def draw_identities(self, n_samples: int, per_identity: int, seed: int, label_offset: int):
        """Fresh identities from the same generator (used for distractor pools)."""
        ss = np.random.SeedSequence([self.seed, 0xD157, seed])
        rng = np.random.default_rng(ss)
        n_ids = max(1, math.ceil(n_samples / per_identity))
        protos = _sphere(rng, n_ids, self.prototype_dim)
        labels = np.arange(n_samples) // per_identity
        z = protos[labels] + _noise(rng, n_samples, self.prototype_dim, self.noise_std)
        return self.world(z), labels + label_offset


def _sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _noise(rng, n, dim, noise_std):
    # isotropic, scaled so the expected noise norm is about noise_std
    return rng.standard_normal((n, dim)) * (noise_std / math.sqrt(dim))


def generate(K: int, per_identity: int, D_in: int, seed: int, noise_std: float,
             prototype_dim: int = 12, hidden: int = 64, world_gain: float = 3.0,
             duplicate_prob: float = 0.0) -> SyntheticDataset:
    """Sphere prototypes + Gaussian intra-class noise pushed through a fixed world map."""
    if K < 2 or per_identity < 2:
        raise DataValidationError(f"need K >= 2 and per_identity >= 2 (got K={K}, per_identity={per_identity})")
    if noise_std < 0 or D_in < 1 or prototype_dim < 1:
        raise DataValidationError("noise_std must be >= 0 and dimensions positive")
    if not 0.0 <= duplicate_prob < 1.0:
        raise DataValidationError("duplicate_prob must lie in [0, 1)")
    world_ss, proto_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    wrng = np.random.default_rng(world_ss)
    world = WorldTransform(
        w1=wrng.standard_normal((hidden, prototype_dim)) * world_gain,
        b1=wrng.standard_normal(hidden) * 0.1,
        w2=wrng.standard_normal((D_in, hidden)) / math.sqrt(hidden),
        b2=np.zeros(D_in),
    )
    protos = _sphere(np.random.default_rng(proto_ss), K, prototype_dim)
    labels = np.repeat(np.arange(K), per_identity)
    nrng = np.random.default_rng(noise_ss)
    z = protos[labels] + _noise(nrng, len(labels), prototype_dim, noise_std)
    if duplicate_prob > 0:
        # near-duplicates: copy the identity's first sample with a tiny jitter
        dup = nrng.random(len(labels)) < duplicate_prob
        dup[::per_identity] = False
        firsts = (np.arange(len(labels)) // per_identity) * per_identity
        z[dup] = z[firsts[dup]] + _noise(nrng, int(dup.sum()), prototype_dim, noise_std * 0.05)
    return SyntheticDataset(world(z), labels, K, D_in, seed, prototype_dim, float(noise_std), world,
                            hidden, float(duplicate_prob))


def flip_inputs(x: np.ndarray) -> np.ndarray:
    """Horizontal-flip analog: a fixed reversal of the feature order."""
    return x[..., ::-1]


# splits -------------------------------------------------------------------

@dataclass
class SplitPlan:
    forget_identities: np.ndarray
    assignment: np.ndarray
    seed: int
    train_frac: float
    distractor_inputs: np.ndarray
    distractor_labels: np.ndarray
    extra_inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    extra_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_samples: int = 0

    def indices(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == part)

    @property
    def forget_train(self) -> np.ndarray:
        return self.indices(FORGET_TRAIN)

    @property
    def forget_test(self) -> np.ndarray:
        return self.indices(FORGET_TEST)

    @property
    def retain_train(self) -> np.ndarray:
        return self.indices(RETAIN_TRAIN)

    @property
    def retain_test(self) -> np.ndarray:
        return self.indices(RETAIN_TEST)

    @property
    def train(self) -> np.ndarray:
        return np.flatnonzero((self.assignment == FORGET_TRAIN) | (self.assignment == RETAIN_TRAIN))

    @property
    def distractor_ids(self) -> np.ndarray:
        return self.n_samples + np.arange(len(self.distractor_labels))

    @property
    def extra_ids(self) -> np.ndarray:
        return self.n_samples + len(self.distractor_labels) + np.arange(len(self.extra_labels))


def make_split(ds: SyntheticDataset, n_forget: int, train_frac: float, seed: int,
               distractor_factor: float = 20.0, extra_distractors: int = 0) -> SplitPlan:
    """Sample the forget identities and a per-identity train/test partition (ceil semantics)."""
    if not 0 < n_forget < ds.K:
        raise DataValidationError(f"n_forget must satisfy 0 < n_forget < K={ds.K}, got {n_forget}")
    if not 0.0 < train_frac < 1.0:
        raise DataValidationError(f"train_frac must lie in (0, 1), got {train_frac}")
    rng = np.random.default_rng(np.random.SeedSequence([ds.seed, 0x5917, seed]))
    forget = np.sort(rng.choice(ds.K, size=n_forget, replace=False))
    is_forget = np.isin(ds.labels, forget)
    assignment = np.empty(len(ds), dtype=np.int64)
    for k in range(ds.K):
        idx = np.flatnonzero(ds.labels == k)
        perm = rng.permutation(idx)
        n_train = math.ceil(train_frac * len(idx))
        train_part, test_part = (FORGET_TRAIN, FORGET_TEST) if is_forget[idx[0]] else (RETAIN_TRAIN, RETAIN_TEST)
        assignment[perm[:n_train]] = train_part
        assignment[perm[n_train:]] = test_part
    per_identity = int(np.bincount(ds.labels).max())
    n_forget_test = int((assignment == FORGET_TEST).sum())
    n_distract = int(round(distractor_factor * n_forget_test))
    d_inputs, d_labels = ds.draw_identities(n_distract, per_identity, seed, label_offset=ds.K)
    plan = SplitPlan(forget, assignment, seed, float(train_frac), d_inputs, d_labels, n_samples=len(ds))
    if extra_distractors:
        offset = int(d_labels.max()) + 1 if len(d_labels) else ds.K
        e_inputs, e_labels = ds.draw_identities(extra_distractors, per_identity, seed + 7919, label_offset=offset)
        plan.extra_inputs, plan.extra_labels = e_inputs, e_labels
    else:
        plan.extra_inputs = np.zeros((0, ds.D_in))
    return plan


# PK sampler ------------------------------------------------------------------

def sample_batch(pool_labels: np.ndarray, B: int, identities_per_batch: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Identity-balanced batch: P identities x B/P samples each. Returns pool positions."""
    pool_labels = np.asarray(pool_labels)
    if len(pool_labels) == 0:
        raise DataValidationError("cannot sample from an empty pool")
    if identities_per_batch < 1 or B % identities_per_batch:
        raise DataValidationError(f"B={B} must be divisible by identities_per_batch={identities_per_batch}")
    ids = np.unique(pool_labels)
    if len(ids) < identities_per_batch:
        raise DataValidationError(f"pool has {len(ids)} identities, batch needs {identities_per_batch}")
    per = B // identities_per_batch
    chosen = rng.choice(ids, size=identities_per_batch, replace=False)
    out = []
    for ident in chosen:
        members = np.flatnonzero(pool_labels == ident)
        out.append(rng.choice(members, size=per, replace=len(members) < per))
    return np.concatenate(out)


# leakage check -------------------------------------------------------------------

@dataclass
class LeakageReport:
    max_cosine: float
    histogram: list[int]
    bin_edges: list[float]
    flagged: list[tuple[int, int, float]]
    threshold: float

    @property
    def clean(self) -> bool:
        return not self.flagged


def leakage_check(forget_centroids: np.ndarray, distractor_centroids: np.ndarray,
                  threshold: float = 0.8, bins: int = 20) -> LeakageReport:
    """Cross-set centroid cosines between forget identities and distractor identities."""
    cos = np.asarray(forget_centroids) @ np.asarray(distractor_centroids).T
    hist, edges = np.histogram(cos.ravel(), bins=bins, range=(-1.0, 1.0))
    rows, cols = np.nonzero(cos > threshold)
    flagged = [(int(i), int(j), float(cos[i, j])) for i, j in zip(rows, cols)]
    return LeakageReport(float(cos.max()) if cos.size else float("-inf"), hist.tolist(),
                         edges.tolist(), flagged, threshold)


def identity_centroids(embeddings: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ids = np.unique(labels)
    cents = np.stack([embeddings[labels == k].mean(axis=0) for k in ids])
    cents /= np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
    return ids, cents


# serialization ---------------------------------------------------------------------

def save_dataset(ds: SyntheticDataset, path) -> Path:
    header = {"version": 1, "K": ds.K, "D_in": ds.D_in, "seed": ds.seed,
              "generator_params": ds.generator_params}
    arrays = {"inputs": ds.inputs, "labels": ds.labels, "w1": ds.world.w1, "b1": ds.world.b1,
              "w2": ds.world.w2, "b2": ds.world.b2}
    return container.write(path, "dataset", header, arrays)


def load_dataset(path) -> SyntheticDataset:
    h, a = container.read(path, "dataset")
    gp = h["generator_params"]
    world = WorldTransform(a["w1"], a["b1"], a["w2"], a["b2"])
    return SyntheticDataset(a["inputs"], a["labels"], h["K"], h["D_in"], h["seed"], gp["prototype_dim"],
                            gp["intra_class_noise_std"], world, gp["hidden"], gp["duplicate_prob"])


def save_split(plan: SplitPlan, path) -> Path:
    header = {"version": 1, "seed": plan.seed, "train_frac": plan.train_frac, "n_samples": plan.n_samples}
    arrays = {"forget_identities": plan.forget_identities, "assignment": plan.assignment,
              "distractor_inputs": plan.distractor_inputs, "distractor_labels": plan.distractor_labels,
              "extra_inputs": plan.extra_inputs, "extra_labels": plan.extra_labels}
    return container.write(path, "split", header, arrays)


def load_split(path) -> SplitPlan:
    h, a = container.read(path, "split")
    return SplitPlan(a["forget_identities"], a["assignment"], h["seed"], h["train_frac"],
                     a["distractor_inputs"], a["distractor_labels"], a["extra_inputs"], a["extra_labels"],
                     h["n_samples"])
