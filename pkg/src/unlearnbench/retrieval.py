"""Retrieval benchmark construction and metrics: AP/mAP, CMC Rank-1, compactness, centroid accuracy."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .data import SplitPlan, SyntheticDataset
from .encoder import EncoderModel, centroid_classify, embed

log = logging.getLogger(__name__)

SOURCE_FORGET_TEST = "forget-test"
SOURCE_DISTRACTOR = "distractor"
SOURCE_NATIVE = "native"


class BenchmarkError(ValueError):
    pass


@dataclass
class RetrievalBenchmark:
    query_emb: np.ndarray
    query_labels: np.ndarray
    query_ids: np.ndarray
    gallery_emb: np.ndarray
    gallery_labels: np.ndarray
    gallery_ids: np.ndarray
    gallery_source: list[str]
    # (query sample id, gallery sample id) pairs that must never be scored
    exclusions: set = field(default_factory=set)

    @property
    def n_queries(self) -> int:
        return len(self.query_labels)

    def excluded_mask(self, q: int) -> np.ndarray:
        qid = int(self.query_ids[q])
        return np.array([(qid, int(g)) in self.exclusions for g in self.gallery_ids], dtype=bool)


def build_benchmark(queries: tuple, distractors: tuple, mode: str = "base",
                    extra: tuple | None = None, source: str = SOURCE_FORGET_TEST) -> RetrievalBenchmark:
    """Queries vs. (queries' own images + distractor pool [+ extra distractors]).

    Each argument is an ``(embeddings, labels, sample_ids)`` triple. Every query's
    own gallery copy is recorded as an exclusion pair (self-match removal).
    """
    q_emb, q_lab, q_ids = (np.asarray(v) for v in queries)
    if len(q_lab) == 0:
        raise BenchmarkError("benchmark needs at least one query")
    if mode not in ("base", "extended"):
        raise BenchmarkError(f"mode must be 'base' or 'extended', got {mode!r}")
    d_emb, d_lab, d_ids = (np.asarray(v) for v in distractors)
    parts = [(q_emb, q_lab, q_ids, source), (d_emb, d_lab, d_ids, SOURCE_DISTRACTOR)]
    if mode == "extended":
        if extra is None or len(extra[1]) == 0 or len(d_lab) == 0:
            raise BenchmarkError("extended mode needs a non-empty distractor pool and extra distractors")
        e_emb, e_lab, e_ids = (np.asarray(v) for v in extra)
        parts.append((e_emb, e_lab, e_ids, SOURCE_DISTRACTOR))
    parts = [p for p in parts if len(p[1])]
    g_emb = np.concatenate([p[0] for p in parts])
    g_lab = np.concatenate([p[1] for p in parts])
    g_ids = np.concatenate([p[2] for p in parts])
    tags = [p[3] for p in parts for _ in range(len(p[1]))]
    if len(np.unique(g_ids)) != len(g_ids):
        raise BenchmarkError("gallery sample ids must be unique")
    exclusions = {(int(i), int(i)) for i in q_ids}
    return RetrievalBenchmark(q_emb, q_lab, q_ids, g_emb, g_lab, g_ids, tags, exclusions)


def _order(sims: np.ndarray, tie_keys: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # descending similarity, ties by ascending stable sample id
    order = np.lexsort((tie_keys, -sims))
    return order[keep[order]]


def rank_gallery(query_emb: np.ndarray, bench: RetrievalBenchmark, query_index: int | None = None) -> np.ndarray:
    """Gallery positions sorted by descending cosine; excluded items omitted."""
    sims = bench.gallery_emb @ np.asarray(query_emb)
    keep = np.ones(len(sims), dtype=bool) if query_index is None else ~bench.excluded_mask(query_index)
    return _order(sims, bench.gallery_ids, keep)


def average_precision(relevant) -> float:
    """Mean of precision@k over the ranks k that hold a relevant item."""
    rel = np.asarray(relevant, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise BenchmarkError("average_precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


@dataclass
class RetrievalResult:
    mAP: float
    R1: float
    n_queries: int
    dropped: int
    ap: np.ndarray


def evaluate(bench: RetrievalBenchmark) -> RetrievalResult:
    """mAP and CMC Rank-1 (both in percent) over queries with >= 1 valid relevant item."""
    sims = bench.query_emb @ bench.gallery_emb.T
    aps, top1 = [], []
    dropped = 0
    id_pos = {int(g): i for i, g in enumerate(bench.gallery_ids)}
    excluded: dict[int, list[int]] = {}
    for a, b in bench.exclusions:
        if b in id_pos:
            excluded.setdefault(a, []).append(id_pos[b])
    for q in range(bench.n_queries):
        keep = np.ones(len(bench.gallery_ids), dtype=bool)
        keep[excluded.get(int(bench.query_ids[q]), [])] = False
        order = _order(sims[q], bench.gallery_ids, keep)
        rel = bench.gallery_labels[order] == bench.query_labels[q]
        if not rel.any():
            dropped += 1
            continue
        aps.append(average_precision(rel))
        top1.append(bool(rel[0]))
    if not aps:
        raise BenchmarkError("no query has a valid relevant gallery item")
    if dropped:
        log.info("dropped %d queries without a relevant gallery item", dropped)
    return RetrievalResult(100.0 * float(np.mean(aps)), 100.0 * float(np.mean(top1)), len(aps), dropped,
                           np.asarray(aps))


def compactness_score(embeddings: np.ndarray, labels: np.ndarray, identities=None) -> float:
    """Unweighted mean over identities of the mean off-diagonal within-identity cosine."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    identities = np.unique(labels) if identities is None else np.asarray(identities)
    scores = []
    for p in identities:
        x = embeddings[labels == p]
        n = len(x)
        if n < 2:
            warnings.warn(f"identity {p} has {n} sample(s); skipped in compactness score", stacklevel=2)
            continue
        g = x @ x.T
        scores.append((g.sum() - np.trace(g)) / (n * (n - 1)))
    if not scores:
        raise BenchmarkError("no identity with at least two samples")
    return float(np.mean(scores))


def centroid_accuracy(train_emb, train_labels, test_emb, test_labels) -> float:
    pred = centroid_classify(train_emb, train_labels, test_emb)
    return 100.0 * float(np.mean(pred == np.asarray(test_labels)))


# full report ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    map_forget: float
    r1_forget: float
    map_retain: float
    r1_retain: float
    cs_forget: float
    cs_retain: float
    acc_forget: float
    acc_retain: float
    dropped_query_count: int = 0
    meta: dict = field(default_factory=dict)

    METRICS = ("map_forget", "r1_forget", "map_retain", "r1_retain",
               "cs_forget", "cs_retain", "acc_forget", "acc_retain")

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.METRICS}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkConfig:
    mode: str = "base"


@dataclass
class EmbeddedSplits:
    emb: np.ndarray
    distractor_emb: np.ndarray
    extra_emb: np.ndarray


def embed_splits(model: EncoderModel, ds: SyntheticDataset, plan: SplitPlan) -> EmbeddedSplits:
    extra = embed(model, plan.extra_inputs) if len(plan.extra_labels) else np.zeros((0, model.d))
    return EmbeddedSplits(embed(model, ds.inputs), embed(model, plan.distractor_inputs), extra)


def metrics_for(model: EncoderModel, ds: SyntheticDataset, plan: SplitPlan, mode: str = "base",
                embedded: EmbeddedSplits | None = None) -> MetricsReport:
    e = embedded or embed_splits(model, ds, plan)
    ids = np.arange(len(ds))
    distractors = (e.distractor_emb, plan.distractor_labels, plan.distractor_ids)
    extra = (e.extra_emb, plan.extra_labels, plan.extra_ids)
    ft, rt, tr = plan.forget_test, plan.retain_test, plan.train
    forget_bench = build_benchmark((e.emb[ft], ds.labels[ft], ids[ft]), distractors, mode, extra)
    retain_bench = build_benchmark((e.emb[rt], ds.labels[rt], ids[rt]), distractors, mode, extra,
                                   source=SOURCE_NATIVE)
    fr, rr = evaluate(forget_bench), evaluate(retain_bench)
    pred = centroid_classify(e.emb[tr], ds.labels[tr], e.emb)
    correct = pred == ds.labels
    return MetricsReport(
        map_forget=fr.mAP, r1_forget=fr.R1, map_retain=rr.mAP, r1_retain=rr.R1,
        cs_forget=compactness_score(e.emb[ft], ds.labels[ft]),
        cs_retain=compactness_score(e.emb[rt], ds.labels[rt]),
        acc_forget=100.0 * float(correct[ft].mean()), acc_retain=100.0 * float(correct[rt].mean()),
        dropped_query_count=fr.dropped + rr.dropped,
        meta={"mode": mode, "split_seed": plan.seed},
    )


def full_report(original: EncoderModel, unlearned: EncoderModel, ds: SyntheticDataset, plan: SplitPlan,
                cfg: BenchmarkConfig | None = None) -> tuple[MetricsReport, MetricsReport, dict]:
    """Before/after metrics plus deltas (before - after, so forgetting shows as a positive drop)."""
    cfg = cfg or BenchmarkConfig()
    if original.arch()["D_in"] != unlearned.arch()["D_in"] or original.d != unlearned.d:
        raise BenchmarkError("models do not share an architecture")
    before = metrics_for(original, ds, plan, cfg.mode)
    after = before if unlearned is original else metrics_for(unlearned, ds, plan, cfg.mode)
    deltas = {k: before.values()[k] - after.values()[k] for k in MetricsReport.METRICS}
    return before, after, deltas


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) standard deviation per metric across seeds."""
    out = {}
    for k in MetricsReport.METRICS:
        v = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = (float(v.mean()), float(v.std()))
    return out


# embedding dump ---------------------------------------------------------------------

def save_embedding_dump(path, sample_ids: np.ndarray, identities: np.ndarray, emb: np.ndarray,
                        meta: dict | None = None, partition: np.ndarray | None = None) -> Path:
    """Rows of (sample id, identity, partition code, embedding); partition -1 marks distractors."""
    if partition is None:
        partition = np.full(len(sample_ids), -1)
    header = {"version": 1, "d": int(emb.shape[1]), "rows": int(len(sample_ids)), "meta": meta or {}}
    return container.write(path, "embeddings", header,
                           {"sample_id": np.asarray(sample_ids), "identity": np.asarray(identities),
                            "partition": np.asarray(partition, dtype=np.int64), "emb": emb})


def load_embedding_dump(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Returns (sample ids, identities, embeddings, header); header["partition"] holds the codes."""
    h, a = container.read(path, "embeddings")
    h["partition"] = a["partition"]
    return a["sample_id"], a["identity"], a["emb"], h


# report rendering ---------------------------------------------------------------------

TABLE_COLUMNS = [
    ("map_forget", "Df mAP"), ("r1_forget", "Df R@1"), ("map_retain", "Dr mAP"), ("r1_retain", "Dr R@1"),
    ("cs_forget", "Df CS"), ("cs_retain", "Dr CS"), ("acc_forget", "Df Acc"), ("acc_retain", "Dr Acc"),
]


def _fmt(key: str, mean: float, std: float | None) -> str:
    digits = 3 if key.startswith("cs") else 2
    m = f"{mean:.{digits}f}"
    if float(m) == 0.0:
        m = f"{0.0:.{digits}f}"
    if std is None:
        return m
    return f"{m} ± {std:.{digits}f}"


def markdown_table(rows: list[tuple[str, dict]], columns=TABLE_COLUMNS) -> str:
    """Aligned Markdown table; each row is (label, {metric: (mean, std) or value or str})."""
    header = ["Method"] + [c[1] for c in columns]
    body = []
    for label, vals in rows:
        cells = [label]
        for key, _ in columns:
            v = vals.get(key)
            if isinstance(v, str):
                cells.append(v)
            elif isinstance(v, (tuple, list)):
                cells.append(_fmt(key, v[0], v[1]))
            elif v is None:
                cells.append("-")
            else:
                cells.append(_fmt(key, float(v), None))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"
