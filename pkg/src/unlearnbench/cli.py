"""Command-line harness: generate, train, unlearn, evaluate, sweep, report.

Every command is a thin wrapper over the stage functions below, which are usable
directly from Python and produce the same files.  Artifacts carry the tool version
and config hash; wall-clock timings go to ``*.timing.json`` sidecars so the rest
of the output is byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import data, encoder, retrieval, unlearn
from .config import ConfigError, ExperimentConfig
from .container import ContainerError

log = logging.getLogger("unlearnbench")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

SWEEP_COLUMNS = [
    ("map_forget", "Df mAP"), ("r1_forget", "Df R@1"), ("r1_retain", "Dr R@1"),
    ("cs_forget", "Df CS"), ("cs_retain", "Dr CS"), ("acc_forget", "Df Acc"), ("acc_retain", "Dr Acc"),
]


class SnapshotMismatch(ConfigError):
    pass


# layout ------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.bin"

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed-{seed}"

    def split(self, seed: int) -> Path:
        return self.seed_dir(seed) / "split.bin"

    def original(self, seed: int) -> Path:
        return self.seed_dir(seed) / "original.bin"

    def unlearned(self, seed: int, method: str) -> Path:
        return self.seed_dir(seed) / f"{method}.bin"

    def metrics(self, method: str) -> Path:
        return self.root / f"metrics-{method}.json"

    @property
    def sweep_dir(self) -> Path:
        return self.root / "sweep"


def layout(cfg: ExperimentConfig) -> Layout:
    return Layout(Path(cfg.output.dir))


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def write_csv(path: Path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def timing_path(path: Path) -> Path:
    return path.with_name(path.stem + ".timing.json")


# stages ------------------------------------------------------------------------

def make_dataset(cfg: ExperimentConfig) -> data.SyntheticDataset:
    d = cfg.data
    return data.generate(d.K, d.per_identity, d.D_in, d.seed, d.noise_std, prototype_dim=d.prototype_dim,
                         hidden=d.hidden, world_gain=d.world_gain)


def make_plan(cfg: ExperimentConfig, ds: data.SyntheticDataset, seed: int) -> data.SplitPlan:
    d = cfg.data
    return data.make_split(ds, d.n_forget, d.train_frac, seed, d.distractor_factor, d.extra_distractors)


def stage_generate(cfg: ExperimentConfig) -> list[Path]:
    lay = layout(cfg)
    ds = make_dataset(cfg)
    out = [data.save_dataset(ds, lay.dataset)]
    for seed in cfg.eval.seeds:
        out.append(data.save_split(make_plan(cfg, ds, seed), lay.split(seed)))
    return out


def load_inputs(cfg: ExperimentConfig, seed: int) -> tuple[data.SyntheticDataset, data.SplitPlan]:
    """Dataset and split for a seed, generating them if the files are missing."""
    lay = layout(cfg)
    if not lay.dataset.exists() or not lay.split(seed).exists():
        stage_generate(cfg)
    return data.load_dataset(lay.dataset), data.load_split(lay.split(seed))


def train_original(cfg: ExperimentConfig, ds: data.SyntheticDataset, plan: data.SplitPlan,
                   seed: int) -> tuple[encoder.EncoderModel, list[float]]:
    m = cfg.model
    model = encoder.init_model(ds.D_in, ds.K, d=m.d, hidden=tuple(m.hidden), s=m.s, m_cos=m.m_cos, seed=seed)
    tr = plan.train
    return encoder.train(model, ds.inputs[tr], ds.labels[tr], cfg.train.to_train_config(seed))


def stage_train(cfg: ExperimentConfig, seed: int, force: bool = False) -> Path:
    lay = layout(cfg)
    path = lay.original(seed)
    want = cfg.stage_hash("train", seed)
    if path.exists() and not force:
        _, meta = encoder.load_model(path)
        if meta.get("stage_hash") != want:
            raise SnapshotMismatch(f"train: existing snapshot {path} was built from a different config "
                                   f"(hash {meta.get('stage_hash', '?')[:12]} != {want[:12]}); use --force")
        log.info("reusing %s", path)
        return path
    ds, plan = load_inputs(cfg, seed)
    t0 = time.perf_counter()
    model, curve = train_original(cfg, ds, plan, seed)
    meta = {**cfg.provenance(), "stage_hash": want, "seed": seed, "final_loss": curve[-1]}
    encoder.save_model(model, path, meta)
    write_csv(lay.seed_dir(seed) / "original_loss.csv", ["epoch", "loss"],
              [(i + 1, repr(v)) for i, v in enumerate(curve)])
    write_json(timing_path(path), {"train_seconds": time.perf_counter() - t0})
    return path


def load_original(cfg: ExperimentConfig, seed: int) -> encoder.EncoderModel:
    path = stage_train(cfg, seed)
    return encoder.load_model(path)[0]


def stage_unlearn(cfg: ExperimentConfig, seed: int, method: str | None = None) -> Path:
    lay = layout(cfg)
    ucfg = cfg.unlearn.base_config(method, seed=seed)
    ds, plan = load_inputs(cfg, seed)
    original = load_original(cfg, seed)
    res = unlearn.run(original, unlearn.pools_from_split(ds, plan), ucfg)
    path = lay.unlearned(seed, ucfg.method)
    prov = cfg.provenance()
    encoder.save_model(res.model, path, {**prov, "seed": seed, "unlearn": ucfg.to_dict()})
    run = {**prov, "seed": seed, "method": ucfg.method, "unlearn": ucfg.to_dict(), "iterations": len(res.losses),
           "loss_trace": res.losses, "mask_size": res.mask_size,
           "abort_reason": res.abort_reason, "extras": res.extras}
    write_json(path.with_suffix(".run.json"), run)
    write_csv(path.with_name(f"{ucfg.method}_loss.csv"), ["iteration", "loss"],
              [(i, repr(v)) for i, v in enumerate(res.losses)])
    write_json(timing_path(path), {"unlearn_seconds": res.wall_time})
    return path


def _dump_embeddings(path: Path, model: encoder.EncoderModel, ds: data.SyntheticDataset,
                     plan: data.SplitPlan, meta: dict) -> None:
    emb = np.concatenate([encoder.embed(model, ds.inputs), encoder.embed(model, plan.distractor_inputs)])
    ids = np.concatenate([np.arange(len(ds)), plan.distractor_ids])
    labels = np.concatenate([ds.labels, plan.distractor_labels])
    part = np.concatenate([plan.assignment, np.full(len(plan.distractor_labels), -1)])
    retrieval.save_embedding_dump(path, ids, labels, emb, {**meta, "partition_codes": list(data.PART_NAMES)}, part)


def _stats(reports: list[dict]) -> dict:
    out = {}
    for k in retrieval.MetricsReport.METRICS:
        v = np.array([r[k] for r in reports], dtype=np.float64)
        out[k] = [float(v.mean()), float(v.std())]
    return out


def evaluate_pair(original: encoder.EncoderModel, unlearned: encoder.EncoderModel, ds, plan,
                  mode: str) -> dict:
    before, after, deltas = retrieval.full_report(original, unlearned, ds, plan, retrieval.BenchmarkConfig(mode))
    f = plan.forget_identities
    emb = encoder.embed(original, ds.inputs)
    d_emb = encoder.embed(original, plan.distractor_inputs)
    mask = np.isin(ds.labels, f)
    _, fc = data.identity_centroids(emb[mask], ds.labels[mask])
    _, dc = data.identity_centroids(d_emb, plan.distractor_labels)
    leak = data.leakage_check(fc, dc)
    return {"before": before.values(), "after": after.values(), "deltas": deltas,
            "dropped_queries": after.dropped_query_count, "leakage_max_cosine": leak.max_cosine,
            "leakage_flagged": len(leak.flagged)}


def stage_evaluate(cfg: ExperimentConfig, method: str | None = None, original_path: Path | None = None,
                   unlearned_path: Path | None = None) -> tuple[Path, Path]:
    lay = layout(cfg)
    name = method or cfg.unlearn.method
    if unlearned_path is not None:
        label = Path(unlearned_path).stem
    else:
        label = unlearn.canonical_method(name)
    per_seed = []
    for seed in cfg.eval.seeds:
        ds, plan = load_inputs(cfg, seed)
        orig = encoder.load_model(original_path)[0] if original_path else load_original(cfg, seed)
        if unlearned_path is not None:
            upath = Path(unlearned_path)
        else:
            upath = lay.unlearned(seed, label)
            if not upath.exists():
                stage_unlearn(cfg, seed, label)
        unl = encoder.load_model(upath)[0]
        if original_path and Path(original_path).resolve() == upath.resolve():
            unl = orig
        row = evaluate_pair(orig, unl, ds, plan, cfg.eval.mode)
        row["seed"] = seed
        per_seed.append(row)
        meta = {"tool_version": __version__, "config_hash": cfg.hash(), "seed": seed}
        _dump_embeddings(lay.seed_dir(seed) / "emb-original.bin", orig, ds, plan, meta)
        _dump_embeddings(lay.seed_dir(seed) / f"emb-{label}.bin", unl, ds, plan, meta)
    result = {**cfg.provenance(), "method": label, "seeds": list(cfg.eval.seeds), "per_seed": per_seed,
              "before": _stats([r["before"] for r in per_seed]),
              "after": _stats([r["after"] for r in per_seed]),
              "deltas": _stats([r["deltas"] for r in per_seed])}
    jpath = write_json(lay.metrics(label), result)
    rows = [("Original", result["before"]), (label, result["after"]), ("Drop", result["deltas"])]
    mpath = lay.metrics(label).with_suffix(".md")
    mpath.write_text(f"<!-- config {cfg.hash()} tool {__version__} -->\n" + retrieval.markdown_table(rows))
    return jpath, mpath


# sweep ----------------------------------------------------------------------------

def _run_cell(job: dict) -> dict:
    """One (cell, seed) unit of a sweep; never raises."""
    cfg = cfgmod.from_dict(job["config"])
    seed, cell = job["seed"], job["cell"]
    lay = layout(cfg)
    try:
        ucfg = cfg.unlearn.base_config(cell.get("method"), seed=seed, extra=cell)
        ds, plan = data.load_dataset(lay.dataset), data.load_split(lay.split(seed))
        original = encoder.load_model(lay.original(seed))[0]
        t0 = time.perf_counter()
        res = unlearn.run(original, unlearn.pools_from_split(ds, plan), ucfg)
        report = retrieval.metrics_for(res.model, ds, plan, cfg.eval.mode)
        return {"status": "ok", "metrics": report.values(), "seconds": time.perf_counter() - t0}
    except unlearn.UnlearningDiverged as e:
        return {"status": "failed", "reason": str(e)}
    except Exception as e:  # noqa: BLE001 - a broken cell is data, not a crash
        return {"status": "failed", "reason": f"{type(e).__name__}: {e}"}


def cell_key(cfg: ExperimentConfig, cell: dict) -> str:
    ucfg = cfg.unlearn.base_config(cell.get("method"), extra=cell).to_dict()
    ucfg.pop("seed")
    return cfgmod.sha256_of(ucfg)


def stage_sweep(cfg: ExperimentConfig, jobs: int = 1) -> tuple[Path, Path]:
    lay = layout(cfg)
    cells = cfg.unlearn.expand_grid()
    if not cells:
        raise ConfigError("unlearn.grid: sweep needs at least one grid block")
    for seed in cfg.eval.seeds:
        load_inputs(cfg, seed)
        stage_train(cfg, seed)
    raw = cfg.to_dict()
    work = [{"config": raw, "seed": s, "cell": c, "index": i} for i, c in enumerate(cells) for s in cfg.eval.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, work))
    else:
        outcomes = [_run_cell(w) for w in work]
    by_cell: dict[int, list] = {}
    for w, o in zip(work, outcomes):
        by_cell.setdefault(w["index"], []).append(o)
    rows, timings = [], {}
    for i, cell in enumerate(cells):
        res = by_cell[i]
        method = unlearn.canonical_method(cell.get("method", cfg.unlearn.method))
        key = cell_key(cfg, cell)
        row = {"index": i, "key": key, "method": method, "params": {k: v for k, v in cell.items() if k != "method"}}
        failed = [r for r in res if r["status"] != "ok"]
        if failed:
            row.update(status="failed", reason=failed[0]["reason"])
        else:
            row.update(status="ok", metrics=_stats([r["metrics"] for r in res]))
        timings[key] = [r.get("seconds") for r in res]
        rows.append(row)
    result = {**cfg.provenance(), "seeds": list(cfg.eval.seeds), "columns": [c[0] for c in SWEEP_COLUMNS],
              "rows": rows, "correlations": correlations(rows)}
    jpath = write_json(lay.sweep_dir / "sweep.json", result)
    write_json(timing_path(jpath), timings)
    mpath = lay.sweep_dir / "sweep.md"
    mpath.write_text(f"<!-- config {cfg.hash()} tool {__version__} -->\n" + sweep_markdown(result))
    return jpath, mpath


def correlations(rows: list[dict]) -> dict:
    """Pearson correlations of forget CS against forget mAP and R@1 over successful cells."""
    ok = [r["metrics"] for r in rows if r["status"] == "ok"]
    out = {"n_cells": len(ok)}
    if len(ok) < 3:
        return out
    cs = np.array([m["cs_forget"][0] for m in ok])
    for key in ("map_forget", "r1_forget"):
        other = np.array([m[key][0] for m in ok])
        if cs.std() == 0 or other.std() == 0:
            out[f"cs_forget~{key}"] = None
        else:
            out[f"cs_forget~{key}"] = float(np.corrcoef(cs, other)[0, 1])
    return out


def _cell_label(row: dict) -> str:
    params = ", ".join(f"{k}={v}" for k, v in sorted(row["params"].items()))
    return f"{row['method']} ({params})" if params else row["method"]


def sweep_markdown(result: dict) -> str:
    table = []
    for row in result["rows"]:
        if row["status"] == "ok":
            table.append((_cell_label(row), row["metrics"]))
        else:
            table.append((_cell_label(row), {k: "failed" for k, _ in SWEEP_COLUMNS}))
    text = retrieval.markdown_table(table, SWEEP_COLUMNS)
    failures = [r for r in result["rows"] if r["status"] != "ok"]
    if failures:
        text += "\nFailed cells:\n\n" + "".join(f"- {_cell_label(r)}: {r['reason']}\n" for r in failures)
    corr = result["correlations"]
    if len(corr) > 1:
        text += "\nCorrelation over successful cells: " + ", ".join(
            f"{k} = {'n/a' if v is None else f'{v:.3f}'}" for k, v in sorted(corr.items()) if k != "n_cells") + "\n"
    return text


# report ---------------------------------------------------------------------------

def stage_report(cfg: ExperimentConfig) -> Path:
    lay = layout(cfg)
    files = sorted(lay.root.glob("metrics-*.json"))
    if not files and not (lay.sweep_dir / "sweep.json").exists():
        raise FileNotFoundError(f"no metrics or sweep results under {lay.root}; run evaluate or sweep first")
    order = {m: i for i, m in enumerate(unlearn.METHODS)}
    results = sorted((json.loads(f.read_text()) for f in files), key=lambda r: (order.get(r["method"], 99), r["method"]))
    parts = [f"<!-- tool {__version__} -->\n# Unlearning benchmark report\n"]
    if results:
        rows = [("Original", results[0]["before"])] + [(r["method"], r["after"]) for r in results]
        seeds = ", ".join(str(s) for s in results[0]["seeds"])
        parts.append(f"\nMean ± std over seeds {seeds}.\n\n" + retrieval.markdown_table(rows))
    sweep = lay.sweep_dir / "sweep.json"
    if sweep.exists():
        parts.append("\n## Sweep\n\n" + sweep_markdown(json.loads(sweep.read_text())))
    path = lay.root / "report.md"
    path.write_text("".join(parts))
    return path


# argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults apply if omitted)")
        sp.add_argument("--seed", type=int, help="run only this seed instead of eval.seeds")
        sp.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("generate", help="write the dataset and per-seed splits"))
    sp = common(sub.add_parser("train", help="train the original model"))
    sp.add_argument("--force", action="store_true", help="overwrite a snapshot built from another config")
    sp = common(sub.add_parser("unlearn", help="run one unlearning method"))
    sp.add_argument("--method", help=f"one of {', '.join(unlearn.METHODS)}")
    sp = common(sub.add_parser("evaluate", help="metrics before/after unlearning"))
    sp.add_argument("--method")
    sp.add_argument("--original", type=Path, help="explicit original snapshot")
    sp.add_argument("--unlearned", type=Path, help="explicit unlearned snapshot")
    sp = common(sub.add_parser("sweep", help="run the unlearn.grid cells"))
    sp.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("report", help="collect metrics and sweep tables into report.md"))
    return p


def dispatch(args) -> list[Path]:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, method=getattr(args, "method", None))
    if args.command == "generate":
        return stage_generate(cfg)
    if args.command == "train":
        return [stage_train(cfg, s, force=args.force) for s in cfg.eval.seeds]
    if args.command == "unlearn":
        return [stage_unlearn(cfg, s) for s in cfg.eval.seeds]
    if args.command == "evaluate":
        return list(stage_evaluate(cfg, None, args.original, args.unlearned))
    if args.command == "sweep":
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        return list(stage_sweep(cfg, args.jobs))
    return [stage_report(cfg)]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        for path in dispatch(args):
            print(path)
    except (ConfigError, data.DataValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (unlearn.UnlearningDiverged, encoder.TrainingDiverged, ContainerError, OSError,
            retrieval.BenchmarkError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
