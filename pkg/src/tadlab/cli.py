"""Manifest-driven experiment runner and file-level subcommands.

A run goes ingest -> split -> [corrupt | synthesize] -> standardize ->
pretext-train -> embed -> project -> detect -> evaluate -> report. Trained
encoders and embeddings are cached on disk under a content hash of the data
bytes, the configuration and the seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import inspect
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import eval as ev
from .core import (
    ContractError,
    Dataset,
    SplitBundle,
    TadlabError,
    ValidationError,
    array_checksum,
    fit_standardizer,
    load_dataset,
    one_class_split,
    save_dataset,
)
from .detectors import DETECTORS, make_detector, read_scores, write_scores
from .linalg import principal_basis, residual_project
from .nn import LossSpec, extract_embeddings, load_checkpoint, random_search, save_checkpoint
from .pretext import TASK_KINDS, TASK_LOSSES, build_task
from .synthesis import (
    ANOMALY_KINDS,
    CORRUPTIONS,
    TOY_NAMES,
    ToySpec,
    corrupt,
    fit_gmm,
    forest_importance,
    make_toy,
    synthesize_anomalies,
)

MANIFEST_VERSION = 1
DEFAULT_DRAWS = 8
CACHE_ENV = "TADLAB_CACHE"

_fraction = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "seed", "datasets", "detectors"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "standardize": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
        "include_raw": {"type": "boolean"},
        "datasets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["path"],
                        "properties": {"path": {"type": "string"}, "name": {"type": "string", "minLength": 1}},
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["toy"],
                        "properties": {
                            "toy": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["name"],
                                "properties": {
                                    "name": {"enum": list(TOY_NAMES)},
                                    "n_normal": {"type": "integer", "minimum": 50},
                                    "n_anomaly": {"type": "integer", "minimum": 1},
                                    "noise": {"type": "number", "minimum": 0},
                                    "seed": {"type": "integer", "minimum": 0},
                                },
                            }
                        },
                    },
                ]
            },
        },
        "pretext": {
            "type": "object",
            "additionalProperties": False,
            "required": ["tasks"],
            "properties": {
                "tasks": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "losses"],
                        "properties": {
                            "kind": {"enum": list(TASK_KINDS)},
                            "losses": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                            "config": {
                                "type": "object",
                                "additionalProperties": False,
                                "properties": {
                                    "C": {"type": "integer", "minimum": 2},
                                    "r": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                    "k_w": {"type": "integer", "minimum": 1},
                                },
                            },
                        },
                    },
                },
                "draws": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
            },
        },
        "detectors": {
            "type": "object",
            "minProperties": 1,
            "propertyNames": {"enum": sorted(DETECTORS)},
            "additionalProperties": {"type": "array", "minItems": 1, "items": {"type": "object"}},
        },
        "subspace_fractions": {"type": "array", "minItems": 1, "items": _fraction},
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kinds"],
            "properties": {
                "kinds": {"type": "array", "minItems": 1, "items": {"enum": list(ANOMALY_KINDS)}},
                "n": {"type": "integer", "minimum": 1},
                "K_range": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "params": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "alpha": {"type": "number", "exclusiveMinimum": 0},
                        "beta": {"type": "number"},
                        "delta": {"type": "number"},
                    },
                },
            },
        },
        "corruption": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kinds", "proportions"],
            "properties": {
                "kinds": {"type": "array", "minItems": 1, "items": {"enum": list(CORRUPTIONS)}},
                "proportions": {"type": "array", "minItems": 1, "items": _fraction},
            },
        },
    },
}


# manifest ----------------------------------------------------------------------


@dataclass
class ExperimentManifest:
    seed: int
    datasets: list[dict]
    detectors: list[tuple[str, dict]]
    pretext: list[tuple[str, str, dict]]
    draws: int = DEFAULT_DRAWS
    epochs: int = 200
    patience: int = 10
    standardize: bool = True
    include_raw: bool = True
    subspace_fractions: list[float] = field(default_factory=lambda: [1.0])
    synthesis: dict | None = None
    corruption: dict | None = None
    output_dir: Path | None = None
    workers: int = 1
    source_sha256: str = ""

    def variants(self) -> list[str]:
        out = ["original"]
        if self.synthesis:
            out += [f"synth:{k}" for k in self.synthesis["kinds"]]
        if self.corruption:
            out += [f"corrupt:{k}@{p:g}" for k in self.corruption["kinds"] for p in self.corruption["proportions"]]
        return out

    def representations(self) -> list[str]:
        reps = ["raw"] if self.include_raw else []
        for task, loss, _ in self.pretext:
            for f in self.subspace_fractions:
                reps.append(_rep_label(task, loss, f))
        return reps


def _rep_label(task: str, loss: str, fraction: float) -> str:
    return f"{task}/{loss}" if fraction == 1.0 else f"{task}/{loss}@{fraction:g}"


def detector_label(kind: str, params: dict) -> str:
    inner = ",".join(f"{k}={params[k]}" for k in sorted(params))
    return f"{kind}({inner})"


def _accepts_seed(kind: str) -> bool:
    return "seed" in inspect.signature(DETECTORS[kind].__init__).parameters


def validate_manifest(obj: dict, base_dir: Path) -> ExperimentManifest:
    """Check schema, paths and grids; raise ValidationError before any compute."""
    try:
        jsonschema.validate(obj, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"manifest invalid at {where}: {exc.message}") from None

    datasets, names = [], set()
    for entry in obj["datasets"]:
        if "path" in entry:
            p = Path(entry["path"])
            p = p if p.is_absolute() else base_dir / p
            if not p.is_file():
                raise ValidationError(f"dataset file not found: {p}")
            item = {"path": str(p), "name": entry.get("name", p.stem)}
        else:
            toy = dict(entry["toy"])
            item = {"toy": toy, "name": f"toy_{toy['name']}"}
        if item["name"] in names:
            raise ValidationError(f"duplicate dataset name {item['name']!r}")
        names.add(item["name"])
        datasets.append(item)

    detectors = []
    for kind in sorted(obj["detectors"]):
        for params in obj["detectors"][kind]:
            try:
                make_detector(kind, **params)
            except (TypeError, ContractError) as exc:
                raise ValidationError(f"detector {kind} {params}: {exc}") from None
            detectors.append((kind, dict(params)))

    pretext, block = [], obj.get("pretext")
    if block:
        for t in block["tasks"]:
            for loss in t["losses"]:
                if loss not in TASK_LOSSES[t["kind"]]:
                    raise ValidationError(f"loss {loss!r} is not defined for task {t['kind']!r}")
                pretext.append((t["kind"], loss, dict(t.get("config", {}))))

    fractions = [float(f) for f in obj.get("subspace_fractions", [1.0])]
    out = obj.get("output_dir")
    return ExperimentManifest(
        seed=int(obj["seed"]),
        datasets=datasets,
        detectors=detectors,
        pretext=pretext,
        draws=int(block.get("draws", DEFAULT_DRAWS)) if block else DEFAULT_DRAWS,
        epochs=int(block.get("epochs", 200)) if block else 200,
        patience=int(block.get("patience", 10)) if block else 10,
        standardize=bool(obj.get("standardize", True)),
        include_raw=bool(obj.get("include_raw", True)),
        subspace_fractions=fractions,
        synthesis=copy.deepcopy(obj.get("synthesis")),
        corruption=copy.deepcopy(obj.get("corruption")),
        output_dir=(Path(out) if Path(out).is_absolute() else base_dir / out) if out else None,
        workers=int(obj.get("workers", 1)),
    )


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    raw = path.read_bytes()
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from None
    m = validate_manifest(obj, path.resolve().parent)
    m.source_sha256 = hashlib.sha256(raw).hexdigest()
    if not m.include_raw and not m.pretext:
        raise ValidationError("manifest yields no representations: enable include_raw or add pretext tasks")
    return m


def reference_manifest_path() -> Path:
    return Path(str(resources.files("tadlab") / "data" / "reference_manifest.json"))


# cache and logging -------------------------------------------------------------


def cache_key(arrays, config: dict, seed: int) -> str:
    """sha256 over data bytes, canonical config JSON and the seed."""
    h = hashlib.sha256()
    h.update(array_checksum(*arrays).encode())
    h.update(json.dumps(config, sort_keys=True).encode())
    h.update(str(int(seed)).encode())
    return h.hexdigest()


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _event(kind: str, **fields) -> dict:
    return {"ts": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()), "event": kind, **fields}


# pipeline ----------------------------------------------------------------------


def materialize(entry: dict) -> Dataset:
    if "path" in entry:
        return load_dataset(entry["path"], name=entry["name"])
    t = entry["toy"]
    return make_toy(ToySpec(t["name"], t.get("n_normal", 500), t.get("n_anomaly"), t.get("noise", 0.05), t.get("seed", 0)))


def _variant_data(ds: Dataset, split: SplitBundle, variant: str, m: ExperimentManifest):
    Xtr, Xva, Xte, yte = ds.X[split.train], ds.X[split.val], ds.X[split.test], ds.y[split.test]
    if variant == "original":
        return Xtr, Xva, Xte, yte
    if variant.startswith("synth:"):
        kind = variant.split(":", 1)[1]
        syn = m.synthesis
        n = syn.get("n", max(1, ds.n_anomalies))
        seed = _derived_seed(m.seed, ds.name, variant)
        gmm = fit_gmm(Xtr, tuple(syn.get("K_range", (1, 2, 3, 4, 5))), seed) if kind in ("local", "cluster") else None
        A = synthesize_anomalies(kind, Xtr, n, syn.get("params"), seed, gmm)
        normals = Xte[yte == 0]
        return Xtr, Xva, np.vstack([normals, A]), np.r_[np.zeros(len(normals), np.int64), np.ones(n, np.int64)]
    kind, p = variant.split(":", 1)[1].split("@")
    seed = _derived_seed(m.seed, ds.name, variant)
    ranking = forest_importance(ds.X, ds.y, seed=seed) if kind in ("remove_important", "select_important") else None
    out = corrupt(kind, {"train": Xtr, "val": Xva, "test": Xte}, float(p), ranking, seed)
    return out["train"], out["val"], out["test"], yte


def _encoder(task_kind, loss_kind, cfg, Xtr, Xva, m, ds_name, cache_dir: Path, resume: bool, events: list):
    seed = _derived_seed(m.seed, ds_name, task_kind, loss_kind)
    config = {
        "task": task_kind,
        "loss": loss_kind,
        "task_config": cfg,
        "draws": m.draws,
        "epochs": m.epochs,
        "patience": m.patience,
    }
    key = cache_key([Xtr, Xva], config, seed)
    path = cache_dir / f"enc-{key}.bin"
    if resume and path.is_file():
        events.append(_event("cache_hit", stage="pretext-train", key=key))
        return load_checkpoint(path), key
    task = build_task(task_kind, Xtr.shape[1], cfg, seed)
    enc = random_search(task, LossSpec(loss_kind), Xtr, Xva, m.draws, seed, m.epochs, m.patience)
    save_checkpoint(enc, path)
    events.append(_event("trained", stage="pretext-train", key=key, best_val_loss=enc.best_val_loss))
    return enc, key


def _embeddings(enc, enc_key, Xtr, Xte, cache_dir: Path, resume: bool, events: list):
    key = cache_key([Xtr, Xte], {"encoder": enc_key}, 0)
    path = cache_dir / f"emb-{key}.npz"
    if resume and path.is_file():
        events.append(_event("cache_hit", stage="embed", key=key))
        with np.load(path) as z:
            return z["train"], z["test"]
    Etr, Ete = extract_embeddings(enc, Xtr), extract_embeddings(enc, Xte)
    np.savez(path, train=Etr, test=Ete)
    events.append(_event("embedded", stage="embed", key=key))
    return Etr, Ete


def run_unit(entry: dict, variant: str, m: ExperimentManifest, cache_dir: str, resume: bool):
    """One (dataset, variant) cell group. Returns (aurocs, failures, events)."""
    cache = Path(cache_dir)
    name = entry["name"]
    aurocs: dict[tuple[str, str], float] = {}
    failures: list[str] = []
    events: list[dict] = [_event("start", dataset=name, variant=variant)]
    prefix = f"{name}|{variant}"
    det_labels = [detector_label(k, p) for k, p in m.detectors]

    def fail_all(reps, exc):
        for rep in reps:
            for d in det_labels:
                failures.append(f"{prefix}|{d}|{rep}: {type(exc).__name__}: {exc}")
        events.append(_event("failed", dataset=name, variant=variant, error=str(exc)))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            ds = materialize(entry)
            split = one_class_split(ds, m.seed)
            events.append(_event("split", dataset=name, train=len(split.train), val=len(split.val), test=len(split.test)))
            Xtr, Xva, Xte, yte = _variant_data(ds, split, variant, m)
            if m.standardize:
                st = fit_standardizer(Xtr)
                Xtr, Xva, Xte = st.transform(Xtr), st.transform(Xva), st.transform(Xte)
        except (TadlabError, ValueError, ArithmeticError) as exc:
            fail_all(m.representations(), exc)
            return aurocs, failures, events

        reps: list[tuple[str, np.ndarray, np.ndarray]] = []
        if m.include_raw:
            reps.append(("raw", Xtr, Xte))
        for task_kind, loss_kind, cfg in m.pretext:
            labels = [_rep_label(task_kind, loss_kind, f) for f in m.subspace_fractions]
            try:
                enc, key = _encoder(task_kind, loss_kind, cfg, Xtr, Xva, m, name, cache, resume, events)
                Etr, Ete = _embeddings(enc, key, Xtr, Xte, cache, resume, events)
                basis = principal_basis(Etr) if any(f < 1.0 for f in m.subspace_fractions) else None
                for f, label in zip(m.subspace_fractions, labels):
                    if f == 1.0:
                        reps.append((label, Etr, Ete))
                    else:
                        reps.append((label, residual_project(basis, Etr, f), residual_project(basis, Ete, f)))
            except (TadlabError, ValueError, ArithmeticError) as exc:
                fail_all(labels, exc)

        for rep, R_tr, R_te in reps:
            for (kind, params), dlab in zip(m.detectors, det_labels):
                p = dict(params)
                if _accepts_seed(kind):
                    p.setdefault("seed", _derived_seed(m.seed, name, variant, kind))
                try:
                    scores = make_detector(kind, **p).fit(R_tr).score(R_te)
                    aurocs[(f"{prefix}|{dlab}", rep)] = ev.auroc(scores, yte)
                except (TadlabError, ValueError, ArithmeticError) as exc:
                    failures.append(f"{prefix}|{dlab}|{rep}: {type(exc).__name__}: {exc}")
        for w in caught:
            events.append(_event("warning", dataset=name, variant=variant, message=str(w.message)))
    events.append(_event("done", dataset=name, variant=variant, cells=len(aurocs)))
    return aurocs, failures, events


@dataclass
class EvalReport:
    rows: list[str]
    methods: list[str]
    values: np.ndarray
    failed: list[str]
    rank: ev.RankResult | None
    rank_note: str
    files: dict[str, Path]
    stats: dict[str, int]

    @property
    def ok(self) -> bool:
        return not self.failed

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for j, meth in enumerate(self.methods):
            col = self.values[:, j]
            col = col[~np.isnan(col)]
            out[meth] = {
                "n": int(col.size),
                "mean": float(col.mean()) if col.size else None,
                "median": float(np.median(col)) if col.size else None,
            }
        return out


def _nan_to_none(v: float):
    return None if math.isnan(v) else float(v)


def write_report(report: EvalReport, m: ExperimentManifest, out: Path) -> None:
    (out / "scores.csv").write_text(ev.score_table_csv(report.rows, report.methods, report.values))
    cells = []
    for i, row in enumerate(report.rows):
        dataset, variant, det = row.split("|")
        for j, meth in enumerate(report.methods):
            cells.append(
                {
                    "dataset": dataset,
                    "variant": variant,
                    "detector": det,
                    "representation": meth,
                    "seed": m.seed,
                    "auroc": _nan_to_none(report.values[i, j]),
                }
            )
    body = {
        "manifest_sha256": m.source_sha256,
        "seed": m.seed,
        "cells": cells,
        "aggregates": report.aggregates(),
        "ranks": json.loads(report.rank.to_json()) if report.rank else None,
        "rank_note": report.rank_note,
        "failed": report.failed,
    }
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    report.files.update(scores=out / "scores.csv", report=out / "report.json")
    if report.rank:
        (out / "ranks.json").write_text(report.rank.to_json() + "\n")
        report.files["ranks"] = out / "ranks.json"
    groups = {meth: v[~np.isnan(v)] for meth, v in zip(report.methods, report.values.T)}
    if any(g.size for g in groups.values()):
        ev.boxplot_svg(out / "auroc_boxplot.svg", groups)
        report.files["boxplot"] = out / "auroc_boxplot.svg"


def run_manifest(
    path,
    resume: bool = False,
    out_dir=None,
    workers: int | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Validate, execute every stage combination and write the report files."""
    m = load_manifest(path)
    if seed is not None:
        m.seed = int(seed)
    out = Path(out_dir) if out_dir is not None else m.output_dir
    if out is None:
        raise ValidationError("no output directory: set output_dir in the manifest or pass --out")
    workers = int(workers or m.workers)
    if workers < 1:
        raise ValidationError("workers must be >= 1")

    out.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(os.environ.get(CACHE_ENV) or out / "cache")
    cache_dir.mkdir(parents=True, exist_ok=True)

    rows = [
        f"{d['name']}|{v}|{detector_label(k, p)}" for d in m.datasets for v in m.variants() for k, p in m.detectors
    ]
    methods = m.representations()
    units = [(d, v) for d in m.datasets for v in m.variants()]
    args = [(d, v, m, str(cache_dir), resume) for d, v in units]
    if workers == 1 or len(units) == 1:
        results = [run_unit(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(units))) as pool:
            futures = [pool.submit(run_unit, *a) for a in args]
            results = [f.result() for f in futures]

    values = np.full((len(rows), len(methods)), np.nan)
    r_index = {r: i for i, r in enumerate(rows)}
    c_index = {c: j for j, c in enumerate(methods)}
    failed: list[str] = []
    stats = {"trained": 0, "cache_hits": 0, "embedded": 0}
    with open(out / "log.jsonl", "a") as log:
        log.write(json.dumps(_event("run", manifest=str(path), seed=m.seed, resume=resume, workers=workers)) + "\n")
        for aurocs, fails, events in results:
            for (row, col), v in aurocs.items():
                values[r_index[row], c_index[col]] = v
            failed.extend(fails)
            for e in events:
                stats["trained"] += e["event"] == "trained"
                stats["cache_hits"] += e["event"] == "cache_hit"
                stats["embedded"] += e["event"] == "embedded"
                log.write(json.dumps(e, default=float) + "\n")

    rank, note = None, ""
    try:
        rank = ev.rank_compare(values, methods)
    except ContractError as exc:
        note = str(exc)
    report = EvalReport(rows, methods, values, failed, rank, note, {"log": out / "log.jsonl"}, stats)
    write_report(report, m, out)
    return report


# subcommands -------------------------------------------------------------------


def _read_matrix(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Feature matrix of a CSV; the label column, when present, is returned separately."""
    path = Path(path)
    with open(path) as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    if "label" in header:
        ds = load_dataset(path)
        return np.array(ds.X), np.array(ds.y)
    X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return X, None


def _write_matrix(path, X, y=None, prefix="e") -> None:
    """Core CSV schema; unlike ``save_dataset`` an all-anomaly matrix is allowed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.zeros(X.shape[0], dtype=np.int64) if y is None else np.asarray(y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"{prefix}{i}" for i in range(X.shape[1])), "label"])
        for row, lab in zip(X, y):
            w.writerow([*(repr(float(v)) for v in row), int(lab)])


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def cmd_run(a) -> int:
    report = run_manifest(a.manifest, a.resume, a.out, a.workers, a.seed)
    n_cells = int(np.sum(~np.isnan(report.values)))
    print(f"{n_cells} AUROC cells written to {report.files['scores']}")
    print(f"trained={report.stats['trained']} cache_hits={report.stats['cache_hits']}")
    if report.failed:
        print(f"{len(report.failed)} failed cells:", file=sys.stderr)
        for f in report.failed:
            print(f"  {f}", file=sys.stderr)
        return 1
    return 0


def cmd_ingest(a) -> int:
    ds = load_dataset(a.data)
    summary = {"name": ds.name, "n": ds.n, "d": ds.d, "anomalies": ds.n_anomalies, "sha256": ds.checksum}
    text = json.dumps(summary, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_split(a) -> int:
    split = one_class_split(load_dataset(a.data), a.seed)
    Path(a.out).write_text(split.to_json() + "\n")
    print(f"train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return 0


def cmd_toy(a) -> int:
    ds = make_toy(ToySpec(a.name, a.n_normal, a.n_anomaly, a.noise, a.seed))
    save_dataset(ds, a.out)
    return 0


def cmd_synth(a) -> int:
    ds = load_dataset(a.data)
    rows = SplitBundle.from_json(Path(a.split).read_text()).train if a.split else np.flatnonzero(ds.y == 0)
    X = ds.X[rows]
    params = {k: v for k, v in (("alpha", a.alpha), ("beta", a.beta), ("delta", a.delta)) if v is not None}
    n = a.n or max(1, ds.n_anomalies)
    gmm = fit_gmm(X, seed=a.seed) if a.kind in ("local", "cluster") else None
    A = synthesize_anomalies(a.kind, X, n, params, a.seed, gmm)
    _write_matrix(a.out, A, np.ones(n, dtype=np.int64), prefix="x")
    manifest = {"kind": a.kind, "params": params, "n": n, "seed": a.seed, "source_sha256": ds.checksum}
    if gmm is not None:
        manifest["gmm_components"] = gmm.K
    Path(str(a.out) + ".manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_corrupt(a) -> int:
    ds = load_dataset(a.data)
    split = SplitBundle.from_json(Path(a.split).read_text())
    ranking = None
    if a.kind in ("remove_important", "select_important"):
        ranking = forest_importance(ds.X, ds.y, seed=a.seed)
    parts = {"train": ds.X[split.train], "val": ds.X[split.val], "test": ds.X[split.test]}
    out = corrupt(a.kind, parts, a.proportion, ranking, a.seed)
    dest = Path(a.out)
    dest.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", split.train), ("val", split.val), ("test", split.test)):
        _write_matrix(dest / f"{name}.csv", out[name], ds.y[idx], prefix="x")
    return 0


def cmd_train(a) -> int:
    Xtr, _ = _read_matrix(a.train)
    Xva, _ = _read_matrix(a.val)
    cfg = {k: v for k, v in (("C", a.C), ("r", a.r), ("k_w", a.k_w)) if v is not None}
    task = build_task(a.task, Xtr.shape[1], cfg, a.seed)
    enc = random_search(task, LossSpec(a.loss), Xtr, Xva, a.draws, a.seed, a.epochs, a.patience)
    save_checkpoint(enc, a.out)
    Path(str(a.out) + ".curve.csv").write_text(enc.curve_csv())
    print(f"best val loss {enc.best_val_loss:.6g} at epoch {enc.best_epoch}")
    return 0


def cmd_embed(a) -> int:
    enc = load_checkpoint(a.encoder)
    X, y = _read_matrix(a.data)
    E = extract_embeddings(enc, X)
    if a.fraction is not None:
        B, _ = _read_matrix(a.basis) if a.basis else (X, None)
        E = residual_project(principal_basis(extract_embeddings(enc, B)), E, a.fraction)
    _write_matrix(a.out, E, y)
    return 0


def cmd_detect(a) -> int:
    params = {}
    for key in ("k", "nu", "gamma", "n_trees", "subsample", "keep_smallest_fraction", "seed"):
        v = getattr(a, key)
        if v is not None:
            params[key] = _parse_value(v) if key == "gamma" else v
    for item in a.param or []:
        k, _, v = item.partition("=")
        params[k] = _parse_value(v)
    Xtr, _ = _read_matrix(a.train)
    Xte, _ = _read_matrix(a.test)
    scores = make_detector(a.kind, **params).fit(Xtr).score(Xte)
    if a.out:
        write_scores(a.out, scores)
    else:
        print("row_id,score")
        for i, s in enumerate(scores):
            print(f"{i},{float(s)!r}")
    return 0


def cmd_eval(a) -> int:
    _, scores = read_scores(a.scores)
    _, y = _read_matrix(a.labels)
    if y is None:
        raise ValidationError(f"{a.labels}: no 'label' column")
    print(repr(ev.auroc(scores, y)))
    return 0


def cmd_report(a) -> int:
    rows, methods, V = ev.read_score_table(Path(a.scores).read_text())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for j, meth in enumerate(methods):
        col = V[:, j][~np.isnan(V[:, j])]
        summary[meth] = {"n": int(col.size), "mean": float(col.mean()) if col.size else None,
                         "median": float(np.median(col)) if col.size else None}  # fmt: skip
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    try:
        rank = ev.rank_compare(V, methods, a.alpha)
        (out / "ranks.json").write_text(rank.to_json() + "\n")
        print(rank.to_json())
    except ContractError as exc:
        print(f"no rank comparison: {exc}", file=sys.stderr)
    ev.boxplot_svg(out / "auroc_boxplot.svg", {m: V[:, j][~np.isnan(V[:, j])] for j, m in enumerate(methods)})
    return 0


def _run_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--manifest", required=required, help="experiment manifest (JSON)")
    p.add_argument("--resume", action="store_true", help="reuse cached encoders and embeddings")
    p.add_argument("--workers", type=int, default=None, help="parallel (dataset, variant) cells")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadlab", description="Tabular anomaly detection experiments.")
    sub = parser.add_subparsers(dest="command")

    _run_flags(sub.add_parser("run", help="execute a manifest"), required=True)

    p = sub.add_parser("ingest", help="validate a CSV and print a summary")
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("split", help="one-class train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("toy", help="generate a 2-D toy dataset")
    p.add_argument("--name", required=True, choices=TOY_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-normal", type=int, default=500)
    p.add_argument("--n-anomaly", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="synthesize anomalies from normal rows")
    p.add_argument("--kind", required=True, choices=ANOMALY_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split JSON; fit on its train rows (default: all normal rows)")
    p.add_argument("--n", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("corrupt", help="apply a feature corruption to a split")
    p.add_argument("--kind", required=True, choices=CORRUPTIONS)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--proportion", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for train/val/test CSVs")

    p = sub.add_parser("train", help="random-search a pretext encoder")
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--loss", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--C", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--k-w", dest="k_w", type=int)
    p.add_argument("--draws", type=int, default=DEFAULT_DRAWS)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", help="extract embeddings with a trained encoder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, help="keep this fraction of smallest-eigenvalue directions")
    p.add_argument("--basis", help="CSV whose embeddings define the basis (default: --data)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="fit a detector and score query rows")
    p.add_argument("--kind", required=True, choices=sorted(DETECTORS))
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--gamma")
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--subsample", type=int)
    p.add_argument("--fraction", dest="keep_smallest_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--param", action="append", help="extra hyperparameter as key=value")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="AUROC of a scores CSV against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)

    p = sub.add_parser("report", help="ranks, aggregates and plots for a score table")
    p.add_argument("--scores", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "run": cmd_run,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "toy": cmd_toy,
    "synth": cmd_synth,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "embed": cmd_embed,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--"):
        # bare flags (tadlab --manifest m.json ...) mean "run"
        top = argparse.ArgumentParser(prog="tadlab")
        _run_flags(top, required=True)
        args = top.parse_args(argv)
        args.command = "run"
    else:
        args = build_parser().parse_args(argv)
    if not args.command:
        build_parser().print_help()
        return 2
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except TadlabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
