"""End-to-end experiment runner with content-hash stage caching.

Stage order: ingest -> split -> similarity -> predict -> cluster ->
evaluate | sweep. Each stage's cache key hashes its inputs' content, its
config slice and ``CODE_VERSION``; a changed input changes every dependent key.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import pickle
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from cbcf import __version__, plots
from cbcf.clustering import (ClusterModel, FcmConfig, SpectralConfig, cluster_validity,
                             fcm_cluster, fcm_features, save_clusters, spectral_cluster)
from cbcf.dataset import (SplitSpec, load_movielens, sparsity, split_cold_start,
                          split_random, write_split)
from cbcf.errors import ConfigError
from cbcf.ipu import (ThresholdConfig, align, cluster_item_average, evaluate,
                      evaluate_baseline, EvaluationReport)
from cbcf.optimizer import (GridSpec, baseline_sweep, grid_values, precision_frontier,
                            sweep_inputs, write_baseline_csv, write_sweep_csv)
from cbcf.predictor import pairs_of, predict_all, save_predictions
from cbcf.similarity import build_similarity_matrix, distance_matrix, save_matrix, load_matrix

log = logging.getLogger(__name__)

CODE_VERSION = f"cbcf-{__version__}/1"
STAGES = ("ingest", "split", "similarity", "predict", "cluster", "evaluate", "sweep")


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageCache:
    """Pickled stage results under ``root/<stage>-<key>.pkl``."""

    def __init__(self, root):
        self.root = Path(root) if root else None
        self.hits: dict[str, bool] = {}

    def fetch(self, stage: str, parts: dict, compute):
        key = _digest({"stage": stage, "code": CODE_VERSION, **parts})
        label = f"{stage}:{key[:8]}"
        if self.root is not None:
            path = self.root / f"{stage}-{key}.pkl"
            if path.exists():
                with path.open("rb") as fh:
                    value = pickle.load(fh)
                self.hits[label] = True
                log.info("cache hit  %s", label)
                return value
        value = compute()
        self.hits[label] = False
        log.info("computed   %s", label)
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            with tmp.open("wb") as fh:
                pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
            tmp.replace(path)
        return value


@dataclass
class Bundle:
    out: Path
    artifacts: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    cache_hits: dict = field(default_factory=dict)

    def add(self, name: str, path) -> Path:
        self.artifacts[name] = Path(path)
        return Path(path)

    def write_manifest(self, cfg: dict) -> Path:
        entries = {}
        for name, p in sorted(self.artifacts.items()):
            entries[name] = {"path": str(p.relative_to(self.out)), "sha256": file_sha256(p)}
        manifest = {"code_version": CODE_VERSION, "config": cfg, "artifacts": entries}
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name):
    def wrap(fn):
        def inner(self, *a, **kw):
            try:
                return fn(self, *a, **kw)
            except (StageError, ConfigError):
                raise
            except Exception as exc:
                if getattr(exc, "exit_code", None) is not None:
                    raise
                raise StageError(name, exc) from exc
        return inner
    return wrap


class Pipeline:
    def __init__(self, cfg: dict, out=None, cache=None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = StageCache(cache if cache is not None else cfg["cache"])
        self.bundle = Bundle(self.out)
        self.seed = int(cfg["seed"])
        self._ds = None

    # -- stages ---------------------------------------------------------

    @_stage("ingest")
    def dataset(self):
        if self._ds is None:
            path = self.cfg["dataset"]
            digest = file_sha256(path) if Path(path).exists() else None
            ds = load_movielens(path)
            self._ds = (ds, digest or ds.content_hash())
        return self._ds

    @_stage("split")
    def split(self, ds=None, spec: SplitSpec | None = None):
        if ds is None:
            ds, dhash = self.dataset()
        else:
            dhash = ds.content_hash()
        spec = spec or self.split_spec()

        def compute():
            if spec.mode == "cold_start_mask":
                return split_cold_start(ds, spec)
            tr, te = split_random(ds, spec)
            return tr, te, None
        return self.cache.fetch("split", {"data": dhash, "spec": asdict(spec)}, compute)

    def split_spec(self) -> SplitSpec:
        s = self.cfg["split"]
        return SplitSpec(mode=s["mode"], test_fraction=float(s["test_fraction"]),
                         seed=self.seed,
                         test_user_rating_range=tuple(s["test_user_rating_range"]),
                         retained_ratings_range=tuple(s["retained_ratings_range"]))

    @_stage("similarity")
    def similarity(self, train, kind: str):
        thash = train.content_hash()
        return self.cache.fetch("similarity", {"train": thash, "kind": kind},
                                lambda: build_similarity_matrix(train, kind))

    @_stage("predict")
    def predictions(self, train, test):
        p = self.cfg["predictor"]
        kind = "item_cosine" if p["method"] == "item_based" else "user_pcc"
        sims = self.similarity(train, kind)
        parts = {"train": train.content_hash(), "test": test.content_hash(),
                 "method": p["method"], "k": int(p["k"])}
        return self.cache.fetch("predict", parts, lambda: predict_all(
            pairs_of(test), train, sims, p["method"], int(p["k"]), jobs=int(self.cfg["jobs"])))

    @_stage("cluster")
    def clusters(self, train) -> ClusterModel | None:
        c = self.cfg["clustering"]
        if c["method"] == "none":
            return None
        sims = self.similarity(train, "user_pcc")
        parts = {"train": train.content_hash(), "clustering": c, "seed": self.seed}

        def compute():
            dist = distance_matrix(sims)
            if c["method"] == "spectral":
                cfg = SpectralConfig(c=int(c["c"]), sigma=c["sigma"],
                                     kmeans_restarts=int(c["kmeans_restarts"]), seed=self.seed)
                return spectral_cluster(dist, cfg)
            cfg = FcmConfig(c=int(c["c"]), m=float(c["m"]), epsilon=float(c["epsilon"]),
                            max_iters=int(c["max_iters"]), seed=self.seed)
            return fcm_cluster(fcm_features(dist, c["pca_components"]), cfg)
        return self.cache.fetch("cluster", parts, compute)

    # -- artifact writers -----------------------------------------------

    def write_ingest(self):
        ds, dhash = self.dataset()
        info = {"path": str(self.cfg["dataset"]), "sha256": dhash, "ratings": len(ds),
                "users": ds.n_users, "items": ds.n_items, "duplicates": ds.duplicates,
                "sparsity": sparsity(ds) if len(ds) else None}
        p = self.out / "dataset.json"
        p.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        self.bundle.add("dataset", p)
        self.bundle.reports["dataset"] = info
        return info

    def write_split(self):
        train, test, test_users = self.split()
        d = self.out / "split"
        manifest = write_split(train, test, self.split_spec(), d, test_users)
        for name in ("train.data", "test.data", "split.json"):
            self.bundle.add(f"split/{name}", d / name)
        self.bundle.reports["split"] = manifest
        return train, test, test_users

    def write_similarity(self, train):
        kinds = ["user_pcc"] if self.cfg["clustering"]["method"] != "none" else []
        p = self.cfg["predictor"]["method"]
        kinds.append("item_cosine" if p == "item_based" else "user_pcc")
        for kind in dict.fromkeys(kinds):
            sims = self.similarity(train, kind)
            path = self.out / f"similarity_{kind}.bin"
            save_matrix(path, sims, train.content_hash())
            self.bundle.add(f"similarity_{kind}", path)

    def write_predictions(self, train, test):
        preds = self.predictions(train, test)
        path = self.out / "predictions.csv"
        save_predictions(preds, path, train, train.content_hash())
        self.bundle.add("predictions", path)
        self.bundle.add("predictions_meta", path.with_suffix(".json"))
        self.bundle.reports["coverage"] = preds.coverage
        return preds

    def write_clusters(self, train):
        model = self.clusters(train)
        if model is None:
            return None
        path = self.out / "clusters.csv"
        save_clusters(model, path, train.user_ids, train.content_hash())
        self.bundle.add("clusters", path)
        self.bundle.add("clusters_meta", path.with_suffix(".json"))
        validity = cluster_validity(distance_matrix(self.similarity(train, "user_pcc")), model)
        vp = self.out / "validity.json"
        vp.write_text(json.dumps(validity, indent=2, sort_keys=True) + "\n")
        self.bundle.add("validity", vp)
        self.bundle.reports["validity"] = validity
        if self.cfg["figures"]:
            self.bundle.add("validity_png", plots.validity_bars(validity, self.out / "validity.png"))
        return model

    # -- top-level runs -------------------------------------------------

    def run(self, upto: str = "sweep") -> Bundle:
        if upto not in STAGES:
            raise ConfigError(f"unknown stage {upto!r}")
        level = STAGES.index(upto)
        self.write_ingest()
        if level >= 1:
            train, test, _ = self.write_split()
        if level >= 2:
            self.write_similarity(train)
        if level >= 3:
            preds = self.write_predictions(train, test)
        if level >= 4:
            model = self.write_clusters(train)
        if upto == "evaluate":
            self.write_evaluation(train, test, preds, model)
        elif upto == "sweep":
            self.write_sweep(train, test, preds, model)
        self.bundle.cache_hits = dict(self.cache.hits)
        self.bundle.write_manifest(self.cfg)
        return self.bundle

    def _inputs(self, train, test, preds, model):
        avg = cluster_item_average(train, model) if model is not None else None
        return align(test, preds, avg, model)

    def write_evaluation(self, train, test, preds, model):
        t = self.cfg["thresholds"]
        bt = self.cfg["baseline_threshold"]
        if t is None and bt is None:
            raise ConfigError("evaluate needs 'thresholds' and/or 'baseline_threshold'")
        dp = float(self.cfg["delta_pref"])
        reports = {}
        if t is not None:
            if model is None:
                raise ConfigError("IPU thresholds need a clustering method")
            cfg = ThresholdConfig(float(t["alpha"]), float(t["beta"]), float(t["gamma"]), dp)
            reports["proposed"] = evaluate(test, preds, None, None, cfg,
                                           _inputs=self._inputs(train, test, preds, model))
        if bt is not None:
            reports["baseline"] = evaluate_baseline(test, preds, float(bt), dp,
                                                    _inputs=self._inputs(train, test, preds, None))
        jp = self.out / "evaluation.json"
        jp.write_text(json.dumps({k: json.loads(r.to_json()) for k, r in reports.items()},
                                 indent=2, sort_keys=True) + "\n")
        cp = self.out / "evaluation.csv"
        with cp.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("rule",) + EvaluationReport.CSV_HEADER)
            for k, r in reports.items():
                w.writerow([k] + r.csv_row())
        self.bundle.add("evaluation", jp)
        self.bundle.add("evaluation_csv", cp)
        self.bundle.reports["evaluation"] = reports
        return reports

    def grid(self) -> GridSpec:
        g = dict(self.cfg["grid"] or {})
        for k in ("alpha_range", "beta_range", "gamma_range"):
            if k in g:
                g[k] = tuple(float(v) for v in g[k])
        return GridSpec(**g)

    def _tune(self, train, test, preds, model, grid, dp):
        x = self._inputs(train, test, preds, model)
        result = sweep_inputs(x, grid, dp)
        base = baseline_sweep(self._inputs(train, test, preds, None),
                              grid_values(*self.cfg["baseline_grid"]), dp)
        return x, result, base

    def write_sweep(self, train, test, preds, model):
        if model is None:
            raise ConfigError("sweep needs a clustering method")
        grid, dp = self.grid(), float(self.cfg["delta_pref"])
        x, result, base = self._tune(train, test, preds, model, grid, dp)
        rows = matched_frontier(result.table, base, self.cfg["frontier_thresholds"],
                                self.cfg["precision_levels"])
        result.frontier = rows
        kb = base.best_f1()
        summary = result.summary()
        summary["baseline_best"] = _baseline_row(base, kb)
        summary["protocol"] = self.cfg["protocol"]
        if self.cfg["protocol"] == "validation":
            summary["validation"] = self._validation_protocol(train, test, preds, model, grid, dp)
        jp = self.out / "sweep.json"
        jp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        cp = self.out / "sweep.csv"
        write_sweep_csv(result.table, cp)
        bp = self.out / "baseline_sweep.csv"
        write_baseline_csv(base, bp)
        fp = self.out / "frontier.csv"
        _write_rows(fp, rows, FRONTIER_COLUMNS)
        for name, p in (("sweep_json", jp), ("sweep_csv", cp), ("baseline_sweep", bp),
                        ("frontier", fp)):
            self.bundle.add(name, p)
        if self.cfg["figures"] and result.best is not None:
            self.bundle.add("f1_heatmap", plots.f1_heatmap(
                result.table, result.best["gamma"], self.out / "f1_heatmap.png", result.best))
            self.bundle.add("baseline_f1", plots.baseline_curve(base, self.out / "baseline_f1.png"))
            self.bundle.add("frontier_png", plots.frontier(rows, self.out / "frontier.png"))
        self.bundle.reports["sweep"] = result
        self.bundle.reports["baseline"] = base
        return result, base

    def _validation_protocol(self, train, test, preds, model, grid, dp):
        """Tune on a held-out slice of train, report on test."""
        vspec = SplitSpec(test_fraction=float(self.cfg["validation_fraction"]), seed=self.seed)
        fit, val, _ = self.split(train, vspec)
        vpreds = self.predictions(fit, val)
        vmodel = self.clusters(fit)
        _, vres, vbase = self._tune(fit, val, vpreds, vmodel, grid, dp)
        b = vres.best
        cfg = ThresholdConfig(b["alpha"], b["beta"], b["gamma"], dp)
        rep = evaluate(test, preds, None, None, cfg,
                       _inputs=self._inputs(train, test, preds, model))
        th = float(vbase.threshold[vbase.best_f1()])
        brep = evaluate_baseline(test, preds, th, dp,
                                 _inputs=self._inputs(train, test, preds, None))
        return {"tuned_on_validation": b, "baseline_threshold": th,
                "test_proposed": json.loads(rep.to_json()),
                "test_baseline": json.loads(brep.to_json())}


FRONTIER_COLUMNS = ("precision", "baseline_threshold", "baseline_recall", "baseline_f1",
                    "proposed_recall", "proposed_f1", "points")


def _baseline_row(base, k) -> dict:
    return {"threshold": float(base.threshold[k]), "precision": float(base.precision[k]),
            "recall": float(base.recall[k]), "f1": float(base.f1[k]),
            "tp": int(base.tp[k]), "fp": int(base.fp[k]), "fn": int(base.fn[k]),
            "tn": int(base.tn[k])}


def matched_frontier(table, base, thresholds, levels=None) -> list[dict]:
    """Recall/F1 at the baseline's achieved precision for each threshold
    (plus the baseline's best-F1 threshold), or at explicit ``levels``."""
    rows = []
    if levels:
        for r in precision_frontier(table, levels):
            b = precision_frontier(base, [r["precision"]])[0]
            rows.append({"precision": r["precision"], "baseline_threshold": None,
                         "baseline_recall": b["recall"], "baseline_f1": b["f1"],
                         "proposed_recall": r["recall"], "proposed_f1": r["f1"],
                         "points": r["points"]})
        return rows
    ths = list(thresholds or []) + [float(base.threshold[base.best_f1()])]
    for th in dict.fromkeys(round(float(t), 10) for t in ths):
        k = int(np.argmin(np.abs(base.threshold - th)))
        level = float(base.precision[k])
        r = precision_frontier(table, [level])[0]
        rows.append({"precision": level, "baseline_threshold": float(base.threshold[k]),
                     "baseline_recall": float(base.recall[k]), "baseline_f1": float(base.f1[k]),
                     "proposed_recall": r["recall"], "proposed_f1": r["f1"],
                     "points": r["points"]})
    return rows


def _write_rows(path, rows, columns):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else
                        (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in columns])


def run_pipeline(cfg: dict, upto: str = "sweep", out=None, cache=None) -> Bundle:
    """Run every stage up to ``upto`` and write its artifacts plus a manifest."""
    return Pipeline(cfg, out, cache).run(upto)


# -- table reproduction ----------------------------------------------------

FAMILIES = {
    "item_spectral": {"predictor": "item_based", "clustering": "spectral", "split": "random_holdout"},
    "item_fcm": {"predictor": "item_based", "clustering": "fcm", "split": "random_holdout"},
    "user_spectral": {"predictor": "user_based", "clustering": "spectral", "split": "random_holdout"},
    "user_fcm": {"predictor": "user_based", "clustering": "fcm", "split": "random_holdout"},
    "cold_start": {"predictor": "item_based", "clustering": "spectral", "split": "cold_start_mask"},
}


def reproduce_tables(cfg: dict, out=None, cache=None, families=None) -> dict:
    """Run the five experiment families and write side-by-side tables."""
    out = Path(out if out is not None else cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    hits = {}
    top = Bundle(out)
    for name in families or FAMILIES:
        fam = FAMILIES[name]
        c = copy.deepcopy(cfg)
        c["predictor"]["method"] = fam["predictor"]
        c["clustering"]["method"] = fam["clustering"]
        c["split"]["mode"] = fam["split"]
        c["grid"] = c["grid"] or {}
        pipe = Pipeline(c, out / name, cache if cache is not None else cfg["cache"])
        bundle = pipe.run("sweep")
        results[name] = bundle
        hits.update({f"{name}/{k}": v for k, v in bundle.cache_hits.items()})
        for k, p in bundle.artifacts.items():
            top.add(f"{name}/{k}", p)
    tables = _tables(results)
    for tname, (cols, rows) in tables.items():
        p = out / f"{tname}.csv"
        _write_rows(p, rows, cols)
        top.add(tname, p)
    md = out / "tables.md"
    md.write_text(_markdown(tables))
    top.add("tables_md", md)
    top.cache_hits = hits
    top.write_manifest(cfg)
    return {"tables": tables, "bundles": results, "bundle": top}


def _best_row(bundle, label):
    res = bundle.reports["sweep"]
    r = res.report
    return {"method": label, "gamma": res.best["gamma"], "alpha": res.best["alpha"],
            "beta": res.best["beta"], "precision": r.precision, "recall": r.recall, "f1": r.f1}


def _base_row(bundle, label):
    base = bundle.reports["baseline"]
    k = base.best_f1()
    return {"method": label, "gamma": 0.0, "alpha": float(base.threshold[k]),
            "beta": float(base.threshold[k]), "precision": float(base.precision[k]),
            "recall": float(base.recall[k]), "f1": float(base.f1[k])}


def _tables(results) -> dict:
    cols = ("method", "gamma", "alpha", "beta", "precision", "recall", "f1")
    tables = {}
    if "item_spectral" in results:
        rows = results["item_spectral"].reports["sweep"].frontier
        tables["matched_precision"] = (FRONTIER_COLUMNS, rows)
    for tname, (spec, fcm) in {"item_based": ("item_spectral", "item_fcm"),
                               "user_based": ("user_spectral", "user_fcm")}.items():
        rows = []
        for fam, label in ((spec, "Spectral"), (fcm, "FCM")):
            if fam in results:
                rows.append(_best_row(results[fam], label))
        base_from = spec if spec in results else fcm
        if base_from in results:
            rows.append(_base_row(results[base_from], "Baseline (no clustering)"))
        if rows:
            tables[tname] = (cols, rows)
    if "cold_start" in results:
        b = results["cold_start"]
        split = b.reports.get("split", {})
        rows = [_base_row(b, "Baseline method"), _best_row(b, "Proposed method")]
        for r in rows:
            r["test_users"] = split.get("test_users")
            r["train_only_users"] = split.get("train_only_users")
        tables["cold_start_comparison"] = (cols + ("test_users", "train_only_users"), rows)
    return tables


def _markdown(tables) -> str:
    lines = []
    for name, (cols, rows) in tables.items():
        lines.append(f"## {name}\n")
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for r in rows:
            cells = []
            for c in cols:
                v = r.get(c)
                cells.append("" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)
