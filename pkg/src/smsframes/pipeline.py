"""The three stages wired together over manifests and files on disk.

Each public function here backs one CLI command and can be called directly.
Per-video work is independent and runs in a process pool when
``workers > 1``; results are always collected and written sorted by
``video_id`` so outputs do not depend on scheduling.
"""

import csv
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mapper as mp
from .errors import ArgumentError, CapacityError, DataError, FormatError, SmsError
from .features import (GROUND_TRUTH_NAME, generate_synthetic, load_video, read_ground_truth,
                       read_manifest, split_train_heldout)
from .oracle import (CountingOracle, ProbeOracle, RemoteOracle, fit_linear_probe, load_probe,
                     pooled_training_set, probe_loss, save_probe)
from .search import (GlsConfig, brute_force, flat_search, hierarchical_search, random_baseline,
                     stage3_search, uniform_baseline)

log = logging.getLogger(__name__)

STRATEGIES = ("base", "sms", "random", "brute")


def video_seed(seed, video_id):
    """Per-video seed that does not depend on processing order."""
    return int(np.random.SeedSequence([seed, zlib.crc32(video_id.encode())]).generate_state(1)[0])


@dataclass
class Dataset:
    root: str
    entries: list
    truth: dict
    train: list
    heldout: list

    @classmethod
    def load(cls, manifest, split_seed=0):
        manifest = Path(manifest)
        entries = read_manifest(manifest)
        if not entries:
            raise DataError(f"{manifest}: empty manifest")
        gt_path = manifest.parent / GROUND_TRUTH_NAME
        truth = read_ground_truth(gt_path) if gt_path.exists() else {}
        train, held = split_train_heldout(entries, split_seed)
        return cls(str(manifest.parent), entries, truth, train, held)

    def subset(self, split):
        if split == "train":
            return self.train
        if split == "heldout":
            return self.heldout
        if split == "all":
            return sorted(self.entries, key=lambda e: e.video_id)
        raise ArgumentError(f"unknown split {split!r}")

    def video(self, entry):
        return load_video(entry, self.root)


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _run_pool(fn, tasks, workers, initializer=None, initargs=()):
    if workers <= 1 or len(tasks) <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------
# gen-synth / fit-probe

def gen_synth(config, out_dir):
    return generate_synthetic(config, out_dir)


def fit_probe(manifest, out, epochs=500, lr=1.0, l2=0.0, seed=0, pool="auto", split_seed=0):
    """Fit the linear-probe oracle on the training split.

    ``pool="auto"`` pools the planted frames when a ground-truth sidecar is
    present, and all frames otherwise.
    """
    ds = Dataset.load(manifest, split_seed)
    if pool == "auto":
        pool = "informative" if ds.truth else "all"
    if pool == "informative" and not ds.truth:
        raise DataError("informative pooling needs a ground-truth sidecar")
    X, y = pooled_training_set(ds.train, ds.root, ds.truth if pool == "informative" else None)
    classes = max(e.label for e in ds.entries) + 1
    probe = fit_linear_probe(X, y, classes, epochs, lr, seed, l2)
    save_probe(out, probe)
    return probe


# --------------------------------------------------------------------------
# stage 1: search-labels

_worker = {}


def _init_search_worker(root, probe_path, remote):
    _worker.clear()
    _worker["root"] = root
    _worker["probe"] = load_probe(probe_path) if probe_path else None
    _worker["remote"] = RemoteOracle(remote) if remote else None


def _oracle_for(fm, label):
    if _worker["remote"] is not None:
        return _worker["remote"]
    return ProbeOracle.single(_worker["probe"], fm, label)


def _search_one(task):
    entry, n, K, budget, seed, flat = task
    try:
        fm = load_video(entry, _worker["root"])
        counter = CountingOracle(_oracle_for(fm, entry.label), limit=budget)
        cfg = GlsConfig(max_evaluations=budget, seed=seed)
        if flat:
            best, trace = flat_search(fm, counter, n, cfg)
        else:
            best, trace = hierarchical_search(fm, counter, K, n, cfg)
        return {"video_id": entry.video_id, "frames": list(best),
                "objective": trace.best_objective, "evaluations": counter.eval_count}
    except SmsError as exc:
        return {"video_id": entry.video_id, "error": f"{type(exc).__name__}: {exc}"}


def search_labels(manifest, out, probe=None, remote=None, n=8, K=30, budget=400, seed=0,
                  workers=1, split="all", flat=False, split_seed=0):
    """Stage 1 over every video of ``split``; returns (records, failures)."""
    if not probe and not remote:
        raise ArgumentError("search-labels needs a probe file or a remote oracle command")
    ds = Dataset.load(manifest, split_seed)
    tasks = [(e, n, K, budget, video_seed(seed, e.video_id), flat) for e in ds.subset(split)]
    results = _run_pool(_search_one, tasks, workers, _init_search_worker,
                        (ds.root, str(probe) if probe else None, remote))
    if _worker.get("remote") is not None:
        _worker["remote"].close()
    results.sort(key=lambda r: r["video_id"])
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    write_jsonl(out, ok)
    return ok, failed


# --------------------------------------------------------------------------
# stage 2: train-mapper

def build_examples(ds, labels, entries):
    by_id = {r["video_id"]: r for r in labels}
    examples = []
    for e in entries:
        if e.video_id not in by_id:
            continue
        fm = ds.video(e)
        frames = by_id[e.video_id]["frames"]
        if not frames or max(frames) >= fm.m or min(frames) < 0:
            raise DataError(f"{e.video_id}: labelled frames out of range")
        examples.append(mp.TrainingExample(fm.rows, fm.rows[frames].mean(axis=0), e.video_id))
    return examples


def train_mapper(manifest, labels_path, out_model, report_path=None, variant="transformer",
                 hidden=64, heads=4, layers=2, train_config=None, split_seed=0, pos_scale=None):
    ds = Dataset.load(manifest, split_seed)
    labels = read_jsonl(labels_path)
    if not labels:
        raise ArgumentError(f"{labels_path}: no labels")
    known = {e.video_id for e in ds.entries}
    for r in labels:
        if r["video_id"] not in known:
            raise DataError(f"labelled video {r['video_id']!r} is not in the manifest")
    cfg = train_config or mp.TrainConfig()
    train_set = build_examples(ds, labels, ds.train)
    val_set = build_examples(ds, labels, ds.heldout)
    if not train_set:
        raise ArgumentError("no labelled videos in the training split")
    d = train_set[0].inputs.shape[1]
    params = mp.init_params(variant, d, hidden, heads, layers, seed=cfg.seed, scale=cfg.weight_init_scale,
                            pos_scale=pos_scale)
    params, report = mp.train(train_set, params, cfg, val_set or None)
    mp.save_params(out_model, params)
    if report_path:
        with open(report_path, "w") as fh:
            json.dump({**report.to_json(), "train_videos": len(train_set), "val_videos": len(val_set),
                       "hidden": hidden, "heads": params.heads, "layers": params.layers,
                       "pos_scale": params.pos_scale, "weight_decay": cfg.weight_decay,
                       "schedule": cfg.schedule}, fh, indent=1)
    return params, report


# --------------------------------------------------------------------------
# stage 3: select

def _select_one(task):
    entry, strategy, n, budget, seed = task
    try:
        fm = load_video(entry, _worker["root"])
        rec = {"video_id": entry.video_id, "strategy": strategy}
        if strategy == "sms":
            target = mp.forward(_worker["model"], fm)
            if not np.any(target):
                raise DataError(f"{entry.video_id}: mapper predicted a zero vector")
            best, trace = stage3_search(fm, target, n, GlsConfig(max_evaluations=budget, seed=seed))
            rec.update(frames=list(best), objective=trace.best_objective, evaluations=trace.evaluations)
        elif strategy in ("base", "random"):
            frames = (uniform_baseline(fm.m, n) if strategy == "base"
                      else random_baseline(fm.m, n, np.random.default_rng(seed)))
            probe = _worker["probe"]
            obj = probe_loss(probe, fm, frames, entry.label) if probe is not None else None
            rec.update(frames=list(frames), objective=obj, evaluations=0)
        else:
            probe = _worker["probe"]
            if probe is None:
                raise ArgumentError("brute strategy needs a probe")
            counter = CountingOracle(ProbeOracle.single(probe, fm, entry.label))
            best, val = brute_force((fm.m, n), lambda c: counter.loss(entry.video_id, c))
            rec.update(frames=list(best), objective=val, evaluations=counter.eval_count)
        return rec
    except SmsError as exc:
        return {"video_id": entry.video_id, "strategy": strategy, "error": f"{type(exc).__name__}: {exc}"}


def _init_select_worker(root, model_path, probe_path):
    _worker.clear()
    _worker["root"] = root
    _worker["model"] = mp.load_params(model_path) if model_path else None
    _worker["probe"] = load_probe(probe_path) if probe_path else None


def select(manifest, out, strategy="sms", model=None, probe=None, n=8, budget=2000, seed=0,
           workers=1, split="heldout", split_seed=0):
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown strategy {strategy!r}")
    if strategy == "sms" and not model:
        raise ArgumentError("sms selection needs a model file")
    ds = Dataset.load(manifest, split_seed)
    entries = ds.subset(split)
    if model:
        params = mp.load_params(model)
        d = ds.video(entries[0]).d
        if params.d != d:
            raise FormatError(f"model dim {params.d} does not match feature dim {d}")
    tasks = [(e, strategy, n, budget, video_seed(seed, e.video_id)) for e in entries]
    results = _run_pool(_select_one, tasks, workers, _init_select_worker,
                        (ds.root, str(model) if model else None, str(probe) if probe else None))
    results.sort(key=lambda r: r["video_id"])
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    write_jsonl(out, ok)
    return ok, failed


# --------------------------------------------------------------------------
# eval

def planted_precision_recall(frames, planted):
    """Precision over selected slots (with multiplicity), recall over planted frames."""
    planted = set(planted)
    hits = sum(1 for f in frames if f in planted)
    precision = hits / len(frames)
    recall = len(set(frames) & planted) / len(planted) if planted else 0.0
    return precision, recall


def evaluate(manifest, selections, probe, out_json=None, out_csv=None, split="heldout", split_seed=0):
    """Per-strategy metrics over the evaluation split.

    ``selections`` maps a strategy name to a selections file.
    """
    if not selections:
        raise ArgumentError("no selection files given")
    ds = Dataset.load(manifest, split_seed)
    probe = load_probe(probe) if isinstance(probe, (str, os.PathLike)) else probe
    entries = ds.subset(split)
    videos = {e.video_id: (ds.video(e), e.label) for e in entries}
    report = {"split": split, "videos": len(entries), "strategies": {}}
    for name, path in selections.items():
        if not Path(path).exists():
            raise ArgumentError(f"selection file for {name!r} not found: {path}")
        recs = {r["video_id"]: r for r in read_jsonl(path)}
        missing = [vid for vid in videos if vid not in recs]
        if missing:
            raise DataError(f"{name}: no selection for {len(missing)} videos, e.g. {missing[0]!r}")
        losses, correct, precs, recs_, evals = [], [], [], [], []
        for vid, (fm, label) in videos.items():
            frames = recs[vid]["frames"]
            losses.append(probe_loss(probe, fm, frames, label))
            correct.append(probe.predict(fm.rows[frames].mean(axis=0)) == label)
            evals.append(recs[vid].get("evaluations") or 0)
            if vid in ds.truth:
                p, r = planted_precision_recall(frames, ds.truth[vid])
                precs.append(p)
                recs_.append(r)
        stats = {"videos": len(videos), "mean_loss": float(np.mean(losses)),
                 "accuracy": float(np.mean(correct)), "mean_evaluations": float(np.mean(evals))}
        if precs:
            stats["precision"] = float(np.mean(precs))
            stats["recall"] = float(np.mean(recs_))
        report["strategies"][name] = stats
    if out_json:
        with open(out_json, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    if out_csv:
        cols = ["strategy", "videos", "mean_loss", "accuracy", "precision", "recall", "mean_evaluations"]
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for name, s in report["strategies"].items():
                w.writerow([name] + [s.get(c, "") for c in cols[1:]])
    return report


# --------------------------------------------------------------------------
# compare-search

COMPARE_COLUMNS = ["algorithm", "video_id", "budget", "eval_count", "best_objective", "note"]


def _compare_one(task):
    entry, algorithms, budgets, n, K, seed, brute_cap = task
    fm = load_video(entry, _worker["root"])
    rows = []
    for algo in algorithms:
        if algo == "brute":
            counter = CountingOracle(_oracle_for(fm, entry.label))
            try:
                _, val = brute_force((fm.m, n), lambda c: counter.loss(entry.video_id, c), cap=brute_cap)
                rows.append(["brute", entry.video_id, "", counter.eval_count, val, ""])
            except CapacityError as exc:
                rows.append(["brute", entry.video_id, "", 0, "", f"CapacityError: {exc}"])
            continue
        for budget in budgets:
            counter = CountingOracle(_oracle_for(fm, entry.label), limit=budget)
            cfg = GlsConfig(max_evaluations=budget, seed=seed)
            try:
                if algo == "hier":
                    _, trace = hierarchical_search(fm, counter, K, n, cfg)
                else:
                    _, trace = flat_search(fm, counter, n, cfg)
                rows.append([algo, entry.video_id, budget, counter.eval_count, trace.best_objective, ""])
            except SmsError as exc:
                rows.append([algo, entry.video_id, budget, counter.eval_count, "",
                             f"{type(exc).__name__}: {exc}"])
    return rows


def compare_search(manifest, out_csv, probe=None, remote=None, algorithms=("hier", "flat", "brute"),
                   budgets=(50, 100, 200, 400), n=8, K=30, seed=0, workers=1, split="all",
                   brute_cap=10**6, split_seed=0):
    """Best objective per algorithm and budget, per video and averaged (video_id ``ALL``)."""
    for a in algorithms:
        if a not in ("hier", "flat", "brute"):
            raise ArgumentError(f"unknown algorithm {a!r}")
    if not probe and not remote:
        raise ArgumentError("compare-search needs a probe file or a remote oracle command")
    ds = Dataset.load(manifest, split_seed)
    entries = ds.subset(split)
    tasks = [(e, tuple(algorithms), tuple(budgets), n, K, video_seed(seed, e.video_id), brute_cap)
             for e in entries]
    per_video = _run_pool(_compare_one, tasks, workers, _init_search_worker,
                          (ds.root, str(probe) if probe else None, remote))
    if _worker.get("remote") is not None:
        _worker["remote"].close()
    rows = sorted((r for rs in per_video for r in rs), key=lambda r: (r[0], str(r[2]), r[1]))

    summary = []
    for algo in algorithms:
        for budget in ([""] if algo == "brute" else budgets):
            sel = [r for r in rows if r[0] == algo and r[2] == budget and r[5] == ""]
            if not sel:
                summary.append([algo, "ALL", budget, 0, "", "no successful runs"])
                continue
            summary.append([algo, "ALL", budget, float(np.mean([r[3] for r in sel])),
                            float(np.mean([r[4] for r in sel])), f"{len(sel)} videos"])
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        w.writerows(rows + summary)
    return rows, summary
