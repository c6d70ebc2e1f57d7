"""Command line driver: synth, preprocess, train, predict, explain, evaluate, pipeline.

Every subcommand writes only below ``--out`` and finishes with a
``manifest.json`` holding the resolved config, the seed and sha256 hashes of
inputs and artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import explain as ex
from .carenet import CaReNetConfig, CaReNetEstimator, TrainConfig
from .autonn import ScheduleConfig
from .exceptions import ConfigError
from .labels import (
    REGRESSION,
    class_scores,
    decode_output,
    get_schema,
    read_label_manifest,
    task_column,
    write_label_manifest,
)
from .preprocess import FTIRPreprocessor, PipelineConfig, extract_patches
from .spectra import ReferenceLibrary, SynthConfig, WavenumberAxis, read_cube, synth_dataset, write_cube

logger = logging.getLogger("ftir_carenet")

SUBCOMMANDS = ("synth", "preprocess", "train", "predict", "explain", "evaluate", "pipeline")
SEED_ENV = "CARENET_SEED"


@dataclass
class RunConfig:
    """Flat run configuration; JSON keys are the field names."""

    seed: int = 0
    workers: int = 1
    task: str = "subtype"
    split_mode: str = ev.BY_PATIENT
    n_folds: int = 4
    # synthetic data
    n_samples: int = 12
    n_classes: int = 3
    height: int = 64
    width: int = 64
    bio_points: int = 467
    raw_hi: float = 3950.0
    tissue_fraction: float = 0.5
    discriminative_peak: float = 1240.0
    noise_std: float = 0.004
    # preprocessing
    amide_window: list = field(default_factory=lambda: [1700.0, 1500.0])
    paraffin_window: list = field(default_factory=lambda: [1480.0, 1450.0])
    biofingerprint: list = field(default_factory=lambda: [1800.0, 900.0])
    outlier_pcs: int = 10
    outlier_ci: float = 0.95
    savgol_window: int = 11
    savgol_order: int = 2
    emsc_poly_order: int = 4
    emsc_var_threshold: float = 0.99
    patch_size: int = 32
    patch_zero_fraction: float = 0.5
    # network and training
    spectral_filters: list = field(default_factory=lambda: [128, 256, 512])
    spatial_filters: list = field(default_factory=lambda: [128, 256, 512])
    fusion_units: int = 512
    epochs: int = 300
    batch_size: int = 10
    initial_lr: float = 1e-3
    t_mul: float = 1.5
    m_mul: float = 1.0
    alpha: float = 1e-5
    augment: bool = True
    class_weighting: bool = True
    # explanation
    top_n: int = 30
    n_bands: int = 3
    n_heatmaps: int = 4

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            amide_window=tuple(self.amide_window),
            paraffin_window=tuple(self.paraffin_window),
            biofingerprint=tuple(self.biofingerprint),
            outlier_pcs=self.outlier_pcs,
            outlier_ci=self.outlier_ci,
            savgol_window=self.savgol_window,
            savgol_order=self.savgol_order,
            emsc_poly_order=self.emsc_poly_order,
            emsc_var_threshold=self.emsc_var_threshold,
            patch_size=self.patch_size,
            patch_zero_fraction=self.patch_zero_fraction,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_samples=self.n_samples,
            n_classes=self.n_classes,
            height=self.height,
            width=self.width,
            bio_points=self.bio_points,
            raw_hi=self.raw_hi,
            tissue_fraction=self.tissue_fraction,
            discriminative_peak=self.discriminative_peak,
            noise_std=self.noise_std,
        )

    def estimator(self, seed: int | None = None) -> CaReNetEstimator:
        return CaReNetEstimator(
            task=self.task,
            spectral_filters=tuple(self.spectral_filters),
            spatial_filters=tuple(self.spatial_filters),
            fusion_units=self.fusion_units,
            epochs=self.epochs,
            batch_size=self.batch_size,
            initial_lr=self.initial_lr,
            t_mul=self.t_mul,
            m_mul=self.m_mul,
            alpha=self.alpha,
            augment=self.augment,
            class_weighting=self.class_weighting,
            seed=self.seed if seed is None else seed,
        )

    def validate(self) -> "RunConfig":
        checks = [
            ("pipeline", lambda: self.pipeline_config().validate()),
            ("synth", lambda: self.synth_config().validate()),
            ("schedule", lambda: ScheduleConfig(self.initial_lr, 1, self.t_mul, self.m_mul, self.alpha).validate()),
            ("train", lambda: TrainConfig(self.batch_size, self.epochs).validate()),
            ("model", lambda: CaReNetConfig(
                (self.patch_size, self.patch_size, self.bio_points),
                tuple(self.spectral_filters), tuple(self.spatial_filters), fusion_units=self.fusion_units,
            ).validate()),
            ("task", lambda: get_schema(self.task)),
        ]
        for name, check in checks:
            try:
                check()
            except (ConfigError, ValueError, TypeError) as exc:
                raise ConfigError(f"config.{name}: {exc}") from None
        if self.split_mode not in (ev.BY_PATIENT, ev.BY_PATCH):
            raise ConfigError(f"config.split_mode: must be {ev.BY_PATIENT!r} or {ev.BY_PATCH!r}")
        for key in ("workers", "n_folds", "top_n", "n_bands"):
            if getattr(self, key) < 1:
                raise ConfigError(f"config.{key}: must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from a JSON file path or dict.

    Unknown keys are rejected; ``overrides`` (command line flags) win over
    file values, which win over defaults.
    """
    data = {}
    if isinstance(source, dict):
        data = dict(source)
    elif source is not None:
        try:
            data = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {source}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {source}: top level must be an object")
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"config: unknown key {unknown[0]!r}")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key, value in data.items():
        default = known[key].default
        if default is dataclasses.MISSING:
            default = known[key].default_factory()
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"config.{key}: expected true/false, got {value!r}")
        if isinstance(default, list) and not isinstance(value, (list, tuple)):
            raise ConfigError(f"config.{key}: expected a list, got {value!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config.{key}: expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool) and value != int(value):
                raise ConfigError(f"config.{key}: expected an integer, got {value!r}")
            value = type(default)(value)
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"config.{key}: expected a string, got {value!r}")
        data[key] = list(value) if isinstance(value, tuple) else value
    return RunConfig(**data).validate()


# ---------------------------------------------------------------------------
# artifact helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: list[Path]) -> Path:
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "workers_independent": True,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in sorted(inputs)],
        "artifacts": [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p)} for p in artifacts],
    }
    path = out / "manifest.json"
    write_json(path, manifest)
    return path


def save_patches(path: Path, patches, axis: WavenumberAxis) -> None:
    np.savez(
        path,
        data=np.stack([p.data for p in patches]).astype(np.float32),
        sample_id=np.array([p.sample_id for p in patches]),
        patient_id=np.array([p.patient_id for p in patches]),
        origin=np.array([p.origin for p in patches]),
        axis=np.array([axis.start, axis.end, axis.n_points], dtype=np.float64),
    )


def load_patches(path: Path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        d = {k: z[k] for k in z.files}
    a = d["axis"]
    d["axis"] = WavenumberAxis(float(a[0]), float(a[1]), int(a[2]))
    d["sample_id"] = [str(s) for s in d["sample_id"]]
    d["patient_id"] = [str(s) for s in d["patient_id"]]
    return d


def labels_by_sample(records, task) -> dict:
    col = task_column(task)
    return {r["sample_id"]: r[col] for r in records if r[col] != ""}


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_metric", "dev_loss", "best_dev_metric", "lr"])
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in ("train_loss", "dev_metric", "dev_loss", "best_dev_metric", "lr")])


def write_predictions(path: Path, est: CaReNetEstimator, data: dict, idx=None) -> list[dict]:
    idx = np.arange(len(data["sample_id"])) if idx is None else np.asarray(idx)
    rows = []
    if idx.size:
        raw = est.predict_raw(data["data"][idx])
    schema = est.schema_
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "patient_id", "patch", "raw", "prediction"])
        for j, i in enumerate(idx):
            r = raw[j]
            pred = decode_output(schema, r)
            rows.append({"sample_id": data["sample_id"][i], "patient_id": data["patient_id"][i],
                         "raw": r, "prediction": pred})
            w.writerow([data["sample_id"][i], data["patient_id"][i], int(i),
                        " ".join(repr(float(v)) for v in r),
                        f"{pred:.6f}" if isinstance(pred, float) else pred])
    return rows


def read_predictions(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"sample_id": r["sample_id"], "patient_id": r["patient_id"],
             "raw": np.array([float(v) for v in r["raw"].split()])}
            for r in csv.DictReader(fh)
        ]


def vote_rows(rows, schema, truth_of, fold) -> list[dict]:
    by_sample = {}
    for r in rows:
        by_sample.setdefault((r["sample_id"], r["patient_id"]), []).append(r["raw"])
    votes = []
    for (sid, pid), outs in sorted(by_sample.items()):
        pred = ev.vote_sample(outs, schema)
        truth = truth_of.get(sid, "")
        if schema.kind == REGRESSION:
            correct = ""
        else:
            correct = str(pred) == str(truth)
        votes.append({"patient": pid, "sample": sid, "fold": fold, "truth": truth,
                      "prediction": pred, "correct": correct})
    return votes


def patch_metrics(rows, schema, truth_of):
    truths = [truth_of[r["sample_id"]] for r in rows]
    if schema.kind == REGRESSION:
        preds = [float(r["raw"][0]) for r in rows]
        return ev.regression_scales(preds, [(float(t) - schema.regression_range[0]) /
                                            (schema.regression_range[1] - schema.regression_range[0])
                                            for t in truths], schema)
    preds = [decode_output(schema, r["raw"]) for r in rows]
    return ev.classification_metrics(preds, truths, schema.classes)


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(cfg.synth_config(), cfg.seed)
    cubes = out / "cubes"
    cubes.mkdir(exist_ok=True)
    for m in ds.mosaics:
        write_cube(m, cubes / f"{m.sample_id}.hsc")
    ds.library.save(out / "library.npz")
    write_label_manifest(ds.labels, out / "labels.csv")
    np.savez(out / "planted_masks.npz", tissue=np.stack(ds.tissue_masks), paraffin=np.stack(ds.paraffin_masks))
    return {"cubes": cubes, "library": out / "library.npz", "labels": out / "labels.csv"}


def stage_preprocess(cfg: RunConfig, cube_dir: Path, library_path: Path, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    pcfg = cfg.pipeline_config()
    mosaics = [read_cube(p) for p in sorted(cube_dir.glob("*.hsc"))]
    if not mosaics:
        raise FileNotFoundError(f"no .hsc cubes in {cube_dir}")
    library = ReferenceLibrary.load(library_path)
    pre = FTIRPreprocessor(library=library, config=pcfg, workers=cfg.workers).fit(mosaics)
    processed = pre.transform(mosaics)
    patches = []
    for m in processed:
        patches.extend(extract_patches(m, pcfg.patch_size, pcfg.patch_zero_fraction))
    if not patches:
        raise ValueError("preprocess: no patch survived the zero-fraction rule")
    with open(out / "preprocess_report.csv", "w", newline="") as fh:
        keys = list(pre.reports_[0])
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(pre.reports_)
    path = out / "patches.npz"
    save_patches(path, patches, processed[0].axis)
    return path


def stage_train(cfg, data, truth_of, train_idx, dev_idx, out: Path, seed: int) -> CaReNetEstimator:
    out.mkdir(parents=True, exist_ok=True)
    y = [truth_of[data["sample_id"][i]] for i in train_idx]
    y_dev = [truth_of[data["sample_id"][i]] for i in dev_idx]
    X = data["data"][train_idx]
    X_dev = data["data"][dev_idx] if len(dev_idx) else None
    est = cfg.estimator(seed).fit(X, y, X_dev, y_dev if len(dev_idx) else None)
    est.save(out / "model.ckpt")
    write_history(out / "history.csv", est.history_)
    return est


def stage_explain(cfg, ests, data, idx, out: Path) -> dict:
    """Heatmaps from the first model, channel importance averaged over models."""
    out.mkdir(parents=True, exist_ok=True)
    axis = data["axis"]
    cis = [ex.channel_importance(e.graph_, axis, top_n=cfg.top_n) for e in ests]
    scores = np.mean([c.scores for c in cis], axis=0)
    ci = ex.band_importance(scores, axis, top_n=cfg.top_n)
    ex.write_channel_importance(ci, out / "channel_importance.csv", out / "top_bands.csv", cfg.n_bands)
    est = ests[0]
    schema = est.schema_
    hm_dir = out / "heatmaps"
    hm_dir.mkdir(exist_ok=True)
    for i in list(idx)[: cfg.n_heatmaps]:
        x = data["data"][i]
        raw = est.predict_raw(x[None])[0]
        k = 0 if schema.kind in (REGRESSION, "binary") else int(np.argmax(class_scores(schema, raw)))
        hm = ex.grad_cam(est.graph_, x, class_index=k)
        stem = f"{data['sample_id'][i]}_p{int(i):04d}"
        ex.write_heatmap(hm, hm_dir / f"{stem}.png", hm_dir / f"{stem}.csv")
    spec, spat = zip(*[ex.path_contribution(e.graph_, data["data"][idx]) for e in ests])
    write_json(out / "path_contribution.json",
               {"spectral": float(np.nanmean(spec)), "spatial": float(np.nanmean(spat)),
                "per_model": [[float(a), float(b)] for a, b in zip(spec, spat)]})
    return {"top_bands": ci.top_bands}


def _samples_for_split(data, truth_of, mode):
    if mode == ev.BY_PATIENT:
        seen = {}
        for sid, pid in zip(data["sample_id"], data["patient_id"]):
            if sid in truth_of:
                seen.setdefault(sid, {"id": sid, "patient_id": pid, "label": truth_of[sid]})
        return list(seen.values())
    return [
        {"id": f"{sid}#{i}", "patient_id": pid, "label": truth_of[sid]}
        for i, (sid, pid) in enumerate(zip(data["sample_id"], data["patient_id"]))
        if sid in truth_of
    ]


def _indices(data, ids, mode):
    ids = set(ids)
    if mode == ev.BY_PATIENT:
        return np.array([i for i, s in enumerate(data["sample_id"]) if s in ids], dtype=int)
    return np.array(sorted(int(u.rsplit("#", 1)[1]) for u in ids), dtype=int)


def run_cv(cfg: RunConfig, patches_path: Path, labels_path: Path, out: Path) -> dict:
    """Split, train one model per fold, vote on the held-out test set, report."""
    schema = get_schema(cfg.task)
    data = load_patches(patches_path)
    truth_of = labels_by_sample(read_label_manifest(labels_path), cfg.task)
    samples = _samples_for_split(data, truth_of, cfg.split_mode)
    plan = ev.split_dataset(samples, schema, cfg.split_mode, seed=cfg.seed, n_folds=cfg.n_folds)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_fold_manifest(plan, samples, out / "folds.csv")
    test_idx = _indices(data, plan.test_ids, cfg.split_mode)
    test_idx = np.array([i for i in test_idx if data["patient_id"][i] in set(plan.test_patients)], dtype=int)
    ests, fold_metrics, fold_reg, votes = [], [], [], []
    for k, (train_ids, dev_ids) in enumerate(plan.folds):
        fdir = out / f"fold{k}"
        est = stage_train(cfg, data, truth_of, _indices(data, train_ids, cfg.split_mode),
                          _indices(data, dev_ids, cfg.split_mode), fdir, seed=cfg.seed + k)
        rows = write_predictions(fdir / "test_predictions.csv", est, data, test_idx)
        m = patch_metrics(rows, schema, truth_of)
        (fold_reg if schema.kind == REGRESSION else fold_metrics).append(m)
        votes.extend(vote_rows(rows, schema, truth_of, k))
        ests.append(est)
    report = ev.make_report(out / "report", schema, fold_metrics, votes, fold_reg)
    explained = stage_explain(cfg, ests, data, test_idx, out / "explain")
    result = {"votes": votes, "report": report, "top_bands": explained["top_bands"], "plan": plan}
    if schema.is_classification:
        result["voted_accuracy"] = float(np.mean([v["correct"] for v in votes]))
    else:
        result["voted_mae"] = float(np.mean([abs(v["prediction"] - float(v["truth"])) for v in votes]))
    summary = {k: v for k, v in result.items() if k in ("voted_accuracy", "voted_mae")}
    summary["top_bands"] = [list(b) for b in result["top_bands"][: cfg.n_bands]]
    summary["test_patients"] = plan.test_patients
    write_json(out / "summary.json", summary)
    return result


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carenet", description="FTIR hyperspectral biopsy classification")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--task")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("synth", parents=[common], help="write a synthetic cube set, library and labels")
    p = sub.add_parser("preprocess", parents=[common], help="segment, correct and patch cubes")
    p.add_argument("--cubes", type=Path, required=True, help="directory of .hsc cubes")
    p.add_argument("--library", type=Path, required=True)
    p = sub.add_parser("train", parents=[common], help="train one fold model")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p = sub.add_parser("predict", parents=[common], help="patch predictions and sample votes")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--patches", type=Path, required=True)
    p = sub.add_parser("explain", parents=[common], help="Grad-CAM, channel importance, path contribution")
    p.add_argument("--model", type=Path, required=True, nargs="+")
    p.add_argument("--patches", type=Path, required=True)
    p = sub.add_parser("evaluate", parents=[common], help="metrics from per-fold prediction files")
    p.add_argument("--predictions", type=Path, required=True, nargs="+", help="one CSV per fold")
    p.add_argument("--labels", type=Path, required=True)
    sub.add_parser("pipeline", parents=[common], help="synth -> preprocess -> cross-validation -> report")
    return parser


def _resolve(args) -> RunConfig:
    """Flags > config file > CARENET_SEED (seed only) > defaults."""
    overrides = {"workers": args.workers, "task": args.task, "epochs": args.epochs, "seed": args.seed}
    source = {}
    if args.config is not None:
        try:
            source = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(source, dict):
            raise ConfigError(f"config {args.config}: top level must be an object")
    env_seed = os.environ.get(SEED_ENV, "")
    if env_seed and args.seed is None and "seed" not in source:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env_seed!r}") from None
    return parse_config(source, overrides)


def run(command: str, args: argparse.Namespace) -> dict:
    cfg = _resolve(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    inputs = [args.config] if args.config is not None else []
    result = {}
    if command == "synth":
        stage_synth(cfg, out)
    elif command == "preprocess":
        cubes = sorted(args.cubes.glob("*.hsc"))
        inputs += cubes + [args.library]
        stage_preprocess(cfg, args.cubes, args.library, out)
    elif command == "train":
        inputs += [args.patches, args.labels]
        schema = get_schema(cfg.task)
        data = load_patches(args.patches)
        truth_of = labels_by_sample(read_label_manifest(args.labels), cfg.task)
        samples = _samples_for_split(data, truth_of, cfg.split_mode)
        plan = ev.split_dataset(samples, schema, cfg.split_mode, seed=cfg.seed, n_folds=cfg.n_folds)
        if not 0 <= args.fold < cfg.n_folds:
            raise ConfigError(f"--fold must lie in [0, {cfg.n_folds})")
        ev.write_fold_manifest(plan, samples, out / "folds.csv")
        train_ids, dev_ids = plan.folds[args.fold]
        stage_train(cfg, data, truth_of, _indices(data, train_ids, cfg.split_mode),
                    _indices(data, dev_ids, cfg.split_mode), out, seed=cfg.seed + args.fold)
    elif command == "predict":
        inputs += [args.model, Path(str(args.model) + ".json"), args.patches]
        est = CaReNetEstimator.load(args.model)
        data = load_patches(args.patches)
        rows = write_predictions(out / "predictions.csv", est, data)
        votes = vote_rows(rows, est.schema_, {}, "-")
        with open(out / "sample_votes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "patient_id", "n_patches", "prediction"])
            counts = {}
            for r in rows:
                counts[r["sample_id"]] = counts.get(r["sample_id"], 0) + 1
            for v in votes:
                pred = v["prediction"]
                w.writerow([v["sample"], v["patient"], counts[v["sample"]],
                            f"{pred:.4f}" if isinstance(pred, float) else pred])
    elif command == "explain":
        inputs += list(args.model) + [args.patches]
        ests = [CaReNetEstimator.load(m) for m in args.model]
        data = load_patches(args.patches)
        stage_explain(cfg, ests, data, np.arange(len(data["sample_id"])), out)
    elif command == "evaluate":
        inputs += list(args.predictions) + [args.labels]
        schema = get_schema(cfg.task)
        truth_of = labels_by_sample(read_label_manifest(args.labels), cfg.task)
        fold_metrics, fold_reg, votes = [], [], []
        for k, path in enumerate(args.predictions):
            rows = [r for r in read_predictions(path) if r["sample_id"] in truth_of]
            m = patch_metrics(rows, schema, truth_of)
            (fold_reg if schema.kind == REGRESSION else fold_metrics).append(m)
            votes.extend(vote_rows(rows, schema, truth_of, k))
        ev.make_report(out, schema, fold_metrics, votes, fold_reg)
    elif command == "pipeline":
        synth = stage_synth(cfg, out / "synth")
        patches = stage_preprocess(cfg, synth["cubes"], synth["library"], out / "preprocess")
        result = run_cv(cfg, patches, synth["labels"], out / "cv")
    write_manifest(out, command, cfg, [Path(p) for p in inputs])
    return result


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        parser.print_usage(sys.stderr)
        print(f"carenet: error: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args.command, args)
    except Exception as exc:  # one-line cause, no traceback
        mod = type(exc).__module__.replace("builtins", "").strip(".")
        name = f"{mod}.{type(exc).__name__}" if mod else type(exc).__name__
        print(f"carenet {args.command}: {name}: {exc}", file=sys.stderr)
        if args.verbose:
            logger.exception("traceback")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
