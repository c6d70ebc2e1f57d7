"""Dataset splits, patch/patient metrics, patch voting and report tables."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import SplitError
from .labels import BINARY, REGRESSION, TaskSchema, class_scores, decode_index, unscale_fraction

BY_PATIENT, BY_PATCH = "by_patient", "by_patch"


@dataclass
class SplitPlan:
    test_patients: list[str]
    test_ids: list[str]
    folds: list[tuple[list[str], list[str]]]
    stratify_by: str
    mode: str
    fold_of: dict[str, int] = field(default_factory=dict)

    def roles(self, samples: Sequence[dict]) -> list[tuple[str, int | str, str]]:
        """(patient_id, fold, role) rows for the fold-assignment manifest."""
        patient_of = {s["id"]: s["patient_id"] for s in samples}
        rows = set()
        for pid in self.test_patients:
            rows.add((pid, "-", "test"))
        for k, (train, dev) in enumerate(self.folds):
            for uid in train:
                rows.add((patient_of[uid], k, "train"))
            for uid in dev:
                rows.add((patient_of[uid], k, "dev"))
        return sorted(rows, key=lambda r: (str(r[1]), r[2], r[0]))


def _stratum(schema: TaskSchema, label):
    return float(label) if schema.kind == REGRESSION else str(label)


def _class_order(schema: TaskSchema, labels):
    if schema.kind == REGRESSION:
        return sorted(set(labels))
    return [c for c in schema.classes if c in set(labels)]


def split_dataset(
    samples: Sequence[dict],
    schema: TaskSchema,
    mode: str = BY_PATIENT,
    seed: int = 0,
    n_folds: int = 4,
    n_test_per_class: int | None = None,
) -> SplitPlan:
    """Hold out test patients per class, then stratify the rest into folds.

    ``samples`` are dicts with ``id`` (the unit being split: a sample or a
    patch), ``patient_id`` and ``label``. Two test patients per class are
    held out for binary tasks and one otherwise. ``by_patient`` keeps each
    patient inside a single fold; ``by_patch`` stratifies individual units.
    """
    if mode not in (BY_PATIENT, BY_PATCH):
        raise ValueError(f"mode must be {BY_PATIENT!r} or {BY_PATCH!r}")
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if n_test_per_class is None:
        n_test_per_class = 2 if schema.kind == BINARY else 1
    rng = np.random.default_rng(seed)
    labels_of = defaultdict(set)
    for s in samples:
        labels_of[s["patient_id"]].add(_stratum(schema, s["label"]))
    classes = _class_order(schema, [_stratum(schema, s["label"]) for s in samples])

    test: list[str] = []
    for cls in classes:
        have = sum(1 for p in test if cls in labels_of[p])
        cands = sorted(p for p, labs in labels_of.items() if cls in labs and p not in test)
        cands = [cands[i] for i in rng.permutation(len(cands))]
        need = n_test_per_class - have
        if need > len(cands):
            raise SplitError(
                f"class {cls!r} has {len(cands) + have} patients, "
                f"{n_test_per_class} needed for the test set"
            )
        test.extend(cands[: max(need, 0)])
    test_set = set(test)
    test_ids = [s["id"] for s in samples if s["patient_id"] in test_set]

    rest = [s for s in samples if s["patient_id"] not in test_set]
    fold_of: dict[str, int] = {}
    slot = 0
    if mode == BY_PATIENT:
        strata = defaultdict(list)
        for pid in sorted({s["patient_id"] for s in rest}):
            key = tuple(sorted(map(str, labels_of[pid])))
            strata[key].append(pid)
        patient_fold = {}
        for key in sorted(strata):
            group = strata[key]
            for i in rng.permutation(len(group)):
                patient_fold[group[i]] = slot % n_folds
                slot += 1
        for s in rest:
            fold_of[s["id"]] = patient_fold[s["patient_id"]]
    else:
        strata = defaultdict(list)
        for s in rest:
            strata[str(_stratum(schema, s["label"]))].append(s["id"])
        for key in sorted(strata):
            group = sorted(strata[key])
            for i in rng.permutation(len(group)):
                fold_of[group[i]] = slot % n_folds
                slot += 1

    folds = []
    for k in range(n_folds):
        dev = sorted(u for u, f in fold_of.items() if f == k)
        train = sorted(u for u, f in fold_of.items() if f != k)
        folds.append((train, dev))
    return SplitPlan(
        test_patients=sorted(test),
        test_ids=test_ids,
        folds=folds,
        stratify_by=schema.task,
        mode=mode,
        fold_of=fold_of,
    )


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionTally:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num, den):
    return num / den if den else float("nan")


def classification_metrics(preds: Sequence, truths: Sequence, classes: Sequence) -> dict:
    """One-vs-rest accuracy, specificity and sensitivity per class.

    Ratios with a zero denominator are NaN and named in the ``undefined``
    list of that class.
    """
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truths")
    preds = [str(p) for p in preds]
    truths = [str(t) for t in truths]
    out = {}
    n = len(truths)
    for c in map(str, classes):
        tp = sum(p == c and t == c for p, t in zip(preds, truths))
        fp = sum(p == c and t != c for p, t in zip(preds, truths))
        fn = sum(p != c and t == c for p, t in zip(preds, truths))
        tally = ConfusionTally(tp, fp, n - tp - fp - fn, fn)
        m = {
            "accuracy": _ratio(tally.tp + tally.tn, n),
            "specificity": _ratio(tally.tn, tally.tn + tally.fp),
            "sensitivity": _ratio(tally.tp, tally.tp + tally.fn),
            "tally": tally,
        }
        m["undefined"] = [k for k in ("accuracy", "specificity", "sensitivity") if math.isnan(m[k])]
        out[c] = m
    return out


def regression_metrics(preds: Sequence[float], truths: Sequence[float]) -> tuple[float, float, float]:
    """(MAE, MSE, RMSE)."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions for {t.shape} truths")
    if p.size == 0:
        raise ValueError("regression metrics need at least one prediction")
    err = p - t
    mse = float(np.mean(err**2))
    return float(np.mean(np.abs(err))), mse, math.sqrt(mse)


def regression_scales(preds, truths, schema: TaskSchema) -> dict[str, tuple[float, float, float]]:
    """Metrics on the fraction scale and rescaled to percent."""
    mae, mse, rmse = regression_metrics(preds, truths)
    lo, hi = schema.regression_range
    span = hi - lo
    return {"fraction": (mae, mse, rmse), "percent": (mae * span, mse * span**2, rmse * span)}


def vote_sample(patch_outputs: Sequence, schema: TaskSchema):
    """Majority class over patches, or the mean Ki67 for regression.

    Ties go to the tied class with the larger mean class score (see
    :func:`labels.class_scores`), then to the lower class index.
    """
    outs = [np.atleast_1d(np.asarray(o, dtype=np.float64)) for o in patch_outputs]
    if not outs:
        raise ValueError("cannot vote over an empty patch list")
    if schema.kind == REGRESSION:
        return float(unscale_fraction(schema, float(np.mean([o[0] for o in outs]))))
    counts = Counter(decode_index(schema, o) for o in outs)
    top = max(counts.values())
    tied = sorted(i for i, n in counts.items() if n == top)
    if len(tied) > 1:
        mean_scores = np.mean([class_scores(schema, o) for o in outs], axis=0)
        tied.sort(key=lambda i: (-mean_scores[i], i))
    return schema.classes[tied[0]]


# ---------------------------------------------------------------------------
# reports


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation; a single value has std 0."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def fmt_pm(mean: float, std: float, digits: int = 2) -> str:
    if math.isnan(mean):
        return "nan"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def make_report(
    out_dir: str | Path,
    schema: TaskSchema,
    fold_metrics: Sequence[dict],
    votes: Sequence[dict],
    fold_regression: Sequence[dict] | None = None,
) -> dict[str, Path]:
    """Write metrics/votes/regression tables.

    ``fold_metrics`` is one :func:`classification_metrics` result per fold;
    ``votes`` rows carry patient, fold, truth, prediction (and optionally
    correct); ``fold_regression`` is one :func:`regression_scales` result per
    fold. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    task = schema.task

    if schema.is_classification and fold_metrics:
        p = out_dir / "metrics.csv"
        long_rows = []
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "class", "accuracy", "specificity", "sensitivity", "mean", "std"])
            seen = [c for c in schema.classes
                    if any(c in fm and fm[c]["tally"].tp + fm[c]["tally"].fn + fm[c]["tally"].fp > 0
                           for fm in fold_metrics)]
            for c in seen:
                cells = {}
                for metric in ("accuracy", "specificity", "sensitivity"):
                    vals = [fm[c][metric] for fm in fold_metrics if c in fm]
                    cells[metric] = mean_std(vals)
                    long_rows.append([task, c, metric, *cells[metric], len(vals)])
                w.writerow(
                    [task, c]
                    + [fmt_pm(*cells[m]) for m in ("accuracy", "specificity", "sensitivity")]
                    + [f"{cells['accuracy'][0]:.6g}", f"{cells['accuracy'][1]:.6g}"]
                )
        paths["metrics"] = p
        p = out_dir / "metrics_long.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "class", "metric", "mean", "std", "n_folds"])
            for row in long_rows:
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6g}", f"{row[4]:.6g}", row[5]])
        paths["metrics_long"] = p

    if votes:
        p = out_dir / "votes.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient", "fold", "truth", "prediction", "correct"])
            for v in votes:
                correct = v.get("correct")
                if correct is None:
                    correct = "" if schema.kind == REGRESSION else str(v["truth"]) == str(v["prediction"])
                pred = v["prediction"]
                pred = f"{pred:.4f}" if isinstance(pred, float) else pred
                w.writerow([v["patient"], v["fold"], v["truth"], pred, correct])
        paths["votes"] = p
        p = out_dir / "vote_grid.csv"
        folds = sorted({v["fold"] for v in votes})
        patients = sorted({v["patient"] for v in votes})
        cell = {(v["patient"], v["fold"]): v for v in votes}
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient", "truth"] + [f"fold{f}" for f in folds])
            for pid in patients:
                truth = next(v["truth"] for v in votes if v["patient"] == pid)
                row = [pid, truth]
                for f in folds:
                    v = cell.get((pid, f))
                    if v is None:
                        row.append("")
                    elif isinstance(v["prediction"], float):
                        row.append(f"{v['prediction']:.2f}")
                    else:
                        row.append(f"{v['prediction']}{'' if str(v['prediction']) == str(v['truth']) else '*'}")
                w.writerow(row)
        paths["vote_grid"] = p

    if fold_regression:
        p = out_dir / "regression.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale", "mae", "mse", "rmse"])
            for scale in ("fraction", "percent"):
                cells = [mean_std([fr[scale][i] for fr in fold_regression]) for i in range(3)]
                digits = 3 if scale == "fraction" else 1
                w.writerow([scale] + [fmt_pm(m, s, digits) for m, s in cells])
        paths["regression"] = p
    return paths


def write_fold_manifest(plan: SplitPlan, samples: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "fold", "role"])
        for row in plan.roles(samples):
            w.writerow(row)
