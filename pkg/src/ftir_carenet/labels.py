"""Task schemas, target encodings, decode rules and class weights."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DecodeError, RangeError, SchemaError

logger = logging.getLogger(__name__)

BINARY, ONEHOT, ORDINAL, REGRESSION = "binary", "onehot", "ordinal", "regression"
THRESHOLD = 0.5


@dataclass(frozen=True)
class TaskSchema:
    task: str
    kind: str
    classes: tuple[str, ...]
    output_dim: int
    threshold: float = THRESHOLD
    regression_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in (BINARY, ONEHOT, ORDINAL, REGRESSION):
            raise SchemaError(f"unknown encoding kind {self.kind!r}")
        expected = {BINARY: 1, REGRESSION: 1}.get(self.kind, len(self.classes))
        if self.output_dim != expected:
            raise SchemaError(f"{self.task}: output_dim {self.output_dim} != {expected}")
        if self.kind == BINARY and len(self.classes) != 2:
            raise SchemaError(f"{self.task}: binary schema needs exactly 2 classes")
        if self.kind == REGRESSION:
            lo, hi = self.regression_range or (None, None)
            if lo is None or not hi > lo:
                raise SchemaError(f"{self.task}: regression needs a (min, max) range")

    @property
    def is_classification(self) -> bool:
        return self.kind != REGRESSION

    def index(self, label) -> int:
        try:
            return self.classes.index(str(label))
        except ValueError:
            raise SchemaError(
                f"{self.task}: unknown label {label!r}; expected one of {list(self.classes)}"
            ) from None


# class order: negative or lowest class first
SCHEMAS = {
    "type": TaskSchema("type", BINARY, ("AT", "CA"), 1),
    "subtype": TaskSchema("subtype", ONEHOT, ("LA", "LB", "HER2", "TNBC"), 4),
    "er": TaskSchema("er", ORDINAL, ("-", "+", "++", "+++"), 4),
    "pr": TaskSchema("pr", ORDINAL, ("-", "+", "++", "+++"), 4),
    "her2": TaskSchema("her2", BINARY, ("0", "3+"), 1),
    "ki67": TaskSchema("ki67", REGRESSION, (), 1, regression_range=(5.0, 30.0)),
}


def get_schema(task: str) -> TaskSchema:
    try:
        return SCHEMAS[task.lower()]
    except KeyError:
        raise SchemaError(f"unknown task {task!r}; choose from {sorted(SCHEMAS)}") from None


def scale_percent(schema: TaskSchema, percent: float) -> float:
    lo, hi = schema.regression_range
    return (percent - lo) / (hi - lo)


def unscale_fraction(schema: TaskSchema, fraction):
    lo, hi = schema.regression_range
    return np.asarray(fraction) * (hi - lo) + lo if np.ndim(fraction) else fraction * (hi - lo) + lo


def encode_label(schema: TaskSchema, label) -> np.ndarray:
    """Target vector for one label.

    >>> encode_label(get_schema("er"), "+")
    array([1., 1., 0., 0.])
    """
    if schema.kind == REGRESSION:
        try:
            p = float(label)
        except (TypeError, ValueError):
            raise SchemaError(f"{schema.task}: {label!r} is not a percentage") from None
        lo, hi = schema.regression_range
        if not lo <= p <= hi:
            raise RangeError(f"{schema.task}: {p}% outside the range [{lo}, {hi}]")
        return np.array([scale_percent(schema, p)])
    i = schema.index(label)
    if schema.kind == BINARY:
        return np.array([float(i)])
    target = np.zeros(schema.output_dim)
    if schema.kind == ONEHOT:
        target[i] = 1.0
    else:
        target[: i + 1] = 1.0
    return target


def encode_labels(schema: TaskSchema, labels: Sequence) -> np.ndarray:
    return np.stack([encode_label(schema, lab) for lab in labels])


def decode_index(schema: TaskSchema, raw) -> int:
    """Class index for activated outputs (probabilities)."""
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if raw.shape != (schema.output_dim,):
        raise DecodeError(f"{schema.task}: expected {schema.output_dim} outputs, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise DecodeError(f"{schema.task}: non-finite output {raw}")
    if schema.kind == BINARY:
        return int(raw[0] >= schema.threshold)
    if schema.kind == ONEHOT:
        return int(np.argmax(raw))
    if schema.kind == ORDINAL:
        above = np.flatnonzero(raw > schema.threshold)
        return int(above[-1]) if above.size else 0
    raise DecodeError(f"{schema.task}: regression outputs have no class index")


def decode_output(schema: TaskSchema, raw):
    """Class name (classification) or percentage (regression)."""
    if schema.kind == REGRESSION:
        raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        if raw.shape != (1,) or not np.isfinite(raw[0]):
            raise DecodeError(f"{schema.task}: bad regression output {raw}")
        return float(unscale_fraction(schema, float(raw[0])))
    return schema.classes[decode_index(schema, raw)]


def class_scores(schema: TaskSchema, raw) -> np.ndarray:
    """Per-class score used to break voting ties.

    Binary: (1-p, p). One-hot: the probabilities. Ordinal: the drop between
    consecutive cumulative outputs, ``o_i - o_{i+1}`` clipped at zero.
    """
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if schema.kind == BINARY:
        return np.array([1.0 - raw[0], raw[0]])
    if schema.kind == ONEHOT:
        return raw.copy()
    if schema.kind == ORDINAL:
        nxt = np.append(raw[1:], 0.0)
        return np.clip(raw - nxt, 0.0, None)
    raise DecodeError("regression outputs have no class scores")


def class_weights(counts) -> np.ndarray | dict:
    """Balanced inverse-frequency weights ``N / (K * n_c)``.

    Accepts a sequence or a mapping of class -> count and returns the same
    container type.
    """
    keys = None
    if isinstance(counts, dict):
        keys = list(counts)
        counts = [counts[k] for k in keys]
    n = np.asarray(counts)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if np.any(n < 1) or np.any(n != np.round(n)):
        raise ValueError(f"every class count must be a positive integer, got {list(counts)}")
    w = n.sum() / (n.size * n.astype(np.float64))
    if keys is not None:
        return dict(zip(keys, w.tolist()))
    return w


def sample_weights(schema: TaskSchema, labels: Sequence) -> np.ndarray:
    """Per-sample loss weights from the classes present in ``labels``.

    Classes that never occur get no weight (they contribute no targets).
    For regression every distinct target value is treated as a class, which
    is how the imbalanced Ki67 levels are weighted.
    """
    keys = [str(lab) if schema.is_classification else float(lab) for lab in labels]
    present = sorted(set(keys), key=lambda k: (schema.index(k) if schema.is_classification else k))
    counts = {k: keys.count(k) for k in present}
    w = class_weights(counts)
    return np.array([w[k] for k in keys])


# ---------------------------------------------------------------------------
# label manifest

MANIFEST_FIELDS = ("sample_id", "patient_id", "type", "subtype", "er", "pr", "her2", "ki67_percent")


def write_label_manifest(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k, "") for k in MANIFEST_FIELDS})


def read_label_manifest(path: str | Path) -> list[dict]:
    """Read the label CSV.

    HER2 levels 1+ and 2+ are blanked with a warning; empty cells mean the
    sample carries no label for that task.
    """
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rec = {k: (row[k] or "").strip() for k in MANIFEST_FIELDS}
            if rec["her2"] in ("1+", "2+"):
                logger.warning(
                    "%s: HER2 %s excluded (too few samples)", rec["sample_id"], rec["her2"]
                )
                rec["her2"] = ""
            if rec["ki67_percent"]:
                rec["ki67_percent"] = float(rec["ki67_percent"])
                if math.isnan(rec["ki67_percent"]):
                    rec["ki67_percent"] = ""
            out.append(rec)
    return out


def task_column(task: str) -> str:
    return "ki67_percent" if task.lower() == "ki67" else task.lower()
