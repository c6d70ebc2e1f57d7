import csv
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftir_carenet.evaluate import (
    BY_PATCH,
    BY_PATIENT,
    classification_metrics,
    make_report,
    mean_std,
    regression_metrics,
    regression_scales,
    split_dataset,
    vote_sample,
    write_fold_manifest,
)
from ftir_carenet.exceptions import SplitError
from ftir_carenet.labels import decode_output, encode_label, get_schema

COHORT_SUBTYPE = {"LA": 8, "LB": 8, "HER2": 7, "TNBC": 7}


def _patients(counts, per_patient=1):
    samples, k = [], 0
    for label, n in counts.items():
        for _ in range(n):
            pid = f"P{k:02d}"
            for j in range(per_patient):
                samples.append({"id": f"{pid}-{j}", "patient_id": pid, "label": label})
            k += 1
    return samples


def _check_plan(plan, samples):
    patient_of = {s["id"]: s["patient_id"] for s in samples}
    test = set(plan.test_patients)
    for train, dev in plan.folds:
        assert not set(train) & set(dev)
        assert not {patient_of[u] for u in train + dev} & test
        if plan.mode == BY_PATIENT:
            assert not {patient_of[u] for u in train} & {patient_of[u] for u in dev}


class TestSplit:
    def test_cohort_subtype(self):
        samples = _patients(COHORT_SUBTYPE)
        plan = split_dataset(samples, get_schema("subtype"), BY_PATIENT, seed=0)
        label_of = {s["patient_id"]: s["label"] for s in samples}
        assert sorted(label_of[p] for p in plan.test_patients) == ["HER2", "LA", "LB", "TNBC"]
        assert sum(len(dev) for _, dev in plan.folds) == 26
        _check_plan(plan, samples)

    def test_folds_proportional(self):
        samples = _patients(COHORT_SUBTYPE)
        plan = split_dataset(samples, get_schema("subtype"), BY_PATIENT, seed=3)
        label_of = {s["id"]: s["label"] for s in samples}
        remaining = Counter(label_of[u] for u in plan.fold_of)
        for _, dev in plan.folds:
            per = Counter(label_of[u] for u in dev)
            for c, n in remaining.items():
                assert abs(per[c] - n / 4) < 1 + 1e-12

    def test_binary_eight_patients(self):
        samples = _patients({"AT": 4, "CA": 4}, per_patient=3)
        plan = split_dataset(samples, get_schema("type"), BY_PATIENT, seed=1)
        assert len(plan.test_patients) == 4
        dev_patients = {s["patient_id"] for s in samples if s["id"] in {u for _, d in plan.folds for u in d}}
        assert len(dev_patients) == 4
        _check_plan(plan, samples)

    def test_deterministic(self):
        samples = _patients(COHORT_SUBTYPE, per_patient=2)
        a = split_dataset(samples, get_schema("subtype"), BY_PATIENT, seed=9)
        b = split_dataset(samples, get_schema("subtype"), BY_PATIENT, seed=9)
        assert a == b

    def test_by_patch_keeps_units_apart(self):
        samples = [{"id": f"P{p}-{j}", "patient_id": f"P{p}", "label": lab}
                   for p, lab in enumerate(["-", "+", "++", "+++"] * 2) for j in range(4)]
        plan = split_dataset(samples, get_schema("er"), BY_PATCH, seed=0)
        assert len(plan.test_patients) == 4
        _check_plan(plan, samples)
        assert len(plan.fold_of) == 16

    def test_regression_one_patient_per_value(self):
        samples = [{"id": f"P{i}", "patient_id": f"P{i}", "label": v} for i, v in enumerate([5.0, 5.0, 20.0, 20.0])]
        plan = split_dataset(samples, get_schema("ki67"), BY_PATCH, seed=0, n_folds=2)
        assert len(plan.test_patients) == 2

    def test_too_few_patients_named(self):
        samples = _patients({"AT": 4, "CA": 1})
        with pytest.raises(SplitError, match="CA"):
            split_dataset(samples, get_schema("type"), BY_PATIENT)

    @given(st.integers(0, 10_000), st.lists(st.integers(2, 6), min_size=4, max_size=4))
    def test_disjoint_for_every_seed(self, seed, counts):
        samples = _patients(dict(zip(["LA", "LB", "HER2", "TNBC"], counts)), per_patient=2)
        _check_plan(split_dataset(samples, get_schema("subtype"), BY_PATIENT, seed=seed), samples)

    def test_fold_manifest(self, tmp_path):
        samples = _patients({"AT": 4, "CA": 4})
        plan = split_dataset(samples, get_schema("type"), BY_PATIENT, seed=2)
        write_fold_manifest(plan, samples, tmp_path / "folds.csv")
        rows = list(csv.DictReader(open(tmp_path / "folds.csv")))
        assert {r["role"] for r in rows} == {"test", "train", "dev"}
        assert sum(r["role"] == "test" for r in rows) == 4


class TestClassificationMetrics:
    def test_worked_example(self):
        m = classification_metrics([1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 0], [1, 0])["1"]
        assert (m["sensitivity"], m["specificity"], m["accuracy"]) == (1.0, 2 / 3, 5 / 6)

    def test_perfect(self):
        m = classification_metrics(list("abcab"), list("abcab"), "abc")
        assert all(m[c][k] == 1.0 for c in "abc" for k in ("accuracy", "specificity", "sensitivity"))

    def test_degenerate_predictor(self):
        m = classification_metrics(["a"] * 4, ["a", "a", "b", "b"], "ab")["a"]
        assert m["sensitivity"] == 1.0 and m["specificity"] == 0.0

    def test_undefined_flagged(self):
        m = classification_metrics(["a", "a"], ["a", "a"], "ab")
        assert math.isnan(m["a"]["specificity"]) and m["a"]["undefined"] == ["specificity"]
        assert math.isnan(m["b"]["sensitivity"]) and "sensitivity" in m["b"]["undefined"]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics([1], [1, 0], [0, 1])

    @given(st.lists(st.tuples(st.sampled_from("ab"), st.sampled_from("ab")), min_size=1, max_size=40))
    def test_accuracy_identity(self, pairs):
        preds, truths = zip(*pairs)
        m = classification_metrics(preds, truths, "ab")["a"]
        t = m["tally"]
        assert t.total == len(pairs)
        p, n = t.tp + t.fn, t.tn + t.fp
        if p and n:
            assert m["accuracy"] == pytest.approx((m["sensitivity"] * p + m["specificity"] * n) / (p + n))


class TestRegressionMetrics:
    def test_worked_example(self):
        mae, mse, rmse = regression_metrics([0.1, 0.3], [0.0, 0.5])
        assert mae == pytest.approx(0.15) and mse == pytest.approx(0.025) and rmse == pytest.approx(0.158113883)

    def test_exact_zero(self):
        assert regression_metrics([0.2, 0.7], [0.2, 0.7]) == (0.0, 0.0, 0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            regression_metrics([], [])

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
    def test_rmse_at_least_mae(self, pairs):
        p, t = zip(*pairs)
        mae, _, rmse = regression_metrics(p, t)
        assert rmse >= mae - 1e-15

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
    def test_percent_scale(self, pairs):
        p, t = zip(*pairs)
        s = regression_scales(p, t, get_schema("ki67"))
        assert s["percent"][0] == s["fraction"][0] * 25
        assert s["percent"][1] == s["fraction"][1] * 625


class TestVoting:
    def test_strict_majority(self):
        assert vote_sample([[0.9], [0.8], [0.1]], get_schema("type")) == "CA"

    def test_regression_mean(self):
        assert vote_sample([[0.1], [0.3]], get_schema("ki67")) == pytest.approx(10.0, abs=1e-12)

    def test_tie_goes_to_higher_mean_score(self):
        schema = get_schema("subtype")
        outs = [[0.8, 0.2, 0, 0], [0.8, 0.2, 0, 0], [0.4, 0.6, 0, 0], [0.4, 0.6, 0, 0]]
        assert vote_sample(outs, schema) == "LA"
        outs = [[0.55, 0.45, 0, 0]] * 2 + [[0.05, 0.95, 0, 0]] * 2
        assert vote_sample(outs, schema) == "LB"

    def test_empty(self):
        with pytest.raises(ValueError):
            vote_sample([], get_schema("type"))

    @pytest.mark.parametrize("task,seed", [("type", 0), ("subtype", 1), ("er", 2)])
    def test_majority_correct_implies_correct_vote(self, task, seed):
        schema = get_schema(task)
        rng = np.random.default_rng(seed)
        for _ in range(300):
            truth = schema.classes[rng.integers(len(schema.classes))]
            n = int(rng.integers(1, 12))
            n_ok = n // 2 + 1 + int(rng.integers(0, n - n // 2))
            outs = []
            for i in range(n):
                label = truth if i < n_ok else schema.classes[rng.integers(len(schema.classes))]
                raw = encode_label(schema, label) + rng.uniform(-0.3, 0.3, size=schema.output_dim)
                if schema.kind == "onehot":
                    raw = np.clip(raw, 0.0, None)
                    raw = raw / raw.sum()
                outs.append(np.clip(raw, 0.0, 1.0))
            assert sum(decode_output(schema, o) == truth for o in outs) >= n_ok
            assert vote_sample(outs, schema) == truth


class TestReport:
    def test_mean_std(self):
        m, s = mean_std([0.8, 0.9, 0.8, 0.9])
        assert m == pytest.approx(0.85) and s == pytest.approx(0.0577350269, abs=1e-9)
        assert mean_std([0.7]) == (0.7, 0.0)

    def _fold_metrics(self, accs):
        out = []
        for a in accs:
            n_ok = round(a * 10)
            truths = ["AT"] * 5 + ["CA"] * 5
            preds = truths[:n_ok] + [("CA" if t == "AT" else "AT") for t in truths[n_ok:]]
            out.append(classification_metrics(preds, truths, ["AT", "CA"]))
        return out

    def test_metrics_table(self, tmp_path):
        make_report(tmp_path, get_schema("type"), self._fold_metrics([0.8, 0.9, 0.8, 0.9]), [])
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert rows[0]["accuracy"] == "0.85 ± 0.06"
        assert float(rows[0]["mean"]) == pytest.approx(0.85) and float(rows[0]["std"]) == pytest.approx(0.057735)

    def test_single_fold_std_zero(self, tmp_path):
        make_report(tmp_path, get_schema("type"), self._fold_metrics([0.7]), [])
        assert float(next(csv.DictReader(open(tmp_path / "metrics.csv")))["std"]) == 0.0

    def test_vote_grid_dimensions(self, tmp_path):
        votes = [{"patient": p, "fold": f, "truth": "CA", "prediction": "CA" if f else "AT"}
                 for p in ("P1", "P2", "P3") for f in range(4)]
        make_report(tmp_path, get_schema("type"), [], votes)
        grid = list(csv.reader(open(tmp_path / "vote_grid.csv")))
        assert len(grid) == 1 + 3 and all(len(r) == 2 + 4 for r in grid)
        assert grid[1][2] == "AT*" and grid[1][3] == "CA"
        rows = list(csv.DictReader(open(tmp_path / "votes.csv")))
        assert [r["correct"] for r in rows[:2]] == ["False", "True"]

    def test_regression_table(self, tmp_path):
        schema = get_schema("ki67")
        folds = [regression_scales([0.1, 0.3], [0.0, 0.5], schema)] * 2
        make_report(tmp_path, schema, [], [], folds)
        rows = {r["scale"]: r for r in csv.DictReader(open(tmp_path / "regression.csv"))}
        assert rows["fraction"]["mae"] == "0.150 ± 0.000" and rows["percent"]["mae"] == "3.8 ± 0.0"
