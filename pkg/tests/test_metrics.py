import json

import numpy as np
import pytest

from oodkit.metrics import EvalReport, auroc, knn_accuracy
from oodkit.scores import ScoreVector
from oodkit.store import LabelVector

from oracles import auroc_pair_count_oracle


def sv(values, kind="nn"):
    return ScoreVector(np.asarray(values, dtype=np.float64), kind)


class TestAuroc:
    def test_complete_separation(self):
        assert auroc(sv([1, 2, 3]), sv([0, 0.5])).auroc == 1.0

    def test_indistinguishable(self):
        assert auroc(sv([1, 2, 3]), sv([1, 2, 3])).auroc == 0.5

    def test_matches_pair_count_oracle_exactly(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            n_in = int(rng.integers(1, 200))
            n_out = int(rng.integers(1, 200))
            if rng.random() < 0.5:
                s_in = rng.integers(0, 5, size=n_in).astype(float)
                s_out = rng.integers(0, 5, size=n_out).astype(float)
            else:
                s_in = rng.normal(size=n_in)
                s_out = rng.normal(size=n_out)
            got = auroc(sv(s_in), sv(s_out)).auroc
            want = auroc_pair_count_oracle(s_in, s_out)
            assert got == want  # exact, including heavy ties

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            auroc(sv([]), sv([1.0]))

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(13)
        s_in = rng.uniform(-4, 4, size=50)
        s_out = rng.uniform(-4, 4, size=60)
        base = auroc(sv(s_in), sv(s_out)).auroc
        assert auroc(sv(np.exp(s_in)), sv(np.exp(s_out))).auroc == base
        assert auroc(sv(3.0 * s_in + 7.0), sv(3.0 * s_out + 7.0)).auroc == base

    def test_swap_complement(self):
        rng = np.random.default_rng(21)
        s_in = rng.integers(0, 4, size=40).astype(float)
        s_out = rng.integers(0, 4, size=30).astype(float)
        forward = auroc(sv(s_in), sv(s_out)).auroc
        backward = auroc(sv(s_out), sv(s_in)).auroc
        assert forward + backward == 1.0

    def test_metadata(self):
        result = auroc(sv([1, 2], kind="md"), sv([0], kind="md"))
        assert (result.n_in, result.n_out, result.score_kind) == (2, 1, "md")


class TestKnnAccuracy:
    def test_all_correct(self):
        assert knn_accuracy(np.array([0, 1, 2]), np.array([0, 1, 2])) == 1.0

    def test_all_wrong(self):
        assert knn_accuracy(np.array([1, 2, 0]), np.array([0, 1, 2])) == 0.0

    def test_half_correct(self):
        preds = np.array([0] * 5 + [1] * 5)
        truth = np.array([0] * 10)
        assert knn_accuracy(preds, truth) == 0.5

    def test_accepts_label_vector(self):
        labels = LabelVector(np.array([0, 1]), 2)
        assert knn_accuracy(np.array([0, 0]), labels) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            knn_accuracy(np.array([0]), np.array([0, 1]))


class TestEvalReport:
    def test_text_table_percent_formatting(self):
        report = EvalReport()
        report.add("cifar100", "cifar10", "nn", 0.87648, 152.3)
        text = report.to_text()
        assert "87.6" in text
        assert "cifar100" in text and "cifar10" in text
        header, rule, row = text.splitlines()
        assert set(rule) == {"-", " "}

    def test_json_round_trip_full_precision(self):
        report = EvalReport()
        report.add("a", "b", "rmd", 0.123456789123, 5.0)
        data = json.loads(report.to_json())
        assert data["rows"][0] == {
            "in": "a", "out": "b", "score": "rmd",
            "auroc": 0.123456789123, "runtime_ms": 5.0,
        }
        back = EvalReport.from_json(report.to_json())
        assert back.rows == report.rows
