import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svirisk.errors import ValidationError
from svirisk.evaluation import (
    accuracy, adjusted_accuracy, confusion_matrix, evaluate, per_class_f1, render_confusion_matrix,
    report_from_predictions, top_confident_true_positives, weighted_f1,
)


def tally(preds, labels, k=4):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    return np.array(cm)


def f1_oracle(preds, labels, k=4):
    """Per-class precision/recall from raw pairs, then support-weighted F1."""
    scores, supports = [], []
    for c in range(k):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        pp = sum(1 for p in preds if p == c)
        ap = sum(1 for t in labels if t == c)
        prec = tp / pp if pp else 0.0
        rec = tp / ap if ap else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        supports.append(ap)
    return sum(s * n for s, n in zip(scores, supports)) / sum(supports), scores


class TestConfusion:
    def test_perfect(self):
        y = np.repeat(np.arange(4), 10)
        assert np.array_equal(confusion_matrix(y, y), np.diag([10] * 4))

    def test_all_class_zero(self):
        y = np.repeat(np.arange(4), 5)
        cm = confusion_matrix(np.zeros_like(y), y)
        assert cm[:, 0].tolist() == [5] * 4 and cm[:, 1:].sum() == 0

    def test_bruteforce_tally(self):
        rng = np.random.default_rng(0)
        p, t = rng.integers(0, 4, 1000), rng.integers(0, 4, 1000)
        assert np.array_equal(confusion_matrix(p, t), tally(p, t))

    @pytest.mark.parametrize("p,t", [([], []), ([0, 1], [0]), ([4], [0]), ([-1], [0])])
    def test_invalid(self, p, t):
        with pytest.raises(ValidationError):
            confusion_matrix(p, t)


class TestAdjusted:
    def test_perfect_and_off_by_one(self):
        y = np.repeat(np.arange(4), 5)
        assert adjusted_accuracy(confusion_matrix(y, y)) == 1.0
        off = np.where(y < 3, y + 1, 2)
        assert accuracy(confusion_matrix(off, y)) == 0.0
        assert adjusted_accuracy(confusion_matrix(off, y)) == 1.0

    def test_chance_anchors(self):
        rng = np.random.default_rng(0)
        n = 100_000
        labels = np.repeat(np.arange(4), n // 4)
        cm = confusion_matrix(rng.integers(0, 4, n), labels)
        assert abs(accuracy(cm) - 0.25) < 0.01
        assert abs(adjusted_accuracy(cm) - 0.625) < 0.01
        # exact chance value: 10 of the 16 (t, p) pairs satisfy |t - p| <= 1
        assert sum(abs(t - p) <= 1 for t in range(4) for p in range(4)) / 16 == 0.625

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 50)))
    def test_adjusted_dominates(self, cm):
        if cm.sum() == 0:
            return
        assert adjusted_accuracy(cm) >= accuracy(cm)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=200))
    def test_matches_pairwise_count(self, pairs):
        p, t = zip(*pairs)
        expected = sum(abs(a - b) <= 1 for a, b in pairs) / len(pairs)
        assert adjusted_accuracy(confusion_matrix(p, t)) == pytest.approx(expected, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValidationError):
            adjusted_accuracy(np.zeros((4, 4)))


class TestF1:
    def test_perfect(self):
        y = np.repeat(np.arange(4), 3)
        assert weighted_f1(confusion_matrix(y, y)) == 1.0

    def test_hand_computed(self):
        cm = np.array([[5, 0], [5, 0]])
        f1 = per_class_f1(cm)
        assert f1[0] == pytest.approx(2 / 3, abs=1e-15) and f1[1] == 0.0
        assert weighted_f1(cm) == pytest.approx(1 / 3, abs=1e-15)

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(1)
        p, t = rng.integers(0, 4, 777), rng.integers(0, 4, 777)
        w, scores = f1_oracle(p.tolist(), t.tolist())
        cm = confusion_matrix(p, t)
        assert np.allclose(per_class_f1(cm), scores, atol=1e-12)
        assert abs(weighted_f1(cm) - w) < 1e-12

    def test_absent_class_has_zero_weight(self):
        p, t = [0, 1, 1, 0], [0, 1, 1, 0]
        assert weighted_f1(confusion_matrix(p, t)) == 1.0


class TestReport:
    def test_permutation_and_duplication_invariance(self):
        rng = np.random.default_rng(2)
        probs = rng.dirichlet(np.ones(4), 300)
        labels = rng.integers(0, 4, 300)
        base = report_from_predictions(probs, labels)
        perm = rng.permutation(300)
        shuffled = report_from_predictions(probs[perm], labels[perm])
        doubled = report_from_predictions(np.concatenate([probs, probs]), np.concatenate([labels, labels]))
        for other in (shuffled, doubled):
            assert other.accuracy == base.accuracy and other.adjusted_accuracy == base.adjusted_accuracy
            assert other.weighted_f1 == pytest.approx(base.weighted_f1, abs=1e-15)
            assert other.avg_loss == pytest.approx(base.avg_loss, rel=1e-12)
        assert np.sum(base.confusion_matrix) == 300 == base.n
        assert 0 <= base.accuracy <= 1 and base.avg_loss >= 0

    def test_stub_model(self):
        class Stub(nn.Module):
            def forward(self, x):
                return torch.nn.functional.one_hot(x[:, 0].long(), 4).float() * 10

        preds = torch.tensor([0, 1, 2, 3, 3, 3])
        labels = torch.tensor([0, 1, 2, 3, 2, 1])
        data = torch.utils.data.TensorDataset(preds[:, None].float(), labels)
        rep = evaluate(Stub(), data)
        assert rep.accuracy == pytest.approx(4 / 6)
        assert rep.adjusted_accuracy == pytest.approx(5 / 6)
        assert rep.n == 6
        assert "accuracy=0.6667" in rep.summary()

    def test_dropout_inactive(self):
        torch.manual_seed(0)
        model = nn.Sequential(nn.Dropout(0.5), nn.Linear(3, 4))
        data = torch.utils.data.TensorDataset(torch.randn(20, 3), torch.randint(0, 4, (20,)))
        model.train()
        assert evaluate(model, data) == evaluate(model, data)

    def test_empty_split(self):
        with pytest.raises(ValidationError):
            evaluate(nn.Linear(3, 4), torch.utils.data.TensorDataset(torch.zeros(0, 3), torch.zeros(0).long()))


class TestConfident:
    def test_fewer_than_k(self):
        probs = np.eye(4)[[0, 0, 0, 1]] * 0.7 + 0.075
        out = top_confident_true_positives(probs, [0, 0, 0, 2], k=10)
        assert len(out[0]) == 3 and out[1] == [] and out[2] == []

    def test_sorted_descending(self):
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(4) * 0.3, 500)
        labels = probs.argmax(1)
        out = top_confident_true_positives(probs, labels, k=10)
        for c, items in out.items():
            ps = [e.probability for e in items]
            assert all(a > b for a, b in zip(ps, ps[1:]))
            assert all(e.true_class == e.predicted_class == c and 0 <= e.probability <= 1 for e in items)

    def test_sort_oracle(self):
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(4), 400)
        labels = rng.integers(0, 4, 400)
        refs = [f"img{i}" for i in range(400)]
        out = top_confident_true_positives(probs, labels, refs, k=7)
        for c in range(4):
            cands = [(probs[i].max(), i) for i in range(400) if labels[i] == c and probs[i].argmax() == c]
            cands.sort(key=lambda t: (-t[0], t[1]))
            assert [e.ref for e in out[c]] == [refs[i] for _, i in cands[:7]]

    def test_invalid_k(self):
        with pytest.raises(ValidationError):
            top_confident_true_positives(np.eye(4), [0, 1, 2, 3], k=0)


def test_confusion_png_deterministic(tmp_path):
    cm = np.array([[5, 1, 0, 0], [2, 3, 1, 0], [0, 1, 4, 1], [0, 0, 2, 6]])
    render_confusion_matrix(cm, tmp_path / "a.png", title="t")
    render_confusion_matrix(cm, tmp_path / "b.png", title="t")
    a, b = (tmp_path / "a.png").read_bytes(), (tmp_path / "b.png").read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b
