import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchad import evaluation as ev
from patchad.errors import DataError

# ---------------------------------------------------------------------------
# oracle


def pairwise_auc(pos, neg):
    """Brute-force counting over all (positive, negative) pairs; ties=1/2."""
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def labeled(pos, neg, pos_label="anomaly"):
    out = [ev.LabeledScore(f"p{i}", s, pos_label) for i, s in enumerate(pos)]
    out += [ev.LabeledScore(f"n{i}", s, "normal") for i, s in enumerate(neg)]
    return out


# ---------------------------------------------------------------------------
# auc


def test_perfect_separation_is_1():
    assert ev.auc(labeled([2.0, 3.0], [0.0, 1.0])) == 1.0


def test_constant_scorer_is_exactly_half():
    scores = labeled([1.0, 1.0, 1.0], [1.0, 1.0])
    assert ev.auc(scores) == 0.5


def test_hand_counted_example():
    # normals {0.1, 0.4}, anomalies {0.3, 0.5}: 3 of 4 pairs ordered correctly
    scores = labeled([0.3, 0.5], [0.1, 0.4])
    assert ev.auc(scores) == pytest.approx(0.75)
    assert pairwise_auc([0.3, 0.5], [0.1, 0.4]) == 0.75


@pytest.mark.parametrize("seed", range(30))
def test_rank_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n_pos, n_neg = rng.integers(1, 40, 2)
    # quantized scores so ties actually occur
    pos = np.round(rng.standard_normal(n_pos), 1)
    neg = np.round(rng.standard_normal(n_neg), 1)
    got = ev.auc(labeled(list(pos), list(neg)))
    assert got == pytest.approx(pairwise_auc(pos, neg), abs=1e-9)


def test_auc_rejects_single_class():
    with pytest.raises(DataError):
        ev.auc([ev.LabeledScore("a", 1.0, "normal")])
    with pytest.raises(DataError):
        ev.auc([ev.LabeledScore("a", 1.0, "anomaly")])


def test_per_class_ignores_other_anomalies():
    scores = [
        ev.LabeledScore("n0", 0.1, "normal"),
        ev.LabeledScore("n1", 0.2, "normal"),
        ev.LabeledScore("a0", 0.3, "blob"),
        ev.LabeledScore("b0", 99.0, "haze"),  # must not influence blob AUC
    ]
    assert ev.auc(scores, "blob") == 1.0
    without_haze = [s for s in scores if s.label != "haze"]
    assert ev.auc(scores, "blob") == ev.auc(without_haze, "blob")


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_auc_invariant_under_monotone_transform(data):
    n_pos = data.draw(st.integers(1, 12))
    n_neg = data.draw(st.integers(1, 12))
    # quantized so the transform below stays strictly increasing in floats
    pos = [round(data.draw(st.floats(-5, 5)), 2) for _ in range(n_pos)]
    neg = [round(data.draw(st.floats(-5, 5)), 2) for _ in range(n_neg)]
    base = ev.auc(labeled(pos, neg))
    transformed = ev.auc(labeled([np.exp(p) + 3 * p for p in pos],
                                 [np.exp(n) + 3 * n for n in neg]))
    assert transformed == pytest.approx(base, abs=1e-12)


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_sign_flip_maps_auc_to_complement(data):
    n_pos = data.draw(st.integers(1, 12))
    n_neg = data.draw(st.integers(1, 12))
    pos = [round(data.draw(st.floats(-3, 3)), 1) for _ in range(n_pos)]
    neg = [round(data.draw(st.floats(-3, 3)), 1) for _ in range(n_neg)]
    forward = ev.auc(labeled(pos, neg))
    flipped = ev.auc(labeled([-p for p in pos], [-n for n in neg]))
    assert flipped == pytest.approx(1.0 - forward, abs=1e-12)


# ---------------------------------------------------------------------------
# roc


def test_roc_perfect_separation_passes_through_0_1():
    points = ev.roc_curve(labeled([2.0, 3.0], [0.0, 1.0]))
    assert (0.0, 1.0) in points
    assert points[0] == (0.0, 0.0)
    assert points[-1] == (1.0, 1.0)


def test_roc_constant_scorer_is_diagonal_endpoints():
    points = ev.roc_curve(labeled([1.0], [1.0]))
    assert points == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_monotone_and_bounded():
    rng = np.random.default_rng(2)
    scores = labeled(list(rng.standard_normal(30)), list(rng.standard_normal(40)))
    points = ev.roc_curve(scores)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    assert xs == sorted(xs) and ys == sorted(ys)
    assert all(0.0 <= v <= 1.0 for v in xs + ys)


@pytest.mark.parametrize("seed", range(20))
def test_trapezoid_roc_equals_rank_auc(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 50))
    pos = np.round(rng.standard_normal(n), 1)
    neg = np.round(rng.standard_normal(n + 3), 1)
    scores = labeled(list(pos), list(neg))
    area = ev.trapezoid_area(ev.roc_curve(scores))
    assert area == pytest.approx(ev.auc(scores), abs=1e-9)


# ---------------------------------------------------------------------------
# report


def test_report_structure_and_counts():
    scores = [
        ev.LabeledScore("n0", 0.1, "normal"),
        ev.LabeledScore("n1", 0.2, "normal"),
        ev.LabeledScore("a0", 0.9, "blob"),
        ev.LabeledScore("h0", 0.8, "haze"),
        ev.LabeledScore("h1", 0.05, "haze"),
    ]
    report = ev.report_from_scores(scores, {"scale": 8})
    assert set(report.per_class) == {"blob", "haze"}
    assert report.counts == {"normal": 2, "blob": 1, "haze": 2}
    assert 0.0 <= report.overall_auc <= 1.0
    assert report.per_class["blob"] == 1.0
    assert report.per_class["haze"] == pytest.approx(0.5)
    doc = report.to_json_dict(roc_csv_path="roc.csv")
    assert doc["config"] == {"scale": 8}
    assert doc["roc_csv_path"] == "roc.csv"


def test_constant_detector_yields_half_everywhere():
    scores = [ev.LabeledScore(f"f{i}", 0.0, lab)
              for i, lab in enumerate(["normal"] * 5 + ["blob"] * 3 + ["haze"] * 2)]
    report = ev.report_from_scores(scores)
    assert report.overall_auc == 0.5
    assert all(v == 0.5 for v in report.per_class.values())


def test_labeled_score_rejects_non_finite():
    with pytest.raises(Exception):
        ev.LabeledScore("x", float("nan"), "normal")
