import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debrisseg.annotation import DatasetManifest, DatasetRecord
from debrisseg.errors import ContractError, IncompleteError, ShapeError
from debrisseg.evalsuite import (
    ConfusionCounts,
    confusion,
    dice,
    evaluate_test_set,
    iou,
    precision,
    recall,
)


def scalar_counts(pred, gt):
    tp, fp, fn = [0, 0, 0], [0, 0, 0], [0, 0, 0]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn


def scalar_dice(tp, fp, fn, classes):
    t = sum(tp[c] for c in classes)
    den = 2 * t + sum(fp[c] for c in classes) + sum(fn[c] for c in classes)
    return 1.0 if den == 0 else 2 * t / den


def scalar_iou(tp, fp, fn, classes):
    t = sum(tp[c] for c in classes)
    den = t + sum(fp[c] for c in classes) + sum(fn[c] for c in classes)
    return 1.0 if den == 0 else t / den


mask_pairs = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1)).map(
    lambda a: tuple(
        np.random.default_rng(a[2]).choice(3, size=(2, a[0], a[1]), p=np.random.default_rng(a[2] + 1).dirichlet([1, 1, 1]))
        .astype(np.uint8)
    )
)


@settings(max_examples=400, deadline=None)
@given(mask_pairs, st.sampled_from([(1, 2), (0,), (1,), (2,), (0, 1, 2)]))
def test_metrics_match_scalar_oracle(pair, classes):
    pred, gt = pair
    tp, fp, fn = scalar_counts(pred, gt)
    c = confusion(pred, gt)
    assert list(c.tp) == tp and list(c.fp) == fp and list(c.fn) == fn
    assert (c.tp + c.fp + c.fn + c.tn == pred.size).all()
    d, j = dice(c, classes), iou(c, classes)
    assert float(d) == pytest.approx(scalar_dice(tp, fp, fn, classes), abs=1e-15)
    assert float(j) == pytest.approx(scalar_iou(tp, fp, fn, classes), abs=1e-15)
    assert abs(float(d) - 2 * float(j) / (1 + float(j))) < 1e-12
    for k in classes:
        exp_p = 1.0 if tp[k] + fp[k] == 0 else tp[k] / (tp[k] + fp[k])
        exp_r = 1.0 if tp[k] + fn[k] == 0 else tp[k] / (tp[k] + fn[k])
        assert float(precision(c, k)) == exp_p and float(recall(c, k)) == exp_r


def test_hand_case():
    c = ConfusionCounts(np.array([0, 1, 0]), np.array([0, 1, 0]), np.array([0, 0, 0]), np.array([0, 0, 0]))
    assert float(dice(c, (1,))) == 2 / 3
    assert float(iou(c, (1,))) == 1 / 2
    assert float(precision(c, 1)) == 0.5
    assert float(recall(c, 1)) == 1.0


def test_vacuous_scores_flagged():
    z = np.zeros((4, 4), np.uint8)
    d = dice(confusion(z, z), (1, 2))
    assert float(d) == 1.0 and d.vacuous
    assert not dice(confusion(z, z), (0,)).vacuous


def test_errors():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2), np.uint8), np.zeros((3, 2), np.uint8))
    c = confusion(np.zeros((2, 2), np.uint8), np.zeros((2, 2), np.uint8))
    with pytest.raises(ContractError):
        dice(c, ())
    with pytest.raises(ContractError):
        recall(c, 3)


def _manifest():
    recs = [
        DatasetRecord("p1", "Ida", "r", "", split="test", is_positive=True),
        DatasetRecord("p2", "Ida", "r", "", split="test", is_positive=True),
        DatasetRecord("n1", "Ida", "r", "", split="test", is_positive=False),
        DatasetRecord("t1", "Ian", "r", "", split="train", is_positive=True),
    ]
    return DatasetManifest(recs, "Ida")


def test_report_subsets_and_aggregation(tmp_path):
    gt = {
        "p1": np.array([[1, 1], [0, 0]], np.uint8),
        "p2": np.array([[2, 2, 2, 2], [2, 2, 2, 2]], np.uint8),
        "n1": np.zeros((2, 2), np.uint8),
    }
    pred = {"p1": np.array([[1, 0], [0, 0]], np.uint8), "p2": gt["p2"].copy(), "n1": gt["n1"].copy()}
    report = evaluate_test_set(_manifest(), pred, gt)
    pos, neg = report.subsets["debris-positive"], report.subsets["debris-free"]
    assert pos.n_samples == 2 and neg.n_samples == 1
    # pooled: TP=9, FN=1; per-image: 2/3 and 1
    assert float(pos.micro["Dice"]) == pytest.approx(18 / 19)
    assert pos.macro["Dice"] == pytest.approx((2 / 3 + 1) / 2)
    assert float(neg.micro["Dice"]) == 1.0 and float(neg.micro["Recall [no debris]"]) == 1.0
    assert pos.micro["Recall [high-density]"] == 1.0
    saved = json.loads(report.save(tmp_path / "m.json").read_text())
    assert saved["subsets"]["debris-positive"]["n_samples"] == 2
    table = report.to_table("micro")
    assert "debris-free (n=1)" in table and "Dice" in table


def test_perfect_predictions_score_one():
    gt = {"p1": np.array([[1, 2]], np.uint8), "p2": np.array([[0, 2]], np.uint8), "n1": np.zeros((1, 2), np.uint8)}
    report = evaluate_test_set(_manifest(), {k: v.copy() for k, v in gt.items()}, gt)
    for sub in report.subsets.values():
        assert all(float(v) == 1.0 for v in sub.micro.values())
        assert all(v == 1.0 for v in sub.macro.values())


def test_missing_predictions_listed():
    with pytest.raises(IncompleteError) as info:
        evaluate_test_set(_manifest(), {"p1": np.zeros((1, 1), np.uint8)}, {})
    assert set(info.value.image_ids) == {"p2", "n1"}
