import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from debrisseg.annotation import (
    AnnotationStack,
    DatasetManifest,
    DatasetRecord,
    DensityLevel,
    aggregate_consensus,
    annotation_filename,
    binarize,
    class_balance_report,
    classify_positive,
    find_annotations,
    load_annotation_stack,
    read_mask,
    split_by_event,
    write_mask,
)
from debrisseg.errors import (
    ConfigurationError,
    ContractError,
    EmptyInputError,
    IncompleteError,
    MaskEncodingError,
    ShapeError,
)


def brute_consensus(stack):
    h, w, n = stack.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            out[i, j] = math.ceil(Fraction(int(stack[i, j].sum()), n))
    return out


stacks = st.tuples(st.integers(1, 16), st.integers(1, 16), st.integers(1, 5)).flatmap(
    lambda s: hnp.arrays(np.uint8, s, elements=st.integers(0, 2))
)


@settings(max_examples=200, deadline=None)
@given(stacks)
def test_consensus_matches_brute_force(stack):
    got = aggregate_consensus(AnnotationStack(stack, [f"a{i}" for i in range(stack.shape[2])]))
    assert got.dtype == np.uint8
    np.testing.assert_array_equal(got, brute_consensus(stack))


@settings(max_examples=100, deadline=None)
@given(stacks)
def test_consensus_bounds_and_permutation_invariance(stack):
    ids = [f"a{i}" for i in range(stack.shape[2])]
    got = aggregate_consensus(AnnotationStack(stack, ids))
    assert (got >= stack.min(axis=2)).all() and (got <= stack.max(axis=2)).all()
    perm = np.random.default_rng(0).permutation(stack.shape[2])
    np.testing.assert_array_equal(got, aggregate_consensus(AnnotationStack(stack[..., perm], ids)))


def test_single_annotator_is_identity(rng):
    mask = rng.integers(0, 3, size=(9, 7)).astype(np.uint8)
    np.testing.assert_array_equal(aggregate_consensus(AnnotationStack.from_masks([mask], ["x"])), mask)


def test_three_annotator_table():
    # ceil(sum / 3) tabulated by label sum
    by_sum = {0: 0, 1: 1, 2: 1, 3: 1, 4: 2, 5: 2, 6: 2}
    triples = list(itertools.product(range(3), repeat=3))
    stack = np.array(triples, dtype=np.uint8).reshape(27, 1, 3)
    got = aggregate_consensus(AnnotationStack(stack, ["a", "b", "c"]))[:, 0]
    assert [int(v) for v in got] == [by_sum[sum(t)] for t in triples]
    # a single dissenting annotator still pulls the label up
    assert got[triples.index((0, 0, 1))] == 1


def test_stack_validation():
    with pytest.raises(EmptyInputError):
        AnnotationStack.from_masks([], [])
    with pytest.raises(ShapeError):
        AnnotationStack.from_masks([np.zeros((2, 2)), np.zeros((3, 2))], ["a", "b"])
    with pytest.raises(ContractError):
        AnnotationStack(np.zeros((2, 2, 2), np.uint8), ["a", "a"])
    with pytest.raises(MaskEncodingError):
        AnnotationStack(np.full((2, 2, 1), 3, np.uint8), ["a"])


def test_binarize_and_positive():
    m = np.array([[0, 1], [2, 2]], np.uint8)
    np.testing.assert_array_equal(binarize(m, 2), [[0, 0], [1, 1]])
    with pytest.raises(ContractError):
        binarize(m, 3)
    assert classify_positive(m) and not classify_positive(np.zeros((4, 4), np.uint8))
    assert DensityLevel.HIGH_DENSITY.prompt == "debris at high-density"


def test_mask_io(tmp_path):
    m = np.array([[0, 1, 2]], np.uint8)
    np.testing.assert_array_equal(read_mask(write_mask(tmp_path / "m.png", m)), m)
    Image.fromarray(np.array([[0, 3]], np.uint8), mode="L").save(tmp_path / "bad.png")
    with pytest.raises(MaskEncodingError, match="bad.png"):
        read_mask(tmp_path / "bad.png")
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(MaskEncodingError):
        read_mask(tmp_path / "rgb.png")


def test_find_annotations_excludes_consensus(tmp_path):
    for ann in ("a1", "a2", "consensus"):
        write_mask(tmp_path / annotation_filename("img_1", ann), np.zeros((2, 2), np.uint8))
    write_mask(tmp_path / annotation_filename("img_10", "a1"), np.zeros((2, 2), np.uint8))
    found = find_annotations(tmp_path, "img_1")
    assert sorted(found) == ["a1", "a2"]
    assert load_annotation_stack(found).n_annotators == 2


def _records(events):
    out = []
    for event, n in events:
        for k in range(n):
            out.append(DatasetRecord(f"{event}_{k:02d}", event, "r", f"/x/{event}_{k}.png", is_positive=k % 2 == 0))
    return out


def test_split_by_event():
    recs = _records([("Ian", 10), ("Ike", 10), ("Ida", 5)])
    m = split_by_event(recs, "Ida", 0.2, seed=3)
    assert {r.image_id for r in m.split("test")} == {f"Ida_{k:02d}" for k in range(5)}
    assert len(m.split("validation")) == 4 and len(m.split("train")) == 16
    again = split_by_event(list(reversed(recs)), "Ida", 0.2, seed=3)
    assert [r.split for r in again.records] == [r.split for r in m.records]
    with pytest.raises(ConfigurationError):
        split_by_event(recs, "Katrina")


def test_manifest_guards_and_roundtrip(tmp_path):
    m = split_by_event(_records([("Ian", 4), ("Ida", 2)]), "Ida", 0.25)
    loaded = DatasetManifest.load(m.save(tmp_path / "m.json"))
    assert loaded.to_dict() == m.to_dict()
    assert json.loads((tmp_path / "m.json").read_text())["schema_version"] == 1
    leaked = [DatasetRecord("a", "Ida", "r", "p", split="train")]
    with pytest.raises(ContractError):
        DatasetManifest(leaked, "Ida")


def test_class_balance():
    m = split_by_event(_records([("Ian", 4), ("Ida", 3)]), "Ida", 0.25)
    report = class_balance_report(m)
    assert report["test_subsets"] == {"debris_positive": 2, "debris_free": 1, "total": 3}
    m.records[0].is_positive = None
    with pytest.raises(IncompleteError):
        class_balance_report(m)
