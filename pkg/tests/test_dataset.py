import csv
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from stylebalance.dataset import (
    ClassHistogram,
    class_histogram,
    load_dataset,
    load_image,
    load_image_folder,
    make_toy_dataset,
    partition_majority_minority,
    write_dataset,
)
from stylebalance.errors import DatasetFormatError, IngestionError, ValidationError
from stylebalance.utils import array_checksum


def _write_fixture(root, rows, label_column="status"):
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "gender", label_column, "set"])
        for i, (label, split) in enumerate(rows):
            name = f"images/img{i}.png"
            Image.fromarray(np.full((6, 8, 3), 40 * i, np.uint8)).save(root / name)
            w.writerow([name, "male", label, split])
    return root / "labels.csv"


SIX_ROWS = [("A", "train"), ("A", "train"), ("B", "train"), ("A", "train"), ("B", "dev"), ("A", "test")]


def test_six_row_fixture_counts(tmp_path):
    labels = _write_fixture(tmp_path, SIX_ROWS)
    ds = load_dataset(tmp_path, labels)
    assert ds.classes == ("A", "B")
    assert [len(ds.split(s)) for s in ("train", "dev", "test")] == [4, 1, 1]
    assert dict(class_histogram(ds).counts) == {"A": 3, "B": 1}
    assert ds.items[0].size == (6, 8)
    img = load_image(ds.items[0].image_ref)
    assert img.shape == (6, 8, 3) and img.dtype == np.float32 and 0.0 <= img.min() <= img.max() <= 1.0


def test_loading_is_deterministic(tmp_path):
    labels = _write_fixture(tmp_path, SIX_ROWS)
    a, b = load_dataset(tmp_path, labels, workers=4), load_dataset(tmp_path, labels, workers=1)
    assert [(i.item_id, i.label, i.split) for i in a.items] == [(i.item_id, i.label, i.split) for i in b.items]


def test_empty_labels_file(tmp_path):
    (tmp_path / "labels.csv").write_text("image,status,set\n")
    with pytest.raises(IngestionError, match="empty dataset"):
        load_dataset(tmp_path, tmp_path / "labels.csv")


def test_missing_image_names_the_file(tmp_path):
    labels = _write_fixture(tmp_path, SIX_ROWS)
    (tmp_path / "images" / "img2.png").unlink()
    with pytest.raises(IngestionError, match="img2.png"):
        load_dataset(tmp_path, labels)


def test_unknown_split_tag(tmp_path):
    labels = _write_fixture(tmp_path, [("A", "train"), ("B", "validation")])
    with pytest.raises(DatasetFormatError, match="validation"):
        load_dataset(tmp_path, labels)


def test_class_without_train_items_is_kept_with_warning(tmp_path):
    labels = _write_fixture(tmp_path, [("A", "train"), ("A", "train"), ("B", "test")])
    ds = load_dataset(tmp_path, labels)
    assert ds.classes == ("A", "B")
    assert any("'B'" in w for w in ds.warnings)
    assert dict(class_histogram(ds).counts) == {"A": 2, "B": 0}


def test_other_label_column(tmp_path):
    labels = _write_fixture(tmp_path, SIX_ROWS)
    ds = load_dataset(tmp_path, labels, label_column="gender")
    assert ds.classes == ("male",)


def test_folder_layout_matches_csv(tmp_path, tiny_ds):
    for item in tiny_ds.items[:12]:
        path = tmp_path / "tree" / item.split / item.label / f"{item.item_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((load_image(item.image_ref) * 255).round().astype(np.uint8)).save(path)
    ds = load_image_folder(tmp_path / "tree")
    assert len(ds) == 12
    assert all(i.split in ("train", "dev", "test") for i in ds.items)


def test_write_then_load_roundtrip(tmp_path, tiny_ds):
    labels = write_dataset(tiny_ds, tmp_path)
    ds = load_dataset(tmp_path, labels)
    assert class_histogram(ds).counts == class_histogram(tiny_ds).counts
    first = load_image(ds.items[0].image_ref)
    assert np.abs(first - load_image(tiny_ds.items[0].image_ref)).max() <= 0.5 / 255 + 1e-6


# --- histogram and partition ---


def test_histogram_single_class():
    ds = make_toy_dataset({"A": 3, "B": 1}, 32, 0, eval_per_class=0)
    hist = class_histogram(ds)
    assert hist.counts == {"A": 3, "B": 1}
    assert hist.total == len(ds.split("train"))


def test_median_partition_example():
    part = partition_majority_minority(ClassHistogram({"A": 1000, "B": 800, "C": 200, "D": 100}))
    assert part.majority == {"A", "B"} and part.minority == {"C", "D"}


def test_tied_partition_needs_override():
    with pytest.raises(ValidationError, match="minority empty; supply override"):
        partition_majority_minority(ClassHistogram({"A": 10, "B": 10}))


def test_override_returned_verbatim():
    hist = ClassHistogram({"noble": 5, "warrior": 50, "incarnation": 60, "commoner": 1})
    override = {"majority": {"noble", "warrior"}, "minority": {"incarnation", "commoner"}}
    part = partition_majority_minority(hist, override)
    assert part.majority == override["majority"] and part.minority == override["minority"]


@pytest.mark.parametrize("override", [
    {"majority": ["A"], "minority": ["B"]},
    {"majority": ["A", "B"], "minority": ["B", "C"]},
    {"majority": ["A", "B"], "minority": ["C", "Z"]},
])
def test_bad_override(override):
    with pytest.raises(ValidationError):
        partition_majority_minority(ClassHistogram({"A": 3, "B": 2, "C": 1}), override)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.text("ABCDEFGH", min_size=1, max_size=3), st.integers(0, 10_000), min_size=2, max_size=8))
def test_partition_is_total_and_disjoint(counts):
    hist = ClassHistogram(counts)
    median = statistics.median(counts.values())
    if all(n >= median for n in counts.values()):
        with pytest.raises(ValidationError):
            partition_majority_minority(hist)
        return
    part = partition_majority_minority(hist)
    assert part.majority | part.minority == set(counts)
    assert not part.majority & part.minority
    assert min(counts[c] for c in part.majority) > max(counts[c] for c in part.minority)


# --- toy generator ---


def test_toy_spec_example():
    ds = make_toy_dataset({"A": 400, "B": 400, "C": 80, "D": 40}, 32, seed=7, eval_per_class=1)
    assert len(ds.split("train")) == 920
    assert class_histogram(ds).counts == {"A": 400, "B": 400, "C": 80, "D": 40}


def test_toy_determinism_and_seed_dependence():
    spec = {"A": 5, "B": (4, "ring", "earth")}
    a, b = make_toy_dataset(spec, 32, 7), make_toy_dataset(spec, 32, 7)
    c = make_toy_dataset(spec, 32, 8)
    arrays = lambda ds: [i.image_ref for i in ds.items]  # noqa: E731
    assert array_checksum(arrays(a)) == array_checksum(arrays(b))
    assert array_checksum(arrays(a)) != array_checksum(arrays(c))
    assert class_histogram(a).counts == class_histogram(c).counts


def test_toy_images_are_valid(tiny_ds):
    for item in tiny_ds.items[:10]:
        img = item.image_ref
        assert img.shape == (32, 32, 3) and img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0


@pytest.mark.parametrize("spec,size", [({"A": 3, "B": 3}, 16), ({"A": 3}, 32), ({"A": 0, "B": 3}, 32),
                                       ({"A": (3, "hexagon"), "B": 3}, 32), ({"A": (3, "ring", "neon"), "B": 3}, 32)])
def test_toy_rejects_bad_specs(spec, size):
    with pytest.raises(ValidationError):
        make_toy_dataset(spec, size, 0)
