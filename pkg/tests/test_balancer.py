from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylebalance.balancer import (
    AugmentationBudget,
    augmentation_budget,
    generate_augmented_set,
    read_manifest,
    sample_pairs,
    write_manifest,
)
from stylebalance.dataset import ClassHistogram, MajorityMinorityPartition, class_histogram, load_image
from stylebalance.errors import ValidationError
from stylebalance.utils import array_checksum

HIST = ClassHistogram({"A": 1000, "B": 800, "C": 200, "D": 100})
PART = MajorityMinorityPartition(frozenset("AB"), frozenset("CD"))
PART_TINY = PART  # the tiny fixture also uses classes A-D


def brute_force_budget(counts, majority, p1, p2):
    """Count up while the next integer still fits under p * count (decimal arithmetic)."""
    out = {}
    for cls, n in counts.items():
        limit = Decimal(str(p1 if cls in majority else p2)) * n
        k = 0
        while k + 1 <= limit:
            k += 1
        out[cls] = k
    return out


def test_budget_example():
    assert dict(augmentation_budget(HIST, PART, 0.5, 0.2).per_class) == {"A": 500, "B": 400, "C": 40, "D": 20}


def test_budget_zero():
    budget = augmentation_budget(HIST, PART, 0.0, 0.0)
    assert budget.total == 0 and set(budget.per_class.values()) == {0}


def test_budget_floors():
    hist = ClassHistogram({"C": 7, "A": 20})
    part = MajorityMinorityPartition(frozenset("A"), frozenset("C"))
    assert augmentation_budget(hist, part, 0.0, 0.5).per_class["C"] == 3


def test_budget_decimal_products_are_exact():
    # 0.7 * 1000 is 699.999... in binary floating point
    assert augmentation_budget(HIST, PART, 0.7, 0.3).per_class["A"] == 700


@pytest.mark.parametrize("p1,p2", [(-0.1, 0.2), (0.2, 1.01), (float("nan"), 0.1)])
def test_budget_rejects_out_of_range(p1, p2):
    with pytest.raises(ValidationError):
        augmentation_budget(HIST, PART, p1, p2)


def test_budget_requires_partition_coverage():
    with pytest.raises(ValidationError):
        augmentation_budget(HIST, MajorityMinorityPartition(frozenset("A"), frozenset("C")), 0.1, 0.1)


counts_strategy = st.dictionaries(st.sampled_from("ABCDEFG"), st.integers(0, 5000), min_size=2, max_size=7)
fraction = st.integers(0, 100).map(lambda k: k / 100)


@settings(max_examples=300, deadline=None)
@given(counts_strategy, st.data(), fraction, fraction)
def test_budget_matches_brute_force(counts, data, p1, p2):
    classes = sorted(counts)
    majority = set(data.draw(st.lists(st.sampled_from(classes), unique=True)))
    part = MajorityMinorityPartition(frozenset(majority), frozenset(set(classes) - majority))
    budget = augmentation_budget(ClassHistogram(counts), part, p1, p2)
    assert dict(budget.per_class) == brute_force_budget(counts, majority, p1, p2)
    assert budget == augmentation_budget(ClassHistogram(counts), part, p1, p2)


@settings(max_examples=200, deadline=None)
@given(counts_strategy, fraction, fraction, fraction)
def test_budget_monotone_in_p(counts, p, q, r):
    lo, hi = sorted((p, q))
    hist = ClassHistogram(counts)
    classes = sorted(counts)
    part = MajorityMinorityPartition(frozenset(classes[:1]), frozenset(classes[1:]))
    a, b = augmentation_budget(hist, part, lo, r), augmentation_budget(hist, part, hi, r)
    assert all(a.per_class[c] <= b.per_class[c] for c in part.majority)
    a, b = augmentation_budget(hist, part, r, lo), augmentation_budget(hist, part, r, hi)
    assert all(a.per_class[c] <= b.per_class[c] for c in part.minority)


@settings(max_examples=100, deadline=None)
@given(counts_strategy, fraction)
def test_equal_proportions_keep_distribution_shape(counts, p):
    hist = ClassHistogram(counts)
    classes = sorted(counts)
    part = MajorityMinorityPartition(frozenset(classes[:1]), frozenset(classes[1:]))
    budget = augmentation_budget(hist, part, p, p)
    for c, n in counts.items():
        assert n + budget.per_class[c] == int(Decimal(1 + Decimal(str(p))) * n // 1)


# --- pair sampling ---


def test_sample_pairs_edge_cases():
    assert sample_pairs([], 0, 0) == []
    assert sample_pairs(["x"], 3, 0) == [(0, 0)] * 3
    with pytest.raises(ValidationError, match="cannot augment empty class"):
        sample_pairs([], 2, 0)


def test_sample_pairs_uniform_chi_square():
    pairs = np.array(sample_pairs(list("abcd"), 10_000, 0))
    for slot in (0, 1):
        freq = np.bincount(pairs[:, slot], minlength=4)
        assert np.all(np.abs(freq - 2500) <= 0.04 * 2500)
        chi2 = ((freq - 2500) ** 2 / 2500).sum()
        assert chi2 < 16.27  # 3 degrees of freedom, p = 0.001


def test_sample_pairs_deterministic_and_allows_repeats():
    a, b = sample_pairs(list(range(5)), 200, 9), sample_pairs(list(range(5)), 200, 9)
    assert a == b and any(c == s for c, s in a)


# --- stylized set ---


def test_zero_budget_never_calls_the_decoder(tiny_ds, tiny_engine, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("decoder invoked")

    monkeypatch.setattr(tiny_engine.decoder, "forward", boom)
    budget = augmentation_budget(class_histogram(tiny_ds), PART_TINY, 0.0, 0.0)
    assert generate_augmented_set(tiny_ds, tiny_engine, budget) == []


def test_generated_set_contract(tiny_ds, tiny_engine):
    items = generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, {"A": 2, "B": 1}), seed=5)
    assert sorted(it.label for it in items) == ["A", "A", "B"]
    by_id = {i.item_id: i for i in tiny_ds.items}
    for it in items:
        content, style = by_id[it.provenance.content_id], by_id[it.provenance.style_id]
        assert content.label == style.label == it.label
        assert content.split == style.split == "train"
        assert it.image_ref.shape == (32, 32, 3)


def test_generated_set_determinism_and_class_independence(tiny_ds, tiny_engine):
    budget = AugmentationBudget(0, 0, {"A": 3, "C": 2})
    a = generate_augmented_set(tiny_ds, tiny_engine, budget, seed=11)
    b = generate_augmented_set(tiny_ds, tiny_engine, budget, seed=11)
    assert array_checksum([i.image_ref for i in a]) == array_checksum([i.image_ref for i in b])
    # a class's pairs do not depend on the budgets of other classes
    only_c = generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, {"C": 2}), seed=11)
    assert [i.provenance for i in only_c] == [i.provenance for i in a if i.label == "C"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.dictionaries(st.sampled_from("ABCD"), st.integers(0, 4)))
def test_no_leakage_and_total(tiny_ds, tiny_engine, seed, per_class):
    items = generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, per_class), seed=seed)
    assert len(items) == sum(per_class.values())
    train_ids = {i.item_id for i in tiny_ds.split("train")}
    assert all(i.provenance.content_id in train_ids and i.provenance.style_id in train_ids for i in items)


def test_unknown_class_in_budget(tiny_ds, tiny_engine):
    with pytest.raises(ValidationError):
        generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, {"Z": 1}))


def test_manifest_roundtrip(tmp_path, tiny_ds, tiny_engine):
    items = generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, {"B": 2, "D": 1}),
                                   alpha=0.5, seed=2, out_dir=tmp_path)
    manifest = write_manifest(items, tmp_path / "aug_manifest.csv")
    header = manifest.read_text().splitlines()[0]
    assert header == "image,label,content_src,style_src,alpha,seed"
    assert all((tmp_path / "aug" / it.label / f"{it.item_id}.png").is_file() for it in items)
    back = read_manifest(manifest)
    assert [(b.item_id, b.label, b.provenance) for b in back] == [(i.item_id, i.label, i.provenance) for i in items]
    assert load_image(back[0].image_ref).shape == (32, 32, 3)


def test_manifest_needs_files(tmp_path, tiny_ds, tiny_engine):
    items = generate_augmented_set(tiny_ds, tiny_engine, AugmentationBudget(0, 0, {"A": 1}))
    with pytest.raises(ValidationError):
        write_manifest(items, tmp_path / "aug_manifest.csv")
