import numpy as np
import pytest

from relaug.core import (
    LabelDistribution,
    PredicateVocabulary,
    RelationInstance,
    Vocabulary,
    class_groups,
    compute_propensity,
    group_classes,
    load_dataset,
    load_vocab,
    save_dataset,
    save_vocab,
    sorted_by_frequency,
)
from relaug.errors import DatasetError


class TestLabelDistribution:
    def test_one_hot(self):
        lab = LabelDistribution.one_hot(2, 4)
        assert lab.weights.tolist() == [0, 0, 1, 0]
        assert lab.is_one_hot and not lab.is_background
        assert lab.argmax() == 2

    def test_background_sums_to_zero(self):
        lab = LabelDistribution.background(3)
        assert lab.is_background and not lab.is_one_hot

    def test_invalid_sum_rejected(self):
        with pytest.raises(ValueError):
            LabelDistribution(np.array([0.5, 0.2]))

    @pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.777, 1.0])
    def test_mixed_sums_to_one(self, lam):
        lab = LabelDistribution.mixed(0, 3, lam, 5)
        assert abs(lab.weights.sum() - 1.0) < 1e-12

    def test_mixed_same_class_collapses(self):
        lab = LabelDistribution.mixed(1, 1, 0.3, 3)
        assert lab.weights.tolist() == [0, 1, 0]


class TestVocabulary:
    def test_requires_unique_names(self):
        with pytest.raises(ValueError):
            PredicateVocabulary(("on", "on"))

    def test_requires_two_classes(self):
        with pytest.raises(ValueError):
            PredicateVocabulary(("only",))

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            PredicateVocabulary(("a", "b", "c"), group_bounds=(2, 1))

    def test_roundtrip(self, tmp_path):
        vocab = Vocabulary(PredicateVocabulary(("on", "near")), ("cat", "mat"))
        save_vocab(vocab, tmp_path / "v.json")
        loaded = load_vocab(tmp_path / "v.json")
        assert loaded == vocab


class TestRelationInstance:
    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="instance 5"):
            RelationInstance(id=5, scene_id=0, subj_class=0, obj_class=0,
                             subj_feat=np.zeros(3), obj_feat=np.zeros(4),
                             union_feat=np.zeros(3),
                             observed=LabelDistribution.one_hot(0, 2))

    def test_observed_must_be_latent_member(self):
        with pytest.raises(ValueError, match="latent"):
            RelationInstance(id=1, scene_id=0, subj_class=0, obj_class=0,
                             subj_feat=np.zeros(3), obj_feat=np.zeros(3),
                             union_feat=np.zeros(3),
                             observed=LabelDistribution.one_hot(0, 3),
                             latent=frozenset({1, 2}))

    def test_background_predicate_is_none(self, make_instance):
        assert make_instance(predicate=None).predicate is None
        assert make_instance(predicate=None).triplet() is None


class TestPropensity:
    def test_counts_50_30_20(self, make_instance):
        # frequencies and inverses checked against hand arithmetic and the
        # independent counting loop below
        data = ([make_instance(i, predicate=0) for i in range(50)]
                + [make_instance(50 + i, predicate=1) for i in range(30)]
                + [make_instance(80 + i, predicate=2) for i in range(20)])
        counts = [0, 0, 0]
        for inst in data:
            counts[inst.predicate] += 1
        assert counts == [50, 30, 20]
        prop = compute_propensity(data, 3)
        np.testing.assert_allclose(prop.frequency, [0.5, 0.3, 0.2], atol=1e-15)
        np.testing.assert_allclose(prop.inverse, [2.0, 10.0 / 3.0, 5.0], rtol=1e-12)

    def test_zero_frequency_clamped_finite(self, make_instance):
        prop = compute_propensity([make_instance(i, predicate=0, n_p=2) for i in range(4)], 2)
        assert prop.frequency.tolist() == [1.0, 0.0]
        assert np.isfinite(prop.inverse[1])
        assert prop.inverse[1] == 1e8

    def test_single_instance(self, make_instance):
        prop = compute_propensity([make_instance(0, predicate=2, n_p=3)], 3)
        assert prop.frequency.tolist() == [0.0, 0.0, 1.0]

    def test_no_labeled_instances_error(self, make_instance):
        with pytest.raises(ValueError, match="zero labeled"):
            compute_propensity([make_instance(0, predicate=None)], 4)

    def test_background_excluded_from_counts(self, make_instance):
        data = [make_instance(0, predicate=1), make_instance(1, predicate=None)]
        prop = compute_propensity(data, 2)
        assert prop.frequency.tolist() == [0.0, 1.0]

    def test_frequency_sums_to_one(self, make_instance):
        rng = np.random.default_rng(3)
        data = [make_instance(i, predicate=int(rng.integers(5)), n_p=5) for i in range(200)]
        prop = compute_propensity(data, 5)
        assert abs(prop.frequency.sum() - 1.0) < 1e-12


def _oracle_groups(frequency, head_frac, tail_frac):
    """Independent re-derivation: stable sort then cumulative-mass scan."""
    n = len(frequency)
    order = sorted(range(n), key=lambda i: (-frequency[i], i))
    total = sum(frequency)
    cum = 0.0
    head = 0
    for i in order:
        cum += frequency[i]
        head += 1
        if cum >= head_frac * total - 1e-12:
            break
    head = min(head, n - 1)
    cum = 0.0
    tail_len = 0
    for i in reversed(order):
        cum += frequency[i]
        tail_len += 1
        if cum >= tail_frac * total - 1e-12:
            break
    return head, max(head, n - tail_len)


class TestGroupClasses:
    def test_ten_classes_top3_head(self):
        # top three classes hold 55% of the mass, bottom three exactly 10%
        freq = np.array([0.25, 0.17, 0.13, 0.12, 0.1, 0.08, 0.05, 0.04, 0.035, 0.025])
        assert abs(freq.sum() - 1.0) < 1e-12
        bounds = group_classes(freq, head_frac=0.5, tail_frac=0.1)
        assert bounds == _oracle_groups(freq.tolist(), 0.5, 0.1)
        assert bounds == (3, 7)

    def test_two_classes_forced_partition(self):
        assert group_classes(np.array([0.8, 0.2])) == (1, 1)
        assert group_classes(np.array([0.99, 0.01])) == (1, 1)

    def test_uniform_ties_deterministic(self):
        freq = np.full(10, 0.1)
        bounds = group_classes(freq, 0.5, 0.1)
        assert bounds == _oracle_groups(freq.tolist(), 0.5, 0.1)
        assert sorted_by_frequency(freq).tolist() == list(range(10))

    def test_invalid_fracs(self):
        with pytest.raises(ValueError):
            group_classes(np.array([0.5, 0.5]), head_frac=0.7, tail_frac=0.5)

    def test_class_groups_partition(self):
        freq = np.array([0.4, 0.05, 0.3, 0.1, 0.15])
        head, body, tail = class_groups(freq)
        combined = sorted(list(head) + list(body) + list(tail))
        assert combined == list(range(5))


class TestDatasetIO:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        vocab = PredicateVocabulary(("a", "b"))
        assert load_dataset(path, vocab) == []

    def test_three_records_in_order(self, tmp_path, make_instance):
        data = [make_instance(i, predicate=i % 2, n_p=2) for i in range(3)]
        path = tmp_path / "d.jsonl"
        save_dataset(data, path)
        loaded = load_dataset(path, PredicateVocabulary(("a", "b")))
        assert [i.id for i in loaded] == [0, 1, 2]

    def test_roundtrip_identity(self, tmp_path, make_instance):
        data = [make_instance(i, predicate=(None if i == 2 else i % 3), n_p=3,
                              latent=(frozenset({i % 3, 2}) if i != 2 else None))
                for i in range(6)]
        path = tmp_path / "d.jsonl"
        save_dataset(data, path)
        loaded = load_dataset(path, PredicateVocabulary(("a", "b", "c")))
        assert loaded == data

    def test_malformed_record_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": 0\n')
        with pytest.raises(DatasetError, match="line 1"):
            load_dataset(path, PredicateVocabulary(("a", "b")))

    def test_dimension_mismatch_names_instance(self, tmp_path, make_instance):
        good = make_instance(0, predicate=0, n_p=2, dim=4)
        bad = make_instance(7, predicate=1, n_p=2, dim=3)
        path = tmp_path / "d.jsonl"
        save_dataset([good], path)
        with open(path, "a") as fh:
            import json

            fh.write(json.dumps({
                "id": 7, "scene_id": 0, "subj_class": 0, "obj_class": 1,
                "predicate": 1, "subj_feat": bad.subj_feat.tolist(),
                "obj_feat": bad.obj_feat.tolist(),
                "union_feat": bad.union_feat.tolist(), "latent": None,
            }) + "\n")
        with pytest.raises(DatasetError, match="instance 7"):
            load_dataset(path, PredicateVocabulary(("a", "b")))

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": 0, "scene_id": 0}\n')
        with pytest.raises(DatasetError, match="missing"):
            load_dataset(path, PredicateVocabulary(("a", "b")))
