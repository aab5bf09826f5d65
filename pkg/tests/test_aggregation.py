"""Decision-rule oracles, including exhaustive brute-force references."""

import itertools

import numpy as np
import pytest

from murmurkit.aggregation import (decide_patient, decide_record, patient_label,
                                   record_label, roll_up_confidence)
from murmurkit.dataio import ClassLabel

A, P, U = ClassLabel.ABSENT, ClassLabel.PRESENT, ClassLabel.UNKNOWN


def brute_force_record(labels):
    """Independent reference: count, then walk the priority list."""
    counts = [sum(1 for x in labels if x == c) for c in (A, P, U)]
    best = max(counts)
    for candidate in (P, U, A):
        if counts[(A, P, U).index(candidate)] == best:
            return candidate


def brute_force_patient(labels):
    if any(x == P for x in labels):
        return P
    if any(x == U for x in labels):
        return U
    return A


class TestRecordLabel:
    def test_majority_beats_priority(self):
        assert record_label([A, P, A]) == A

    def test_two_way_tie_uses_priority(self):
        assert record_label([P, A]) == P
        assert record_label([U, A]) == U

    def test_three_way_tie(self):
        assert record_label([U, A, P]) == P

    def test_brute_force_over_all_tuples_up_to_four(self):
        for size in (1, 2, 3, 4):
            for labels in itertools.product((A, P, U), repeat=size):
                assert record_label(list(labels)) == brute_force_record(labels), labels

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            record_label([])


class TestPatientLabel:
    def test_any_present_wins(self):
        assert patient_label([A, A, P]) == P

    def test_unknown_fallback(self):
        assert patient_label([A, U]) == U

    def test_all_absent(self):
        assert patient_label([A, A]) == A

    def test_exhaustive_27_triples(self):
        for labels in itertools.product((A, P, U), repeat=3):
            assert patient_label(list(labels)) == brute_force_patient(labels), labels

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            patient_label([])


class TestConfidenceRollUp:
    def test_single_matching_segment(self):
        decision = decide_record([P, A], [0.9, 0.8])
        assert decision.label == P
        assert decision.confidence == pytest.approx(0.9)
        assert decision.contributing_segments == (0,)

    def test_plain_mean_when_unanimous(self):
        decision = decide_record([A, A], [0.6, 0.8])
        assert decision.label == A
        assert decision.confidence == pytest.approx(0.7)

    def test_patient_mean_of_matching_records(self):
        decision = decide_patient([P, P, A], [0.9, 0.7, 0.99])
        assert decision.label == P
        assert decision.confidence == pytest.approx(0.8)
        assert decision.contributing_records == (0, 1)

    def test_mismatched_decided_label_rejected(self):
        with pytest.raises(ValueError, match="matches"):
            roll_up_confidence([A, A], [0.5, 0.5], P)

    def test_permutation_invariance(self):
        gen = np.random.default_rng(8)
        for _ in range(100):
            size = int(gen.integers(1, 6))
            labels = [ClassLabel(int(x)) for x in gen.integers(0, 3, size)]
            confs = gen.random(size).tolist()
            base_r = decide_record(labels, confs)
            base_p = decide_patient(labels, confs)
            perm = gen.permutation(size)
            shuffled = decide_record([labels[i] for i in perm],
                                     [confs[i] for i in perm])
            assert shuffled.label == base_r.label
            assert shuffled.confidence == pytest.approx(base_r.confidence)
            shuffled_p = decide_patient([labels[i] for i in perm],
                                        [confs[i] for i in perm])
            assert shuffled_p.label == base_p.label
            assert shuffled_p.confidence == pytest.approx(base_p.confidence)

    def test_adding_present_record_keeps_present_patient(self):
        gen = np.random.default_rng(9)
        for _ in range(50):
            size = int(gen.integers(1, 5))
            labels = [ClassLabel(int(x)) for x in gen.integers(0, 3, size)]
            confs = gen.random(size).tolist()
            if patient_label(labels) != P:
                labels.append(P)
                confs.append(float(gen.random()))
            extended = decide_patient(labels + [P], confs + [0.5])
            assert extended.label == P

    def test_unanimity_gives_plain_mean(self):
        gen = np.random.default_rng(10)
        for label in (A, P, U):
            confs = gen.random(4).tolist()
            record = decide_record([label] * 4, confs)
            assert record.label == label
            assert record.confidence == pytest.approx(float(np.mean(confs)))
