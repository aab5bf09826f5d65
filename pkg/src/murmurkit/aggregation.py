"""Segment -> record -> patient decision rules and confidence roll-up.

A record's label is the majority vote of its segment labels, ties broken
by the priority present > unknown > absent. A patient is `present` if any
record is, else `unknown` if any record is, else `absent`. At each hop the
decision's confidence is the mean confidence of exactly the lower-level
items whose label matches the decided label (the label rules guarantee at
least one matching item).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataio import ClassLabel

# Tie-break order: a murmur call outranks an unsure call outranks a clean one.
_PRIORITY = (ClassLabel.PRESENT, ClassLabel.UNKNOWN, ClassLabel.ABSENT)


@dataclass(frozen=True)
class RecordDecision:
    label: ClassLabel
    confidence: float
    contributing_segments: tuple[int, ...]


@dataclass(frozen=True)
class PatientDecision:
    label: ClassLabel
    confidence: float
    contributing_records: tuple[int, ...]


def record_label(segment_labels: Sequence[ClassLabel]) -> ClassLabel:
    """Majority label; ties resolved by present > unknown > absent."""
    if not segment_labels:
        raise ValueError("record_label requires at least one segment")
    counts = {label: 0 for label in ClassLabel}
    for label in segment_labels:
        counts[ClassLabel(label)] += 1
    best = max(counts.values())
    for label in _PRIORITY:
        if counts[label] == best:
            return label
    raise AssertionError("unreachable")


def patient_label(record_labels: Sequence[ClassLabel]) -> ClassLabel:
    """Any present -> present; else any unknown -> unknown; else absent."""
    if not record_labels:
        raise ValueError("patient_label requires at least one record")
    labels = [ClassLabel(label) for label in record_labels]
    if ClassLabel.PRESENT in labels:
        return ClassLabel.PRESENT
    if ClassLabel.UNKNOWN in labels:
        return ClassLabel.UNKNOWN
    return ClassLabel.ABSENT


def roll_up_confidence(labels: Sequence[ClassLabel], confidences: Sequence[float],
                       decided: ClassLabel) -> tuple[float, tuple[int, ...]]:
    """Mean confidence over the items matching the decided label."""
    matching = tuple(i for i, label in enumerate(labels)
                     if ClassLabel(label) == decided)
    if not matching:
        raise ValueError(f"no item matches the decided label {decided!r}")
    mean = sum(confidences[i] for i in matching) / len(matching)
    return mean, matching


def decide_record(segment_labels: Sequence[ClassLabel],
                  segment_confidences: Sequence[float]) -> RecordDecision:
    label = record_label(segment_labels)
    confidence, contributing = roll_up_confidence(
        segment_labels, segment_confidences, label)
    return RecordDecision(label=label, confidence=confidence,
                          contributing_segments=contributing)


def decide_patient(record_labels: Sequence[ClassLabel],
                   record_confidences: Sequence[float]) -> PatientDecision:
    label = patient_label(record_labels)
    confidence, contributing = roll_up_confidence(
        record_labels, record_confidences, label)
    return PatientDecision(label=label, confidence=confidence,
                           contributing_records=contributing)
