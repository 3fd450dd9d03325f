"""Longitudinal data model: subjects, time steps, datasets and split assignments."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

DescriptorValue = Union[float, str]


class DescriptorKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"
    BINARY = "binary"


@dataclass(frozen=True)
class TimeStep:
    event_time: float
    features: Optional[tuple[float, ...]]
    target: Optional[float] = None
    observed: bool = True


@dataclass(frozen=True)
class SubjectSeries:
    subject_id: str
    descriptors: tuple[DescriptorValue, ...]
    steps: tuple[TimeStep, ...]
    school_id: Optional[str] = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def times(self) -> list[float]:
        return [s.event_time for s in self.steps]

    def with_steps(self, steps: Iterable[TimeStep]) -> "SubjectSeries":
        return replace(self, steps=tuple(steps))


@dataclass(frozen=True)
class DescriptorField:
    name: str
    kind: DescriptorKind


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectSeries, ...]
    feature_schema: tuple[str, ...]
    descriptor_schema: tuple[DescriptorField, ...]

    @property
    def n_features(self) -> int:
        return len(self.feature_schema)

    @property
    def descriptor_kinds(self) -> tuple[DescriptorKind, ...]:
        return tuple(f.kind for f in self.descriptor_schema)

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def by_id(self) -> dict[str, SubjectSeries]:
        return {s.subject_id: s for s in self.subjects}

    def with_subjects(self, subjects: Iterable[SubjectSeries]) -> "Dataset":
        return replace(self, subjects=tuple(subjects))


class SplitMode(str, enum.Enum):
    SUBJECT = "subject"
    ROW = "row"


class RowOrder(str, enum.Enum):
    """Global row order used by row-based splitting.

    ``subject``: subjects in dataset order, each subject's steps in order.
    ``time``: chronological, as in an event-log export (ties keep subject order).
    """

    SUBJECT = "subject"
    TIME = "time"


PART_NAMES = ("train", "val", "test", "generate")


@dataclass(frozen=True)
class SplitAssignment:
    """Partition of a dataset into named parts.

    In subject mode each part holds subject ids; in row mode each part holds
    global row indices, numbered subject-major (subjects in order, steps in
    order) whatever ``row_order`` the partition was cut along.
    """

    mode: SplitMode
    parts: Mapping[str, frozenset]
    ratios: tuple[float, ...]
    row_order: RowOrder = RowOrder.SUBJECT

    def part_names(self) -> list[str]:
        return list(self.parts)

    def part_of(self, key) -> str:
        for name, members in self.parts.items():
            if key in members:
                return name
        raise KeyError(key)


@dataclass(frozen=True)
class Violation:
    kind: str
    subject_id: str
    detail: str = ""


def validate(dataset: Dataset) -> list[Violation]:
    """Return every invariant violation found in ``dataset``; empty when well formed."""
    out: list[Violation] = []
    seen: set[str] = set()
    reported_dup: set[str] = set()
    n_feat = dataset.n_features
    n_desc = len(dataset.descriptor_schema)
    for subj in dataset.subjects:
        sid = subj.subject_id
        if sid in seen and sid not in reported_dup:
            out.append(Violation("DuplicateId", sid))
            reported_dup.add(sid)
        seen.add(sid)
        if len(subj.descriptors) != n_desc:
            out.append(
                Violation("RaggedDescriptors", sid, f"expected {n_desc}, got {len(subj.descriptors)}")
            )
        times = subj.times()
        if any(b <= a for a, b in zip(times, times[1:])):
            out.append(Violation("UnsortedTime", sid))
        for i, step in enumerate(subj.steps):
            if step.features is None:
                if step.observed:
                    out.append(Violation("MissingFeatures", sid, f"step {i}"))
                continue
            if len(step.features) != n_feat:
                out.append(
                    Violation("RaggedFeatures", sid, f"step {i}: expected {n_feat}, got {len(step.features)}")
                )
    return out


def total_rows(dataset: Dataset) -> int:
    return sum(len(s.steps) for s in dataset.subjects)


def make_subject(
    subject_id: str,
    descriptors: Sequence[DescriptorValue],
    times: Sequence[float],
    features: Sequence[Sequence[float]],
    targets: Optional[Sequence[Optional[float]]] = None,
    school_id: Optional[str] = None,
    observed: bool = True,
) -> SubjectSeries:
    if targets is None:
        targets = [None] * len(times)
    steps = tuple(
        TimeStep(float(t), tuple(float(v) for v in f), None if y is None else float(y), observed)
        for t, f, y in zip(times, features, targets)
    )
    return SubjectSeries(str(subject_id), tuple(descriptors), steps, school_id)


def sort_steps(steps: Iterable[TimeStep]) -> tuple[TimeStep, ...]:
    # stable: ties keep input order
    return tuple(sorted(steps, key=lambda s: s.event_time))


@dataclass(frozen=True)
class GeneratedSeries:
    """Generated feature sequence for one subject's missing time steps."""

    subject_id: str
    event_times: tuple[float, ...]
    features: tuple[tuple[float, ...], ...]
    targets: Optional[tuple[float, ...]] = None
    source: str = ""

    def to_steps(self) -> list[TimeStep]:
        tg = self.targets if self.targets is not None else (None,) * len(self.event_times)
        return [
            TimeStep(t, f, y, observed=False)
            for t, f, y in zip(self.event_times, self.features, tg)
        ]


@dataclass(frozen=True)
class MissingSkeleton:
    subject_id: str
    descriptors: tuple[DescriptorValue, ...]
    times: tuple[float, ...]
    school_id: Optional[str] = None


__all__ = [
    "DescriptorKind",
    "DescriptorField",
    "TimeStep",
    "SubjectSeries",
    "Dataset",
    "SplitMode",
    "RowOrder",
    "SplitAssignment",
    "PART_NAMES",
    "Violation",
    "validate",
    "total_rows",
    "make_subject",
    "sort_steps",
    "GeneratedSeries",
    "MissingSkeleton",
]
