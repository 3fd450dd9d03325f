"""Splitting, missing-step identification, alignment, scaling and imputation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core_types import (
    PART_NAMES,
    Dataset,
    RowOrder,
    GeneratedSeries,
    MissingSkeleton,
    SplitAssignment,
    SplitMode,
    SubjectSeries,
    TimeStep,
    sort_steps,
)


class EmptyPart(ValueError):
    pass


class UnknownSchool(KeyError):
    pass


class EmptySequence(ValueError):
    pass


class NotFitted(RuntimeError):
    pass


class UnknownSubject(KeyError):
    pass


# ---------------------------------------------------------------------------
# splitting


def part_names_for(n_parts: int) -> tuple[str, ...]:
    if not 1 <= n_parts <= len(PART_NAMES):
        raise ValueError(f"unsupported number of split parts: {n_parts}")
    return PART_NAMES[:n_parts]


def _round_half_up(x: float) -> int:
    # round to 9 decimals first so 0.7 * 3265 lands on 2285.5, not 2285.4999...
    return int(math.floor(round(x, 9) + 0.5))


def part_sizes(count: int, ratios: Sequence[float]) -> list[int]:
    """Sizes from cumulative boundaries round_half_up(cumsum(ratio) * count).

    The last boundary is always ``count``, so rounding slack lands in the
    parts whose boundary moved, and the sizes always sum to ``count``.
    """
    ratios = [float(r) for r in ratios]
    if abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {math.fsum(ratios)}")
    bounds = []
    for k in range(len(ratios)):
        bounds.append(count if k == len(ratios) - 1 else _round_half_up(math.fsum(ratios[: k + 1]) * count))
    sizes = [b - a for a, b in zip([0] + bounds[:-1], bounds)]
    for name, size in zip(part_names_for(len(ratios)), sizes):
        if size <= 0:
            raise EmptyPart(f"part {name!r} is empty ({count} items at ratios {ratios})")
    return sizes


def _row_sequence(dataset: Dataset, order: RowOrder) -> list[int]:
    """Subject-major row indices listed in ``order``."""
    keys = []
    r = 0
    for k, subj in enumerate(dataset.subjects):
        for step in subj.steps:
            keys.append((step.event_time, k, r))
            r += 1
    if order is RowOrder.TIME:
        keys.sort()
    return [key[2] for key in keys]


def split(
    dataset: Dataset,
    mode: SplitMode,
    ratios: Sequence[float],
    seed: int,
    row_order: RowOrder = RowOrder.SUBJECT,
) -> SplitAssignment:
    """Partition by shuffled subject ids (subject mode) or by position in the
    global row sequence (row mode, rows listed in ``row_order``)."""
    mode = SplitMode(mode)
    row_order = RowOrder(row_order)
    names = part_names_for(len(ratios))
    if mode is SplitMode.SUBJECT:
        ids = dataset.subject_ids()
        sizes = part_sizes(len(ids), ratios)
        order = np.random.default_rng(seed).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        parts, start = {}, 0
        for name, size in zip(names, sizes):
            parts[name] = frozenset(shuffled[start : start + size])
            start += size
    else:
        rows = _row_sequence(dataset, row_order)
        sizes = part_sizes(len(rows), ratios)
        parts, start = {}, 0
        for name, size in zip(names, sizes):
            parts[name] = frozenset(rows[start : start + size])
            start += size
    return SplitAssignment(mode, parts, tuple(float(r) for r in ratios), row_order)


def materialize(dataset: Dataset, assignment: SplitAssignment) -> dict[str, Dataset]:
    """Turn an assignment into one dataset per part.

    In row mode a subject whose rows straddle a boundary contributes a
    partial series to each part it touches.
    """
    out: dict[str, Dataset] = {}
    if assignment.mode is SplitMode.SUBJECT:
        for name, members in assignment.parts.items():
            out[name] = dataset.with_subjects(s for s in dataset.subjects if s.subject_id in members)
        return out
    row_part: dict[int, str] = {}
    for name, members in assignment.parts.items():
        for r in members:
            row_part[r] = name
    buckets: dict[str, list[SubjectSeries]] = {name: [] for name in assignment.parts}
    r = 0
    for subj in dataset.subjects:
        pieces: dict[str, list[TimeStep]] = {}
        for step in subj.steps:
            pieces.setdefault(row_part[r], []).append(step)
            r += 1
        for name, steps in pieces.items():
            buckets[name].append(subj.with_steps(steps))
    for name, subs in buckets.items():
        out[name] = dataset.with_subjects(subs)
    return out


# ---------------------------------------------------------------------------
# missing steps


def identify_missing(
    dataset: Dataset,
    school_of: Mapping[str, str],
    schedule_of: Mapping[str, Iterable[float]],
) -> list[MissingSkeleton]:
    """Per subject: school schedule minus observed times. Complete subjects are omitted."""
    out = []
    for subj in dataset.subjects:
        school = school_of.get(subj.subject_id)
        if school is None or school not in schedule_of:
            raise UnknownSchool(f"no schedule for subject {subj.subject_id!r} (school {school!r})")
        schedule = set(float(t) for t in schedule_of[school])
        if not schedule:
            raise UnknownSchool(f"school {school!r} has an empty schedule")
        observed = {s.event_time for s in subj.steps}
        missing = sorted(schedule - observed)
        if missing:
            out.append(MissingSkeleton(subj.subject_id, subj.descriptors, tuple(missing), school))
    return out


# ---------------------------------------------------------------------------
# alignment


class Padding(str, enum.Enum):
    ZERO = "zero"
    FFILL = "ffill"
    BFILL = "bfill"


@dataclass(frozen=True)
class PaddingStrategy:
    kind: Padding
    length: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Padding(self.kind))
        if self.length < 1:
            raise ValueError("fixed length must be >= 1")


def align(sequence: np.ndarray, strategy: PaddingStrategy) -> tuple[np.ndarray, np.ndarray]:
    """Cut or pad a (n, D) sequence to (T, D); returns (aligned, real-position mask).

    Pads always go after the real steps. Zero pads with zero vectors, ffill
    repeats the last real vector, bfill repeats the first real vector.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 1:
        seq = seq[:, None]
    n = seq.shape[0]
    if n == 0:
        raise EmptySequence("cannot align an empty sequence")
    T = strategy.length
    mask = np.zeros(T, dtype=bool)
    if n >= T:
        mask[:] = True
        return seq[:T].copy(), mask
    out = np.empty((T, seq.shape[1]))
    out[:n] = seq
    mask[:n] = True
    if strategy.kind is Padding.ZERO:
        out[n:] = 0.0
    elif strategy.kind is Padding.FFILL:
        out[n:] = seq[-1]
    else:
        out[n:] = seq[0]
    return out, mask


def default_fixed_length(dataset: Dataset) -> int:
    """Average sequence length rounded to the nearest 10 (at least 10)."""
    lengths = [len(s.steps) for s in dataset.subjects]
    if not lengths:
        raise EmptySequence("dataset has no subjects")
    avg = sum(lengths) / len(lengths)
    return max(10, 10 * _round_half_up(avg / 10.0))


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class ScalerState:
    mins: np.ndarray
    maxs: np.ndarray


class MinMaxScaler:
    """Per-feature min-max scaling fitted on training rows only; no clamping."""

    def __init__(self, state: Optional[ScalerState] = None):
        self.state = state

    def fit(self, rows: np.ndarray) -> "MinMaxScaler":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("fit needs at least one row of a 2-D array")
        self.state = ScalerState(rows.min(axis=0), rows.max(axis=0))
        return self

    def _require(self) -> ScalerState:
        if self.state is None:
            raise NotFitted("scaler has not been fitted")
        return self.state

    def _span(self, st: ScalerState) -> tuple[np.ndarray, np.ndarray]:
        span = st.maxs - st.mins
        const = span == 0
        return np.where(const, 1.0, span), const

    def scale(self, x: np.ndarray) -> np.ndarray:
        st = self._require()
        span, const = self._span(st)
        out = (np.asarray(x, dtype=np.float64) - st.mins) / span
        return np.where(const, 0.0, out)

    def inverse_scale(self, x: np.ndarray) -> np.ndarray:
        st = self._require()
        span, const = self._span(st)
        out = np.asarray(x, dtype=np.float64) * span + st.mins
        return np.where(const, st.mins, out)


def fit_scaler(dataset: Dataset) -> MinMaxScaler:
    rows = [s.features for subj in dataset.subjects for s in subj.steps if s.features is not None]
    return MinMaxScaler().fit(np.array(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# tensors for the models


@dataclass
class SequenceBatch:
    """Aligned, scaled arrays for a list of subjects.

    ``y`` (B, T, D) features; ``mask`` (B, T) real positions; ``target``
    (B, T) with ``target_mask`` marking positions that carry a target;
    ``times`` (B, T) event times (pads repeat the last time).
    """

    subject_ids: list[str]
    y: np.ndarray
    mask: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    times: np.ndarray
    descriptors: list[tuple]

    def __len__(self) -> int:
        return len(self.subject_ids)

    def take(self, idx: Sequence[int]) -> "SequenceBatch":
        idx = list(idx)
        return SequenceBatch(
            [self.subject_ids[i] for i in idx],
            self.y[idx],
            self.mask[idx],
            self.target[idx],
            self.target_mask[idx],
            self.times[idx],
            [self.descriptors[i] for i in idx],
        )


def to_batch(dataset: Dataset, scaler: MinMaxScaler, strategy: PaddingStrategy) -> SequenceBatch:
    """Scale first, then pad (zero padding is zero in scaled space)."""
    B, T, D = len(dataset.subjects), strategy.length, dataset.n_features
    y = np.zeros((B, T, D))
    mask = np.zeros((B, T), dtype=bool)
    target = np.zeros((B, T))
    tmask = np.zeros((B, T), dtype=bool)
    times = np.zeros((B, T))
    for b, subj in enumerate(dataset.subjects):
        steps = [s for s in subj.steps if s.features is not None]
        if not steps:
            raise EmptySequence(f"subject {subj.subject_id!r} has no feature rows")
        feats = scaler.scale(np.array([s.features for s in steps]))
        y[b], mask[b] = align(feats, strategy)
        n = min(len(steps), T)
        tg = [s.target for s in steps[:n]]
        for t, v in enumerate(tg):
            if v is not None:
                target[b, t] = v
                tmask[b, t] = True
        tt = [s.event_time for s in steps[:n]]
        times[b, :n] = tt
        times[b, n:] = tt[-1]
    return SequenceBatch(
        dataset.subject_ids(), y, mask, target, tmask, times, [s.descriptors for s in dataset.subjects]
    )


# ---------------------------------------------------------------------------
# imputation


class ImputeMode(str, enum.Enum):
    BY_ID = "by_id"
    BY_ROW = "by_row"


def select_fraction(subject_ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """round_half_up(fraction * P) ids from a seeded shuffle of the sorted ids.

    With a fixed seed, smaller fractions select a prefix of larger ones.
    """
    ids = sorted(subject_ids)
    k = _round_half_up(fraction * len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[:k]]


def renumber(subj: SubjectSeries, feature_index: Optional[int]) -> SubjectSeries:
    """Rewrite the sequence-number feature as 1..n in time order."""
    if feature_index is None:
        return subj
    steps = []
    for k, s in enumerate(subj.steps, start=1):
        if s.features is None:
            steps.append(s)
            continue
        f = list(s.features)
        f[feature_index] = float(k)
        steps.append(TimeStep(s.event_time, tuple(f), s.target, s.observed))
    return subj.with_steps(steps)


def impute(
    original: Dataset,
    assignment: SplitAssignment,
    generated: Sequence[GeneratedSeries],
    mode: ImputeMode,
    fraction: float = 1.0,
    seed: int = 0,
    sequence_feature: Optional[str] = None,
) -> dict[str, Dataset]:
    """Merge generated rows back into the split parts of ``original``.

    ``fraction`` is in [0, 1]. By id, every selected subject's generated rows
    join that subject's series in its home part. By row, the selected
    generated rows (ordered by subject, then time) are cut into chunks by the
    split ratios and chunk k joins part k, attaching to whichever piece of
    that subject the part holds. Generated rows are listed in the
    assignment's row order (by subject, or chronologically). Every part
    receives imputations.
    """
    mode = ImputeMode(mode)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    parts = materialize(original, assignment)
    seq_idx = original.feature_schema.index(sequence_feature) if sequence_feature in original.feature_schema else None
    known = set(original.subject_ids())
    gen_by_id = {}
    for g in generated:
        if g.subject_id not in known:
            raise UnknownSubject(f"generated rows for unknown subject {g.subject_id!r}")
        gen_by_id[g.subject_id] = g
    chosen = select_fraction(list(gen_by_id), fraction, seed)
    if not chosen:
        return parts
    chosen_set = set(chosen)
    ordered = [g for sid, g in sorted(gen_by_id.items()) if sid in chosen_set]

    additions: dict[str, dict[str, list[TimeStep]]] = {name: {} for name in parts}
    if mode is ImputeMode.BY_ID:
        if assignment.mode is not SplitMode.SUBJECT:
            raise ValueError("by-id imputation needs a subject-based split")
        for g in ordered:
            home = assignment.part_of(g.subject_id)
            additions[home].setdefault(g.subject_id, []).extend(g.to_steps())
    else:
        rows = [(g.subject_id, step) for g in ordered for step in g.to_steps()]
        if assignment.row_order is RowOrder.TIME:
            rows.sort(key=lambda item: item[1].event_time)  # stable: ties keep subject order
        sizes = _chunk_sizes(len(rows), assignment.ratios)
        start = 0
        for name, size in zip(parts, sizes):
            for sid, step in rows[start : start + size]:
                additions[name].setdefault(sid, []).append(step)
            start += size

    originals = original.by_id()
    merged: dict[str, Dataset] = {}
    for name, ds in parts.items():
        adds = additions[name]
        subs = []
        for subj in ds.subjects:
            extra = adds.pop(subj.subject_id, None)
            if extra:
                subj = subj.with_steps(sort_steps([*subj.steps, *extra]))
                subj = renumber(subj, seq_idx)
            subs.append(subj)
        # subjects absent from this part (row mode only) enter with generated rows alone
        for sid in sorted(adds):
            base = originals[sid]
            subs.append(renumber(base.with_steps(sort_steps(adds[sid])), seq_idx))
        merged[name] = ds.with_subjects(subs)
    return merged


def _chunk_sizes(count: int, ratios: Sequence[float]) -> list[int]:
    """Like part_sizes but allows empty chunks (few generated rows)."""
    bounds = [
        count if k == len(ratios) - 1 else _round_half_up(math.fsum(ratios[: k + 1]) * count)
        for k in range(len(ratios))
    ]
    return [b - a for a, b in zip([0] + bounds[:-1], bounds)]
