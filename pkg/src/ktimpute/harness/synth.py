"""Planted longitudinal corpora with known missingness.

Each subject has four descriptors (grade level, prior score, track, gifted
flag) and attends one school whose quiz schedule fixes the candidate event
times. A low-dimensional latent trajectory per subject mixes a
descriptor-driven component (weight ``coupling``) with a subject-specific
random component; observed features are a noisy nonlinear map of the latent
and the score-rate target is a sigmoid of it. Missing quiz times are drawn
either completely at random or preferentially where the target is low.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core_types import (
    Dataset,
    DescriptorField,
    DescriptorKind,
    SubjectSeries,
    TimeStep,
)


class MissingMode(str, enum.Enum):
    MCAR = "MCAR"
    MNAR = "MNAR"


DESCRIPTORS = (
    DescriptorField("grade_level", DescriptorKind.CONTINUOUS),
    DescriptorField("prior_score", DescriptorKind.CONTINUOUS),
    DescriptorField("track", DescriptorKind.CATEGORICAL),
    DescriptorField("gifted", DescriptorKind.BINARY),
)
TRACKS = ("A", "B", "C")


@dataclass
class SynthSpec:
    n_subjects: int = 200
    n_schools: int = 4
    schedule_length: int = 30
    n_features: int = 6
    latent_dim: int = 3
    coupling: float = 0.8
    missing_mode: MissingMode = MissingMode.MCAR
    missing_rate: float = 0.3
    feature_noise: float = 0.05
    target_noise: float = 0.05
    min_observed: int = 3

    def __post_init__(self):
        self.missing_mode = MissingMode(self.missing_mode)
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must be in [0, 1]")
        if self.n_features < 2 or self.n_subjects < 1 or self.schedule_length < self.min_observed:
            raise ValueError("need n_features >= 2, n_subjects >= 1, schedule_length >= min_observed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing_mode"] = self.missing_mode.value
        return d

    @property
    def n_descriptors(self) -> int:
        return len(DESCRIPTORS)


@dataclass
class SynthResult:
    dataset: Dataset
    schedules: dict[str, tuple[float, ...]]
    school_of: dict[str, str]
    truth_missing: dict[str, tuple[float, ...]]
    full_targets: dict[str, np.ndarray] = field(default_factory=dict)
    missing_flags: dict[str, np.ndarray] = field(default_factory=dict)


def feature_names(n_features: int) -> tuple[str, ...]:
    return ("sequence_number",) + tuple(f"f{k}" for k in range(1, n_features))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synth_generate(spec: SynthSpec, seed: int) -> SynthResult:
    rng = np.random.default_rng(seed)
    K = spec.latent_dim
    D_lat = spec.n_features - 1

    # fixed random maps (drawn from the same generator, so seed-determined)
    desc_dim = 2 + len(TRACKS) + 1
    A_level = rng.normal(size=(K, desc_dim)) / np.sqrt(desc_dim)
    A_slope = rng.normal(size=(K, desc_dim)) / np.sqrt(desc_dim)
    W_obs = rng.normal(size=(D_lat, K)) / np.sqrt(K) * 1.5
    b_obs = rng.normal(size=D_lat) * 0.3
    obs_scale = rng.uniform(0.5, 3.0, size=D_lat)
    obs_offset = rng.uniform(-1.0, 5.0, size=D_lat)
    v_tgt = rng.normal(size=K) / np.sqrt(K) * 1.5

    schedules: dict[str, tuple[float, ...]] = {}
    for s in range(spec.n_schools):
        gaps = rng.integers(1, 6, size=spec.schedule_length).astype(float)
        start = float(rng.integers(0, 10))
        schedules[f"S{s}"] = tuple(start + np.cumsum(gaps))

    cw = spec.coupling
    rw = np.sqrt(max(0.0, 1.0 - cw * cw))
    subjects, school_of, truth, full_t, flags = [], {}, {}, {}, {}
    for p in range(spec.n_subjects):
        sid = f"u{p:05d}"
        school = f"S{int(rng.integers(spec.n_schools))}"
        grade = float(rng.integers(9, 13))
        prior = float(np.round(rng.normal(70, 12), 1))
        track = TRACKS[int(rng.integers(len(TRACKS)))]
        gifted = float(rng.random() < 0.25)
        dvec = np.concatenate(
            [[(grade - 10.5) / 1.1, (prior - 70) / 12], [1.0 * (track == t) for t in TRACKS], [2 * gifted - 1]]
        )
        level = cw * (A_level @ dvec) + rw * rng.normal(size=K)
        slope = cw * (A_slope @ dvec) + rw * rng.normal(size=K)
        times = schedules[school]
        S = len(times)
        pos = np.arange(S) / max(S - 1, 1)
        ar = np.zeros((S, K))
        for k in range(1, S):
            ar[k] = 0.7 * ar[k - 1] + 0.2 * rng.normal(size=K)
        z = level[None] + pos[:, None] * slope[None] + ar
        feats = np.tanh(z @ W_obs.T + b_obs) * obs_scale + obs_offset
        feats = feats + spec.feature_noise * obs_scale * rng.normal(size=feats.shape)
        target = np.clip(_sigmoid(z @ v_tgt) + spec.target_noise * rng.normal(size=S), 0.0, 1.0)

        if spec.missing_mode is MissingMode.MCAR:
            p_miss = np.full(S, spec.missing_rate)
        else:
            p_miss = np.clip(spec.missing_rate * 2.0 * _sigmoid(-(target - 0.5) / 0.1), 0.0, 0.95)
        miss = rng.random(S) < p_miss
        observed_idx = np.flatnonzero(~miss)
        if observed_idx.size < spec.min_observed:
            # unmask the earliest missing steps until the floor is met
            for k in np.flatnonzero(miss)[: spec.min_observed - observed_idx.size]:
                miss[k] = False
            observed_idx = np.flatnonzero(~miss)

        steps = []
        for n, k in enumerate(observed_idx, start=1):
            f = (float(n),) + tuple(float(v) for v in feats[k])
            steps.append(TimeStep(float(times[k]), f, float(target[k]), True))
        subjects.append(SubjectSeries(sid, (grade, prior, track, gifted), tuple(steps), school))
        school_of[sid] = school
        truth[sid] = tuple(float(times[k]) for k in np.flatnonzero(miss))
        full_t[sid] = target
        flags[sid] = miss

    ds = Dataset(tuple(subjects), feature_names(spec.n_features), DESCRIPTORS)
    return SynthResult(ds, schedules, school_of, truth, full_t, flags)
