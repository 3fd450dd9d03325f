import numpy as np
import pytest

from ktimpute.core_types import Dataset, DescriptorField, DescriptorKind, make_subject
from ktimpute.harness.synth import SynthSpec, synth_generate

DESC = (
    DescriptorField("age", DescriptorKind.CONTINUOUS),
    DescriptorField("group", DescriptorKind.CATEGORICAL),
)


def tiny_dataset(lengths=(3, 5), n_features=2, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    subs = []
    for k, n in enumerate(lengths):
        times = np.cumsum(rng.integers(1, 4, size=n)).astype(float)
        feats = rng.normal(size=(n, n_features))
        targets = rng.uniform(size=n)
        subs.append(make_subject(f"s{k}", (float(k), "ab"[k % 2]), times, feats, targets, school_id="S0"))
    return Dataset(tuple(subs), tuple(f"f{j}" for j in range(n_features)), DESC)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthSpec(n_subjects=40, schedule_length=12), seed=3)


def pytest_terminal_summary(terminalreporter):
    acc = __import__("sys").modules.get("test_acceptance")
    if acc is not None and acc.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
