"""Experiment configuration: JSON on disk, validated on load, hashed for lineage."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..core_types import DescriptorField, DescriptorKind, RowOrder
from ..generative import ElboConfig
from ..pipeline import Padding
from ..predictors import CellKind
from ..training import FitConfig
from .synth import DESCRIPTORS, SynthSpec

SOURCES = ("vae-ns", "vae", "lvae")


class ConfigInvalid(ValueError):
    pass


@dataclass
class GeneratorConfig:
    latent_dim: int = 8
    hidden_dim: int = 16
    depth: int = 1
    beta: float = 1.0
    lr: float = 1e-2
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 16
    gp_use_time: bool = False

    def elbo_config(self) -> ElboConfig:
        return ElboConfig(**asdict(self))


@dataclass
class PredictorConfig:
    hidden: int = 16
    lr: float = 1e-2
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 16

    def fit_config(self) -> FitConfig:
        return FitConfig(self.lr, self.max_epochs, self.patience, self.min_delta, self.batch_size)


@dataclass
class ExperimentConfig:
    """Everything a run depends on.

    ``dataset``/``schedule`` point at CSV inputs; when ``dataset`` is None the
    corpus is synthesised from ``synth`` with ``synth_seed``. ``fractions``
    are percentages. ``out_dir`` is excluded from the hash so the same
    experiment hashes identically wherever it is written.
    """

    dataset: Optional[str] = None
    schedule: Optional[str] = None
    descriptors: list[dict] = field(
        default_factory=lambda: [{"name": d.name, "kind": d.kind.value} for d in DESCRIPTORS]
    )
    synth: dict = field(default_factory=lambda: SynthSpec().to_dict())
    synth_seed: int = 0
    gen_ratios: list[float] = field(default_factory=lambda: [0.5, 0.1, 0.2, 0.2])
    down_ratios: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    row_order: str = RowOrder.TIME.value
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    paddings: list[str] = field(default_factory=lambda: [p.value for p in Padding])
    models: list[str] = field(default_factory=lambda: [k.value for k in CellKind])
    sources: list[str] = field(default_factory=lambda: list(SOURCES))
    fixed_length: Optional[int] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    kernel: Optional[list[dict]] = None
    kernel_noise: Optional[float] = 0.9
    fractions: list[float] = field(default_factory=lambda: [10, 20, 30, 50, 80, 100])
    sequence_feature: Optional[str] = "sequence_number"
    out_dir: str = "runs"

    def __post_init__(self):
        try:
            if isinstance(self.generator, dict):
                self.generator = GeneratorConfig(**self.generator)
            if isinstance(self.predictor, dict):
                self.predictor = PredictorConfig(**self.predictor)
        except TypeError as exc:
            raise ConfigInvalid(f"bad model section: {exc}") from exc
        self.validate()

    # ------------------------------------------------------------------

    def validate(self) -> None:
        for name in ("gen_ratios", "down_ratios"):
            r = getattr(self, name)
            if not r or any(x <= 0 for x in r) or abs(math.fsum(r) - 1.0) > 1e-9:
                raise ConfigInvalid(f"{name} must be positive and sum to 1, got {r}")
        if len(self.gen_ratios) != 4:
            raise ConfigInvalid("gen_ratios needs train/val/test/generate entries")
        if len(self.down_ratios) != 3:
            raise ConfigInvalid("down_ratios needs train/val/test entries")
        if not self.seeds:
            raise ConfigInvalid("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigInvalid("seeds must be distinct")
        for f in self.fractions:
            if not 0 < f <= 100:
                raise ConfigInvalid(f"fractions must lie in (0, 100], got {f}")
        if self.fixed_length is not None and self.fixed_length < 1:
            raise ConfigInvalid("fixed_length must be >= 1")
        try:
            RowOrder(self.row_order)
            [Padding(p) for p in self.paddings]
            [CellKind(m) for m in self.models]
            [DescriptorKind(d["kind"]) for d in self.descriptors]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigInvalid(str(exc)) from None
        if not self.paddings or not self.models:
            raise ConfigInvalid("paddings and models must be nonempty")
        unknown = set(self.sources) - set(SOURCES)
        if unknown:
            raise ConfigInvalid(f"unknown generative sources {sorted(unknown)}")
        if self.dataset is not None and self.schedule is None:
            raise ConfigInvalid("a dataset file needs a schedule file")
        if self.dataset is None:
            try:
                SynthSpec(**self.synth)
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid(f"bad synth spec: {exc}") from None

    # ------------------------------------------------------------------

    def descriptor_fields(self) -> tuple[DescriptorField, ...]:
        return tuple(DescriptorField(d["name"], DescriptorKind(d["kind"])) for d in self.descriptors)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.synth)

    def to_dict(self) -> dict:
        return asdict(self)

    def hashed_dict(self) -> dict:
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **kw: Any) -> "ExperimentConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(**d)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(raw) - known
    if extra:
        raise ConfigInvalid(f"unknown config keys {sorted(extra)}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
