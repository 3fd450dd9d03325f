"""The four experiment phases and the matrix runner.

Phases read their inputs from, and write their artifacts to, ``cfg.out_dir``:

* ``input``: dataset, schedule, missing skeletons and per-seed split
  assignments.
* ``generate``: per seed, train every generative source, generate the missing
  steps, and score generation on the held-out generate split.
* ``predict_targets``: per seed, the original-data sweep over models and
  paddings; pick the best cell on the seed mean; label generated rows with
  that cell's predictor.
* ``retrain``: per seed, impute each source (all of it, then each fraction)
  and retrain the best cell.

Every phase processes all configured seeds and is deterministic, so a rerun
rewrites identical bytes.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import wasserstein_distance

from .. import checkpoint
from ..core_types import (
    Dataset,
    MissingSkeleton,
    RowOrder,
    SplitAssignment,
    SplitMode,
    validate,
)
from ..generative import PriorKind, SequenceVAE, generate_missing, train
from ..gp_prior import default_spec, spec_from_config
from ..pipeline import (
    ImputeMode,
    MinMaxScaler,
    PaddingStrategy,
    ScalerState,
    default_fixed_length,
    fit_scaler,
    identify_missing,
    impute,
    materialize,
    split,
    to_batch,
)
from ..predictors import RegressorParams, evaluate, predict_targets, select_best, train_regressor
from ..training import HISTORY_COLUMNS, history_rows
from . import io
from .config import ExperimentConfig
from .io import DatasetInvalid
from .synth import synth_generate


class MissingArtifact(FileNotFoundError):
    pass


class Phase(str, enum.Enum):
    INPUT = "input"
    GENERATE = "generate"
    PREDICT_TARGETS = "predict_targets"
    RETRAIN = "retrain"


SUBJECT_SOURCES = ("vae", "lvae")
ROUND1_COLUMNS = ["dataset", "model", "padding", "seed", "rmse", "val_rmse", "best_epoch"]
RETRAIN_COLUMNS = ["stage", "dataset", "fraction", "model", "padding", "seed", "rmse", "val_rmse", "best_epoch"]
DISTANCE_COLUMNS = ["source", "feature", "distance"]

Log = Callable[[str], None]


def _quiet(msg: str) -> None:
    pass


# ---------------------------------------------------------------------------
# layout


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def input(self, name: str) -> Path:
        return self.root / "input" / name

    def split_file(self, seed: int) -> Path:
        return self.root / "input" / "splits" / f"seed{seed}.json"

    def gen(self, seed: int, name: str) -> Path:
        return self.root / "generate" / f"seed{seed}" / name

    def pred(self, seed: int, name: str) -> Path:
        return self.root / "predict" / f"seed{seed}" / name

    def best_cell(self) -> Path:
        return self.root / "predict" / "best_cell.json"

    def retrain(self, seed: int) -> Path:
        return self.root / "retrain" / f"seed{seed}" / "retrain.csv"

    def report_dir(self) -> Path:
        return self.root / "report"


def _require(path: Path, phase: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run the {phase} phase first")
    return path


def seeds_tag(seeds) -> str:
    return ";".join(str(s) for s in seeds)


def derived_seed(*parts: int) -> int:
    """A 32-bit seed mixed from ``parts``; used to decorrelate RNG streams."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# shared state loaded from the input phase


@dataclass
class Inputs:
    dataset: Dataset
    schedules: dict
    skeletons: list[MissingSkeleton]
    fixed_length: int


def load_inputs(cfg: ExperimentConfig) -> Inputs:
    lay = Layout(cfg.out_dir)
    ds = io.read_dataset(_require(lay.input("dataset.csv"), "input"), cfg.descriptor_fields())
    schedules = io.read_schedule(_require(lay.input("schedule.csv"), "input"))
    skel = io.read_skeletons(_require(lay.input("skeletons.csv"), "input"), ds)
    meta = io.read_json(_require(lay.input("meta.json"), "input"))
    return Inputs(ds, schedules, skel, int(meta["fixed_length"]))


def assignment_to_json(a: SplitAssignment) -> dict:
    return {
        "mode": a.mode.value,
        "ratios": list(a.ratios),
        "row_order": a.row_order.value,
        "parts": {name: sorted(members) for name, members in a.parts.items()},
    }


def assignment_from_json(d: dict) -> SplitAssignment:
    return SplitAssignment(
        SplitMode(d["mode"]),
        {name: frozenset(members) for name, members in d["parts"].items()},
        tuple(d["ratios"]),
        RowOrder(d["row_order"]),
    )


def load_splits(cfg: ExperimentConfig, seed: int) -> dict[str, SplitAssignment]:
    doc = io.read_json(_require(Layout(cfg.out_dir).split_file(seed), "input"))
    return {k: assignment_from_json(v) for k, v in doc["splits"].items()}


# ---------------------------------------------------------------------------
# phase i: input


def phase_input(cfg: ExperimentConfig, log: Log = _quiet) -> None:
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    if cfg.dataset is None:
        res = synth_generate(cfg.synth_spec(), cfg.synth_seed)
        ds, schedules = res.dataset, res.schedules
        truth = [[sid, t] for sid in sorted(res.truth_missing) for t in res.truth_missing[sid]]
        io.write_csv(lay.input("truth_missing.csv"), ["subject_id", "event_time"], truth, h, cfg.synth_seed)
    else:
        ds = io.read_dataset(cfg.dataset, cfg.descriptor_fields())
        schedules = io.read_schedule(cfg.schedule)
    violations = validate(ds)
    io.write_json(
        lay.input("validation.json"),
        {"violations": [[v.kind, v.subject_id, v.detail] for v in violations]},
        h,
        cfg.synth_seed,
    )
    if violations:
        raise DatasetInvalid(f"{len(violations)} dataset violations; see {lay.input('validation.json')}")
    io.write_dataset(lay.input("dataset.csv"), ds, h, cfg.synth_seed)
    io.write_schedule(lay.input("schedule.csv"), schedules, h, cfg.synth_seed)
    skel = identify_missing(ds, io.school_map(ds), schedules)
    io.write_skeletons(lay.input("skeletons.csv"), skel, h, cfg.synth_seed)
    T = cfg.fixed_length or default_fixed_length(ds)
    meta = {
        "fixed_length": T,
        "n_subjects": len(ds.subjects),
        "n_rows": sum(len(s.steps) for s in ds.subjects),
        "n_missing_subjects": len(skel),
        "n_missing_rows": sum(len(s.times) for s in skel),
        "features": list(ds.feature_schema),
    }
    io.write_json(lay.input("meta.json"), meta, h, cfg.synth_seed)
    order = RowOrder(cfg.row_order)
    for seed in cfg.seeds:
        splits = {
            "gen_subject": split(ds, SplitMode.SUBJECT, cfg.gen_ratios, seed),
            "gen_row": split(ds, SplitMode.ROW, cfg.gen_ratios, seed, order),
            "down_subject": split(ds, SplitMode.SUBJECT, cfg.down_ratios, seed),
            "down_row": split(ds, SplitMode.ROW, cfg.down_ratios, seed, order),
        }
        io.write_json(lay.split_file(seed), {"splits": {k: assignment_to_json(v) for k, v in splits.items()}}, h, seed)
    log(f"input: {meta['n_subjects']} subjects, {meta['n_rows']} rows, {meta['n_missing_rows']} missing steps, T={T}")


# ---------------------------------------------------------------------------
# phase ii: generation


def _kernel_factory(cfg: ExperimentConfig, ds: Dataset):
    if cfg.kernel is None:
        return lambda: default_spec(ds.descriptor_kinds, noise=cfg.kernel_noise)
    names = [d.name for d in ds.descriptor_schema]
    return lambda: spec_from_config(cfg.kernel, names, noise=cfg.kernel_noise)


def build_generator(cfg: ExperimentConfig, ds: Dataset, source: str, seed: int) -> SequenceVAE:
    prior = PriorKind.GP if source == "lvae" else PriorKind.STANDARD
    factory = _kernel_factory(cfg, ds) if prior is PriorKind.GP else None
    return SequenceVAE(ds.n_features, cfg.generator.elbo_config(), prior, ds.descriptor_kinds, seed, factory)


def train_generator(cfg: ExperimentConfig, inp: Inputs, source: str, seed: int, splits=None):
    """Fit one generative source on its split regime. Returns (model, scaler, fit result)."""
    splits = splits or load_splits(cfg, seed)
    a = splits["gen_row" if source == "vae-ns" else "gen_subject"]
    parts = materialize(inp.dataset, a)
    scaler = fit_scaler(parts["train"])
    pad = PaddingStrategy("zero", inp.fixed_length)
    model = build_generator(cfg, inp.dataset, source, seed)
    res = train(model, to_batch(parts["train"], scaler, pad), to_batch(parts["val"], scaler, pad), seed)
    return model, scaler, res


def heldout_skeletons(held: Dataset) -> list[MissingSkeleton]:
    return [MissingSkeleton(s.subject_id, s.descriptors, tuple(s.times()), s.school_id) for s in held.subjects]


def feature_distances(real: Dataset, generated) -> list[float]:
    """Per-feature 1-Wasserstein distance between real rows and generated rows."""
    r = np.array([st.features for s in real.subjects for st in s.steps])
    g = np.array([f for x in generated for f in x.features])
    return [float(wasserstein_distance(r[:, j], g[:, j])) for j in range(r.shape[1])]


def scaler_meta(scaler: MinMaxScaler) -> dict:
    st = scaler.state
    return {"scaler_min": [float(v) for v in st.mins], "scaler_max": [float(v) for v in st.maxs]}


def scaler_from_meta(meta: dict) -> MinMaxScaler:
    return MinMaxScaler(ScalerState(np.array(meta["scaler_min"]), np.array(meta["scaler_max"])))


def phase_generate(cfg: ExperimentConfig, log: Log = _quiet) -> None:
    inp = load_inputs(cfg)
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    feats = list(inp.dataset.feature_schema)
    for seed in cfg.seeds:
        splits = load_splits(cfg, seed)
        held = materialize(inp.dataset, splits["gen_subject"])["generate"]
        held_skel = heldout_skeletons(held)
        dist_rows, summary = [], {}
        for k, source in enumerate(cfg.sources):
            t0 = time.perf_counter()
            model, scaler, res = train_generator(cfg, inp, source, seed, splits)
            blob = model.to_checkpoint()
            blob = with_meta(blob, {**scaler_meta(scaler), "source": source, "config_hash": h, "seed": seed})
            lay.gen(seed, f"{source}.ckpt").parent.mkdir(parents=True, exist_ok=True)
            lay.gen(seed, f"{source}.ckpt").write_bytes(blob)
            io.write_csv(lay.gen(seed, f"{source}_history.csv"), HISTORY_COLUMNS, history_rows(res), h, seed)
            gen = generate_missing(model, inp.skeletons, scaler, [seed, k, 2], source=source)
            io.write_generated(lay.gen(seed, f"{source}_generated.csv"), gen, feats, h, seed)
            held_gen = generate_missing(model, held_skel, scaler, [seed, k, 1], source=source)
            for name, d in zip(feats, feature_distances(held, held_gen)):
                dist_rows.append([source, name, d])
            summary[source] = {
                "best_val": res.best_val,
                "best_epoch": res.best_epoch,
                "epochs_run": res.history[-1].epoch,
                "stopped_early": res.stopped_early,
            }
            log(f"generate seed={seed} {source}: best_val={res.best_val:.5f} at epoch {res.best_epoch} "
                f"({time.perf_counter() - t0:.1f}s)")
        io.write_csv(lay.gen(seed, "feature_distance.csv"), DISTANCE_COLUMNS, dist_rows, h, seed)
        io.write_json(lay.gen(seed, "summary.json"), {"sources": summary}, h, seed)


def with_meta(blob: bytes, extra: dict) -> bytes:
    params, meta = checkpoint.loads(blob)
    meta.update(extra)
    return checkpoint.dumps(list(params.items()), meta)


def load_generator(path) -> tuple[SequenceVAE, MinMaxScaler]:
    blob = Path(path).read_bytes()
    _, meta = checkpoint.loads(blob)
    return SequenceVAE.from_checkpoint(blob), scaler_from_meta(meta)


# ---------------------------------------------------------------------------
# phase iii: original-data sweep and target prediction


def fit_predictor(cfg: ExperimentConfig, parts: dict[str, Dataset], model: str, padding: str, T: int, seed: int,
                  dataset: str = "original"):
    """Train one regressor on ``parts['train']``.

    Returns (params, scaler, test EvalResult, validation EvalResult, FitResult).
    """
    scaler = fit_scaler(parts["train"])
    pad = PaddingStrategy(padding, T)
    batches = {k: to_batch(parts[k], scaler, pad) for k in ("train", "val", "test")}
    params = RegressorParams.init(model, parts["train"].n_features, cfg.predictor.hidden, seed)
    res = train_regressor(params, batches["train"], batches["val"], cfg.predictor.fit_config(), seed)
    ev = evaluate(params, batches["test"], seed, padding, dataset)
    ev_val = evaluate(params, batches["val"], seed, padding, dataset)
    return params, scaler, ev, ev_val, res


def run_round1(cfg: ExperimentConfig, inp: Inputs, seed: int, log: Log = _quiet) -> list[list]:
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    parts = materialize(inp.dataset, load_splits(cfg, seed)["down_subject"])
    rows = []
    for model in cfg.models:
        for padding in cfg.paddings:
            params, scaler, ev, ev_val, res = fit_predictor(cfg, parts, model, padding, inp.fixed_length, seed)
            meta = {**scaler_meta(scaler), "padding": padding, "config_hash": h, "seed": seed}
            path = lay.pred(seed, f"{model}_{padding}.ckpt")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(params.to_checkpoint(meta))
            rows.append(["original", model, padding, seed, ev.rmse, ev_val.rmse, res.best_epoch])
            log(f"round1 seed={seed} {model}/{padding}: rmse={ev.rmse:.5f} val={ev_val.rmse:.5f}")
    io.write_csv(lay.pred(seed, "round1.csv"), ROUND1_COLUMNS, rows, h, seed)
    return rows


def read_round1(cfg: ExperimentConfig, seed: int) -> list[tuple[str, str, float, float]]:
    """(model, padding, test rmse, validation rmse) per original-data cell."""
    _, _, rows = io.read_csv(_require(Layout(cfg.out_dir).pred(seed, "round1.csv"), "predict_targets"))
    return [(m, p, float(r), float(v)) for _, m, p, _, r, v, _ in rows]


def choose_best_cell(cfg: ExperimentConfig) -> dict:
    """Best (model, padding) on the seed-mean validation RMSE; ties go to the first cell in config order."""
    val: dict[tuple[str, str], list[float]] = {(m, p): [] for m in cfg.models for p in cfg.paddings}
    test: dict[tuple[str, str], list[float]] = {k: [] for k in val}
    for seed in cfg.seeds:
        for m, p, r, v in read_round1(cfg, seed):
            val[(m, p)].append(v)
            test[(m, p)].append(r)
    model, padding = select_best(val)
    return {
        "model": model,
        "padding": padding,
        "mean_val_rmse": float(np.mean(val[(model, padding)])),
        "mean_rmse": float(np.mean(test[(model, padding)])),
    }


def load_predictor(path) -> tuple[RegressorParams, MinMaxScaler]:
    blob = Path(path).read_bytes()
    _, meta = checkpoint.loads(blob)
    return RegressorParams.from_checkpoint(blob), scaler_from_meta(meta)


def phase_predict_targets(cfg: ExperimentConfig, log: Log = _quiet) -> None:
    inp = load_inputs(cfg)
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    for seed in cfg.seeds:
        run_round1(cfg, inp, seed, log)
    best = choose_best_cell(cfg)
    io.write_json(lay.best_cell(), best, h, seeds_tag(cfg.seeds))
    log(f"best cell: {best['model']}/{best['padding']} (mean val rmse {best['mean_val_rmse']:.5f})")
    feats = list(inp.dataset.feature_schema)
    for seed in cfg.seeds:
        params, scaler = load_predictor(lay.pred(seed, f"{best['model']}_{best['padding']}.ckpt"))
        for source in cfg.sources:
            gen = io.read_generated(_require(lay.gen(seed, f"{source}_generated.csv"), "generate"))
            labelled = predict_targets(params, gen, scaler)
            io.write_generated(lay.pred(seed, f"{source}_targets.csv"), labelled, feats, h, seed)


# ---------------------------------------------------------------------------
# phase iv: retraining


def impute_source(cfg: ExperimentConfig, inp: Inputs, splits, source: str, generated, fraction_pct: float, seed: int):
    by_row = source == "vae-ns"
    a = splits["down_row" if by_row else "down_subject"]
    return impute(
        inp.dataset,
        a,
        generated,
        ImputeMode.BY_ROW if by_row else ImputeMode.BY_ID,
        fraction_pct / 100.0,
        derived_seed(seed, 3),
        cfg.sequence_feature,
    )


def phase_retrain(cfg: ExperimentConfig, log: Log = _quiet) -> None:
    inp = load_inputs(cfg)
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    best = io.read_json(_require(lay.best_cell(), "predict_targets"))
    model, padding = best["model"], best["padding"]
    for seed in cfg.seeds:
        splits = load_splits(cfg, seed)
        rows = []
        for source in cfg.sources:
            gen = io.read_generated(_require(lay.pred(seed, f"{source}_targets.csv"), "predict_targets"))
            plan = [("full", 100.0)]
            if source in SUBJECT_SOURCES:
                plan += [("sweep", float(f)) for f in cfg.fractions]
            for stage, frac in plan:
                parts = impute_source(cfg, inp, splits, source, gen, frac, seed)
                _, _, ev, ev_val, res = fit_predictor(cfg, parts, model, padding, inp.fixed_length, seed, source)
                rows.append([stage, source, frac, model, padding, seed, ev.rmse, ev_val.rmse, res.best_epoch])
                log(f"retrain seed={seed} {source} {stage} {frac:g}%: rmse={ev.rmse:.5f}")
        io.write_csv(lay.retrain(seed), RETRAIN_COLUMNS, rows, h, seed)


PHASES = {
    Phase.INPUT: phase_input,
    Phase.GENERATE: phase_generate,
    Phase.PREDICT_TARGETS: phase_predict_targets,
    Phase.RETRAIN: phase_retrain,
}


def run_phase(cfg: ExperimentConfig, phase, log: Log = _quiet) -> None:
    PHASES[Phase(phase)](cfg, log)


def run_matrix(cfg: ExperimentConfig, log: Log = _quiet, emit: bool = True):
    """All four phases, then aggregation into a :class:`RunReport`."""
    from .report import build_report, emit_report

    for phase in Phase:
        run_phase(cfg, phase, log)
    report = build_report(cfg)
    if emit:
        emit_report(report, Layout(cfg.out_dir).report_dir())
    return report
