"""Command-line entry point: ``ktimpute <subcommand> [options]``.

Every subcommand accepts ``--config`` (JSON experiment config), ``--set
key=json`` overrides, ``--seed`` and ``--out-dir``. ``run-all`` executes the
whole experiment matrix; the other subcommands are single steps that read
and write files, useful for inspecting or replacing one stage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..core_types import SplitMode, validate
from ..generative import generate_missing
from ..pipeline import default_fixed_length, identify_missing, materialize, split
from ..predictors import predict_targets
from ..training import HISTORY_COLUMNS, history_rows
from . import io
from .config import SOURCES, ConfigInvalid, ExperimentConfig, load_config, save_config
from .phases import (
    Inputs,
    Layout,
    MissingArtifact,
    assignment_to_json,
    fit_predictor,
    impute_source,
    load_generator,
    load_predictor,
    run_matrix,
    scaler_meta,
    train_generator,
    with_meta,
)
from .report import build_report, emit_report
from .synth import synth_generate


def _log(args):
    return (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    for item in args.set or []:
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        head, dot, sub = key.partition(".")
        if head not in d or (dot and not isinstance(d[head], dict)):
            raise ConfigInvalid(f"unknown config key {key!r}")
        if dot:
            d[head] = {**d[head], sub: value}  # nested section, e.g. generator.max_epochs
        else:
            d[key] = value
    if args.out_dir:
        d["out_dir"] = args.out_dir
    return ExperimentConfig(**d)


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _ratios(text: Optional[str], default) -> list[float]:
    return [float(x) for x in text.split(",")] if text else list(default)


def _inputs(cfg: ExperimentConfig, dataset: str, schedule: Optional[str]) -> Inputs:
    ds = io.read_dataset(dataset, cfg.descriptor_fields())
    skel = []
    scheds = {}
    if schedule:
        scheds = io.read_schedule(schedule)
        skel = identify_missing(ds, io.school_map(ds), scheds)
    return Inputs(ds, scheds, skel, cfg.fixed_length or default_fixed_length(ds))


def _gen_splits(cfg: ExperimentConfig, inp: Inputs, seed: int) -> dict:
    return {
        "gen_subject": split(inp.dataset, SplitMode.SUBJECT, cfg.gen_ratios, seed),
        "gen_row": split(inp.dataset, SplitMode.ROW, cfg.gen_ratios, seed, cfg.row_order),
        "down_subject": split(inp.dataset, SplitMode.SUBJECT, cfg.down_ratios, seed),
        "down_row": split(inp.dataset, SplitMode.ROW, cfg.down_ratios, seed, cfg.row_order),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    spec = cfg.synth_spec()
    res = synth_generate(spec, args.seed)
    out, h = _out(cfg), cfg.config_hash()
    io.write_dataset(out / "dataset.csv", res.dataset, h, args.seed)
    io.write_schedule(out / "schedule.csv", res.schedules, h, args.seed)
    truth = [[sid, t] for sid in sorted(res.truth_missing) for t in res.truth_missing[sid]]
    io.write_csv(out / "truth_missing.csv", ["subject_id", "event_time"], truth, h, args.seed)
    print(f"wrote {len(res.dataset.subjects)} subjects to {out}")
    return 0


def cmd_validate(args, cfg):
    try:
        ds = io.read_dataset(args.dataset, cfg.descriptor_fields())
    except io.DatasetInvalid as exc:
        print(f"invalid: {exc}")
        return 1
    violations = validate(ds)
    io.write_json(
        _out(cfg) / "validation.json",
        {"violations": [[v.kind, v.subject_id, v.detail] for v in violations]},
        cfg.config_hash(),
        args.seed,
    )
    for v in violations:
        print(f"{v.kind}\t{v.subject_id}\t{v.detail}")
    print(f"{len(violations)} violations in {len(ds.subjects)} subjects")
    return 1 if violations else 0


def cmd_split(args, cfg):
    ds = io.read_dataset(args.dataset, cfg.descriptor_fields())
    a = split(ds, SplitMode(args.mode), _ratios(args.ratios, cfg.down_ratios), args.seed, cfg.row_order)
    path = _out(cfg) / f"split_{args.mode}_seed{args.seed}.json"
    io.write_json(path, assignment_to_json(a), cfg.config_hash(), args.seed)
    for name, members in a.parts.items():
        print(f"{name}\t{len(members)}")
    return 0


def cmd_identify_missing(args, cfg):
    inp = _inputs(cfg, args.dataset, args.schedule)
    io.write_skeletons(_out(cfg) / "skeletons.csv", inp.skeletons, cfg.config_hash(), args.seed)
    print(f"{len(inp.skeletons)} subjects with {sum(len(s.times) for s in inp.skeletons)} missing steps")
    return 0


def cmd_train_gen(args, cfg):
    inp = _inputs(cfg, args.dataset, None)
    model, scaler, res = train_generator(cfg, inp, args.model, args.seed, _gen_splits(cfg, inp, args.seed))
    out, h = _out(cfg), cfg.config_hash()
    blob = with_meta(model.to_checkpoint(), {**scaler_meta(scaler), "source": args.model, "config_hash": h, "seed": args.seed})
    (out / f"{args.model}.ckpt").write_bytes(blob)
    io.write_csv(out / f"{args.model}_history.csv", HISTORY_COLUMNS, history_rows(res), h, args.seed)
    print(f"{args.model}: best validation loss {res.best_val:.6f} at epoch {res.best_epoch}")
    return 0


def cmd_generate(args, cfg):
    inp = _inputs(cfg, args.dataset, args.schedule)
    model, scaler = load_generator(args.checkpoint)
    gen = generate_missing(model, inp.skeletons, scaler, args.seed, source=Path(args.checkpoint).stem)
    path = _out(cfg) / f"{Path(args.checkpoint).stem}_generated.csv"
    io.write_generated(path, gen, inp.dataset.feature_schema, cfg.config_hash(), args.seed)
    print(f"generated {sum(len(g.event_times) for g in gen)} rows to {path}")
    return 0


def cmd_train_pred(args, cfg):
    inp = _inputs(cfg, args.dataset, None)
    parts = materialize(inp.dataset, split(inp.dataset, SplitMode.SUBJECT, cfg.down_ratios, args.seed))
    params, scaler, ev, _, _ = fit_predictor(cfg, parts, args.model, args.padding, inp.fixed_length, args.seed)
    h = cfg.config_hash()
    meta = {**scaler_meta(scaler), "padding": args.padding, "config_hash": h, "seed": args.seed}
    path = _out(cfg) / f"{args.model}_{args.padding}.ckpt"
    path.write_bytes(params.to_checkpoint(meta))
    print(f"{args.model}/{args.padding}: test rmse {ev.rmse:.6f}")
    return 0


def cmd_predict_targets(args, cfg):
    params, scaler = load_predictor(args.checkpoint)
    gen = io.read_generated(args.generated)
    labelled = predict_targets(params, gen, scaler)
    names = _feature_names(args.generated)
    path = _out(cfg) / (Path(args.generated).stem + "_targets.csv")
    io.write_generated(path, labelled, names, cfg.config_hash(), args.seed)
    print(f"labelled {sum(len(g.event_times) for g in labelled)} rows to {path}")
    return 0


def _feature_names(generated_csv) -> list[str]:
    _, header, _ = io.read_csv(generated_csv)
    return header[3:-1]


def _imputed_parts(args, cfg, inp):
    gen = io.read_generated(args.generated)
    splits = _gen_splits(cfg, inp, args.seed)
    return impute_source(cfg, inp, splits, args.source, gen, args.fraction, args.seed)


def cmd_impute(args, cfg):
    inp = _inputs(cfg, args.dataset, None)
    parts = _imputed_parts(args, cfg, inp)
    out, h = _out(cfg), cfg.config_hash()
    for name, ds in parts.items():
        io.write_dataset(out / f"imputed_{name}.csv", ds, h, args.seed)
        print(f"{name}\t{len(ds.subjects)} subjects\t{sum(len(s.steps) for s in ds.subjects)} rows")
    return 0


def cmd_retrain(args, cfg):
    inp = _inputs(cfg, args.dataset, None)
    parts = _imputed_parts(args, cfg, inp)
    _, _, ev, _, _ = fit_predictor(cfg, parts, args.model, args.padding, inp.fixed_length, args.seed, args.source)
    print(f"{args.source} {args.fraction:g}% {args.model}/{args.padding}: test rmse {ev.rmse:.6f}")
    return 0


def cmd_report(args, cfg):
    rep = build_report(cfg)
    emit_report(rep, Layout(cfg.out_dir).report_dir())
    _print_summary(rep)
    return 0


def cmd_run_all(args, cfg):
    if args.seed is not None and args.single_seed:
        cfg = cfg.with_overrides(seeds=[args.seed])
    _out(cfg)
    save_config(cfg, Path(cfg.out_dir) / "config.json")
    rep = run_matrix(cfg, _log(args))
    _print_summary(rep)
    return 0


def _print_summary(rep) -> None:
    for row in rep.rmse_by_source:
        print(f"{row[0]:<9} n={row[3]} mean={row[4]:.5f} min={row[5]:.5f} max={row[6]:.5f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=JSON", help="override a config field")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="ktimpute", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("synth", cmd_synth, "write a planted synthetic corpus")
    sp = add("validate", cmd_validate, "check a dataset CSV")
    sp.add_argument("--dataset", required=True)
    sp = add("split", cmd_split, "write a split assignment")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--mode", choices=[m.value for m in SplitMode], default="subject")
    sp.add_argument("--ratios", help="comma separated, default: downstream ratios")
    sp = add("identify-missing", cmd_identify_missing, "list missing schedule steps")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--schedule", required=True)
    sp = add("train-gen", cmd_train_gen, "train one generative model")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", choices=SOURCES, default="lvae")
    sp = add("generate", cmd_generate, "generate the missing steps with a trained model")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp = add("train-pred", cmd_train_pred, "train one downstream regressor")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", choices=["lstm", "gru"], default="lstm")
    sp.add_argument("--padding", choices=["zero", "ffill", "bfill"], default="zero")
    sp = add("predict-targets", cmd_predict_targets, "label generated rows with a regressor")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--generated", required=True)
    for name, fn, help_ in (
        ("impute", cmd_impute, "merge generated rows into the downstream splits"),
        ("retrain", cmd_retrain, "retrain a regressor on imputed data"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--generated", required=True, help="generated CSV with targets")
        sp.add_argument("--source", choices=SOURCES, default="lvae", help="vae-ns imputes by row, others by id")
        sp.add_argument("--fraction", type=float, default=100.0, help="percent of subjects to impute")
        if name == "retrain":
            sp.add_argument("--model", choices=["lstm", "gru"], default="lstm")
            sp.add_argument("--padding", choices=["zero", "ffill", "bfill"], default="zero")
    add("report", cmd_report, "aggregate a finished run into report files")
    sp = add("run-all", cmd_run_all, "run every phase and emit the report")
    sp.add_argument("--single-seed", action="store_true", help="run only --seed instead of the config's seeds")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except (ConfigInvalid, MissingArtifact, io.DatasetInvalid, io.IoFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
