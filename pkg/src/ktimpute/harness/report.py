"""Aggregate per-seed artifacts into report tables.

Column order is fixed:

* ``rmse_by_padding.csv``: model, padding, n, mean, min, max (original data)
* ``rmse_by_source.csv``: source, model, padding, n, mean, min, max
  (``original`` is the best original-data cell, the rest are full imputations)
* ``fraction_sweep.csv``: source, fraction, n, mean, min, max
* ``feature_distance.csv``: source, feature, n, mean, min, max
* ``generation_loss.csv``: source, seed, epoch, train_loss, val_loss, recon, kl
* ``summary.json``: best cell and its provenance, final generation losses

``n`` is the number of seeds behind a cell; ``min``/``max`` give error bars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .phases import Layout, MissingArtifact, read_round1, seeds_tag

PADDING_COLUMNS = ["model", "padding", "n", "mean", "min", "max"]
SOURCE_COLUMNS = ["source", "model", "padding", "n", "mean", "min", "max"]
FRACTION_COLUMNS = ["source", "fraction", "n", "mean", "min", "max"]
DISTANCE_COLUMNS = ["source", "feature", "n", "mean", "min", "max"]
LOSS_COLUMNS = ["source", "seed", "epoch", "train_loss", "val_loss", "recon", "kl"]

TABLES = {
    "rmse_by_padding": PADDING_COLUMNS,
    "rmse_by_source": SOURCE_COLUMNS,
    "fraction_sweep": FRACTION_COLUMNS,
    "feature_distance": DISTANCE_COLUMNS,
    "generation_loss": LOSS_COLUMNS,
}

# column parsers for read_report
_INT = {"n", "seed", "epoch"}
_FLOAT = {"mean", "min", "max", "fraction", "train_loss", "val_loss", "recon", "kl"}


class MixedLineage(ValueError):
    pass


@dataclass
class RunReport:
    config_hash: str
    seeds: list[int]
    rmse_by_padding: list[list] = field(default_factory=list)
    rmse_by_source: list[list] = field(default_factory=list)
    fraction_sweep: list[list] = field(default_factory=list)
    feature_distance: list[list] = field(default_factory=list)
    generation_loss: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def table(self, name: str) -> list[list]:
        return getattr(self, name)

    def lookup(self, name: str, **key) -> dict:
        """The single row of table ``name`` matching ``key`` (column=value), as a dict."""
        cols = TABLES[name]
        hits = [dict(zip(cols, r)) for r in self.table(name) if all(dict(zip(cols, r))[k] == v for k, v in key.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows in {name} match {key}")
        return hits[0]


def _stats(values: list[float]) -> list:
    a = np.asarray(values, dtype=np.float64)
    return [len(values), float(a.mean()), float(a.min()), float(a.max())]


def _check_lineage(meta: dict, h: str, path) -> None:
    if meta.get("config_hash") != h:
        raise MixedLineage(f"{path} has config hash {meta.get('config_hash')!r}, expected {h!r}")


def build_report(cfg: ExperimentConfig) -> RunReport:
    """Read every per-seed artifact of ``cfg`` and reduce it, in config order."""
    lay = Layout(cfg.out_dir)
    h = cfg.config_hash()
    rep = RunReport(h, list(cfg.seeds))

    cells: dict[tuple[str, str], list[float]] = {(m, p): [] for m in cfg.models for p in cfg.paddings}
    for seed in cfg.seeds:
        meta, _, _ = io.read_csv(lay.pred(seed, "round1.csv"))
        _check_lineage(meta, h, lay.pred(seed, "round1.csv"))
        for m, p, r, _ in read_round1(cfg, seed):
            cells[(m, p)].append(r)
    rep.rmse_by_padding = [[m, p, *_stats(v)] for (m, p), v in cells.items()]

    best_path = lay.best_cell()
    if not best_path.exists():
        raise MissingArtifact(f"{best_path} not found; run the predict_targets phase first")
    best = io.read_json(best_path)
    model, padding = best["model"], best["padding"]
    rep.rmse_by_source.append(["original", model, padding, *_stats(cells[(model, padding)])])

    full: dict[str, list[float]] = {s: [] for s in cfg.sources}
    sweep: dict[tuple[str, float], list[float]] = {}
    for seed in cfg.seeds:
        meta, _, rows = io.read_csv(lay.retrain(seed))
        _check_lineage(meta, h, lay.retrain(seed))
        for stage, source, frac, _m, _p, _seed, rmse, _v, _e in rows:
            if stage == "full":
                full[source].append(float(rmse))
            else:
                sweep.setdefault((source, float(frac)), []).append(float(rmse))
    for source in cfg.sources:
        rep.rmse_by_source.append([source, model, padding, *_stats(full[source])])
    rep.fraction_sweep = [[s, f, *_stats(v)] for (s, f), v in sweep.items()]

    dist: dict[tuple[str, str], list[float]] = {}
    finals: dict[str, list[float]] = {s: [] for s in cfg.sources}
    for seed in cfg.seeds:
        meta, _, rows = io.read_csv(lay.gen(seed, "feature_distance.csv"))
        _check_lineage(meta, h, lay.gen(seed, "feature_distance.csv"))
        for source, feat, d in rows:
            dist.setdefault((source, feat), []).append(float(d))
        summ = io.read_json(lay.gen(seed, "summary.json"))
        for source in cfg.sources:
            finals[source].append(summ["sources"][source]["best_val"])
            _, _, hist = io.read_csv(lay.gen(seed, f"{source}_history.csv"))
            for ep, tr, va, rc, kl in hist:
                rep.generation_loss.append([source, seed, int(ep), float(tr), float(va), float(rc), float(kl)])
    rep.feature_distance = [[s, f, *_stats(v)] for (s, f), v in dist.items()]

    rep.summary = {
        "seeds": list(cfg.seeds),
        "best_cell": {
            "model": model,
            "padding": padding,
            "mean_val_rmse": best["mean_val_rmse"],
            "mean_rmse": best["mean_rmse"],
            "selected_by": "seed-mean validation RMSE over model x padding cells, first minimum in config order",
            "source_files": [str(Path("predict") / f"seed{s}" / "round1.csv") for s in cfg.seeds],
        },
        "generation_final_val": {s: _stats(v) for s, v in finals.items()},
    }
    return rep


def emit_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    tag = seeds_tag(report.seeds)
    for name, cols in TABLES.items():
        io.write_csv(out / f"{name}.csv", cols, report.table(name), report.config_hash, tag)
    io.write_json(out / "summary.json", report.summary, report.config_hash, tag)


def read_report(out_dir) -> RunReport:
    out = Path(out_dir)
    summary = io.read_json(out / "summary.json")
    h = summary.pop("config_hash")
    summary.pop("seed", None)
    rep = RunReport(h, list(summary["seeds"]), summary=summary)
    for name, cols in TABLES.items():
        meta, header, rows = io.read_csv(out / f"{name}.csv")
        _check_lineage(meta, h, out / f"{name}.csv")
        if header != cols:
            raise ValueError(f"{name}.csv: unexpected columns {header}")
        parsed = []
        for r in rows:
            parsed.append([int(v) if c in _INT else float(v) if c in _FLOAT else v for c, v in zip(cols, r)])
        setattr(rep, name, parsed)
    return rep
