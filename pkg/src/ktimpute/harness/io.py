"""CSV and JSON artifacts.

Every file the harness writes carries lineage: CSVs start with a comment
line ``# config_hash=<hash> seed=<seed>`` and JSON documents hold
``config_hash`` and ``seed`` keys. Readers skip leading ``#`` lines, so
hand-written inputs need no comment.

Dataset CSV columns, in order: ``subject_id, event_time, school_id``, the
feature columns, the descriptor columns, ``target``. Descriptors repeat on
every row and must be constant per subject.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from ..core_types import (
    Dataset,
    DescriptorField,
    DescriptorKind,
    GeneratedSeries,
    MissingSkeleton,
    SubjectSeries,
    TimeStep,
)

FIXED_COLUMNS = ("subject_id", "event_time", "school_id")


class IoFailure(OSError):
    pass


class DatasetInvalid(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def lineage_line(config_hash: str, seed) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], config_hash: str, seed) -> None:
    buf = io.StringIO()
    buf.write(lineage_line(config_hash, seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """(lineage, header, rows). Lineage is ``{}`` when the file has no comment line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    lines = text.splitlines()
    meta: dict = {}
    while lines and lines[0].startswith("#"):
        for tok in lines.pop(0)[1:].split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta[k] = v
    rows = list(csv.reader(lines))
    if not rows:
        raise IoFailure(f"{path}: missing header")
    return meta, rows[0], rows[1:]


def write_json(path, obj: Mapping, config_hash: str, seed) -> None:
    doc = {"config_hash": config_hash, "seed": seed, **obj}
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None


# ---------------------------------------------------------------------------
# datasets


def write_dataset(path, ds: Dataset, config_hash: str, seed) -> None:
    header = [*FIXED_COLUMNS, *ds.feature_schema, *(d.name for d in ds.descriptor_schema), "target"]
    rows = []
    for subj in ds.subjects:
        for step in subj.steps:
            feats = step.features if step.features is not None else (None,) * ds.n_features
            rows.append([subj.subject_id, step.event_time, subj.school_id, *feats, *subj.descriptors, step.target])
    write_csv(path, header, rows, config_hash, seed)


def _parse_descriptor(raw: str, kind: DescriptorKind):
    if kind is DescriptorKind.CATEGORICAL:
        return raw
    return float(raw)


def _opt_float(raw: str) -> Optional[float]:
    return None if raw == "" else float(raw)


def read_dataset(path, descriptor_fields: Sequence[DescriptorField]) -> Dataset:
    """Parse a dataset CSV. Columns not fixed, not descriptors and not the
    target are features, in header order. Subjects keep first-seen order."""
    _, header, rows = read_csv(path)
    names = [d.name for d in descriptor_fields]
    missing = [c for c in (*FIXED_COLUMNS, *names, "target") if c not in header]
    if missing:
        raise DatasetInvalid(f"{path}: missing columns {missing}")
    col = {c: i for i, c in enumerate(header)}
    features = [c for c in header if c not in FIXED_COLUMNS and c not in names and c != "target"]
    subjects: dict[str, dict] = {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DatasetInvalid(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        sid = r[col["subject_id"]]
        desc = tuple(_parse_descriptor(r[col[d.name]], d.kind) for d in descriptor_fields)
        school = r[col["school_id"]] or None
        entry = subjects.setdefault(sid, {"desc": desc, "school": school, "steps": []})
        if entry["desc"] != desc:
            raise DatasetInvalid(f"{path}:{lineno}: descriptors of subject {sid!r} change between rows")
        if entry["school"] != school:
            raise DatasetInvalid(f"{path}:{lineno}: school of subject {sid!r} changes between rows")
        raw_feats = [r[col[c]] for c in features]
        feats = None if all(v == "" for v in raw_feats) else tuple(float(v) for v in raw_feats)
        entry["steps"].append(
            TimeStep(float(r[col["event_time"]]), feats, _opt_float(r[col["target"]]), feats is not None)
        )
    subs = tuple(SubjectSeries(sid, e["desc"], tuple(e["steps"]), e["school"]) for sid, e in subjects.items())
    return Dataset(subs, tuple(features), tuple(descriptor_fields))


def school_map(ds: Dataset) -> dict[str, str]:
    return {s.subject_id: s.school_id for s in ds.subjects if s.school_id is not None}


# ---------------------------------------------------------------------------
# schedules and skeletons


def write_schedule(path, schedules: Mapping[str, Sequence[float]], config_hash: str, seed) -> None:
    rows = [[school, float(t)] for school in sorted(schedules) for t in schedules[school]]
    write_csv(path, ["school_id", "quiz_time"], rows, config_hash, seed)


def read_schedule(path) -> dict[str, tuple[float, ...]]:
    _, header, rows = read_csv(path)
    if header[:2] != ["school_id", "quiz_time"]:
        raise DatasetInvalid(f"{path}: expected columns school_id, quiz_time")
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r[0], []).append(float(r[1]))
    return {k: tuple(sorted(v)) for k, v in out.items()}


def write_skeletons(path, skeletons: Sequence[MissingSkeleton], config_hash: str, seed) -> None:
    rows = [[s.subject_id, s.school_id, t] for s in skeletons for t in s.times]
    write_csv(path, ["subject_id", "school_id", "event_time"], rows, config_hash, seed)


def read_skeletons(path, ds: Dataset) -> list[MissingSkeleton]:
    """Skeleton rows joined with the descriptors of ``ds``."""
    _, _, rows = read_csv(path)
    by_id = ds.by_id()
    times: dict[str, list[float]] = {}
    schools: dict[str, str] = {}
    for sid, school, t in rows:
        if sid not in by_id:
            raise DatasetInvalid(f"{path}: skeleton for unknown subject {sid!r}")
        times.setdefault(sid, []).append(float(t))
        schools[sid] = school or None
    return [MissingSkeleton(sid, by_id[sid].descriptors, tuple(ts), schools[sid]) for sid, ts in times.items()]


# ---------------------------------------------------------------------------
# generated sequences


def write_generated(path, gen: Sequence[GeneratedSeries], feature_names: Sequence[str], config_hash: str, seed) -> None:
    rows = []
    for g in gen:
        tg = g.targets if g.targets is not None else (None,) * len(g.event_times)
        for t, f, y in zip(g.event_times, g.features, tg):
            rows.append([g.subject_id, t, g.source, *f, y])
    write_csv(path, ["subject_id", "event_time", "source", *feature_names, "target"], rows, config_hash, seed)


def read_generated(path) -> list[GeneratedSeries]:
    _, header, rows = read_csv(path)
    groups: dict[tuple[str, str], dict] = {}
    for r in rows:
        sid, t, src = r[0], float(r[1]), r[2]
        e = groups.setdefault((sid, src), {"t": [], "f": [], "y": []})
        e["t"].append(t)
        e["f"].append(tuple(float(v) for v in r[3:-1]))
        e["y"].append(_opt_float(r[-1]))
    out = []
    for (sid, src), e in groups.items():
        ys = None if all(y is None for y in e["y"]) else tuple(e["y"])
        out.append(GeneratedSeries(sid, tuple(e["t"]), tuple(e["f"]), ys, src))
    return out
