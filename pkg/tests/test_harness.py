import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ktimpute.core_types import Dataset, GeneratedSeries, SubjectSeries, make_subject
from ktimpute.harness import io
from ktimpute.harness.cli import main
from ktimpute.harness.config import ConfigInvalid, ExperimentConfig, load_config, save_config
from ktimpute.harness.phases import (
    Layout,
    MissingArtifact,
    Phase,
    fit_predictor,
    impute_source,
    load_inputs,
    load_splits,
    run_matrix,
    run_phase,
)
from ktimpute.harness.report import MixedLineage, RunReport, TABLES, build_report, emit_report, read_report
from ktimpute.harness.synth import MissingMode, SynthSpec, synth_generate
from ktimpute.pipeline import materialize

from conftest import DESC, tiny_dataset

REDUCED = {
    "synth": SynthSpec(n_subjects=30, schedule_length=10).to_dict(),
    "seeds": [0, 1],
    "models": ["gru"],
    "paddings": ["zero", "ffill"],
    "fractions": [50, 100],
    "generator": {"latent_dim": 2, "hidden_dim": 4, "max_epochs": 3},
    "predictor": {"hidden": 4, "max_epochs": 3},
}


def reduced_config(out_dir, **kw) -> ExperimentConfig:
    return ExperimentConfig(**{**REDUCED, **kw, "out_dir": str(out_dir)})


@pytest.fixture(scope="module")
def reduced_run(tmp_path_factory):
    cfg = reduced_config(tmp_path_factory.mktemp("run"))
    report = run_matrix(cfg)
    return cfg, report


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize(
    "override",
    [
        {"gen_ratios": [0.5, 0.1, 0.2, 0.1]},
        {"down_ratios": [0.5, 0.5]},
        {"seeds": []},
        {"seeds": [1, 1]},
        {"fractions": [0]},
        {"fractions": [120]},
        {"paddings": ["middle"]},
        {"models": ["transformer"]},
        {"sources": ["gan"]},
        {"row_order": "random"},
        {"dataset": "x.csv"},
        {"synth": {"missing_rate": 1.0}},
    ],
)
def test_invalid_configs_rejected(override):
    with pytest.raises(ConfigInvalid):
        ExperimentConfig(**override)


def test_config_hash_ignores_out_dir_only():
    a = ExperimentConfig(out_dir="a")
    assert a.config_hash() == ExperimentConfig(out_dir="b").config_hash()
    assert a.config_hash() != ExperimentConfig(seeds=[0, 1]).config_hash()
    assert len(a.config_hash()) == 16


def test_config_file_round_trip(tmp_path):
    cfg = reduced_config(tmp_path)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.config_hash() == cfg.config_hash()
    (tmp_path / "bad.json").write_text(json.dumps({"seedz": [0]}))
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "bad.json")


def test_defaults_follow_experiment_design():
    cfg = ExperimentConfig()
    assert cfg.gen_ratios == [0.5, 0.1, 0.2, 0.2] and cfg.down_ratios == [0.7, 0.1, 0.2]
    assert cfg.seeds == list(range(10))
    assert cfg.fractions == [10, 20, 30, 50, 80, 100]


# ---------------------------------------------------------------------------
# io


def test_dataset_csv_round_trip(tmp_path, small_synth):
    ds = small_synth.dataset
    io.write_dataset(tmp_path / "d.csv", ds, "h", 0)
    assert io.read_dataset(tmp_path / "d.csv", ds.descriptor_schema) == ds
    assert (tmp_path / "d.csv").read_text().startswith("# config_hash=h seed=0\n")


def test_dataset_descriptors_must_be_constant(tmp_path):
    ds = tiny_dataset((2, 2))
    io.write_dataset(tmp_path / "d.csv", ds, "h", 0)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    lines[3] = lines[3].replace(",a,", ",zz,")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(io.DatasetInvalid):
        io.read_dataset(tmp_path / "d.csv", DESC)


def test_schedule_skeleton_and_generated_round_trips(tmp_path, small_synth):
    res = small_synth
    io.write_schedule(tmp_path / "s.csv", res.schedules, "h", 0)
    assert io.read_schedule(tmp_path / "s.csv") == res.schedules
    from ktimpute.pipeline import identify_missing

    sk = identify_missing(res.dataset, res.school_of, res.schedules)
    io.write_skeletons(tmp_path / "k.csv", sk, "h", 0)
    assert io.read_skeletons(tmp_path / "k.csv", res.dataset) == sk
    gen = [GeneratedSeries("u1", (1.0, 2.5), ((0.1, 0.2), (1e-17, -3.0)), (0.3, 0.4), "vae")]
    io.write_generated(tmp_path / "g.csv", gen, ["a", "b"], "h", 0)
    assert io.read_generated(tmp_path / "g.csv") == gen


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(io.IoFailure):
        io.read_csv(tmp_path / "nope.csv")


# ---------------------------------------------------------------------------
# synthetic corpora


def _descriptor_statistic(ds: Dataset, order=None) -> float:
    """Max |corr| between continuous descriptors and per-subject feature means."""
    desc = np.array([[s.descriptors[0], s.descriptors[1]] for s in ds.subjects])
    if order is not None:
        desc = desc[order]
    feats = np.array([np.mean([st.features[1:] for st in s.steps], axis=0) for s in ds.subjects])
    c = np.corrcoef(np.column_stack([desc, feats]).T)[:2, 2:]
    return float(np.max(np.abs(c)))


def _permutation_p(ds: Dataset, n_perm=500, seed=0) -> float:
    rng = np.random.default_rng(seed)
    obs = _descriptor_statistic(ds)
    null = [_descriptor_statistic(ds, rng.permutation(len(ds.subjects))) for _ in range(n_perm)]
    return (1 + sum(v >= obs for v in null)) / (n_perm + 1)


def test_zero_coupling_makes_descriptors_uninformative():
    ds = synth_generate(SynthSpec(coupling=0.0), 0).dataset
    assert _permutation_p(ds) > 0.01
    # the same test has power when descriptors drive the latents
    coupled = synth_generate(SynthSpec(coupling=0.8), 0).dataset
    assert _permutation_p(coupled) <= 0.01


def test_zero_rate_means_no_missing_steps():
    res = synth_generate(SynthSpec(n_subjects=30, missing_rate=0.0), 1)
    assert all(len(v) == 0 for v in res.truth_missing.values())
    assert all(s.n_steps == len(res.schedules[s.school_id]) for s in res.dataset.subjects)


def test_mnar_missingness_tracks_low_targets():
    res = synth_generate(SynthSpec(missing_mode=MissingMode.MNAR), 0)
    flags = np.concatenate([res.missing_flags[k] for k in sorted(res.missing_flags)]).astype(float)
    targets = np.concatenate([res.full_targets[k] for k in sorted(res.full_targets)])
    r = np.corrcoef(flags, targets)[0, 1]
    assert r < -0.1


@pytest.mark.parametrize("mode", list(MissingMode))
def test_synth_is_seed_deterministic(mode):
    a = synth_generate(SynthSpec(n_subjects=10, missing_mode=mode), 4)
    b = synth_generate(SynthSpec(n_subjects=10, missing_mode=mode), 4)
    assert a.dataset == b.dataset and a.truth_missing == b.truth_missing


# ---------------------------------------------------------------------------
# phases


def test_phase_needs_prior_artifacts(tmp_path):
    cfg = reduced_config(tmp_path)
    for phase in (Phase.GENERATE, Phase.PREDICT_TARGETS, Phase.RETRAIN):
        with pytest.raises(MissingArtifact):
            run_phase(cfg, phase)


def test_rerunning_phases_is_bytewise_idempotent(reduced_run, tmp_path):
    cfg, _ = reduced_run
    root = Path(cfg.out_dir)
    before = snapshot(root)
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    cfg2 = cfg.with_overrides(out_dir=str(copy))
    for phase in Phase:
        run_phase(cfg2, phase)
    emit_report(build_report(cfg2), Layout(copy).report_dir())
    assert snapshot(copy) == before


def test_empty_generated_set_matches_original_training(reduced_run):
    cfg, _ = reduced_run
    inp = load_inputs(cfg)
    splits = load_splits(cfg, 0)
    parts = impute_source(cfg, inp, splits, "vae", [], 100.0, 0)
    assert parts == materialize(inp.dataset, splits["down_subject"])
    _, _, ev, _, _ = fit_predictor(cfg, parts, "gru", "zero", inp.fixed_length, 0)
    _, _, rows = io.read_csv(Layout(cfg.out_dir).pred(0, "round1.csv"))
    original = {(r[1], r[2]): float(r[4]) for r in rows}
    assert ev.rmse == original[("gru", "zero")]


def test_truth_missing_matches_skeletons(reduced_run):
    cfg, _ = reduced_run
    lay = Layout(cfg.out_dir)
    _, _, truth = io.read_csv(lay.input("truth_missing.csv"))
    _, _, skel = io.read_csv(lay.input("skeletons.csv"))
    assert sorted((s, float(t)) for s, t in truth) == sorted((s, float(t)) for s, _, t in skel)


def test_full_and_hundred_percent_cells_agree(reduced_run):
    cfg, _ = reduced_run
    for seed in cfg.seeds:
        _, _, rows = io.read_csv(Layout(cfg.out_dir).retrain(seed))
        full = {r[1]: r[6] for r in rows if r[0] == "full"}
        sweep = {r[1]: r[6] for r in rows if r[0] == "sweep" and float(r[2]) == 100.0}
        assert set(sweep) == {"vae", "lvae"}
        for source, value in sweep.items():
            assert value == full[source]


# ---------------------------------------------------------------------------
# report


def test_every_cell_aggregates_all_seeds(reduced_run):
    cfg, rep = reduced_run
    n = len(cfg.seeds)
    assert len(rep.rmse_by_padding) == len(cfg.models) * len(cfg.paddings)
    for name in ("rmse_by_padding", "rmse_by_source", "fraction_sweep", "feature_distance"):
        col = TABLES[name].index("n")
        assert rep.table(name) and all(r[col] == n for r in rep.table(name))
    assert [r[0] for r in rep.rmse_by_source] == ["original", "vae-ns", "vae", "lvae"]


def test_report_means_match_per_seed_rows(reduced_run):
    cfg, rep = reduced_run
    lay = Layout(cfg.out_dir)
    per_cell: dict = {}
    for seed in cfg.seeds:
        _, _, rows = io.read_csv(lay.retrain(seed))
        for r in rows:
            if r[0] == "sweep":
                per_cell.setdefault((r[1], float(r[2])), []).append(float(r[6]))
        _, _, rows = io.read_csv(lay.pred(seed, "round1.csv"))
        for r in rows:
            per_cell.setdefault((r[1], r[2]), []).append(float(r[4]))
    for source, frac, n, mean, lo, hi in rep.fraction_sweep:
        vals = per_cell[(source, frac)]
        assert abs(mean - sum(vals) / len(vals)) <= 1e-12
        assert (lo, hi) == (min(vals), max(vals))
    for model, padding, n, mean, lo, hi in rep.rmse_by_padding:
        vals = per_cell[(model, padding)]
        assert abs(mean - sum(vals) / len(vals)) <= 1e-12


def test_best_cell_provenance(reduced_run):
    cfg, rep = reduced_run
    best = rep.summary["best_cell"]
    assert (best["model"], best["padding"]) == ("gru", "zero")  # causal model: paddings tie, first wins
    assert len(best["source_files"]) == len(cfg.seeds)


def test_report_round_trip(reduced_run):
    cfg, rep = reduced_run
    back = read_report(Layout(cfg.out_dir).report_dir())
    for name in TABLES:
        assert back.table(name) == rep.table(name)
    assert back.summary == json.loads(json.dumps(rep.summary))
    assert back.config_hash == rep.config_hash


def test_report_columns_are_fixed(reduced_run):
    cfg, _ = reduced_run
    for name, cols in TABLES.items():
        meta, header, _ = io.read_csv(Layout(cfg.out_dir).report_dir() / f"{name}.csv")
        assert header == cols
        assert meta == {"config_hash": cfg.config_hash(), "seed": "0;1"}


def test_empty_fraction_list_gives_header_only(tmp_path, reduced_run):
    _, rep = reduced_run
    empty = RunReport(rep.config_hash, rep.seeds, **{n: rep.table(n) for n in TABLES}, summary=rep.summary)
    empty.fraction_sweep = []
    emit_report(empty, tmp_path)
    lines = (tmp_path / "fraction_sweep.csv").read_text().splitlines()
    assert lines == [f"# config_hash={rep.config_hash} seed=0;1", ",".join(TABLES["fraction_sweep"])]


def test_report_refuses_mixed_lineage(reduced_run, tmp_path):
    cfg, _ = reduced_run
    copy = tmp_path / "mixed"
    shutil.copytree(cfg.out_dir, copy)
    path = Layout(copy).retrain(1)
    path.write_text(path.read_text().replace(cfg.config_hash(), "0" * 16, 1))
    with pytest.raises(MixedLineage):
        build_report(cfg.with_overrides(out_dir=str(copy)))


# ---------------------------------------------------------------------------
# CLI


def test_cli_walkthrough(tmp_path, capsys):
    cfg = reduced_config(tmp_path / "out")
    save_config(cfg, tmp_path / "cfg.json")
    base = ["--config", str(tmp_path / "cfg.json"), "--quiet"]
    w = tmp_path / "work"

    def run(*args):
        return main([args[0], *base, "--out-dir", str(w), *args[1:]])

    d, s = str(w / "dataset.csv"), str(w / "schedule.csv")
    assert run("synth") == 0
    assert run("validate", "--dataset", d) == 0
    assert run("split", "--dataset", d, "--mode", "row") == 0
    assert run("identify-missing", "--dataset", d, "--schedule", s) == 0
    assert run("train-gen", "--dataset", d, "--model", "lvae") == 0
    assert run("generate", "--dataset", d, "--schedule", s, "--checkpoint", str(w / "lvae.ckpt")) == 0
    assert run("train-pred", "--dataset", d, "--model", "gru") == 0
    g = str(w / "lvae_generated.csv")
    assert run("predict-targets", "--checkpoint", str(w / "gru_zero.ckpt"), "--generated", g) == 0
    t = str(w / "lvae_generated_targets.csv")
    assert run("impute", "--dataset", d, "--generated", t, "--fraction", "50") == 0
    assert run("retrain", "--dataset", d, "--generated", t, "--model", "gru") == 0
    assert all(p.exists() for p in (w / "skeletons.csv", w / "imputed_train.csv", w / "validation.json"))
    labelled = io.read_generated(t)
    assert labelled and all(0 < y < 1 for g_ in labelled for y in g_.targets)

    out = tmp_path / "single"
    assert main(["run-all", *base, "--out-dir", str(out), "--seed", "1", "--single-seed"]) == 0
    rep = read_report(out / "report")
    assert rep.seeds == [1]
    assert all(r[TABLES["rmse_by_source"].index("n")] == 1 for r in rep.rmse_by_source)
    assert main(["report", *base, "--out-dir", str(out), "--set", "seeds=[1]"]) == 0
    assert "original" in capsys.readouterr().out


def test_cli_reports_config_errors(tmp_path, capsys):
    assert main(["run-all", "--set", "seeds=[]", "--out-dir", str(tmp_path), "--quiet"]) == 2
    assert main(["report", "--out-dir", str(tmp_path / "none"), "--quiet"]) == 2
    assert "error" in capsys.readouterr().err.lower()


def test_cli_validate_flags_bad_dataset(tmp_path):
    subs = (
        make_subject("s1", (0.0, "a"), [2.0, 1.0], [[0.0, 0.0]] * 2, [0.1, 0.2], school_id="S"),
        make_subject("s1", (0.0, "a"), [1.0], [[0.0, 0.0]], [0.1], school_id="S"),
    )
    ds = Dataset(subs, ("f0", "f1"), DESC)
    io.write_dataset(tmp_path / "d.csv", ds, "h", 0)
    cfg = ExperimentConfig(descriptors=[{"name": "age", "kind": "continuous"}, {"name": "group", "kind": "categorical"}])
    save_config(cfg, tmp_path / "c.json")
    code = main(["validate", "--config", str(tmp_path / "c.json"), "--dataset", str(tmp_path / "d.csv"),
                 "--out-dir", str(tmp_path), "--quiet"])
    assert code == 1


def test_cli_nested_overrides(tmp_path):
    from types import SimpleNamespace

    from ktimpute.harness.cli import _config

    args = SimpleNamespace(config=None, set=["generator.max_epochs=5", "synth.n_subjects=20"], out_dir=str(tmp_path))
    cfg = _config(args)
    assert cfg.generator.max_epochs == 5 and cfg.synth["n_subjects"] == 20
    for bad in ("generator.bogus=1", "seeds.x=1", "nope=1"):
        with pytest.raises(ConfigInvalid):
            _config(SimpleNamespace(config=None, set=[bad], out_dir=None))
