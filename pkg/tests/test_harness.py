"""Study orchestration, data generators, reports, and the byte audit.

Oracles: independent reconstruction of every generator from its named
random streams, re-derivation of tabulated quantities (percent errors,
selections, rate-ratio significance) from the emitted rows, and byte
comparison of canonical files.  Engine configurations are scaled far
down; engine accuracy has its own test modules.
"""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from lgmbench import harness, mcmc
from lgmbench import models as mdl
from lgmbench.gmrf import Constraint, IcarSpec, sample_icar_kriging
from lgmbench.harness import (
    ComparisonReport,
    GeneratingValues,
    StudyConfig,
    Table,
    config_from_json,
    config_hash,
    config_to_json,
    default_lattice,
    study_config,
)
from lgmbench.streams import stream


def tiny_config(kind="poisson", **overrides):
    base = dict(
        n_datasets=2,
        n_areas=12,
        mcmc_iterations=1_500,
        mcmc_burn_in=300,
        mcmc_thin=3,
        strategy="simplified_laplace",
    )
    base.update(overrides)
    return study_config(kind, seed=base.pop("seed", 7), **base)


# ---------------------------------------------------------------------------
# Configuration


def test_study_config_desk_and_paper_presets():
    desk = study_config("poisson")
    assert (desk.n_datasets, desk.n_areas) == (20, 50)
    assert (desk.mcmc_iterations, desk.mcmc_burn_in, desk.mcmc_thin) == (100_000, 10_000, 10)
    paper = study_config("bym", scale="paper", seed=3)
    assert (paper.n_datasets, paper.n_areas) == (100, 296)
    assert (paper.mcmc_iterations, paper.mcmc_burn_in, paper.mcmc_thin) == (2_000_000, 100_000, 100)
    assert paper.master_seed == 3
    assert study_config("zinb").n_areas == 200
    assert study_config("zinb", scale="paper").n_areas == 500
    assert study_config("poisson", n_datasets=2).n_datasets == 2


def test_study_config_validation():
    with pytest.raises(ValueError):
        study_config("poisson", scale="galactic")
    with pytest.raises(ValueError):
        StudyConfig(kind="mystery", n_datasets=1, n_areas=10)
    with pytest.raises(ValueError):
        StudyConfig(kind="poisson", n_datasets=0, n_areas=10)
    with pytest.raises(ValueError):
        StudyConfig(kind="poisson", n_datasets=1, n_areas=10, strategy="psychic")


def test_config_json_round_trip(tmp_path):
    config = study_config(
        "zinb", seed=11, n_datasets=3, generating=GeneratingValues(p_zero=0.4, zinb_betas=(0.2, 0.0, -0.1, 0.0, 0.05))
    )
    text = config_to_json(config)
    assert config_from_json(text) == config
    path = tmp_path / "config.json"
    config_to_json(config, path)
    assert config_from_json(path) == config
    assert config_hash(config) == config_hash(config_from_json(text))
    assert config_hash(config) != config_hash(study_config("zinb", seed=12, n_datasets=3))


def test_chain_and_laplace_config_derivation():
    config = tiny_config(int_strategy="grid")
    cc = config.chain_config(0)
    assert (cc.iterations, cc.burn_in, cc.thin) == (1_500, 300, 3)
    assert cc.seed != config.chain_config(1).seed
    assert config.chain_config(0, "alt").seed != cc.seed
    assert config.laplace_config().int_strategy == "grid"


def test_default_lattice_shapes():
    for n in (9, 50, 296, 7):
        graph = default_lattice(n)
        assert graph.n_nodes == n
    assert default_lattice(50).n_edges == 85  # 5 x 10 rook lattice
    assert default_lattice(7).n_edges == 6  # falls back to a path


# ---------------------------------------------------------------------------
# Generators: determinism and stream reconstruction


def test_poisson_generator_is_deterministic_and_shares_covariates():
    config = tiny_config(n_datasets=3)
    a = harness.generate_poisson_data(config)
    b = harness.generate_poisson_data(config)
    assert len(a) == 3
    for da, db in zip(a, b):
        assert np.array_equal(da.y, db.y)
    assert np.array_equal(a[0].covariates["x"], a[2].covariates["x"])
    assert np.array_equal(a[0].offset, a[2].offset)
    assert not np.array_equal(a[0].y, a[1].y)
    assert np.all((a[0].covariates["x"] >= 0.0) & (a[0].covariates["x"] <= 60.0))
    assert np.all(a[0].offset >= 50.0)
    assert a[0].generating_values == {"intercept": 0.1, "beta_x": 0.05, "sd_iid": 1.0}


def test_poisson_generator_matches_stream_reconstruction():
    config = tiny_config(n_datasets=2, n_areas=30)
    datasets = harness.generate_poisson_data(config)
    g_cov = stream(config.master_seed, "covariates")
    x = g_cov.uniform(0.0, 60.0, 30)
    total = 50.0 + g_cov.poisson(500.0, 30).astype(float)
    for i, data in enumerate(datasets):
        g = stream(config.master_seed, "dataset", i)
        eps = g.normal(0.0, 1.0, 30)
        y = g.poisson(total * np.exp(0.1 + 0.05 * x + eps))
        assert np.array_equal(data.y, y)
        assert np.array_equal(data.covariates["x"], x)


def test_zero_noise_debug_mode_has_closed_form_mean():
    config = tiny_config(n_datasets=1, n_areas=2_000, debug_zero_noise=True)
    data = harness.generate_poisson_data(config)[0]
    lam = data.offset * np.exp(0.1 + 0.05 * data.covariates["x"])
    z = (data.y.sum() - lam.sum()) / math.sqrt(lam.sum())
    assert abs(z) < 4.0


def test_bym_generator_matches_stream_reconstruction():
    config = tiny_config(kind="bym", n_datasets=2, n_areas=12)
    datasets = harness.generate_bym_data(config)
    graph = default_lattice(12)
    g_cov = stream(config.master_seed, "covariates")
    x = g_cov.uniform(0.0, 60.0, 12)
    total = 50.0 + g_cov.poisson(500.0, 12).astype(float)
    icar = IcarSpec(graph=graph, tau=1.0, constraint=Constraint.SUM_TO_ZERO_KRIGING)
    for i, data in enumerate(datasets):
        g = stream(config.master_seed, "dataset", i)
        mu = sample_icar_kriging(icar, g)
        assert abs(mu.sum()) < 1e-9  # constrained spatial field
        eps = g.normal(0.0, 1.0, 12)
        y = g.poisson(total * np.exp(0.1 + 0.05 * x + mu + eps))
        assert np.array_equal(data.y, y)
        assert data.graph is graph or data.graph.edges == graph.edges
        assert data.generating_values["tau_icar"] == 1.0


def test_zinb_generator_matches_stream_reconstruction():
    config = tiny_config(kind="zinb", n_datasets=2, n_areas=40)
    datasets = harness.generate_zinb_data(config)
    g_cov = stream(config.master_seed, "covariates")
    raw = g_cov.standard_normal((40, 5))
    z = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    pop = np.floor(10.0 ** g_cov.uniform(3.0, 5.5, 40))
    gv = config.generating
    betas = np.asarray(gv.zinb_betas)
    for i, data in enumerate(datasets):
        g = stream(config.master_seed, "dataset", i)
        mu = np.exp(gv.zinb_intercept + z @ betas + np.log(pop))
        y_nb = g.negative_binomial(gv.dispersion, gv.dispersion / (gv.dispersion + mu))
        zero = g.random(40) < gv.p_zero
        assert np.array_equal(data.y, np.where(zero, 0, y_nb))
        assert np.array_equal(data.offset, pop)
    cov = datasets[0].covariates
    assert sorted(cov) == ["z1", "z2", "z3", "z4", "z5"]
    for col in cov.values():
        assert abs(col.mean()) < 1e-12 and abs(col.std() - 1.0) < 1e-12


def test_zinb_generator_rejects_wrong_beta_count():
    config = tiny_config(kind="zinb", generating=GeneratingValues(zinb_betas=(0.1, 0.2)))
    with pytest.raises(ValueError):
        harness.generate_zinb_data(config)


def test_generate_datasets_dispatch():
    assert harness.generate_datasets(tiny_config())[0].graph is None
    sel = harness.generate_datasets(tiny_config(kind="selection"))
    assert sel[0].graph is not None  # selection needs the spatial candidate
    with pytest.raises(ValueError):
        harness.generate_datasets(tiny_config(kind="selection", selection_family="weird"))


# ---------------------------------------------------------------------------
# Tables and reports


def test_table_canonical_csv_formats_cells():
    table = Table(
        "t",
        ["i", "x", "flag", "label", "missing"],
        [
            {"i": 3, "x": 0.1, "flag": True, "label": "ok", "missing": None},
            {"i": -1, "x": 2.0, "flag": np.bool_(False), "label": "no", "missing": 0.5},
        ],
    )
    expected = (
        "i,x,flag,label,missing\n"
        "3,0.10000000000000001,true,ok,\n"
        "-1,2,false,no,0.5\n"
    )
    assert table.canonical_csv() == expected


def test_report_table_lookup_and_canonical_files():
    table = Table("only", ["a"], [{"a": 1}])
    report = ComparisonReport(kind="poisson", config={}, tables=[table], version="0", config_digest="d")
    assert report.table("only") is table
    with pytest.raises(KeyError):
        report.table("absent")
    files = report.canonical_files()
    assert set(files) == {"only.csv", "report.json"}
    payload = json.loads(files["report.json"].decode("utf-8"))
    assert payload["tables"]["only"]["rows"] == [{"a": 1}]


# ---------------------------------------------------------------------------
# Paired study bookkeeping


def test_paired_study_rows_satisfy_their_definitions():
    config = tiny_config()
    report = harness.run_paired_study(config)
    results = report.table("results")
    assert [t.name for t in report.tables] == ["results", "pe_long", "pc_long", "failures"]
    assert len(results.rows) == 2 * 2  # datasets x tracked parameters
    assert report.table("failures").rows == []
    for row in results.rows:
        assert row["parameter"] in ("beta_x", "sd_iid")
        assert row["pe"] == 100.0 * (row["laplace_mean"] - row["mcmc_mean"]) / row["mcmc_sd"]
        gv = 0.05 if row["parameter"] == "beta_x" else 1.0
        assert row["pc_laplace"] == 100.0 * (row["laplace_mean"] - gv) / gv
        assert row["pc_mcmc"] == 100.0 * (row["mcmc_mean"] - gv) / gv
        assert row["mcmc_verdict"] in ("Pass", "Warn", "Fail")
    pe_long = report.table("pe_long").rows
    assert [r["pe"] for r in pe_long] == [r["pe"] for r in results.rows]
    assert len(report.table("pc_long").rows) == 2 * len(results.rows)


def test_paired_study_is_byte_identical_across_worker_counts():
    config = tiny_config()
    serial = harness.run_paired_study(config, workers=1).canonical_files()
    parallel = harness.run_paired_study(config, workers=2).canonical_files()
    assert serial.keys() == parallel.keys()
    for name in serial:
        assert serial[name] == parallel[name], name


def test_paired_study_rejects_wrong_kind():
    with pytest.raises(ValueError):
        harness.run_paired_study(tiny_config(kind="zinb"))


# ---------------------------------------------------------------------------
# Selection study bookkeeping


def _iid_builder(data):
    return mdl.poisson_spec(covariates=("x",))


def _no_noise_builder(data):
    return mdl.ModelSpec(
        family=mdl.Family.POISSON,
        fixed_effects=("x",),
        offset="total",
        include_intercept=True,
        priors=mdl.PriorSet(fixed_effect=mdl.NormalPrior(0.0, 1000.0)),
    )


def test_selection_rows_satisfy_their_definitions():
    config = tiny_config(mcmc_iterations=800, mcmc_burn_in=200, mcmc_thin=1)
    datasets = harness.generate_poisson_data(config)
    report = harness.run_selection_study(
        config,
        workers=1,
        datasets=datasets,
        model_builders={"iid": _iid_builder, "no_noise": _no_noise_builder},
        generating_family="iid",
    )
    selection = report.table("selection")
    assert selection.columns == ["dataset", "engine", "waic_iid", "waic_no_noise", "selected", "correct", "tie"]
    assert len(selection.rows) == 2 * 2  # datasets x engines
    for row in selection.rows:
        per_model = {"iid": row["waic_iid"], "no_noise": row["waic_no_noise"]}
        expected = min(sorted(per_model), key=lambda m: (per_model[m], m))
        assert row["selected"] == expected
        assert row["correct"] == (row["selected"] == "iid")
        assert row["tie"] == (per_model["iid"] == per_model["no_noise"])
    for row in report.table("waic_diff").rows:
        assert row["diff"] == row["waic_laplace"] - row["waic_mcmc"]
        assert math.isfinite(row["diff"])


def test_run_study_dispatches_by_kind():
    config = tiny_config(kind="selection", mcmc_iterations=600, mcmc_burn_in=150, mcmc_thin=1, n_areas=9)
    report = harness.run_study(config)
    assert report.kind == "selection"
    assert {t.name for t in report.tables} == {"selection", "waic_diff", "failures"}


# ---------------------------------------------------------------------------
# Zero-inflated study bookkeeping


def test_zinb_study_rows_satisfy_their_definitions():
    config = tiny_config(kind="zinb", n_datasets=1, n_areas=60, mcmc_iterations=1_200, mcmc_burn_in=300, mcmc_thin=1)
    data = harness.generate_zinb_data(config)[0]
    report = harness.run_zinb_study(config, workers=1, datasets=[data])
    assert report.table("failures").rows == []
    rates = report.table("rate_ratios").rows
    assert len(rates) == 2 * 5  # engines x covariates
    for row in rates:
        q1, q3 = np.quantile(data.covariates[row["covariate"]], [0.25, 0.75])
        assert row["iqr"] == float(q3 - q1)
        assert row["lower"] <= row["rate_ratio"] <= row["upper"]
        assert row["significant"] == (row["lower"] > 1.0 or row["upper"] < 1.0)
    agreement = report.table("agreement").rows
    assert len(agreement) == 5
    by_cov = {}
    for row in rates:
        by_cov.setdefault(row["covariate"], {})[row["engine"]] = row
    for row in agreement:
        a = by_cov[row["covariate"]]["laplace"]
        b = by_cov[row["covariate"]]["mcmc"]
        assert row["significance_agree"] == (a["significant"] == b["significant"])
        assert row["direction_agree"] == ((a["rate_ratio"] >= 1.0) == (b["rate_ratio"] >= 1.0))
    pzero = report.table("p_zero").rows
    assert {r["engine"] for r in pzero} == {"laplace", "mcmc"}
    for row in pzero:
        assert 0.0 < row["p_zero_mean"] < 1.0


# ---------------------------------------------------------------------------
# Parallel mapping and the audit


def test_map_datasets_parallel_matches_serial():
    config = tiny_config()
    payloads = [(config, i, d) for i, d in enumerate(harness.generate_poisson_data(config))]
    serial = harness._map_datasets(config, harness._fit_one_paired, payloads, 1)
    parallel = harness._map_datasets(config, harness._fit_one_paired, payloads, 2)
    assert serial == parallel


def test_reproducibility_audit_passes_on_clean_config():
    config = tiny_config(mcmc_iterations=400, mcmc_burn_in=100, mcmc_thin=1, n_areas=10)
    audit = harness.reproducibility_audit(config, worker_counts=(1, 2), repeats=2)
    assert audit.passed
    assert audit.first_diff is None
    assert len(audit.runs) == 4
    digests = [run["sha256"] for run in audit.runs]
    assert all(d == digests[0] for d in digests[1:])
    payload = json.loads(audit.to_json())
    assert payload["passed"] is True


def test_reproducibility_audit_catches_injected_nondeterminism():
    config = tiny_config(
        n_datasets=3, mcmc_iterations=300, mcmc_burn_in=100, mcmc_thin=1, n_areas=10,
        debug_shuffle_reduction=True,
    )
    audit = harness.reproducibility_audit(config, worker_counts=(1,), repeats=2)
    assert not audit.passed
    diff = audit.first_diff
    assert diff is not None
    assert {"file", "line", "run_a", "run_b"} <= set(diff)
    assert diff["file"].endswith((".csv", ".json"))


# ---------------------------------------------------------------------------
# Artifacts on disk


def test_emit_report_writes_canonical_bytes(tmp_path):
    config = tiny_config(mcmc_iterations=400, mcmc_burn_in=100, mcmc_thin=1, n_areas=10, n_datasets=1)
    report = harness.run_paired_study(config)
    out = tmp_path / "report"
    written = harness.emit_report(report, out)
    files = report.canonical_files()
    assert {p.split("/")[-1] for p in written} == set(files)
    for name, blob in files.items():
        assert (out / name).read_bytes() == blob
    csv_only = harness.emit_report(report, tmp_path / "csv_only", formats=("csv",))
    assert all(p.endswith(".csv") for p in csv_only)


def test_write_datasets_materializes_study_inputs(tmp_path):
    config = tiny_config(kind="bym", n_datasets=2)
    written = harness.write_datasets(config, tmp_path)
    names = {p.split("/")[-1] for p in written}
    assert names == {"dataset_000.csv", "dataset_001.csv", "graph.edges", "config.json"}
    datasets = harness.generate_datasets(config)
    back = mdl.dataset_from_csv(tmp_path / "dataset_000.csv", offset_name="total")
    assert np.array_equal(back.y, datasets[0].y)
    assert np.array_equal(back.covariates["x"], datasets[0].covariates["x"])
    assert config_from_json(tmp_path / "config.json") == config
