import json
from pathlib import Path

import numpy as np
import pytest

import dlmc.flow
from dlmc.cli import main as cli_main
from dlmc.errors import ConfigurationError, DataError
from dlmc.harness import (
    build_target,
    load_config,
    load_german_credit,
    resolve_config,
    resolve_reference,
    run_experiment,
)

DATASET = Path(__file__).resolve().parent.parent / "data" / "german_credit_synthetic.data"


def base_config(tmp_path, **overrides):
    cfg = {
        "target": "gaussian",
        "dim": 2,
        "method": "dlmc",
        "n_particles": 120,
        "max_iterations": 4,
        "convergence_window": 50,
        "seed": 3,
        "output_dir": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    return cfg


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def test_unknown_config_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="step_sze"):
        resolve_config(base_config(tmp_path, step_sze=0.1))


def test_missing_required_keys_are_rejected():
    with pytest.raises(ConfigurationError, match="output_dir"):
        resolve_config({"target": "gaussian", "dim": 2})


def test_config_echo_round_trip(tmp_path):
    cfg = resolve_config(base_config(tmp_path))
    artifacts = run_experiment(cfg)
    echoed = load_config(artifacts.config_path)
    assert echoed.raw == cfg.raw


# ---------------------------------------------------------------------------
# dataset loader
# ---------------------------------------------------------------------------


def test_loader_canonical_file():
    X, y = load_german_credit(DATASET)
    assert X.shape == (1000, 24)
    assert int(y.sum()) == 300
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(X.std(axis=0), 1.0, rtol=1e-12)


def test_loader_three_row_fixture(tmp_path):
    path = tmp_path / "tiny.data"
    path.write_text("1 " * 23 + "7 2\n" + "0 " * 23 + "4 1\n" + "2 " * 23 + "5 1\n")
    X, y = load_german_credit(path, expect_canonical=False)
    assert X.shape == (3, 24)
    np.testing.assert_array_equal(y, [1.0, 0.0, 0.0])
    # first columns hold 1, 0, 2: standardized to mean 0, unit variance
    np.testing.assert_allclose(X[:, 0], (np.array([1.0, 0.0, 2.0]) - 1.0) / np.std([1, 0, 2]))


def test_loader_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.data"
    path.write_text("1 2 3\n")
    with pytest.raises(DataError, match="bad.data:1"):
        load_german_credit(path, expect_canonical=False)
    path.write_text(" ".join(["1"] * 24) + " oops\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_german_credit(path, expect_canonical=False)


def test_loader_constant_column_guard(tmp_path):
    path = tmp_path / "const.data"
    rows = []
    for i in range(4):
        feats = ["5"] + [str(i + j) for j in range(23)]
        rows.append(" ".join(feats) + " 1")
    path.write_text("\n".join(rows) + "\n")
    X, _ = load_german_credit(path, expect_canonical=False)
    assert np.all(np.isfinite(X))
    np.testing.assert_array_equal(X[:, 0], 0.0)


def test_loader_enforces_canonical_split(tmp_path):
    path = tmp_path / "wrong_split.data"
    line = " ".join(["1"] * 24)
    path.write_text("\n".join(f"{line} 1" for _ in range(1000)) + "\n")
    with pytest.raises(DataError, match="300"):
        load_german_credit(path)


# ---------------------------------------------------------------------------
# experiments and artifacts
# ---------------------------------------------------------------------------


def test_run_experiment_writes_all_artifacts(tmp_path):
    cfg = resolve_config(base_config(tmp_path))
    artifacts = run_experiment(cfg)
    assert artifacts.records_path.exists()
    assert artifacts.samples_path.exists()
    assert artifacts.summary_path.exists()
    assert artifacts.curve_path.exists()
    records = [
        json.loads(line) for line in artifacts.records_path.read_text().splitlines()
    ]
    assert len(records) == artifacts.summary["iterations"]
    header = artifacts.samples_path.read_text().splitlines()[0]
    assert header == "x0,x1"
    curve_header = artifacts.curve_path.read_text().splitlines()[0]
    assert curve_header.startswith("iteration,likelihood_calls,gradient_calls")
    assert "b2_mean" in artifacts.summary


def test_record_count_matches_iteration_budget(tmp_path):
    cfg = resolve_config(base_config(tmp_path, max_iterations=7))
    artifacts = run_experiment(cfg)
    lines = artifacts.records_path.read_text().splitlines()
    assert len(lines) == 7  # window is 50: the budget is exhausted exactly


def test_immediate_convergence_writes_valid_empty_record_stream(tmp_path):
    cfg = resolve_config(
        base_config(
            tmp_path,
            target="funnel",
            dim=8,
            noise_sigma=None,
            n_particles=300,
            reference="quadrature",
        )
    )
    artifacts = run_experiment(cfg)
    assert artifacts.summary["converged"] is True
    assert artifacts.summary["iterations"] == 0
    assert artifacts.records_path.read_text() == ""
    assert artifacts.samples_path.read_text().count("\n") == 301  # header + rows


def test_identical_seeds_identical_record_streams_across_workers(tmp_path):
    cfg1 = resolve_config(
        base_config(tmp_path, output_dir=str(tmp_path / "w1"), workers=1)
    )
    cfg8 = resolve_config(
        base_config(tmp_path, output_dir=str(tmp_path / "w8"), workers=8)
    )
    a1 = run_experiment(cfg1)
    a8 = run_experiment(cfg8)
    assert a1.records_path.read_bytes() == a8.records_path.read_bytes()
    assert a1.samples_path.read_bytes() == a8.samples_path.read_bytes()
    assert a1.curve_path.read_bytes() == a8.curve_path.read_bytes()


def test_seed_isolation_changes_samples_not_schema(tmp_path):
    a = run_experiment(
        resolve_config(base_config(tmp_path, output_dir=str(tmp_path / "s1"), seed=1))
    )
    b = run_experiment(
        resolve_config(base_config(tmp_path, output_dir=str(tmp_path / "s2"), seed=2))
    )
    sa = a.samples_path.read_text().splitlines()
    sb = b.samples_path.read_text().splitlines()
    assert sa[0] == sb[0]
    assert sa[1:] != sb[1:]
    ra = [sorted(json.loads(x)) for x in a.records_path.read_text().splitlines()]
    rb = [sorted(json.loads(x)) for x in b.records_path.read_text().splitlines()]
    assert ra[0] == rb[0]


def test_ablation_no_mh_never_calls_mh(tmp_path):
    cfg = resolve_config(base_config(tmp_path, method="dlmc-no-mh", max_iterations=3))
    artifacts = run_experiment(cfg)
    n = 120
    # init costs 2N; each iteration only the DL event (no proposal event)
    assert artifacts.summary["likelihood_calls"] == 2 * n + 3 * n
    records = [
        json.loads(line) for line in artifacts.records_path.read_text().splitlines()
    ]
    assert all(r["mh_acceptance"] is None for r in records)


def test_ablation_no_precondition_never_uses_latent_maps(tmp_path, monkeypatch):
    calls = {"latent": 0}
    original = dlmc.flow.FlowModel.latent_gradient

    def counting(self, *a, **k):
        calls["latent"] += 1
        return original(self, *a, **k)

    monkeypatch.setattr(dlmc.flow.FlowModel, "latent_gradient", counting)
    cfg = resolve_config(
        base_config(tmp_path, method="dlmc-no-precondition", max_iterations=3)
    )
    run_experiment(cfg)
    assert calls["latent"] == 0
    cfg2 = resolve_config(
        base_config(
            tmp_path, method="dlmc", output_dir=str(tmp_path / "pre"), max_iterations=3
        )
    )
    run_experiment(cfg2)
    assert calls["latent"] == 3


def test_unwritable_output_dir_fails_before_running(tmp_path):
    target_dir = tmp_path / "blocked"
    target_dir.write_text("a file, not a directory")
    cfg = resolve_config(base_config(tmp_path, output_dir=str(target_dir / "x")))
    with pytest.raises(OSError):
        run_experiment(cfg)


def test_sparse_logistic_target_from_config(tmp_path):
    cfg = resolve_config(
        base_config(
            tmp_path,
            target="sparse-logistic",
            dim=None,
            dataset_path=str(DATASET),
            reference="none",
        )
    )
    target = build_target(cfg)
    assert target.dim == 51
    assert resolve_reference(cfg, target) is None


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def write_config(tmp_path, **overrides):
    cfg = base_config(tmp_path, **overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_cli_run_exit_codes(tmp_path, capsys):
    # budget exhausted -> exit 2
    path = write_config(tmp_path, max_iterations=3)
    assert cli_main(["run", "--config", str(path)]) == 2
    # immediate convergence -> exit 0
    path0 = write_config(
        tmp_path,
        target="funnel",
        dim=6,
        noise_sigma=None,
        reference="quadrature",
        output_dir=str(tmp_path / "conv"),
    )
    assert cli_main(["run", "--config", str(path0)]) == 0
    out = capsys.readouterr().out
    assert "converged=True" in out


def test_cli_run_bad_config_exits_one(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"target": "nope", "output_dir": str(tmp_path)}))
    assert cli_main(["run", "--config", str(path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_seed_override_and_compare(tmp_path, capsys):
    path = write_config(tmp_path, output_dir=str(tmp_path / "a"))
    assert cli_main(["run", "--config", str(path), "--seed", "9"]) == 2
    echoed = json.loads((tmp_path / "a" / "config.json").read_text())
    assert echoed["seed"] == 9
    assert cli_main(["compare", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "method" in out and "dlmc" in out


def test_cli_oracle_stores_reference(tmp_path, capsys):
    path = write_config(
        tmp_path,
        target="funnel",
        dim=5,
        noise_sigma=5.0,
        reference="quadrature",
    )
    store = tmp_path / "ref.json"
    assert cli_main(["oracle", "--config", str(path), "--store", str(store)]) == 0
    data = json.loads(store.read_text())
    assert data["provenance"] == "quadrature-oracle"
    assert len(data["second_moment"]) == 5
    assert "grid_points" in data["detail"]
