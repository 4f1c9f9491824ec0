import csv
import json

import pytest

from fedssg.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIVERGED,
    EXIT_OK,
    main,
    parse_config,
    parse_config_text,
    serialize_config,
)
from fedssg.config import ComparisonSpec, ConfigError, ExperimentConfig

SMOKE = """
[experiment]
total_rounds = 10
seed = 4

[task]
kind = synthetic_logistic
n_samples = 800
n_test = 200
n_features = 5
n_classes = 3

[sampler]
n_clients = 5
cohort_size = 2
"""

COMPARE = SMOKE + """
[run]
epochs = 1

[comparison]
algorithms = fedavg, fedprox, fedssg
seeds = 1, 2
target_accuracy = 0.999

[algorithm.fedprox]
mu = 0.01

[algorithm.fedssg]
gate.mode = identity_clipped
"""


def _write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_minimal_config_gets_defaults():
    cfg = parse_config_text("[sampler]\nn_clients = 4\ncohort_size = 2\n")
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.epsilon == 1e-6 and cfg.gate.beta == 0.0 and cfg.gate.mode == "identity"


def test_round_trip():
    cfg = parse_config_text(SMOKE)
    assert parse_config_text(serialize_config(cfg)) == cfg
    spec = parse_config_text(COMPARE)
    assert parse_config_text(serialize_config(spec)) == spec


@pytest.mark.parametrize("text,key", [
    ("[sampler]\nn_clients = 3\ncohort_size = 4\n", "cohort_size"),
    ("[task]\ncolour = red\n", "task.colour"),
    ("[gadget]\nx = 1\n", "gadget"),
    ("[run]\nlr = fast\n", "run.lr"),
    ("[gate]\nalpha = 2\n", "gate"),
    ("[comparison]\nalgorithms = fedavg\ntarget_accuracy = 1.5\n", "comparison.target_accuracy"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert key in exc.value.key


def test_comparison_overrides_apply():
    spec = parse_config_text(COMPARE)
    assert isinstance(spec, ComparisonSpec)
    assert spec.algorithms == ("fedavg", "fedprox", "fedssg") and spec.seeds == (1, 2)
    assert spec.overrides["fedprox"]["algorithm.mu"] == 0.01
    assert spec.overrides["fedssg"]["gate.mode"] == "identity_clipped"


def test_run_smoke(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(_write(tmp_path, SMOKE)), "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == ["round", "train_loss", "test_accuracy", "grad_norm_sq", "elapsed_ms"]
    assert len(rows) == 11
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"algorithm", "seed", "rounds_to_target", "speedup", "final_acc_mean50",
                            "final_acc_std50", "b_estimate_final", "diverged"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 64 and manifest["seed"] == 4
    assert "metrics.csv" in manifest["artifact_paths"]


def test_run_is_byte_reproducible(tmp_path):
    path = _write(tmp_path, SMOKE)
    main(["run", str(path), "--out", str(tmp_path / "a")])
    main(["run", str(path), "--out", str(tmp_path / "b"), "--threads", "3"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_changes_output(tmp_path):
    path = _write(tmp_path, SMOKE)
    main(["run", str(path), "--out", str(tmp_path / "a")])
    main(["run", str(path), "--out", str(tmp_path / "b"), "--seed", "99"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 99


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDLAB_DATA_DIR", raising=False)
    bad = _write(tmp_path, "[sampler]\nn_clients = 2\ncohort_size = 3\n", "bad.ini")
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    mnist = _write(tmp_path, f"[task]\nkind = mnist\ndata_dir = {tmp_path / 'nowhere'}\n", "mnist.ini")
    assert main(["run", str(mnist), "--out", str(tmp_path / "o")]) == EXIT_DATA
    boom = _write(tmp_path, SMOKE + "\n[algorithm]\nname = fedavg\n[run]\nlr = 1e6\n", "boom.ini")
    out = tmp_path / "boom"
    assert main(["run", str(boom), "--out", str(out)]) == EXIT_DIVERGED
    assert json.loads((out / "summary.json").read_text())["diverged"] is True


def test_compare_writes_table_and_curves(tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", str(_write(tmp_path, COMPARE)), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert len(rows) == 6
    assert list(rows[0]) == ["algorithm", "seed", "final_acc_mean50", "final_acc_std50",
                             "rounds_to_target", "speedup_vs_fedavg", "status"]
    for row in rows:
        if row["algorithm"] == "fedavg":
            assert row["speedup_vs_fedavg"] == "1.00×"
        assert row["rounds_to_target"] == ">10"
        assert row["status"] == "ok"
    assert len(list((out / "curves").glob("*.csv"))) == 6


def test_run_rejects_comparison_file(tmp_path):
    assert main(["run", str(_write(tmp_path, COMPARE)), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_parse_config_reads_file(tmp_path):
    assert parse_config(_write(tmp_path, SMOKE)).total_rounds == 10
