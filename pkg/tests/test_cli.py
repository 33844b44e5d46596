import csv
import json

import pytest

from cliffmag import cli
from cliffmag.errors import ConfigurationError
from cliffmag.propagation import load_stack
from cliffmag.verify import CheckResult, VerifyReport

SMALL = ["--n-nodes", "80", "--dims", "4,4", "--p-in", "0.15", "--p-out", "0.1"]


def run(*argv, env=None):
    return cli.main(list(argv), environ=env or {})


@pytest.fixture
def workdir(tmp_path):
    assert run("gen-data", "--out", str(tmp_path), *SMALL) == 0
    return tmp_path


def resolved(argv, env=None):
    args = cli.build_parser().parse_args(argv)
    return cli.resolve(args.command, args, env or {})


# ---------------------------------------------------------------- configuration


def test_precedence_file_env_flag(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("depth = 3\ndamping = 0.2\nepsilon = 1e-4\n")
    values, sources = resolved(
        ["precompute", "--config", str(cfg), "--damping", "0.7"], env={"CLIFFMAG_DAMPING": "0.4", "CLIFFMAG_EPSILON": "1e-3"}
    )
    assert values["depth"] == 3 and sources["depth"] == "file"
    assert values["epsilon"] == 1e-3 and sources["epsilon"] == "env"
    assert values["damping"] == 0.7 and sources["damping"] == "flag"
    assert sources["layout"] == "default"


def test_unknown_keys_rejected(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("depthh = 3\n")
    with pytest.raises(ConfigurationError):
        resolved(["precompute", "--config", str(cfg)])
    with pytest.raises(ConfigurationError):
        resolved(["precompute"], env={"CLIFFMAG_DEPHT": "2"})
    cfg.write_text("[cgp]\ndepth = 3\n")
    with pytest.raises(ConfigurationError):
        resolved(["precompute", "--config", str(cfg)])


def test_shared_file_keys_for_other_commands_are_ignored(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("epochs = 5\ndepth = 1\n")
    values, _ = resolved(["precompute", "--config", str(cfg)])
    assert "epochs" not in values and values["depth"] == 1


def test_bad_values_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        resolved(["train"], env={"CLIFFMAG_ABLATE": "rotor,magic"})
    with pytest.raises(ConfigurationError):
        resolved(["train"], env={"CLIFFMAG_LITERAL_EQ3": "maybe"})
    cfg = tmp_path / "c.toml"
    cfg.write_text("depth = 2.5\n")
    with pytest.raises(ConfigurationError):
        resolved(["precompute", "--config", str(cfg)])


def test_list_flags_split_commas():
    values, _ = resolved(["train", "--ablate", "rotor,scale", "--ablate", "energy"])
    assert values["ablate"] == ["rotor", "scale", "energy"]


def test_config_echo_roundtrips(workdir):
    assert run("precompute", "--out", str(workdir), "--depth", "3") == 0
    echo = workdir / "config.echo"
    values, _ = resolved(["precompute", "--config", str(echo)])
    assert values["depth"] == 3


# ---------------------------------------------------------------- pipeline


def test_pipeline_outputs(workdir):
    out = str(workdir)
    assert run("precompute", "--out", out) == 0
    assert run("train", "--out", out, "--epochs", "5", "--d-f", "8", "--h", "8") == 0
    assert run("eval", "--out", out) == 0
    for name in ("config.echo", "energies.csv", "train.csv", "metrics.json", "stack.cgp1", "model.aha1"):
        assert (workdir / name).exists(), name
    doc = json.loads((workdir / "metrics.json").read_text())
    assert len(doc["run_hash"]) == 40
    assert doc["eval"]["metrics"]["test_acc"] == doc["metrics"]["test_acc"]
    rows = list(csv.DictReader(open(workdir / "train.csv")))
    assert len(rows) == 6


def test_missing_cache_is_actionable(workdir, capsys):
    assert run("train", "--out", str(workdir)) == 2
    assert "run `cliffmag precompute" in capsys.readouterr().err


def test_missing_dataset_is_actionable(tmp_path, capsys):
    assert run("precompute", "--out", str(tmp_path)) == 2
    assert "gen-data" in capsys.readouterr().err


def test_stale_cache_detected(workdir, capsys):
    out = str(workdir)
    assert run("precompute", "--out", out) == 0
    assert run("gen-data", "--out", out, *SMALL, "--seed", "9") == 0
    assert run("train", "--out", out) == 2
    assert "different dataset" in capsys.readouterr().err
    assert run("precompute", "--out", out) == 0
    assert run("train", "--out", out, "--depth", "4") == 2
    assert "settings differ" in capsys.readouterr().err


def test_precompute_is_deterministic_and_depth_zero(workdir):
    out = str(workdir)
    assert run("precompute", "--out", out) == 0
    first = (workdir / "stack.cgp1").read_bytes()
    assert run("precompute", "--out", out) == 0
    assert (workdir / "stack.cgp1").read_bytes() == first
    assert run("precompute", "--out", out, "--depth", "0") == 0
    assert load_stack(workdir / "stack.cgp1").layers.shape[0] == 1


def test_zero_epochs_evaluates_initial_model(workdir):
    out = str(workdir)
    run("precompute", "--out", out)
    assert run("train", "--out", out, "--epochs", "0", "--d-f", "8", "--h", "8") == 0
    doc = json.loads((workdir / "metrics.json").read_text())
    assert doc["metrics"]["best_epoch"] == 0


def test_link_prediction_pipeline(workdir):
    out = str(workdir)
    assert run("precompute", "--out", out, "--task", "link_prediction") == 0
    assert run("train", "--out", out, "--task", "link_prediction", "--epochs", "2", "--n-candidates", "10") == 0
    assert run("eval", "--out", out, "--task", "link_prediction", "--n-candidates", "10") == 0
    assert run("eval", "--out", out) == 2  # classification checks against the full-graph hash


def test_ablate_writes_six_rows(workdir):
    assert run("ablate", "--out", str(workdir), "--epochs", "2", "--d-f", "8", "--h", "8") == 0
    rows = list(csv.DictReader(open(workdir / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["full", "rotor", "potential", "energy", "consensus", "scale"]


def test_verify_exit_code_and_outputs(tmp_path, monkeypatch):
    def fake(rotor_modes, include_training, progress):
        checks = [CheckResult(f"c[{m}]", m != "linear", 0.0, 1.0) for m in rotor_modes]
        return VerifyReport(checks)

    monkeypatch.setattr(cli, "run_verify", fake)
    assert run("verify", "--out", str(tmp_path), "--rotor-angle-mode", "squared") == 0
    assert run("verify", "--out", str(tmp_path)) == 1
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert [c["name"] for c in doc["checks"]] == ["c[squared]", "c[linear]"]
