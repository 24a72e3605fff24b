import json

import pytest

from additive_lab.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, main
from additive_lab.config import PRESETS, ConfigError, resolve_config

SMALL_F1 = ["--d", "8", "--M", "2", "--J", "64", "--T1", "4000", "--snapshot-every", "2000"]


def write(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(path)


class TestValidate:
    def test_empty_custom_lists_required(self, tmp_path, capsys):
        code = main(["validate", write(tmp_path, {"preset": "custom"})])
        assert code == EXIT_CONFIG
        err = capsys.readouterr().err
        for key in ("target.d", "target.M", "network.J", "train.T1", "train.eta0"):
            assert key in err

    def test_override_echo(self, tmp_path, capsys):
        assert main(["validate", write(tmp_path, {"preset": "figure1"}), "--d", "32"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["target"]["d"] == 32

    def test_malformed_number(self, tmp_path, capsys):
        cfg = {"preset": "figure1", "train": {"eta0": "fast"}}
        assert main(["validate", write(tmp_path, cfg)]) == EXIT_CONFIG
        assert "train.eta0" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = {"preset": "figure1", "network": {"width": 3}}
        assert main(["validate", write(tmp_path, cfg)]) == EXIT_CONFIG
        assert "network.width: unknown key" in capsys.readouterr().err

    def test_bad_json(self, tmp_path, capsys):
        assert main(["validate", write(tmp_path, "{not json")]) == EXIT_CONFIG
        assert "invalid JSON" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_needs_preset_or_file(self):
        assert main(["validate"]) == EXIT_CONFIG

    def test_flag_not_in_preset(self, capsys):
        assert main(["validate", "--preset", "superortho", "--J", "5"]) == EXIT_CONFIG
        assert "network.J" in capsys.readouterr().err

    def test_lambda_flag_disables_tuning(self, capsys):
        assert main(["validate", "--preset", "theorem1_scaled", "--lambda", "0.01"]) == EXIT_OK
        train = json.loads(capsys.readouterr().out)["train"]
        assert train["lambda_bar"] == 0.01 and train["tune_lambda"] is False

    def test_every_preset_resolves(self):
        for name in PRESETS:
            if name == "custom":
                continue
            cfg = resolve_config({}, name, 1, "x")
            assert cfg["preset"] == name and cfg["seed"] == 1


class TestRun:
    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--preset", "figure1", "--out-dir", str(out), "--dry-run"]) == EXIT_OK
        assert not out.exists()
        assert json.loads(capsys.readouterr().out)["network"]["J"] == 8192

    def test_superortho(self, tmp_path, capsys):
        out = tmp_path / "so"
        assert main(["run", "--preset", "superortho", "--out-dir", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["passed"]
        assert (out / "config.resolved.json").exists()

    def test_figure1_small_artifacts(self, tmp_path):
        out = tmp_path / "f1"
        code = main(["run", "--preset", "figure1", "--seed", "0", "--out-dir", str(out), *SMALL_F1])
        assert code in (EXIT_OK, EXIT_ACCEPTANCE)
        for name in ("config.resolved.json", "summary.json", "trace.csv", "target.json",
                     "localization.json", "scatter_0_1.csv"):
            assert (out / name).exists(), name
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["train"]["T1"] == 4000

    def test_acceptance_failure_exit(self, tmp_path):
        cfg = {"preset": "bihari_sweep", "bihari": {"cases": 20, "T": 200, "form": "published"}}
        code = main(["run", write(tmp_path, cfg), "--out-dir", str(tmp_path / "b")])
        summary = json.loads((tmp_path / "b" / "summary.json").read_text())
        assert code == (EXIT_OK if summary["passed"] else EXIT_ACCEPTANCE)
        assert not summary["passed"]

    def test_numeric_failure_exit(self, tmp_path, capsys):
        out = tmp_path / "nan"
        cfg = {"preset": "figure1", "train": {"eta0": 1e308, "step_rule": "constant",
                                              "gradient_scale": "neuron"}}
        code = main(["run", write(tmp_path, cfg), "--out-dir", str(out), *SMALL_F1])
        assert code == 3
        record = json.loads((out / "error.json").read_text())
        assert record["exit_code"] == 3 and record["error"] == "NonFiniteUpdateError"


SMALL_RUNS = {
    "figure1": ({"preset": "figure1"}, SMALL_F1),
    "figure1_ntk": ({"preset": "figure1_ntk", "ntk": {"steps": 3000, "snapshot_every": 1000}},
                    ["--d", "8", "--M", "2", "--J", "64"]),
    "theorem1_scaled": ({"preset": "theorem1_scaled", "evaluation": {"samples": 10_000}},
                        ["--d", "6", "--M", "2", "--J", "64", "--T1", "3000", "--T2", "500",
                         "--snapshot-every", "1000"]),
    "superortho": ({"preset": "superortho"}, []),
    "csq_census": ({"preset": "csq_census", "census": {"d": 64, "A": 8, "queries": 10}}, []),
    "bihari_sweep": ({"preset": "bihari_sweep", "bihari": {"cases": 10, "T": 100}}, []),
    "custom": ({"preset": "custom", "target": {"d": 6, "M": 2, "p": 3}, "network": {"J": 32},
                "train": {"T1": 2000, "T2": 300, "eta0": 1.0, "snapshot_every": 1000},
                "evaluation": {"samples": 10_000}}, []),
}


@pytest.mark.parametrize("preset", sorted(SMALL_RUNS))
def test_rerun_byte_identical(tmp_path, preset):
    cfg, flags = SMALL_RUNS[preset]
    path = write(tmp_path, cfg)
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["run", path, "--seed", "3", "--out-dir", str(out), *flags])
        assert code in (EXIT_OK, EXIT_ACCEPTANCE)
        blobs.append((out / "summary.json").read_bytes())
    assert blobs[0] == blobs[1]
