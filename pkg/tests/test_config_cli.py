import json
import math

import numpy as np
import pytest

from isal_fragility.cli import EXIT_CODES, OUTPUT_ROOT_ENV, main
from isal_fragility.config import PRESETS, ConfigError, StudyConfig, load_config, preset
from isal_fragility.dynamics import DEFAULT_GROUND_MOTION, generate_pool


def write_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(kw))
    return str(path)


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_presets_are_valid_and_roundtrip():
    for name, cfg in PRESETS.items():
        assert cfg.name == name
        back = StudyConfig.from_json(cfg.to_json())
        assert back == cfg and back.digest() == cfg.digest()


@pytest.mark.parametrize("change", [
    {"epsilons": (0.0,)}, {"epsilons": (1.5,)}, {"xi": 1.0}, {"sizes": (10,)}, {"case": "other"},
    {"R": 0}, {"bootstrap_sizes": (999,)}, {"alpha_star": 1e3},
])
def test_validation_rejects(change):
    with pytest.raises(ConfigError):
        StudyConfig(**change)


def test_unknown_keys_and_presets(tmp_path):
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        preset("nope")
    cfg = load_config(write_config(tmp_path, preset="synthetic-paper", R=3))
    assert cfg.R == 3 and cfg.sizes == preset("synthetic-paper").sizes


def test_cli_missing_config(capsys):
    assert main(["run-study", "--config", "/nonexistent.json"]) == EXIT_CODES["config"]
    assert "error[config]" in capsys.readouterr().err


def test_cli_gen_pool_rejects_synthetic(tmp_path, capsys):
    code = main(["gen-pool", "--config", "synthetic-paper", "--out", str(tmp_path)])
    assert code == EXIT_CODES["config"] and "error[config]" in capsys.readouterr().err


def test_cli_report_on_empty_directory(tmp_path, capsys):
    code = main(["report", "--config", "synthetic-paper", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == EXIT_CODES["missing-input"]
    assert "error[missing-input]" in err and "metrics.csv" in err


def test_cli_empty_pool(tmp_path):
    cfg = write_config(tmp_path, preset="oscillator-paper", pool_size=0)
    assert main(["gen-pool", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "pool" / "manifest.json").read_text())
    assert man["n"] == 0
    code = main(["run-study", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["missing-input"]


def test_cli_pool_is_reproducible(tmp_path):
    cfg = write_config(tmp_path, preset="oscillator-paper", pool_size=40)
    for d in ("a", "b"):
        assert main(["gen-pool", "--config", cfg, "--out", str(tmp_path / d), "--seed", "5"]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_cli_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = write_config(tmp_path, preset="oscillator-paper", name="envtest", pool_size=5)
    assert main(["gen-pool", "--config", cfg]) == 0
    assert (tmp_path / "root" / "envtest" / "pool" / "ims.csv").exists()


def test_linear_quantile_near_twice_yield():
    pool = generate_pool(1000, DEFAULT_GROUND_MOTION, seed=0)
    assert abs(np.quantile(pool.d_linear, 0.9) - 0.01) < 0.2 * 0.01


def test_single_replication_study_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path, preset="synthetic-paper", R=1, sizes=[20], bootstrap_sizes=[])
    out = str(tmp_path / "s")
    assert main(["run-study", "--config", cfg, "--out", out]) == 0
    rows = (tmp_path / "s" / "study" / "metrics.csv").read_text().splitlines()
    header = rows[1].split(",")
    first = dict(zip(header, rows[2].split(",")))
    assert math.isnan(float(first["rsd_test"]))
    capsys.readouterr()
    assert main(["report", "--config", cfg, "--out", out]) == 0
    summary = capsys.readouterr().out
    assert "b = 0.0328" in summary
    before = tree(tmp_path / "s" / "report")
    assert main(["report", "--config", cfg, "--out", out]) == 0
    assert tree(tmp_path / "s" / "report") == before


def test_bad_threads(capsys):
    assert main(["run-study", "--config", "synthetic-paper", "--threads", "0"]) == EXIT_CODES["config"]
