import subprocess
import sys

import pytest
import yaml

from circbeta.cli import ConfigError, DEFAULTS, apply_override, main, resolve_config

FAST_GEN = ["--set", "configs=10"]


def _digests(out):
    lines = (out / "manifest.txt").read_text().splitlines()
    return [ln for ln in lines if "sha256=" in ln]


def test_resolve_defaults_and_overrides():
    cfg = resolve_config("sample", None, ["n=7", "mcmc.chains=3", "beta=1.5"])
    assert cfg["n"] == 7 and cfg["mcmc"]["chains"] == 3 and cfg["beta"] == 1.5
    assert DEFAULTS["sample"]["n"] == 50


def test_override_errors():
    cfg = resolve_config("sample", None, [])
    for bad in ("n", "nope=1", "mcmc.nope=2", "n.x=1"):
        with pytest.raises(ConfigError):
            apply_override(cfg, bad)
    with pytest.raises(ConfigError):
        resolve_config("sample", None, ["n=abc"])


def test_config_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"sample": {"n": 4, "m": 3}}))
    cfg = resolve_config("sample", str(path), ["m=5"])
    assert cfg["n"] == 4 and cfg["m"] == 5
    path.write_text(yaml.safe_dump({"bogus": 1}))
    with pytest.raises(ConfigError):
        resolve_config("sample", str(path), [])
    with pytest.raises(ConfigError):
        resolve_config("sample", str(tmp_path / "missing.yaml"), [])


def test_sample_run_writes_manifest(tmp_path):
    out = tmp_path / "s"
    assert main(["sample", "--out-dir", str(out), "--set", "n=5", "--set", "m=20", "--seed", "3"]) == 0
    text = (out / "manifest.txt").read_text()
    for key in ("command: sample", "seed: 3", "version:", "exit_status: 0", "config:"):
        assert key in text
    assert (out / "samples.csv").exists() and len(_digests(out)) >= 2


def test_mcmc_sample_has_diagnostics(tmp_path):
    args = ["sample", "--out-dir", str(tmp_path), "--set", "n=4", "--set", "m=10", "--set", "method=mcmc",
            "--set", "mcmc.burn_in=20"]
    assert main(args) == 0
    assert (tmp_path / "diagnostics.json").exists()


def test_deterministic_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify-generator", "--out-dir", str(a), *FAST_GEN, "--seed", "5"]) == 0
    assert main(["verify-generator", "--out-dir", str(b), *FAST_GEN, "--seed", "5", "--workers", "2"]) == 0
    assert _digests(a) == _digests(b)


def test_failed_check_exits_2(tmp_path):
    args = ["verify-generator", "--out-dir", str(tmp_path), *FAST_GEN, "--set", "decomposition_tolerance=0"]
    assert main(args) == 2
    assert "exit_status: 2" in (tmp_path / "manifest.txt").read_text()


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["sample", "--out-dir", str(tmp_path), "--set", "n=0"]) == 1
    assert main(["sample", "--out-dir", str(tmp_path), "--set", "beta=-1"]) == 1
    assert main(["sample", "--out-dir", str(tmp_path), "--seed", "-4"]) == 1
    assert main(["sample", "--out-dir", str(tmp_path), "--set", "method=gibbs", "--set", "m=2"]) == 1
    assert "config error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_moments_small(tmp_path):
    assert main(["moments", "--out-dir", str(tmp_path), "--set", "n=20", "--set", "m=500",
                 "--set", "d=2"]) == 0
    assert (tmp_path / "moments.csv").exists()


def test_dbm_small(tmp_path):
    args = ["dbm", "--out-dir", str(tmp_path), "--set", "n=5", "--set", "m=200", "--set", "t=0.002",
            "--set", "trajectory.t=0.002", "--set", "trajectory.checkpoints=2"]
    assert main(args) == 0
    assert (tmp_path / "trajectory.csv").exists() and (tmp_path / "stationarity.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "circbeta", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
