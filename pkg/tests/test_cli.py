import os

import pytest

from vmstab import cli

VACUUM = """[profile]
name = vacuum
[numerics]
n = 16
"""

MAXWELL = """[profile]
name = maxwellian
[equilibrium]
beta = 0.1
[numerics]
n = 16
[workflow]
task = %s
"""


def write(tmp_path, body, name="scenario.ini"):
    p = tmp_path / name
    p.write_text(body)
    return str(p)


def test_vacuum_run_is_stable_and_reproducible(tmp_path, capsys):
    cfg = write(tmp_path, VACUUM)
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli.main(["run", cfg, "--output", str(out)]) == 0
        outs.append((out / "summary.txt").read_bytes())
    assert outs[0] == outs[1]
    text = outs[0].decode()
    assert "verdict = stable" in text
    for line in (tmp_path / "a" / "kappa0_eigenvector.dat").read_text().splitlines()[:1]:
        assert line.startswith("# vmstab")


def test_bad_config_exits_2_without_artifacts(tmp_path, capsys):
    cfg = write(tmp_path, "[profile]\nname = maxwellian\n[numerics]\nn = many\n")
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--output", str(out)]) == 2
    err = capsys.readouterr().err
    assert ":4:" in err and "[numerics] n" in err
    assert not out.exists()


@pytest.mark.parametrize("body", ["[profile]\nname = nope\n", "[colour]\nx = 1\n",
                                  "[profile]\nname = maxwellian\n[workflow]\ntask = dance\n"])
def test_config_errors(tmp_path, body):
    assert cli.main(["validate", write(tmp_path, body)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_1(tmp_path, capsys):
    body = ("[profile]\nname = maxwellian\namp_plus = 60\namp_minus = 60\n"
            "[equilibrium]\nalpha = 1\nbeta = 1\n[numerics]\nn = 16\n")
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, body), "--output", str(out)]) == 1
    assert "numerical failure in vmstab.equilibrium" in capsys.readouterr().err
    assert not out.exists()


def test_validate_counts_trajectories(tmp_path, capsys):
    assert cli.main(["validate", write(tmp_path, MAXWELL % "verdict")]) == 0
    first = capsys.readouterr().out
    assert "trajectory_integrations = 0" in first
    assert cli.main(["validate", write(tmp_path, MAXWELL % "mode")]) == 0
    assert "trajectory_integrations = %d" % cli.MODE_TRAJECTORY_SAMPLES in capsys.readouterr().out


def test_small_lambda_min_warns(tmp_path, capsys):
    cfg = write(tmp_path, VACUUM + "lambda_min = 1e-4\n")
    assert cli.main(["validate", cfg]) == 0
    assert "extrapolation regime" in capsys.readouterr().err


def test_digest_ignores_output_section(tmp_path):
    a = cli.load_scenario(write(tmp_path, VACUUM, "a.ini"))
    b = cli.load_scenario(write(tmp_path, VACUUM + "[output]\ndir = elsewhere\n", "b.ini"))
    c = cli.load_scenario(write(tmp_path, VACUUM.replace("16", "32"), "c.ini"))
    assert a.digest == b.digest != c.digest


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env-out"))
    assert cli.main(["run", write(tmp_path, VACUUM)]) == 0
    assert (tmp_path / "env-out" / "summary.txt").exists()


def test_sweep_only_accepts_K(tmp_path):
    cfg = write(tmp_path, VACUUM)
    assert cli.main(["sweep", cfg, "--param", "alpha", "--values", "1", "2"]) == 2
    assert cli.main(["sweep", cfg, "--param", "K", "--values", "-1"]) == 2


def test_sweep_writes_table(tmp_path, capsys):
    cfg = write(tmp_path, "[profile]\nname = even_p\n[numerics]\nn = 16\n")
    out = tmp_path / "sw"
    assert cli.main(["sweep", cfg, "--param", "K", "--values", "1,16", "--output", str(out)]) == 0
    rows = [l for l in (out / "sweep.dat").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 2


def test_mode_run_writes_all_artifacts(tmp_path):
    body = ("[profile]\nname = even_p\nscaling = momentum\nK = 8\n[numerics]\nn = 32\n"
            "scan_points = 8\n[workflow]\ntask = mode\n")
    out = tmp_path / "mode"
    assert cli.main(["run", write(tmp_path, body), "--output", str(out)]) == 0
    names = set(os.listdir(out))
    assert {"summary.txt", "report.txt", "kappa_curve.dat", "mode.dat"} <= names
    assert "mode_accepted = true" in (out / "summary.txt").read_text()
