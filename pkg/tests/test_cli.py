import json
import os
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from scaledmmd import cli, dynamics, estimators as est
from scaledmmd.errors import NumericalError
from scaledmmd.kernels import Gaussian

DATA = Path(__file__).parent / "data"
DOCS = Path(__file__).parents[1] / "docs" / "formats.md"
E = np.exp(-0.5)


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_csv(path, rows):
    np.savetxt(path, np.asarray(rows, dtype=float).reshape(len(rows), -1), delimiter=",")
    return path


@pytest.fixture
def point_masses(tmp_path):
    return write_csv(tmp_path / "x.csv", [0.0] * 8), write_csv(tmp_path / "y.csv", [1.0] * 8)


# estimate ------------------------------------------------------------------------------

def test_estimate_examples(point_masses, capsys):
    x, y = point_masses
    code, out, _ = run(["estimate", "--x", x, "--y", x, "--method", "mmd2_biased"], capsys)
    assert code == 0 and json.loads(out)["value"] == 0.0
    code, out, _ = run(["estimate", "--x", x, "--y", y, "--method", "mmd2_biased"], capsys)
    assert np.isclose(json.loads(out)["value"], 2 * (1 - E), rtol=1e-14)
    code, out, _ = run(["estimate", "--x", x, "--y", y, "--method", "smmd", "--lam", 1], capsys)
    doc = json.loads(out)
    assert np.isclose(doc["value"] ** 2, 2 * (1 - E) / 3, rtol=1e-12)
    assert doc["diagnostics"]["sigma"] > 0


def test_estimate_kernel_and_file_output(point_masses, tmp_path, capsys):
    x, y = point_masses
    kfile = tmp_path / "k.json"
    kfile.write_text(json.dumps({"type": "gaussian", "bandwidth": 2.0}))
    out = tmp_path / "sub" / "r.json"
    code, _, _ = run(["estimate", "--x", x, "--y", y, "--kernel", kfile, "--method", "mmd",
                      "--out", out], capsys)
    assert code == 0
    assert np.isclose(json.loads(out.read_text())["value"], np.sqrt(2 * (1 - np.exp(-1 / 8))))


def test_estimate_input_errors(point_masses, tmp_path, capsys):
    x, _ = point_masses
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\nfoo,3\n")
    assert run(["estimate", "--x", bad, "--y", x], capsys)[0] == cli.EXIT_INPUT
    assert run(["estimate", "--x", tmp_path / "missing.csv", "--y", x], capsys)[0] == cli.EXIT_INPUT
    two_d = write_csv(tmp_path / "z.csv", [[0, 0], [1, 1]])
    code, _, err = run(["estimate", "--x", two_d, "--y", x], capsys)
    assert code == cli.EXIT_INPUT and "dimension" in err
    code, _, _ = run(["estimate", "--x", x, "--y", x, "--kernel", '{"type": "laplace"}'], capsys)
    assert code == cli.EXIT_INPUT
    with pytest.raises(SystemExit) as exc:
        cli.main(["estimate", "--x", str(x), "--y", str(x), "--seed", "-1"])
    assert exc.value.code == 2


def test_estimate_numerical_error(point_masses, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("system is not positive definite", {"size": np.int64(4)})

    monkeypatch.setattr(est, "estimate", boom)
    x, y = point_masses
    code, _, err = run(["estimate", "--x", x, "--y", y], capsys)
    assert code == cli.EXIT_NUMERICAL
    doc = json.loads(err)
    assert doc["diagnostics"] == {"size": 4} and "positive definite" in doc["error"]


def test_grid_parsing():
    assert cli.parse_grid("1,2,3").tolist() == [1, 2, 3]
    assert np.allclose(cli.parse_grid("-1:1:5"), [-1, -0.5, 0, 0.5, 1])
    assert np.allclose(cli.parse_grid("log:0.01:1:3"), [0.01, 0.1, 1])
    for bad in ("", "1:2", "log:0:1:3", "a,b", "0:1:0"):
        with pytest.raises(Exception):
            cli.parse_grid(bad)


# field ---------------------------------------------------------------------------------

def test_field_golden(tmp_path, capsys):
    out = tmp_path / "f.csv"
    assert run(["field", "--variant", "MMD", "--seed", 0, "--out", out], capsys)[0] == 0
    assert out.read_bytes() == (DATA / "field_mmd_seed0.csv").read_bytes()


def test_field_trajectories(tmp_path, capsys):
    out = tmp_path / "f.csv"
    code, _, _ = run(["field", "--thetas", "1,2", "--inv-psis", "1", "--trajectories",
                      "--steps", 5, "--out", out], capsys)
    assert code == 0
    for name in dynamics.FIXTURE_INITS:
        lines = (tmp_path / f"f_traj_{name}.csv").read_text().splitlines()
        assert lines[0] == "step,theta,psi,inv_psi" and len(lines) == 7


# isolines ------------------------------------------------------------------------------

def test_isolines_minimal_cell():
    means, stds = [-0.5, 0.0, 0.5], [0.03, 0.1, 0.3]
    rows = cli.isolines(means, stds, "mmd", n=512, seed=1)
    D = np.array([r[2] for r in rows]).reshape(3, 3)      # (std, mean)
    assert D[1, 1] == D[1].min() and D[1, 1] == D[:, 1].min()
    assert [r[:2] for r in rows[:3]] == [(-0.5, 0.03), (0.0, 0.03), (0.5, 0.03)]
    assert all(np.isclose(np.log(r[2]), r[3]) for r in rows)


@pytest.mark.parametrize("distance", ["gcmmd", "opt-gcmmd"])
def test_isolines_gradient_constrained_variants(distance):
    rows = cli.isolines([0.0, 1.0], [0.1], distance, n=64, n_mu=16, psi_grid=[0.5, 1, 2], seed=2)
    assert rows[0][2] < rows[1][2] and all(np.isfinite(r[2]) for r in rows)


def test_isolines_opt_smmd_monotone_in_mean():
    vals = np.array([[r[2] for r in cli.isolines([0.0, 0.5, 1.0], [0.1], "opt-smmd", n=256,
                                                  seed=s)] for s in range(10)])
    mean, tol = vals.mean(0), 2 * vals.std(0).max()
    assert mean[0] <= mean[1] + tol and mean[1] <= mean[2] + tol
    assert mean[0] < mean[2]


def gauss_kernel_mean(m1, s1, m2, s2, bw):
    v = bw**2 + s1**2 + s2**2
    return bw / np.sqrt(v) * np.exp(-((m1 - m2) ** 2) / (2 * v))


def test_isolines_wide_kernel_matches_analytic():
    bw, P, n = 10.0, cli.P_STD, 1024
    means, stds = np.linspace(-1, 1, 5), [0.01, 0.1, 1.0]
    rows = cli.isolines(means, stds, "mmd", bandwidth=bw, n=n, seed=3)
    cross = []
    for m, s, D, _ in rows:
        kpp, kqq = gauss_kernel_mean(0, P, 0, P, bw), gauss_kernel_mean(m, s, m, s, bw)
        ref = kpp + kqq - 2 * gauss_kernel_mean(0, P, m, s, bw)
        # the V-statistic carries the diagonal terms; the error scale is that of the
        # mean-difference term, which dominates for a wide kernel
        bias = (2 - kpp - kqq) / n
        se = (2 * abs(m) * np.sqrt((P**2 + s**2) / n) + (P**2 + s**2) / n) / bw**2
        assert abs(D**2 - ref - bias) <= 6 * se, (m, s)
        cross.append(gauss_kernel_mean(0, P, m, s, bw))
    # the cross kernel mean barely moves across the grid
    assert max(cross) / min(cross) < 1.02


def test_isolines_cli_deterministic(tmp_path, capsys):
    argv = ["isolines", "--means=-0.5:0.5:3", "--stds", "0.1,0.2", "--n", 64, "--seed", 5]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(argv + ["--out", a], capsys)
    run(argv + ["--out", b], capsys)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == ",".join(cli.ISOLINE_COLUMNS) and len(lines) == 7


# critic field --------------------------------------------------------------------------

def test_critic_field_zero_when_equal(rng):
    X = rng.normal(size=(30, 2))
    rows = cli.critic_field(Gaussian(1.0), X, X.copy(), [-1, 0, 1], [0, 1])
    assert max(abs(r[5]) for r in rows) < 1e-6
    assert all(r[6] == 0 and r[7] == 0 for r in rows)


def test_critic_field_antisymmetric(rng):
    X, Y = rng.normal(size=(30, 2)), rng.normal(size=(20, 2)) * 0.5 + [3, 0]
    xs, ys = np.linspace(-2, 4, 7), np.linspace(-2, 2, 5)
    a = np.array(cli.critic_field(Gaussian(1.0), X, Y, xs, ys))
    b = np.array(cli.critic_field(Gaussian(1.0), Y, X, xs, ys))
    assert np.allclose(a[:, :2], b[:, :2])
    assert np.allclose(a[:, 2:5], -b[:, 2:5], atol=1e-12)
    assert np.allclose(a[:, 5], b[:, 5], atol=1e-12)


def test_critic_field_flat_where_p_is_dense():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(128, 2))
    Y = np.array([4.0, 0.0]) + 0.5 * rng.normal(size=(128, 2))
    k = Gaussian(1.0)
    xs, ys = np.linspace(-3, 7, 21), np.linspace(-4, 4, 17)
    rows = np.array(cli.critic_field(k, X, Y, xs, ys))
    Xmu = np.vstack([X, Y])
    _, wit = est.gcmmd2(k, X, Y, Xmu, 1.0)
    mu_mean = np.linalg.norm(wit.gradient(Xmu), axis=1).mean()
    dense = np.hypot(rows[:, 0], rows[:, 1]) <= 1.0
    assert dense.sum() >= 5
    assert rows[dense, 5].max() <= 3 * mu_mean


def test_critic_field_cli(tmp_path, capsys):
    argv = ["critic-field", "--n", 16, "--xs", "0,1", "--ys=-1,1", "--seed", 9]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(argv + ["--out", a], capsys)[0] == 0
    run(argv + ["--out", b], capsys)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == ",".join(cli.CRITIC_FIELD_COLUMNS) and len(lines) == 5
    assert lines[1].split(",")[:2] == ["0.0", "-1.0"] and lines[2].split(",")[:2] == ["1.0", "-1.0"]
    x = write_csv(tmp_path / "x.csv", [[0, 0]])
    assert run(["critic-field", "--x", x], capsys)[0] == cli.EXIT_INPUT


# train and selftest --------------------------------------------------------------------

def test_train_zero_steps(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(["train", "--gen-steps", 0, "--seed", 7, "--out-dir", out], capsys)
    assert code == 0
    assert (out / "steps.csv").read_text() == "step,gen_loss,critic_loss,grad_sq,scale_factor\n"
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["gen_steps"] == 0 and cfg["seed"] == 7
    assert json.loads((out / "history.json").read_text())["gen_loss"] == []
    assert np.isfinite(json.loads((out / "eval.json").read_text())["heldout_mmd2_unbiased"])


def test_train_short_run_deterministic(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"gen_widths": [2, 8, 2], "critic_widths": [2, 8, 1],
                                "critic_steps": 1, "log_every": 1, "snapshot_every": 2}))
    argv = ["train", "--config", conf, "--gen-steps", 2, "--batch-size", 16, "--loss", "SWGAN"]
    run(argv + ["--out-dir", tmp_path / "a"], capsys)
    run(argv + ["--out-dir", tmp_path / "b"], capsys)
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["conditions.csv", "config.json", "critic.json", "eval.json", "generator.json",
                     "history.json", "snapshot_2.json", "steps.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["loss"] == "SWGAN"


def test_train_bad_config(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"widths": 3}))
    assert run(["train", "--config", conf, "--out-dir", tmp_path], capsys)[0] == cli.EXIT_INPUT
    conf.write_text("{")
    assert run(["train", "--config", conf, "--out-dir", tmp_path], capsys)[0] == cli.EXIT_INPUT


def test_selftest_passes(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == 0 and "13/13 checks passed" in out


# schema and backend selection ----------------------------------------------------------

def _doc_section(title):
    text = DOCS.read_text()
    m = re.search(rf"^## `{re.escape(title)}`\n(.*?)(?=^## )", text, re.S | re.M)
    return m.group(1)


def _table_columns(section):
    cols = []
    for line in section.splitlines():
        m = re.match(r"\|\s*(`[^|]*`)\s*\|", line)
        if m:
            cols += re.findall(r"`([^`]+)`", m.group(1))
    return cols


def test_documented_schemas_match():
    assert _table_columns(_doc_section("field")) == list(dynamics.VectorFieldGrid.COLUMNS)
    assert _table_columns(_doc_section("critic-field")) == list(cli.CRITIC_FIELD_COLUMNS)
    assert f"`{','.join(cli.ISOLINE_COLUMNS)}`" in _doc_section("isolines")
    assert f"`{','.join(dynamics.History.STEP_COLUMNS)}`" in _doc_section("train")


def test_pure_python_switch():
    env = dict(os.environ, SCALEDMMD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import scaledmmd; print(scaledmmd.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "scaledmmd", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "selftest" in out.stdout
