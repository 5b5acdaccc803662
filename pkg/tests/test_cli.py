import json
from pathlib import Path

import pytest

from nonconvavg.cli import EXIT_OK, EXIT_PARSE, EXIT_RUNTIME, EXIT_VALIDATION, main

from test_config import BASE


class Log:
    def __init__(self):
        self.lines = []

    def __call__(self, msg="", file=None):
        self.lines.append(str(msg))

    @property
    def text(self):
        return "\n".join(self.lines)


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(argv):
    log = Log()
    return main(argv, log=log), log


@pytest.fixture(scope="module")
def tiny_results(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write(d, BASE)
    outs = []
    for k in range(2):
        code, log = run(["run", cfg, "--out", str(d / f"r{k}"), "--threads", "1"])
        assert code == EXIT_OK, log.text
        outs.append((d / f"r{k}", log))
    return outs


def test_run_writes_results(tiny_results):
    out, log = tiny_results[0]
    for name in ("summary.json", "trajectories.csv", "predicted_variance.csv", "covariance_compare.csv", "ensemble_eps_5e-02.csv"):
        assert (out / name).exists(), name
    assert list((out / "coefficients").glob("*.csv"))
    assert "Var G(1): predicted 0.3333, empirical" in log.text
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scenario"] == "tiny" and summary["M"] == 20


def test_same_seed_gives_identical_csv(tiny_results):
    (a, _), (b, _) = tiny_results
    names = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert names == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_seed_override_changes_results(tmp_path, tiny_results):
    code, _ = run(["run", write(tmp_path, BASE), "--out", str(tmp_path / "s"), "--seed", "99", "--threads", "1"])
    assert code == EXIT_OK
    a = (tiny_results[0][0] / "trajectories.csv").read_bytes()
    assert (tmp_path / "s" / "trajectories.csv").read_bytes() != a


def test_missing_alpha_exit_2(tmp_path):
    code, log = run(["run", write(tmp_path, BASE.replace("alpha = [1, 2]", "")), "--out", str(tmp_path / "o")])
    assert code == EXIT_PARSE
    assert "cfg.toml:10:1" in log.text


def test_non_monotone_scale_exit_3(tmp_path):
    text = BASE.replace("alpha = [1, 2]", 'alpha = [1, 2]\nfast = [{ kind = "polynomial", coeffs = [0.0, 1.0, -3.0, 1.0] }]')
    text = text.replace('name = "product_linear"', 'name = "product_linear"\nparams = { b = 1.0 }')
    code, log = run(["validate", write(tmp_path, text)])
    assert code == EXIT_VALIDATION
    assert "growth condition" in log.text


def test_runtime_failure_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, log = run(["run", write(tmp_path, BASE), "--out", str(blocker / "sub"), "--threads", "1"])
    assert code == EXIT_RUNTIME


def test_validate_gallery():
    for name in ("canonical", "discrete_canonical", "superlinear_vanishing", "dyadic", "oscillator", "torus"):
        code, log = run(["validate", name])
        assert code == EXIT_OK, log.text


def test_list_scenarios():
    code, log = run(["list-scenarios"])
    assert code == EXIT_OK and len(log.lines) == 6


def test_report_single(tiny_results):
    code, log = run(["report", str(tiny_results[0][0])])
    assert code == EXIT_OK
    assert "Var G(1): predicted 0.3333" in log.text


def test_report_empty_dir_is_error(tmp_path):
    code, _ = run(["report", str(tmp_path)])
    assert code == EXIT_RUNTIME
    code, _ = run(["report"])
    assert code == EXIT_RUNTIME


def test_report_two_dirs_trend(tiny_results, tmp_path):
    (a, _), (b, _) = tiny_results
    code, log = run(["report", str(a), str(b), "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "tiny@r0" in log.text and "tiny@r1" in log.text
    header = (tmp_path / "trend.csv").read_text().splitlines()[0]
    assert header == "quantity,eps,tiny@r0,tiny@r1"


def test_oscillator_command(tmp_path):
    text = Path(__file__).parent.joinpath("..", "src", "nonconvavg", "scenarios", "oscillator.toml").read_text()
    text = text.replace("M = 400", "M = 10").replace("eps = [1e-2, 1e-3]", "eps = [0.1]")
    code, log = run(["oscillator", write(tmp_path, text), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK, log.text
    assert (tmp_path / "o" / "oscillator.csv").exists()
    bad = text.replace("lam = 1.0", "lam = -1.0")
    assert run(["oscillator", write(tmp_path, bad, "bad.toml"), "--out", str(tmp_path / "b")])[0] == EXIT_VALIDATION


def test_torus_command(tmp_path):
    text = 'name = "t"\nmode = "fully_coupled"\n[torus]\nfield = "default"\npoints = 8\n[grid]\neps = [0.1, 0.05]\n'
    code, log = run(["torus", write(tmp_path, text), "--out", str(tmp_path / "t")])
    assert code == EXIT_OK, log.text
    assert (tmp_path / "t" / "torus_errors.csv").read_text().startswith("eps,error")
    locked = text.replace('"default"', '"locked"')
    code, log = run(["torus", write(tmp_path, locked, "l.toml"), "--out", str(tmp_path / "l")])
    assert code == EXIT_OK and "stay constant along trajectories" in log.text


def test_wrong_mode_for_command(tmp_path):
    code, _ = run(["torus", write(tmp_path, BASE), "--out", str(tmp_path / "x")])
    assert code == EXIT_PARSE
