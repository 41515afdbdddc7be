import json
import subprocess
import sys

import pytest

from freeconv import cli
from freeconv.errors import ConvergenceError

SC_BERN = {
    "mu": {"family": "semicircle", "variance": 0.25},
    "nu": {"family": "bernoulli_symmetric"},
    "spikes": [[3, 1]],
    "window": [-5, 5],
    "grid": [-2.5, 2.5, 51],
    "simulation": {"N": 300, "trials": 2, "epsilon": 0.1, "eta": 0.1, "seed": 4},
}
DELTA0 = {"family": "point_mass", "a": 0}
SC1 = {"family": "semicircle", "variance": 1.0}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, cfg, *args):
    path = write_config(tmp_path, cfg)
    return cli.main([args[0], path, "--out", str(tmp_path / "out"), *args[1:]])


def body(path):
    """CSV rows after the hash comment and header."""
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    return lines[2:]


class TestTransform:
    def test_point_mass_at_i(self, tmp_path, capsys):
        assert run(tmp_path, {"mu": DELTA0, "nu": DELTA0}, "transform", "--which", "G", "--point", "0+1j") == 0
        assert capsys.readouterr().out.splitlines()[-1] == "0,1,0,-1"

    def test_h_bernoulli(self, tmp_path):
        cfg = {"mu": {"family": "bernoulli_symmetric"}, "nu": DELTA0}
        assert run(tmp_path, cfg, "transform", "--which", "h", "--point", "2") == 0
        assert body(tmp_path / "out" / "transform_h_mu.csv") == ["2,0,-0.5,0"]

    def test_r_semicircle(self, tmp_path):
        cfg = {"mu": DELTA0, "nu": SC1}
        assert run(tmp_path, cfg, "transform", "--which", "R", "--measure", "nu", "--point", "0.1") == 0
        assert body(tmp_path / "out" / "transform_R_nu.csv") == ["0.1,0,0.1,0"]

    def test_domain_error(self, tmp_path, capsys):
        cfg = {"mu": SC1, "nu": SC1}
        assert run(tmp_path, cfg, "transform", "--which", "G", "--point", "0.5") == 2
        assert "0.5" in capsys.readouterr().err


class TestConvolve:
    def test_point_masses(self, tmp_path):
        assert run(tmp_path, {"mu": DELTA0, "nu": DELTA0}, "convolve") == 0
        assert body(tmp_path / "out" / "support.csv") == ["0,0"]

    def test_semicircles(self, tmp_path):
        assert run(tmp_path, {"mu": SC1, "nu": SC1}, "convolve") == 0
        (row,) = body(tmp_path / "out" / "support.csv")
        lo, hi = map(float, row.split(","))
        assert lo == pytest.approx(-2.8284, abs=1e-3) and hi == pytest.approx(2.8284, abs=1e-3)
        assert len(body(tmp_path / "out" / "density.csv")) == 201

    def test_semicircle_bernoulli_gap(self, tmp_path):
        assert run(tmp_path, SC_BERN, "convolve") == 0
        rows = [tuple(map(float, r.split(","))) for r in body(tmp_path / "out" / "support.csv")]
        assert len(rows) == 2 and rows[0][1] < 0 < rows[1][0]


class TestOutliers:
    def test_semicircle_bernoulli(self, tmp_path):
        assert run(tmp_path, SC_BERN, "outliers") == 0
        rows = body(tmp_path / "out" / "outliers.csv")
        rhos = [float(r.split(",")[0]) for r in rows]
        assert rhos == pytest.approx([-0.224353, 3.310140], abs=1e-6)

    def test_finite_rank(self, tmp_path):
        cfg = {"mu": DELTA0, "nu": SC1, "spikes": [[2, 1]]}
        assert run(tmp_path, cfg, "outliers") == 0
        rows = body(tmp_path / "out" / "outliers.csv")
        assert len(rows) == 1 and float(rows[0].split(",")[0]) == pytest.approx(2.5, abs=1e-10)

    def test_subthreshold(self, tmp_path):
        cfg = {"mu": DELTA0, "nu": SC1, "spikes": [[0.9, 1]]}
        assert run(tmp_path, cfg, "outliers") == 0
        assert body(tmp_path / "out" / "outliers.csv") == []

    def test_reproducible(self, tmp_path):
        run(tmp_path, SC_BERN, "outliers")
        first = (tmp_path / "out" / "outliers.csv").read_bytes()
        run(tmp_path, SC_BERN, "outliers")
        assert (tmp_path / "out" / "outliers.csv").read_bytes() == first


class TestSimulate:
    def test_verify_semicircle_bernoulli(self, tmp_path):
        assert run(tmp_path, SC_BERN, "verify") == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["pass_fraction"] == 1.0
        rows = body(tmp_path / "out" / "simulation.csv")
        assert len(rows) == 4 and all(r.endswith(",1,1") for r in rows)

    def test_no_spikes_pass(self, tmp_path):
        cfg = {**SC_BERN, "spikes": []}
        assert run(tmp_path, cfg, "verify") == 0

    def test_verification_failure(self, tmp_path):
        # finite-N outliers sit well outside windows this narrow and count as strays
        assert run(tmp_path, SC_BERN, "verify", "--epsilon", "1e-6") == 1
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["pass_fraction"] == 0.0 and len(summary["strays"]) == 4

    def test_simulate_reproducible(self, tmp_path):
        run(tmp_path, SC_BERN, "simulate")
        first = (tmp_path / "out" / "simulation.csv").read_bytes()
        run(tmp_path, SC_BERN, "simulate")
        assert (tmp_path / "out" / "simulation.csv").read_bytes() == first

    def test_flag_overrides(self, tmp_path):
        run(tmp_path, SC_BERN, "simulate", "--trials", "1", "--seed", "9")
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["trials"] == 1 and summary["seed"] == 9
        assert summary["config_hash"] != cli.RunConfig.from_dict(SC_BERN).digest()


class TestErrors:
    def test_missing_measure(self, tmp_path):
        assert run(tmp_path, {"mu": SC1}, "outliers") == 2

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["outliers", str(p)]) == 2

    def test_bad_grid(self, tmp_path):
        assert run(tmp_path, {**SC_BERN, "grid": [1, 0, 10]}, "convolve") == 2

    def test_epsilon_separation(self, tmp_path):
        assert run(tmp_path, SC_BERN, "simulate", "--epsilon", "0.5") == 2

    def test_numerical_failure(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise ConvergenceError("no convergence")

        monkeypatch.setattr(cli, "convolution_support", boom)
        assert run(tmp_path, SC_BERN, "convolve") == 3

    def test_usage(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["nonsense"])
        assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    path = write_config(tmp_path, {"mu": DELTA0, "nu": DELTA0})
    out = subprocess.run(
        [sys.executable, "-m", "freeconv.cli", "transform", path, "--which", "G", "--point", "1j", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0
    assert out.stdout.splitlines()[-1] == "0,1,0,-1"
