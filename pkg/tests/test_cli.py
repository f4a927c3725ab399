import csv
import io
import json

import numpy as np
import pytest

from batchei.cli import main
from batchei.gp import Design, fit


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    x = rng.random((15, 2))
    fit(Design(x, np.sin(5 * x[:, 0]) + x[:, 1])).save(root / "m.json")
    (root / "b.csv").write_text("x1,x2\n0.9,0.05\n0.5,0.9\n")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def strip_timings(text):
    obj = json.loads(text)
    obj.pop("timings", None)
    return obj


class TestCommands:
    def test_qei_eval_contract(self, capsys, files):
        code, out, _ = run(capsys, "qei-eval", "--model", files / "m.json", "--batch", files / "b.csv",
                           "--mode", "analytic")
        assert code == 0
        obj = json.loads(out)
        assert {"value", "calls", "error_bound"} <= set(obj)
        assert obj["value"] > 0 and obj["calls"] == {"2": 2, "1": 3}
        assert 0 < obj["error_bound"] < 1e-5

    def test_modes_agree(self, capsys, files):
        values = {}
        for mode in ("analytic", "tangent", "proxy"):
            code, out, _ = run(capsys, "qei-eval", "--model", files / "m.json",
                               "--batch", files / "b.csv", "--mode", mode)
            assert code == 0
            values[mode] = json.loads(out)["value"]
        assert values["tangent"] == pytest.approx(values["analytic"], rel=1e-6)

    def test_reproducible_outputs(self, capsys, files):
        argv = ("qei-grad", "--model", files / "m.json", "--batch", files / "b.csv", "--mode", "tangent")
        first, second = run(capsys, *argv)[1], run(capsys, *argv)[1]
        assert strip_timings(first) == strip_timings(second)
        argv = ("lhs", "--n", 6, "--d", 3, "--seed", 4)
        assert run(capsys, *argv)[1] == run(capsys, *argv)[1]

    def test_grad_csv(self, capsys, files):
        code, out, _ = run(capsys, "qei-grad", "--model", files / "m.json", "--batch", files / "b.csv",
                           "--format", "csv")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 2 and set(rows[0]) == {"x1", "x2"}

    def test_mvn_cdf_inline_matrix(self, capsys):
        code, out, _ = run(capsys, "mvn-cdf", "--x", "0,0", "--cov", "1,0.5;0.5,1", "--grad")
        obj = json.loads(out)
        assert code == 0 and obj["value"] == pytest.approx(1 / 3, abs=1e-12)
        assert obj["gradient"][0] == pytest.approx(obj["gradient"][1])

    def test_moments(self, capsys):
        code, out, _ = run(capsys, "moments", "--mean", "0", "--cov", "1", "--alpha", "2")
        assert code == 0 and json.loads(out)["value"] == pytest.approx(0.5, abs=1e-12)

    def test_maximize_writes_batch(self, capsys, files, tmp_path):
        code, out, _ = run(capsys, "maximize", "--model", files / "m.json", "--q", 2, "--starts", 2,
                           "--out", tmp_path)
        obj = json.loads(out)
        assert code == 0 and np.array(obj["batch"]).shape == (2, 2)
        assert obj["value"] >= max(obj["diagnostics"]["start_values"])
        assert (tmp_path / "batch.csv").exists()

    def test_bench_timing_csv(self, capsys, files):
        code, out, _ = run(capsys, "bench-timing", "--q", "2,3", "--modes", "all", "--batches", 1,
                           "--model", files / "m.json")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 2 * 3 * 2
        assert {r["mode"] for r in rows} == {"analytic", "tangent", "proxy"}

    def test_run_results_directory(self, capsys, tmp_path):
        out_dir = tmp_path / "res"
        code, out, _ = run(capsys, "run", "--problem", "borehole", "--q", 2, "--iters", 1,
                           "--strategy", "qei-proxy", "--seed", 7, "--n-init", 12, "--starts", 2,
                           "--out", out_dir)
        assert code == 0
        assert (out_dir / "qei-proxy_seed7.jsonl").exists() and (out_dir / "regret.csv").exists()


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["lhs", "--n", "4", "--d", "2", "--bogus"])
        assert exc.value.code == 64
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 64

    def test_contract_errors(self, capsys, files):
        assert run(capsys, "qei-eval", "--model", files / "m.json", "--batch", files / "b.csv",
                   "--alpha", 3)[0] == 2
        assert run(capsys, "qei-eval", "--model", files / "missing.json", "--batch", files / "b.csv")[0] == 2
        assert run(capsys, "qei-eval", "--model", files / "m.json", "--batch", "0.1,0.2,0.3")[0] == 2
        assert run(capsys, "run", "--problem", "rosenbrock")[0] == 2

    def test_numerical_failure(self, capsys):
        code, _, err = run(capsys, "mvn-cdf", "--x", "0,0", "--cov", "1,2;2,1")
        assert code == 3 and "numerical" in err
