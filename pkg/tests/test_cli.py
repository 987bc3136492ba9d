import json
import os
import stat
from fractions import Fraction

import pytest

from pexcite import cli


def write_config(tmp_path, **data):
    data.setdefault("schema_version", 1)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


SQUARED_SINE = {
    "basis": {"exponents": [[2]]},
    "desired_state": {"m": 1, "sin": [["1"]]},
}


def test_expand_benchmark(capsys):
    assert cli.main(["expand"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3
    assert [line.split("(L, K) = ")[1] for line in out] == ["(0, 4)", "(0, 4)", "(0, 1)"]


def test_expand_linear_passthrough(tmp_path, capsys):
    cfg = write_config(tmp_path, basis={"exponents": [[1]]}, desired_state={"m": 1, "sin": [["1"]]})
    out_json = tmp_path / "expand.json"
    assert cli.main(["expand", "--config", cfg, "--json", str(out_json)]) == 0
    assert "(L, K) = (1, 0)" in capsys.readouterr().out
    data = json.loads(out_json.read_text())
    assert data["expanded"][0]["L"] == 1


def test_expand_dimension_mismatch(tmp_path, capsys):
    cfg = write_config(tmp_path, basis={"exponents": [[2, 0, 1]]})
    assert cli.main(["expand", "--config", cfg]) == 2
    assert "error:" in capsys.readouterr().err


def test_conditions_benchmark(tmp_path, capsys):
    out_json = tmp_path / "omega.json"
    assert cli.main(["conditions", "--json", str(out_json)]) == 0
    out = capsys.readouterr().out
    assert "count: 49 (reference value 49)" in out
    assert "w1 != 0" in out
    assert "exact (N_P = 1): false" in out
    data = json.loads(out_json.read_text())
    assert data["count"] == 49 and data["N_P"] == 16 and data["empty"] is False
    assert stat.S_IMODE(os.stat(out_json).st_mode) == 0o644


def test_conditions_exact_case(tmp_path, capsys):
    cfg = write_config(tmp_path, **SQUARED_SINE)
    assert cli.main(["conditions", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "count: 1\n" in out
    assert "w1 != 0" in out
    assert "exact (N_P = 1): true" in out


def test_conditions_empty_omega_exit_code(tmp_path, capsys):
    # x1 = cos w1, x2 = cos w1 + sin w2 with phi = [x1, x2] collapses Omega
    cfg = write_config(
        tmp_path,
        basis={"exponents": [[1, 0], [0, 1]]},
        desired_state={"m": 2, "sin": [["0", "0"], ["0", "1"]], "cos": [["1", "0"], ["1", "0"]]},
    )
    assert cli.main(["conditions", "--config", cfg]) == 3
    assert "Omega is empty" in capsys.readouterr().err


def test_check(capsys):
    assert cli.main(["check", "--omega", "1,2,3"]) == 0
    assert capsys.readouterr().out.strip() == "member"
    assert cli.main(["check", "--omega", "1/2,1,2"]) == 0
    assert capsys.readouterr().out.strip() == "member"
    assert cli.main(["check", "--omega", "0,2,3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("not member") and "w1 != 0" in out
    assert cli.main(["check", "--omega", "1,2"]) == 2
    assert cli.main(["check", "--omega", "1,x,3"]) == 2


def test_design(tmp_path):
    out_json = tmp_path / "plan.json"
    assert cli.main(["design", "--signal", "u11", "--json", str(out_json)]) == 0
    data = json.loads(out_json.read_text())
    cert = data["certificate"]
    assert cert["shape"] == [3, 8] and cert["rank"] == 3
    assert [Fraction(f) for f in cert["v_o_frequencies"]] == [1, 2, 3, 4]
    assert [Fraction(f) for f in data["plan"]["omega_c"]] == [1, 2, 3]
    assert cli.main(["design", "--omega", "1,1,3", "--nu", "1/4,1/4"]) == 2


def test_bad_config(tmp_path):
    assert cli.main(["conditions", "--config", write_config(tmp_path, schema_version=2)]) == 2
    assert cli.main(["conditions", "--config", write_config(tmp_path, colour="red")]) == 2
    assert cli.main(["simulate", "--config", write_config(tmp_path, sim={"dt": -1})]) == 2
    assert cli.main(["simulate", "--config", write_config(tmp_path, sim={"speed": 1})]) == 2
    assert cli.main(["conditions", "--config", str(tmp_path / "missing.json")]) == 2


def test_simulate_and_verify(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["simulate", "--signal", "u11", "--horizon", "20", "--out", str(out)])
    assert code == 3  # not converged within 20 s
    summary = json.loads((out / "summary_u11.json").read_text())
    assert summary["signal"] == "u11" and summary["status"] == "horizon"
    header = (out / "trace_u11.csv").read_text().splitlines()[0]
    assert header == "t,x1,x2,th1_1,th1_2,th1_3,th2_1,th2_2,th2_3,err1,err2,u1,u2,uhat1"
    capsys.readouterr()
    rep_json = tmp_path / "pe.json"
    lam = tmp_path / "lambda1.csv"
    code = cli.main(["verify", "--input", str(out / "sigma_u11.csv"), "--json", str(rep_json),
                     "--lambda-out", str(lam), "--every", "10"])
    assert code == 0
    rep = json.loads(rep_json.read_text())
    assert rep["pe"] is True and rep["min_lambda1"] >= 1e-4
    assert lam.read_text().startswith("t,lambda1\n")


def test_verify_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,s1\n0,1\n")
    assert cli.main(["verify", "--input", str(bad)]) == 2


def test_simulate_is_byte_deterministic(tmp_path):
    for run in ("a", "b"):
        cli.main(["simulate", "--signal", "noise", "--horizon", "10", "--seed", "3",
                  "--out", str(tmp_path / run)])
    for name in ("trace_noise.csv", "sigma_noise.csv", "sigma_raw_noise.csv", "summary_noise.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_reproduce_short_horizon(tmp_path, capsys):
    code = cli.main(["reproduce", "--out", str(tmp_path), "--horizon", "30"])
    assert code == 3  # nothing converges in 30 s
    data = json.loads((tmp_path / "summary.json").read_text())
    assert set(data["signals"]) == {"u11", "u12", "u13", "noise"}
    assert data["reference"]["reduction"] == pytest.approx(1 - 247 / 3392)
    for name in ("u11", "u12", "u13", "noise"):
        assert (tmp_path / f"error_{name}.csv").exists()
    assert "reduction" not in capsys.readouterr().out


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("expand", "conditions", "check", "design", "simulate", "verify", "reproduce"):
        assert cmd in out
