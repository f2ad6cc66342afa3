import json
import math

import numpy as np
import pytest

from hcmnet.cli import main
from hcmnet.hcm import HCMSpec, fig3_model, hcm_to_dict, leaf, save_hcm
from hcmnet.network import identity_block, save_network


def run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture
def poly_file(tmp_path):
    path = tmp_path / "poly.json"
    save_hcm(HCMSpec(d=1, level=1, root=leaf("polynomial", [1.0, 2], [1])), path)
    return str(path)


def test_hcm_validate_ok_and_bad(tmp_path, capsys):
    good = tmp_path / "fig3.json"
    save_hcm(fig3_model(), good)
    code, out = run(capsys, "hcm", "validate", str(good))
    assert code == 0 and out["valid"]
    obj = hcm_to_dict(fig3_model())
    obj["d"] = 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    code, out = run(capsys, "hcm", "validate", str(bad))
    assert code == 1 and not out["valid"]
    junk = tmp_path / "junk.json"
    junk.write_text("{}")
    code, out = run(capsys, "hcm", "validate", str(junk))
    assert code == 1 and out["errors"][0]["code"] == "parse"


def test_net_eval(tmp_path, capsys):
    path = tmp_path / "w.json"
    save_network(identity_block(100.0), path)
    code, out = run(capsys, "net", "eval", str(path), "--x", "0.5")
    assert code == 0 and out["outputs"][0] == pytest.approx(0.5, abs=2e-3)
    csv = tmp_path / "x.csv"
    np.savetxt(csv, np.array([[0.0], [3.0]]), delimiter=",")
    code, out = run(capsys, "net", "eval", str(path), "--input", str(csv), "--beta", "1")
    assert out["outputs"][0] == 0.0 and out["outputs"][1] == 1.0


def test_approx_plan(poly_file, capsys):
    code, out = run(capsys, "approx", "plan", poly_file, "--M", "2")
    assert code == 0 and out["schedule"] is None and out["plan"]["r"] == 232
    code, out = run(capsys, "approx", "plan", poly_file, "--n", "1000", "--width-scale", "0.01")
    assert out["schedule"]["n"] == 1000 and out["plan"]["L"] == out["schedule"]["L_n"]


def test_approx_check_and_assemble(poly_file, tmp_path, capsys):
    code, out = run(capsys, "approx", "check", poly_file, "--M", "1", "--width-scale", "0.02",
                    "--epochs", "100", "--points", "500")
    assert code == 0 and out["check"]["passed"] and out["check"]["measured_sup_error"] <= out["check"]["propagation_bound"]
    target = tmp_path / "net.json"
    code, out = run(capsys, "approx", "assemble", poly_file, "--M", "1", "--width-scale", "0.02",
                    "--epochs", "50", "--out", str(target))
    assert code == 0 and target.exists() and out["network"] == str(target)


def test_cover_verb(capsys):
    code, out = run(capsys, "cover", "--epsilon", "0.5", "--members", "500")
    assert code == 0 and out["enumerated_count"] == 729 and out["verify_pass_rate"] == 1.0
    assert math.exp(out["log_bound"]) >= 729


def test_cover_refusal(capsys):
    code, out = run(capsys, "cover", "--epsilon", "0.01", "--r", "2", "--budget", "100")
    assert code == 2 and out["refused"] and out["required_count"] > 100


def test_cover_reads_config(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epsilon": 1.5, "members": 50}))
    code, out = run(capsys, "--config", str(conf), "cover")
    assert code == 0 and out["enumerated_count"] == 9 <= math.exp(out["log_bound"])


def test_cover_vacuous_bound_fails(capsys):
    # for epsilon above the diameter the closed form drops below one element
    code, out = run(capsys, "cover", "--epsilon", "100", "--members", "20")
    assert code == 1 and out["enumerated_count"] == 1 and out["log_bound"] < 0


def test_bound_verb(capsys):
    code, out = run(capsys, "bound", "--n", "1000", "--log-cover", "0")
    assert code == 0 and out["bound"] == pytest.approx(math.log(1000) ** 2 / 1000)
    code, out = run(capsys, "bound", "--pset", "3,1;2,4")
    assert out["symbolic_exponent"] == "-1/2" and out["log_power"] == "3"
    assert out["numeric_exponent"] == pytest.approx(-0.5, abs=1e-9)


def test_rate_verb(tmp_path, capsys):
    conf = tmp_path / "rate.json"
    conf.write_text(json.dumps({
        "hcm": hcm_to_dict(HCMSpec(d=1, level=1, root=leaf("polynomial", [1.0, 2], [1]))),
        "n_grid": [40, 80, 160], "replications": 1, "mc_points": 500,
        "train": {"epochs": 30, "restarts": 1}, "width_scale": 0.01}))
    code, out = run(capsys, "rate", "--config", str(conf), "--seed", "3", "--out", str(tmp_path / "o"))
    assert code == 0 and out["predicted_exponent"] == pytest.approx(-0.8)
    assert (tmp_path / "o" / "rate.csv").exists()
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]["seed"] == 3


def test_global_flags_after_verb(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epsilon": 1.5, "members": 20}))
    code, out = run(capsys, "cover", "--config", str(conf), "--seed", "4")
    assert code == 0 and out["members"] == 20
