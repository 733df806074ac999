import json

import numpy as np
import pytest

from jqclf.cli import ConfigError, config_hash, load_config, main

OSC = {
    "dynamics": {"kind": "builtin", "name": "harmonic-oscillator"},
    "epsilon": 0.1,
    "simulation": {"x0": [3.0, -1.0], "T": 20.0},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def dat_rows(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_check_manipulator_passes(tmp_path):
    cfg = write_config(tmp_path, {"dynamics": {"kind": "builtin", "name": "two-link-manipulator"}, "D": "2*(s+2)", "weak_jq_l": 1})
    out = tmp_path / "out"
    assert main(["check", cfg, "--output", str(out)]) == 0
    for name in ("H1", "H2", "H3", "weak_jq"):
        cert = json.loads((out / f"{name}.json").read_text())
        assert cert["verdict"] == "pass-on-region"
        assert len(cert["config_hash"]) == 64


def test_check_zero_G_fails(tmp_path):
    cfg = write_config(tmp_path, {"dynamics": {"kind": "builtin", "name": "two-link-manipulator"}, "G": "0"})
    out = tmp_path / "out"
    assert main(["check", cfg, "--output", str(out)]) == 2
    cert = json.loads((out / "H2.json").read_text())
    assert cert["verdict"] == "fail" and cert["witness"]


def test_missing_V_names_the_key(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dynamics": {"kind": "affine", "f": ["x2", "-x1"], "g": [["0", "1"]]}, "G": ["0", "x1"]})
    assert main(["check", cfg]) == 1
    assert "'V'" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="V"):
        load_config({"dynamics": {"kind": "affine", "f": ["x2", "-x1"], "g": [["0", "1"]]}, "G": "0"})


def test_schema_errors_give_paths(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dynamics": {"kind": "builtin", "name": "two-link-manipulator"}, "epsilon": -1})
    assert main(["check", cfg]) == 1
    assert "epsilon" in capsys.readouterr().err
    bad_expr = write_config(tmp_path, {"dynamics": {"kind": "affine", "f": ["x2 +", "-x1"], "g": [["0", "1"]]}, "V": "x1^2", "G": "0"}, "b.json")
    assert main(["check", bad_expr]) == 1
    assert "dynamics/f/0" in capsys.readouterr().err
    assert main(["check", str(tmp_path / "absent.json")]) == 1


def test_synthesize_simulate_report(tmp_path):
    cfg = write_config(tmp_path, OSC)
    out = tmp_path / "out"
    assert main(["synthesize", cfg, "--output", str(out)]) == 0
    synth = json.loads((out / "synthesis.json").read_text())
    assert synth["verdict"] == "pass-on-region"
    xi = synth["envelopes"]["xi"]
    LgV_max = synth["envelopes"]["LgV_max"]
    assert max(np.asarray(xi["values"]) * np.asarray(LgV_max["values"])) <= 0.1
    # the oscillator is affine: the remainder term vanishes
    assert all(v == 0.0 for v in synth["envelopes"]["Omega"]["values"])
    assert main(["simulate", cfg, "--output", str(out)]) == 0
    summary = json.loads((out / "simulation.json").read_text())
    assert summary["sup_input_norm"] <= 0.1
    assert summary["iiss_bound"] == "not evaluated"
    assert main(["report", cfg, "--output", str(out)]) == 0
    assert len(dat_rows(out / "delta.dat")) == 64
    vs = np.array([[float(v) for v in ln.split()] for ln in dat_rows(out / "vsharp_vs_t.dat")])
    assert np.all(np.diff(vs[:, 1]) <= 1e-8)


def test_nonlinear_synthesis(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "dynamics": {"kind": "nonlinear", "F": ["x2", "-x1 - x2 + u1 + u1^2"], "m": 1},
            "V": "0.5*(x1^2 + x2^2)",
            "G": ["0", "x1"],
            "epsilon": 0.5,
        },
    )
    out = tmp_path / "out"
    assert main(["synthesize", cfg, "--output", str(out)]) == 0
    synth = json.loads((out / "synthesis.json").read_text())
    ids = {c["id"] for c in synth["constraint_report"]}
    assert {"remainder-gain", "nonlinear-decrease"} <= ids


def test_synthesize_refuses_infeasible(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dynamics": {"kind": "builtin", "name": "harmonic-oscillator"}, "G": "0"})
    assert main(["synthesize", cfg, "--output", str(tmp_path / "out")]) == 2
    assert "--force" in capsys.readouterr().err
    assert not (tmp_path / "out" / "synthesis.json").exists()
    assert main(["synthesize", cfg, "--output", str(tmp_path / "out"), "--force"]) == 2
    assert "synthesis aborted" in capsys.readouterr().err


def test_simulate_reference_and_equilibrium(tmp_path):
    cfg = write_config(
        tmp_path,
        {"dynamics": {"kind": "builtin", "name": "two-link-manipulator"}, "simulation": {"feedback": "reference", "x0": [0, 0, 0, 0], "T": 5.0}},
    )
    out = tmp_path / "out"
    assert main(["simulate", cfg, "--output", str(out)]) == 0
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,x3,x4,u1,u2,d1,d2,V,Vsharp"
    assert all(float(v) == 0.0 for ln in lines[1:] for v in ln.split(",")[1:])
    assert main(["simulate", cfg, "--output", str(out), "--x0", "3", "-2", "1.5", "-1", "--T", "200"]) == 0
    summary = json.loads((out / "simulation.json").read_text())
    assert summary["final_norm"] <= 1e-2
    assert summary["feedback"] == "reference"


def test_simulate_needs_synthesis(tmp_path, capsys):
    cfg = write_config(tmp_path, OSC)
    assert main(["simulate", cfg, "--output", str(tmp_path / "none")]) == 1
    assert "synthesize" in capsys.readouterr().err


def test_report_without_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path, OSC)
    assert main(["report", cfg, "--output", str(tmp_path / "empty")]) == 1
    err = capsys.readouterr().err
    assert "synthesis.json" in err and "trajectory.csv" in err


def test_stale_artifact_is_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, OSC)
    out = tmp_path / "out"
    assert main(["synthesize", cfg, "--output", str(out)]) == 0
    assert main(["simulate", cfg, "--output", str(out), "--epsilon", "0.05"]) == 1
    assert "different configuration" in capsys.readouterr().err


def test_iiss_command(tmp_path):
    cfg = write_config(
        tmp_path,
        {
            "dynamics": {"kind": "builtin", "name": "two-link-manipulator"},
            "D": "2*(s+2)",
            "iiss": {"x0": [3, -2, 1.5, -1], "T": 10.0, "disturbances": [{"kind": "constant", "value": [1, 1]}]},
        },
    )
    out = tmp_path / "out"
    assert main(["synthesize", cfg, "--output", str(out)]) == 0
    assert main(["iiss", cfg, "--output", str(out)]) == 0
    data = json.loads((out / "iiss.json").read_text())
    assert data["trajectory_bounds"][0]["certificate"]["verdict"] == "pass-on-region"
    no_D = write_config(tmp_path, {"dynamics": {"kind": "builtin", "name": "two-link-manipulator"}}, "nod.json")
    assert main(["iiss", no_D, "--output", str(out)]) == 1


def test_config_hash_ignores_workers_and_output():
    a = load_config(OSC)
    b = load_config({**OSC, "workers": 4, "output_dir": "elsewhere"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config({**OSC, "seed": 1}))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_outputs_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path, {**OSC, "D": "2*(s+2)"})
    trees = []
    for k, workers in enumerate(("1", "1", "3")):
        out = tmp_path / f"run{k}"
        for cmd in ("check", "synthesize", "simulate", "report"):
            assert main([cmd, cfg, "--output", str(out), "--workers", workers]) == 0
        trees.append(tree_bytes(out))
    assert trees[0] == trees[1] == trees[2]
    assert "trajectory.csv" in trees[0] and "synthesis.json" in trees[0]
