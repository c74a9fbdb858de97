import json

import numpy as np

from latchlab import theory
from latchlab.bandit import BanditParams
from latchlab.cli import SCHEMAS, bandit_run, parse_and_dispatch
from latchlab.core import dumps_cmdp, random_cmdp, random_expert


def run(argv, tmp_path, name="out"):
    out = tmp_path / name
    return parse_and_dispatch(argv + ["--out-dir", str(out)]), out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_cliff_prints_formula(tmp_path, capsys):
    code, out = run(["cliff", "--T", "3"], tmp_path)
    assert code == 0
    assert capsys.readouterr().out.splitlines()[0] == "cliff_gap_formula,4/9,0.444444"
    assert (out / "cliff_summary.csv").read_text() == (
        "T,formula_exact,formula,simulated_aig,simulated_aig_stderr,exact_aig\n3,4/9,0.444444,,,\n")


def test_cliff_simulation_series(tmp_path, capsys):
    code, out = run(["cliff", "--T", "40", "--simulate", "--trials", "500"], tmp_path)
    assert code == 0
    rows = (out / "cliff_eps_off.csv").read_text().splitlines()
    assert rows[0] == "t,eps_off,eps_off_stderr,eps_off_times_t_plus_1" and len(rows) == 41
    assert "simulated_aig," in capsys.readouterr().out


def test_unknown_flag_writes_nothing(tmp_path):
    code, out = run(["cliff", "--T", "3", "--colour", "red"], tmp_path)
    assert code == 2 and not out.exists()
    assert parse_and_dispatch(["no-such-command"]) == 2


def test_config_errors_name_the_line(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n "T": 3,\n "colour": 1\n}\n')
    code, out = run(["cliff", "--config", str(cfg)], tmp_path)
    assert code == 2 and not out.exists()
    assert "line 3" in capsys.readouterr().err
    cfg.write_text('{\n "T": "three"\n}\n')
    assert run(["cliff", "--config", str(cfg)], tmp_path)[0] == 2
    assert "line 2" in capsys.readouterr().err
    cfg.write_text('{\n "T": 3,\n}\n')
    assert run(["cliff", "--config", str(cfg)], tmp_path)[0] == 2
    assert "line 3" in capsys.readouterr().err


def test_flags_override_config_and_seed_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"T": 5, "trials": 50}))
    monkeypatch.setenv("LATCHLAB_SEED", "77")
    code, out = run(["cliff", "--config", str(cfg), "--T", "4"], tmp_path)
    assert code == 0
    m = manifest(out)
    assert m["config"]["T"] == 4 and m["config"]["trials"] == 50 and m["config"]["base_seed"] == 77
    code, out = run(["cliff", "--seed", "5"], tmp_path, "b")
    assert manifest(out)["config"]["base_seed"] == 5
    monkeypatch.setenv("LATCHLAB_SEED", "x")
    assert run(["cliff"], tmp_path, "c")[0] == 2


def test_sweep_artifacts_and_replay(tmp_path):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"K": 3, "T": 60, "trials": 4, "eps_exp_grid": [0.1, 0.3],
                               "eps_obs_grid": [0.0, 0.5], "base_seed": 9}))
    code, out = run(["sweep", "--config", str(cfg), "--svg"], tmp_path)
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"sweep_on.csv", "sweep_off.csv", "grid_on.pgm", "grid_off.pgm",
                     "grid_on.svg", "grid_off.svg", "manifest.json"}
    code, again = run(["sweep", "--config", str(out / "manifest.json")], tmp_path, "replay")
    assert code == 0
    for name in ("sweep_on.csv", "sweep_off.csv", "grid_on.pgm"):
        assert (out / name).read_bytes() == (again / name).read_bytes()
    assert manifest(out)["artifacts"] == manifest(again)["artifacts"]


def test_sweep_validation_exit_code(tmp_path):
    assert run(["sweep", "--mode", "sideways"], tmp_path)[0] == 2
    assert run(["sweep", "--margin", "3"], tmp_path)[0] == 2
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"subcommand": "cliff", "config": {"T": 3}}))
    assert run(["sweep", "--config", str(cfg)], tmp_path)[0] == 2


def _rows(text):
    return [line.split(",") for line in text.splitlines()[1:]]


def test_bandit_run_blind_feedback():
    traces = bandit_run(BanditParams(5, 0.5, 0.1, 300), 300, seed=2)
    on = np.array([[float(x) for x in r[1:6]] for r in _rows(traces["on"])])
    assert np.allclose(on, 0.2)
    # the off-policy filter reads its own pulls as expert evidence and latches
    off = _rows(traces["off"])
    assert len({r[-2] for r in off}) == 1 and float(off[-1][1 + int(off[-1][-2])]) > 0.99


def test_bandit_run_latching_and_identification():
    off = _rows(bandit_run(BanditParams(5, 0.4, 0.05, 2000), 2000, seed=0)["off"])
    assert len({r[-2] for r in off}) == 1
    on = [float(r[-1]) for r in _rows(bandit_run(BanditParams(5, 0.2, 0.05, 2000), 2000, seed=0)["on"])]
    assert max(on[:500]) > 1 - 0.05 - 0.05


def test_bandit_run_shares_exogenous_noise():
    traces = bandit_run(BanditParams(5, 0.3, 0.1, 50), 50, seed=4)
    # both learners start from the same prior, so the first pull is identical
    assert _rows(traces["off"])[0][6:9] == _rows(traces["on"])[0][6:9]


def test_verify_theorems(tmp_path, monkeypatch):
    code, out = run(["verify-theorems", "--instances", "10", "--seed", "1"], tmp_path)
    assert code == 0
    rows = _rows((out / "theorem1.csv").read_text())
    assert len(rows) == 10 and all(r[-1] == "true" for r in rows)
    monkeypatch.setattr(theory, "SLACK_TOL", -1.0)
    code, out = run(["verify-theorems", "--instances", "3"], tmp_path, "bad")
    assert code == 1 and (out / "theorem1.csv").exists()


def test_moment_game_from_files(tmp_path, capsys):
    rng = np.random.default_rng(0)
    cmdp = random_cmdp(rng, 2, 2, 2, 2)
    ex = random_expert(rng, cmdp)
    (tmp_path / "m.json").write_text(dumps_cmdp(cmdp))
    (tmp_path / "e.json").write_text(json.dumps({"probs": ex.probs.tolist()}))
    code, out = run(["moment-game", "--cmdp", str(tmp_path / "m.json"), "--expert", str(tmp_path / "e.json"),
                     "--T", "2", "--iters", "300", "--variant", "on_q"], tmp_path)
    assert code == 0
    cert = json.loads(capsys.readouterr().out)
    assert {"duality_gap", "aig_bound", "measured_aig"} <= set(cert)
    assert cert == json.loads((out / "certificate.json").read_text())
    assert (out / "gap_trace.csv").read_text().startswith("iteration,duality_gap\n")
    (tmp_path / "bad.json").write_text('{"num_states": 2}')
    assert run(["moment-game", "--cmdp", str(tmp_path / "bad.json")], tmp_path, "x")[0] == 2
    assert run(["moment-game", "--variant", "off_q"], tmp_path, "y")[0] == 2


def test_realizability_csv(tmp_path):
    code, out = run(["realizability", "--horizons", "2,3", "--iters", "200"], tmp_path)
    assert code == 0
    rows = _rows((out / "realizability.csv").read_text())
    assert [r[0] for r in rows] == ["2", "3"]


def test_nothing_written_outside_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out = run(["cliff", "--T", "5"], tmp_path, "only")
    assert code == 0
    assert {p.name for p in tmp_path.iterdir()} == {"only"}


def test_schema_defaults_are_typed():
    for schema in SCHEMAS.values():
        for kind, default, help_text in schema.values():
            assert kind in {"int", "float", "bool", "str", "seq"} and help_text
