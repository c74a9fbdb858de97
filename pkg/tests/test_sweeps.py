import numpy as np
import pytest

from latchlab.filters import FilterMode
from latchlab.sweeps import SweepCell, SweepConfig, classify_consistent, emit_grid, run_cell, run_sweep

OFF, ON = FilterMode.OFF_POLICY, FilterMode.ON_POLICY


def small(**kw):
    base = dict(K=5, T=300, trials=20, eps_exp_grid=[0.1], eps_obs_grid=[0.0, 0.5], base_seed=3)
    base.update(kw)
    return SweepConfig(**base)


def test_classify_examples():
    assert classify_consistent(1.0, 0.05, 0.12)
    assert not classify_consistent(0.2, 0.05, 0.12)
    assert classify_consistent(0.83, 0.05, 0.12)
    assert not classify_consistent(0.8299, 0.05, 0.12)
    # the literal rule accepts near-random play when eps_exp is small
    assert classify_consistent(0.2, 0.05, 0.12, rule="literal")
    with pytest.raises(ValueError):
        classify_consistent(0.5, 0.1, 0.1, rule="other")


def test_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(trials=0)
    with pytest.raises(ValueError):
        SweepConfig(eps_obs_grid=[0.5, 0.1])
    with pytest.raises(ValueError):
        SweepConfig(margin=1.5)
    with pytest.raises(ValueError):
        SweepConfig.from_dict({"K": 5, "colour": "red"})
    cfg = SweepConfig.from_dict(small().to_dict())
    assert cfg == small()


def test_cell_examples():
    cfg = small()
    clean = run_cell(cfg, 0, 0, ON)
    assert clean.success_prob >= 0.85 and clean.consistent
    for mode in (ON, OFF):
        blind = run_cell(cfg, 1, 0, mode)
        assert not blind.consistent
        assert abs(blind.success_prob - 0.2) < 0.15


def test_one_cell_reproducible():
    cfg = small(eps_obs_grid=[0.3], trials=1)
    a, b = run_sweep(cfg), run_sweep(cfg)
    assert len(a) == 2 and a == b


def test_sweep_matches_single_cells():
    cfg = small(eps_exp_grid=[0.1, 0.3], eps_obs_grid=[0.2, 0.5, 0.8], trials=8, T=100)
    cells = run_sweep(cfg)
    modes = [OFF] * 6 + [ON] * 6
    expected = [run_cell(cfg, i, j, m) for m, (i, j) in zip(modes, [(i, j) for i in range(3) for j in range(2)] * 2)]
    assert cells == expected


def test_sweep_csv_deterministic():
    cfg = small(trials=5, T=80)
    a = emit_grid(run_sweep(cfg, modes=[ON]), "csv")
    b = emit_grid(run_sweep(cfg, modes=[ON]), "csv")
    assert a == b


def test_monotone_and_symmetry():
    cfg = SweepConfig(K=5, T=400, trials=60, eps_exp_grid=[0.2], eps_obs_grid=[0.0, 0.3, 0.5, 0.7], base_seed=1)
    cells = run_sweep(cfg, modes=[ON])
    by_obs = {c.eps_obs: c for c in cells}
    assert by_obs[0.0].success_prob >= by_obs[0.5].success_prob - 2 * by_obs[0.5].stderr
    lo, hi = by_obs[0.3], by_obs[0.7]
    assert abs(lo.success_prob - hi.success_prob) <= 3 * np.hypot(lo.stderr, hi.stderr) + 1e-9


def _cells(values, mode=ON):
    return [SweepCell(e, o, mode, p, classify_consistent(p, e), 0)
            for (o, e), p in values.items()]


def test_emit_csv_all_consistent():
    cells = _cells({(0.0, 0.1): 1.0, (0.0, 0.2): 0.95, (0.1, 0.1): 0.99, (0.1, 0.2): 0.9})
    lines = emit_grid(cells, "csv").decode().splitlines()
    assert lines[0] == "mode,eps_exp,eps_obs,success_prob,consistent,degenerate_flags"
    assert len(lines) == 5
    assert all(line.split(",")[4] == "true" for line in lines[1:])
    assert lines[1] == "on,0.1,0,1,true,0"


def test_emit_pgm():
    obs = [round(0.1 * i, 1) for i in range(10)]
    exps = [round(0.03 * j + 0.01, 2) for j in range(12)]
    cells = _cells({(o, e): 0.74 for o in obs for e in exps})
    pgm = emit_grid(cells, "pgm").decode()
    assert pgm.startswith("P2\n12 10\n255\n")
    rows = pgm.splitlines()[3:]
    assert len(rows) == 10 and rows[0].split() == ["189"] * 12


def test_emit_svg_and_errors():
    cells = _cells({(0.0, 0.1): 1.0, (0.5, 0.1): 0.2})
    svg = emit_grid(cells, "svg").decode()
    assert svg.count("<circle") == 2 and 'fill="green"' in svg and 'fill="red"' in svg
    with pytest.raises(ValueError):
        emit_grid(cells + _cells({(0.0, 0.1): 1.0}, OFF), "csv")
    with pytest.raises(ValueError):
        emit_grid(cells, "png")


def test_degenerate_episodes_counted():
    cfg = SweepConfig(K=3, T=30, trials=10, eps_exp_grid=[0.0], eps_obs_grid=[0.0], base_seed=0)
    # a wrong first pull with noiseless feedback contradicts the off-policy evidence
    assert run_cell(cfg, 0, 0, OFF).degenerate_flag_count > 0
    assert run_cell(cfg, 0, 0, ON).degenerate_flag_count == 0
