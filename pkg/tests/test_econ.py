import math

import pytest

from rational_anon.econ import (
    ConfigError,
    SimConfig,
    budget_separation_holds,
    implicit_budget_interval,
    load_sim_configs,
    series_csv_rows,
    simulate,
    sweep,
    sweep_csv_rows,
)

BASE = SimConfig()  # 5 genuine, 50 ghosts, γ=0.1, ξ=0.001, ε=0.02, p=0.9, T=10, seed 7


def exhaustion_step(cfg):
    return math.ceil(cfg.n_genuine / cfg.leaks_per_step)


def test_greedy_mrs_climbs_once_genuine_leaks_run_out():
    res = simulate(BASE)
    series = res.greedy.cumulative_mrs
    t0 = exhaustion_step(BASE)
    tail = series[t0 - 1:]
    assert all(b > a for a, b in zip(tail, tail[1:]))
    assert res.greedy.stop_step == BASE.T
    assert series[-1] >= 2 * res.arbitrated.final_cumulative_mrs
    assert series[-1] == pytest.approx(0.7767, abs=1e-4)
    assert res.arbitrated.final_cumulative_mrs == pytest.approx(0.2, abs=1e-12)


def test_ghosts_only_perfect_arbitrator():
    cfg = SimConfig(n_genuine=0, arbitrator_accuracy=1.0)
    res = simulate(cfg)
    assert res.arbitrated.stop_step == 1
    assert res.arbitrated.total_cost == 0.0
    assert res.greedy.total_cost == cfg.epsilon * cfg.leaks_per_step * cfg.T


def test_perfect_arbitrator_edits_every_genuine_leak_then_stops():
    res = simulate(SimConfig(n_genuine=4, arbitrator_accuracy=1.0))
    assert res.arbitrated.executed_count == 4
    assert res.arbitrated.stop_step == 3
    assert all(s.executed_ghost == 0 for s in res.arbitrated.steps)
    assert budget_separation_holds(res)


def test_cumulative_series_is_padded_to_horizon():
    res = simulate(BASE)
    for run in (res.greedy, res.arbitrated):
        assert len(run.cumulative_mrs) == BASE.T
        assert run.cumulative_mrs[len(run.steps) - 1:] == (run.final_cumulative_mrs,) * (BASE.T - len(run.steps) + 1)


def test_budget_interval():
    assert implicit_budget_interval(BASE) == pytest.approx((0.2, 20.0))
    assert implicit_budget_interval(SimConfig(xi=0.0))[1] == math.inf


def test_determinism_and_seed_sensitivity():
    assert simulate(BASE) == simulate(BASE)
    shuffled = [simulate(SimConfig(shuffle=True, seed=s)).greedy.steps for s in range(5)]
    assert len({tuple(x) for x in shuffled}) > 1


def test_default_sweep():
    configs = load_sim_configs()
    assert [c.arbitrator_accuracy for c in configs] == [1.0, 0.9, 0.7]
    rows = sweep(configs)
    assert [r.arbitrated_stop for r in rows] == [4, 4, 4]
    assert all(r.greedy_final_mrs > r.arbitrated_final_mrs for r in rows)
    # more accurate arbitration never costs more here
    mrs = [r.arbitrated_final_mrs for r in rows]
    assert mrs == sorted(mrs)
    table = sweep_csv_rows(rows)
    assert len(table) == 4 and table[0][0] == "config"
    series = series_csv_rows([simulate(c) for c in configs])
    assert len(series) == 1 + 3 * 2 * BASE.T


def test_sweep_needs_configs():
    with pytest.raises(ValueError):
        sweep([])


@pytest.mark.parametrize(
    "bad",
    [
        {"xi": 0.1, "gamma": 0.1},
        {"xi": 0.2},
        {"epsilon": 0.0},
        {"arbitrator_accuracy": 0.3},
        {"T": 0},
        {"leaks_per_step": 0},
        {"n_ghost": -1},
        {"colour": "red"},
    ],
)
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        SimConfig.from_dict(bad)


def test_sim_config_file(tmp_path):
    path = tmp_path / "sim.toml"
    path.write_text("[base]\nT = 4\n[sweep]\nseed = [1, 2]\nleaks_per_step = [1, 3]\n")
    configs = load_sim_configs(path)
    assert [(c.seed, c.leaks_per_step) for c in configs] == [(1, 1), (1, 3), (2, 1), (2, 3)]
    assert all(c.T == 4 for c in configs)
    path.write_text("[base]\nxi = 0.5\n")
    with pytest.raises(ConfigError):
        load_sim_configs(path)
    with pytest.raises(ConfigError):
        load_sim_configs(tmp_path / "missing.toml")
