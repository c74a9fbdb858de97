import itertools

import numpy as np
import pytest

from latchlab.bandit import BanditParams, as_cmdp, expert_policy
from latchlab.core import History, TabularCMDP, build_tree, random_cmdp, random_expert, uniform_policy
from latchlab.momentgame import (
    ClassSpec,
    GameConfig,
    HistoryPolicyTable,
    MomentGame,
    best_response_moment,
    grid_minimax,
    observable_lift,
    payoff,
    realizability_probe,
    solve_game,
)
from latchlab.rng import RandomStream
from latchlab.theory import MomentFunction, lift


def instance(seed, S=2, A=2, C=2, T=3):
    rng = np.random.default_rng(seed)
    cmdp = random_cmdp(rng, S, A, C, T)
    return cmdp, random_expert(rng, cmdp)


def indicator_correct(K):
    vals = np.zeros((3, K, K))
    for c in range(K):
        vals[:, c, c] = 1.0
    return MomentFunction(vals, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        GameConfig(variant="off")
    with pytest.raises(ValueError):
        GameConfig(iterations=0)
    with pytest.raises(ValueError):
        GameConfig(step_size_schedule="constant")
    with pytest.raises(ValueError):
        ClassSpec(None)
    assert GameConfig("on_q").spec.timed and GameConfig().spec.timed


def test_uniform_learner_indicator_payoff():
    p = BanditParams(2, 0.2, 0.1, 4)
    cmdp, ex = as_cmdp(p, 4), expert_policy(p)
    got = payoff(uniform_policy(2), ex, indicator_correct(2), "reward", cmdp)
    assert got.exact
    assert abs(got.value - (1 / 2 - (1 - 0.1))) < 1e-12


def test_payoff_monte_carlo_fallback():
    p = BanditParams(2, 0.2, 0.1, 4)
    cmdp, ex = as_cmdp(p, 4), expert_policy(p)
    m = indicator_correct(2)
    exact = payoff(uniform_policy(2), ex, m, "reward", cmdp).value
    est = payoff(uniform_policy(2), ex, m, "reward", cmdp, budget=10, monte_carlo=1500, stream=RandomStream(4))
    assert not est.exact and est.stderr > 0
    assert abs(est.value - exact) <= 4 * est.stderr


def test_observable_lift_matches_context_free_posterior():
    cmdp, ex = instance(2)
    f = MomentFunction(np.random.default_rng(0).uniform(-1, 1, (2, 2, 2)), 1.0)
    a, b = observable_lift(f, cmdp, ex), lift(f, cmdp)
    for h in build_tree(cmdp).histories:
        for act in range(2):
            assert abs(a(h, act) - b(h, act)) < 1e-12


def test_best_response_matches_extreme_points():
    cmdp, ex = instance(5, T=2)
    policy = uniform_policy(2)
    for variant in ("reward", "on_q"):
        spec = ClassSpec(1.0, timed=False)
        moment, value = best_response_moment(policy, ex, variant, cmdp, class_spec=spec)
        game = MomentGame(cmdp, ex, variant, spec)
        probs = game.tree.policy_table(policy)
        brute = max(game.payoff(probs, game.box_moment(np.array(signs).reshape(2, 2, 2)))
                    for signs in itertools.product((-1.0, 1.0), repeat=8))
        assert abs(value - brute) < 1e-12
        assert abs(payoff(policy, ex, moment, variant, cmdp).value - value) < 1e-12


def test_finite_member_best_response_uses_negation():
    p = BanditParams(2, 0.2, 0.1, 3)
    cmdp, ex = as_cmdp(p, 3), expert_policy(p)
    spec = ClassSpec(None, lifted=False, members=(indicator_correct(2),))
    moment, value = best_response_moment(uniform_policy(2), ex, "reward", cmdp, class_spec=spec)
    assert abs(value - (0.9 - 0.5)) < 1e-12
    assert moment.values[0, 0, 0] == -1.0


def test_policy_table_lookup():
    cmdp, ex = instance(1, T=2)
    tree = build_tree(cmdp)
    table = HistoryPolicyTable(tree, np.full((tree.size, 2), 0.5))
    assert np.allclose(table(tree.histories[-1]), 0.5)
    with pytest.raises(KeyError):
        table(History((0, 0, 0), (1, 1)))
    with pytest.raises(ValueError):
        HistoryPolicyTable(tree, np.full((tree.size, 2), 0.7))


@pytest.mark.parametrize("variant", ["reward", "on_q"])
def test_solver_regret_and_gap(variant):
    cmdp, ex = instance(3)
    cert = solve_game(cmdp, ex, GameConfig(variant, horizon_T=3))
    # counterfactual regret within the exponential-weights bound at every node
    assert cert.max_regret_ratio <= 1.0
    br, lo = cert.best_response_payoffs
    assert br >= lo - 1e-12 and cert.duality_gap >= -1e-12
    assert cert.gap_trace[-1][1] < cert.gap_trace[0][1]
    assert cert.converged


@pytest.mark.parametrize("variant", ["reward", "on_q"])
def test_certified_aig_bound(variant):
    for seed in range(6):
        cmdp, ex = instance(10 + seed)
        cert = solve_game(cmdp, ex, GameConfig(variant, 3000, horizon_T=3))
        assert cert.measured_aig <= cert.aig_bound + 1e-9
        # the gap form needs a game value <= 0, which min_pi U(pi, f_bar) <= 0 certifies
        if cert.best_response_payoffs[1] <= 0:
            assert cert.measured_aig <= cert.aig_bound_from_gap + 1e-6


def test_single_context_is_realizable():
    rng = np.random.default_rng(7)
    cmdp = random_cmdp(rng, 2, 2, 1, 3)
    ex = random_expert(rng, cmdp)
    cert = solve_game(cmdp, ex, GameConfig("reward", 3000, horizon_T=3))
    assert cert.residual == 0.0 or abs(cert.residual) < 1e-12
    assert cert.best_response_payoffs[0] < 0.02
    assert abs(cert.measured_aig) < 0.02
    report = realizability_probe(cmdp, ex, horizons=(2, 3))
    # the minimax error is exactly zero; the bracket closes like 1/sqrt(iterations)
    assert max(report.lower_bound) <= 1e-12
    assert max(report.minimax_error) < 0.03


def test_grid_oracle_agrees_with_game():
    p = BanditParams(2, 0.2, 0.1, 2)
    cmdp, ex = as_cmdp(p, 2), expert_policy(p)
    spec = ClassSpec(1.0, timed=True)
    value, root, table = grid_minimax(cmdp, ex, "reward", spec, resolution=41)
    cert = solve_game(cmdp, ex, GameConfig("reward", 4000, horizon_T=2, class_spec=spec))
    assert abs(cert.best_response_payoffs[0] - value) < 0.03
    assert np.allclose(root, 0.5)
    assert len(table) == 4
    with pytest.raises(ValueError):
        grid_minimax(as_cmdp(BanditParams(3, 0.2, 0.1, 2), 2), expert_policy(BanditParams(3, 0.2, 0.1, 2)))


def test_realizability_probe_ladder():
    def probe(eps_obs):
        p = BanditParams(2, eps_obs, 0.1, 6)
        return realizability_probe(as_cmdp(p, 6), expert_policy(p), horizons=(2, 4, 6), iterations=800)

    clear, blind = probe(0.2), probe(0.5)
    assert clear.decreasing and clear.minimax_error[-1] < clear.minimax_error[0] - 0.05
    # with uninformative feedback no history policy beats a coin flip on the context
    assert min(blind.lower_bound) > 0.39
    assert all(abs(v - 0.4) < 0.01 for v in blind.minimax_error)


def test_certificate_serialises():
    cmdp, ex = instance(4, T=2)
    d = solve_game(cmdp, ex, GameConfig(iterations=200, horizon_T=2)).to_dict()
    assert d["variant"] == "reward" and d["T"] == 2 and isinstance(d["duality_gap"], float)


def test_context_free_cmdp_type():
    assert isinstance(instance(0)[0], TabularCMDP)


def test_payoff_is_zero_sum_and_linear():
    cmdp, ex = instance(6)
    f = MomentFunction(np.random.default_rng(1).uniform(-1, 1, (2, 2, 2)), 1.0)
    neg = MomentFunction(-f.values, 1.0)
    zero = MomentFunction(np.zeros((2, 2, 2)), 1.0)
    pol = uniform_policy(2)
    for variant in ("reward", "on_q"):
        a = payoff(pol, ex, f, variant, cmdp).value
        assert abs(a + payoff(pol, ex, neg, variant, cmdp).value) < 1e-12
        assert payoff(pol, ex, zero, variant, cmdp).value == 0.0


def test_expert_has_zero_payoff_with_one_context():
    rng = np.random.default_rng(3)
    cmdp = random_cmdp(rng, 2, 2, 1, 3)
    ex = random_expert(rng, cmdp)
    f = MomentFunction(rng.uniform(-1, 1, (2, 2, 1)), 1.0)
    for variant in ("reward", "on_q"):
        assert abs(payoff(lambda h: ex.probs[h.states[-1], 0], ex, f, variant, cmdp).value) < 1e-12


def _marginals(tree, joint, probs):
    T, S, A = tree.horizon, tree.cmdp.num_states, tree.cmdp.num_actions
    out = np.zeros((T, S, A))
    for t in range(1, T + 1):
        for n in tree.level(t):
            out[t - 1, tree.state[n]] += joint[n].sum() * probs[n]
    return out


def test_single_context_average_policy_matches_expert_marginals():
    rng = np.random.default_rng(7)
    cmdp = random_cmdp(rng, 2, 2, 1, 3)
    ex = random_expert(rng, cmdp)
    cert = solve_game(cmdp, ex, GameConfig("reward", horizon_T=3))
    tree = cert.average_policy.tree
    pbar = cert.average_policy.probs
    learner = _marginals(tree, tree.learner_joint(pbar), pbar)
    expert = _marginals(tree, tree.expert_joint(ex), ex.probs[tree.state][:, 0])
    assert np.abs(learner - expert).max() < 0.02


def test_gap_shrinks_over_iterations():
    cmdp, ex = instance(3)
    trace = solve_game(cmdp, ex, GameConfig("on_q", 2000, horizon_T=3, trace_every=100)).gap_trace
    gaps = np.array([g for _, g in trace])
    assert gaps[-5:].mean() < gaps[:5].mean()
