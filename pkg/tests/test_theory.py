import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latchlab.bandit import MINUS, PLUS, BanditHistory, BanditParams, as_cmdp, expert_policy, with_exploration
from latchlab.core import (
    History,
    RandomHistoryPolicy,
    TabularCMDP,
    aig,
    random_cmdp,
    random_expert,
    uniform_policy,
)
from latchlab.filters import FilterMode, FilterPolicy
from latchlab.rng import RandomStream
from latchlab.theory import (
    BoxClass,
    MomentClass,
    MomentFunction,
    TheoremViolation,
    cliff_cmdp,
    cliff_exact_aig,
    cliff_expert,
    cliff_gap_formula,
    cliff_indicator_class,
    cliff_learner,
    cliff_simulate,
    corollary_decay_check,
    corollary_moment,
    density_ratio,
    epsilon_series,
    expert_q_moment,
    harmonic,
    hoeffding_delta,
    onpolicy_posterior,
    recoverability_H,
    theorem1_check,
)


def all_paths(cmdp, T):
    """Every (history, actions) path of length T with its chance weight per context."""
    S, A = cmdp.num_states, cmdp.num_actions
    for s1 in range(S):
        for acts in itertools.product(range(A), repeat=T - 1):
            for rest in itertools.product(range(S), repeat=T - 1):
                yield History((s1,) + rest, acts)


def brute_series(cmdp, expert, policy, moments, kind):
    """Enumerate (c, h) pairs directly and maximise over +/- each moment."""
    T, C, A = cmdp.horizon, cmdp.num_contexts, cmdp.num_actions
    eps, delta = np.zeros(T), np.zeros(T)
    for t in range(1, T + 1):
        e_vals, d_vals = np.zeros(len(moments)), np.zeros(len(moments))
        for h in all_paths(cmdp, t):
            post = onpolicy_posterior(cmdp, h)
            pi = np.asarray(policy(h))
            for c in range(C):
                ch = cmdp.context_prior[c] * cmdp.initial_state_dist[h.states[0]]
                lr = er = 1.0
                for i, a in enumerate(h.actions):
                    s, s2 = h.states[i], h.states[i + 1]
                    ch *= cmdp.transition[s, a, c, s2]
                    lr *= policy(h.prefix(i + 1))[a]
                    er *= expert.probs[s, c, a]
                pe = expert.probs[h.last_state, c]
                for k, f in enumerate(moments):
                    fv = np.array([f(h, a, c) for a in range(A)])
                    ft = np.array([sum(post[j] * f(h, a, j) for j in range(C)) for a in range(A)])
                    if kind == "on":
                        w = ch * lr * (pi - pe)
                    elif kind == "off":
                        w = ch * er * (pe - pi)
                    else:
                        w = ch * lr * pi - ch * er * pe
                    e_vals[k] += w @ ft
                    d_vals[k] += w @ (fv - ft)
        eps[t - 1], delta[t - 1] = np.abs(e_vals).max(), np.abs(d_vals).max()
    return eps, delta


@pytest.mark.parametrize("kind", ["on", "off", "rew"])
def test_series_matches_brute_force(kind):
    rng = np.random.default_rng(5)
    for trial in range(3):
        m = random_cmdp(rng, 2, 2, 2, 3)
        ex = random_expert(rng, m)
        pol = RandomHistoryPolicy(2, trial)
        moments = [MomentFunction(rng.uniform(-1, 1, (2, 2, 2))) for _ in range(3)]
        s = epsilon_series(m, ex, pol, MomentClass(moments), kind)
        eps, delta = brute_series(m, ex, pol, moments, kind)
        np.testing.assert_allclose(s.eps, eps, atol=1e-12)
        np.testing.assert_allclose(s.delta, delta, atol=1e-12)


def test_box_class_matches_sign_vectors():
    rng = np.random.default_rng(2)
    m = random_cmdp(rng, 1, 2, 2, 2)
    ex = random_expert(rng, m)
    pol = RandomHistoryPolicy(2, 3)
    box = epsilon_series(m, ex, pol, MomentClass(boxes=[BoxClass(1.0)]), "on")
    signs = [MomentFunction(np.array(v, dtype=float).reshape(1, 2, 2)) for v in itertools.product([-1, 1], repeat=4)]
    finite = epsilon_series(m, ex, pol, MomentClass(signs), "on")
    np.testing.assert_allclose(box.eps, finite.eps, atol=1e-12)
    np.testing.assert_allclose(box.delta, finite.delta, atol=1e-12)


def test_self_comparison_is_zero():
    rng = np.random.default_rng(1)
    m = random_cmdp(rng, 2, 3, 1, 3)
    ex = random_expert(rng, m)
    cls = MomentClass([MomentFunction(rng.uniform(-1, 1, (2, 3, 1)))], boxes=[BoxClass()])
    for kind in ("on", "off", "rew"):
        s = epsilon_series(m, ex, ex.as_history_policy(0), cls, kind)
        np.testing.assert_allclose(s.eps, 0, atol=1e-12)
        np.testing.assert_allclose(s.delta, 0, atol=1e-12)


def test_monte_carlo_fallback_agrees():
    rng = np.random.default_rng(9)
    m = random_cmdp(rng, 2, 2, 2, 3)
    ex = random_expert(rng, m)
    pol = RandomHistoryPolicy(2, 0)
    cls = MomentClass([MomentFunction(rng.uniform(-1, 1, (2, 2, 2)))])
    for kind in ("on", "off", "rew"):
        exact = epsilon_series(m, ex, pol, cls, kind)
        mc = epsilon_series(m, ex, pol, cls, kind, budget=3, monte_carlo=3000, stream=RandomStream(4))
        assert mc.eps_stderr is not None
        # |E| estimated through |mean|, so compare within a few standard errors
        assert np.all(np.abs(mc.eps - exact.eps) <= 4 * mc.eps_stderr + 1e-9)


def test_recoverability_examples():
    rng = np.random.default_rng(0)
    m = random_cmdp(rng, 2, 3, 2, 4)
    ex = random_expert(rng, m)
    assert recoverability_H(m, ex, MomentClass([MomentFunction.constant(m, 0.7)])) == 0.0
    T = 8
    c = cliff_cmdp(T)
    assert recoverability_H(c, cliff_expert(), MomentClass([expert_q_moment(c, cliff_expert())])) == pytest.approx(T - 1)
    # a single-state bandit never compounds mistakes
    p = BanditParams(3, 0.2, 0.1, T=6)
    b = as_cmdp(p)
    H = recoverability_H(b, expert_policy(p), MomentClass([expert_q_moment(b, expert_policy(p))]))
    assert H <= 1 + 1e-12 and H < b.horizon


def test_theorem1_expert_is_tight():
    rng = np.random.default_rng(3)
    m = random_cmdp(rng, 2, 2, 1, 3)
    ex = random_expert(rng, m)
    r = theorem1_check(m, ex, ex.as_history_policy(0))
    assert abs(r.gap) < 1e-12
    assert all(abs(v) < 1e-12 for v in r.bounds.values())


def test_theorem1_random_instances():
    rng = np.random.default_rng(11)
    for i in range(20):
        m = random_cmdp(rng, int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        ex = random_expert(rng, m)
        for j in range(5):
            pol = RandomHistoryPolicy(m.num_actions, 10 * i + j)
            r = theorem1_check(m, ex, pol)
            assert r.gap == pytest.approx(aig(m, ex, pol), abs=1e-12)
            assert min(r.slack.values()) >= -1e-9
            # the chains start from exact performance-difference identities
            assert max(abs(v) for v in r.pdl_residual.values()) < 1e-10


def test_theorem1_filter_learners():
    p = BanditParams(2, 0.2, 0.2, T=4)
    m, ex = as_cmdp(p), expert_policy(p)
    for mode in (FilterMode.ON_POLICY, FilterMode.OFF_POLICY):
        assert theorem1_check(m, ex, FilterPolicy(m, ex, mode)).ok


def test_literal_constants_can_fail():
    # one step, one context: the unscaled chains are equalities, so halving them breaks them
    m = cliff_cmdp(1)
    reward = np.zeros((2, 2, 1))
    reward[0, 0] = 1.0
    m = TabularCMDP(2, 2, 1, 1, np.ones(1), np.array([1.0, 0.0]), m.transition, reward)
    r = theorem1_check(m, cliff_expert(), uniform_policy(2))
    assert r.gap == pytest.approx(0.5)
    assert r.ok and min(r.literal_slack.values()) < 0


def test_theorem1_cliff_off_bound_tight():
    m = cliff_cmdp(6)
    r = theorem1_check(m, cliff_expert(), cliff_learner)
    assert r.gap == pytest.approx(float(cliff_exact_aig(6)))
    assert r.slack["off"] == pytest.approx(0.0, abs=1e-12)


def test_violation_raises(monkeypatch):
    import latchlab.theory as th
    monkeypatch.setattr(th, "SLACK_TOL", -1.0)
    with pytest.raises(TheoremViolation):
        th.theorem1_check(cliff_cmdp(3), cliff_expert(), cliff_learner)


def test_cliff_formula():
    assert cliff_gap_formula(1) == 0
    assert cliff_gap_formula(2) == Fraction(1, 4)
    assert cliff_gap_formula(3) == Fraction(4, 9)
    vals = [cliff_gap_formula(T) for T in range(2, 30)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    for T in range(1, 25):
        rest = sum((Fraction(t, t + 1) for t in range(1, T + 1)), Fraction(0)) / T
        assert cliff_gap_formula(T) - (harmonic(T + 1) - 1 - rest) == 0


def test_cliff_series_and_exact():
    m = cliff_cmdp(7)
    s = epsilon_series(m, cliff_expert(), cliff_learner, cliff_indicator_class(), "off")
    np.testing.assert_allclose(s.eps, 1 / (np.arange(1, 8) + 1), atol=1e-15)
    assert aig(m, cliff_expert(), cliff_learner) == pytest.approx(float(cliff_exact_aig(7)))
    assert float(cliff_exact_aig(7)) == pytest.approx(1 - sum(1 / k for k in range(1, 8)) / 7)


def test_cliff_simulation():
    res = cliff_simulate(200, trials=4000, stream=RandomStream(2))
    assert abs(res.aig - res.exact_aig) <= 3 * res.aig_stderr
    assert cliff_simulate(50, trials=100, learner=False).aig == 0.0


def test_corollary_moment_examples():
    h = BanditHistory((0, 0, 0, 1, 1), (PLUS, PLUS, PLUS, MINUS, MINUS))
    assert corollary_moment(h, 0, 2) == 1 and corollary_moment(h, 1, 2) == 0
    tie = BanditHistory((0, 1), (PLUS, PLUS))
    assert corollary_moment(tie, 0, 2) == 1 and corollary_moment(tie, 1, 2) == 0
    empty = BanditHistory()
    assert [corollary_moment(empty, a, 4) for a in range(4)] == [1, 0, 0, 0]
    # unpulled arms sit at 1/2 and beat arms that only saw '-'
    assert corollary_moment(BanditHistory((0,), (MINUS,)), 1, 3) == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.sampled_from([PLUS, MINUS])), max_size=12), st.randoms())
def test_corollary_moment_order_invariant(steps, rnd):
    shuffled = list(steps)
    rnd.shuffle(shuffled)
    a = BanditHistory(tuple(x for x, _ in steps), tuple(f for _, f in steps))
    b = BanditHistory(tuple(x for x, _ in shuffled), tuple(f for _, f in shuffled))
    assert [corollary_moment(a, k, 4) for k in range(4)] == [corollary_moment(b, k, 4) for k in range(4)]


def test_hoeffding_delta():
    assert hoeffding_delta(0, 0.3) == 1.0
    assert hoeffding_delta(10, 0.0) == 1.0
    assert hoeffding_delta(8, 0.5) == pytest.approx(np.exp(-4), abs=1e-9)
    ns = np.arange(0, 50)
    assert np.all(np.diff(hoeffding_delta(ns, 0.2)) < 0)
    gaps = np.linspace(0, 1, 20)
    assert np.all(np.diff(hoeffding_delta(5, gaps)) < 0)


def test_corollary_decay_noiseless_and_blind():
    clean = corollary_decay_check(BanditParams(3, 0.0, 0.3), horizon=40, trials=2000, checkpoints=[40])
    assert clean.misid[-1] == 0.0
    blind = corollary_decay_check(BanditParams(3, 0.5, 0.3), horizon=200, trials=2000)
    assert np.all(np.abs(blind.misid - 2 / 3) < 0.05)
    with pytest.raises(ValueError):
        corollary_decay_check(BanditParams(2, 0.2, 0.0), horizon=5, trials=5)


def test_corollary_decay_small():
    curve = corollary_decay_check(BanditParams(2, 0.2, 0.3), horizon=200, trials=2000, stream=RandomStream(1))
    assert curve.decays and curve.under_envelope
    assert curve.misid[-1] < 0.05


def test_density_ratio_examples():
    # the expert itself, once the context set is a singleton
    rng = np.random.default_rng(0)
    m = random_cmdp(rng, 2, 2, 1, 4)
    ex = random_expert(rng, m)
    assert density_ratio(m, ex, ex.as_history_policy(0), 3) == pytest.approx(1.0)
    ratios = {}
    for e in (0.1, 0.4):
        q = BanditParams(2, 0.2, e, T=7)
        ratios[e] = [density_ratio(as_cmdp(q), expert_policy(q), with_exploration(uniform_policy(2), q), t) for t in range(1, 6)]
    assert all(a <= b for a, b in zip(ratios[0.4], ratios[0.1]))
    z = BanditParams(2, 0.2, 0.0, T=7)
    assert all(density_ratio(as_cmdp(z), expert_policy(z), uniform_policy(2), t) == float("inf") for t in range(2, 5))
