"""Zero-sum moment-matching game between a history policy and a moment.

The policy player chooses an action distribution for every history prefix;
the moment player picks a test function and is paid its time-averaged
expectation gap

    reward: (1/T) (E_pi sum_t f(h_t, a_t) - E_E sum_t f(h_t, a_t))
    on_q:   (1/T) E_pi sum_t (f(h_t, a_t) - E_{a ~ pi^E(s_t, c)} f(h_t, a))

Every payoff is ``(1/T) <W(pi), e>`` for a node-indexed weight ``W`` and a
node-indexed moment array ``e[n, a, c]`` on the full history tree. The
policy player runs exponential weights at every node on counterfactual
losses, the moment player best-responds, and the reach-weighted average
policy is returned with its duality gap.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from latchlab.core import (
    DEFAULT_BUDGET,
    EnumerationBudgetExceeded,
    ExpertPolicy,
    History,
    PolicyInterface,
    TabularCMDP,
    build_tree,
    expert_q,
)
from latchlab.filters import FilterMode, posterior_from_scratch
from latchlab.rng import RandomStream
from latchlab.theory import (
    MomentClass,
    MomentFunction,
    ObservableMoment,
    _Frame,
    _exact_series,
    _run_terms,
    _sample_runs,
    expert_q_moment,
    recoverability_H,
)

VARIANTS = ("reward", "on_q")
SCHEDULES = ("anytime",)


@dataclass(frozen=True)
class ClassSpec:
    """Moment class: a coefficient box over indicator bases plus finite members.

    The box holds ``theta[t, s, a, c]`` (``theta[s, a, c]`` when not
    ``timed``) with ``|theta| <= box_bound``; ``box_bound=None`` drops it.
    The untimed box only pins occupancies pooled over steps, so per-step
    action marginals can drift from the expert's even at zero payoff. ``members``
    are extra moments, either tabular :class:`MomentFunction` or
    :class:`ObservableMoment`. With ``lifted`` the context moments are seen
    through their on-policy lift; otherwise they are evaluated with the true
    context. The class is always closed under negation.
    """

    box_bound: float | None = 1.0
    timed: bool = True
    lifted: bool = True
    members: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if self.box_bound is not None and self.box_bound <= 0:
            raise ValueError("box_bound must be positive")
        if self.box_bound is None and not self.members:
            raise ValueError("moment class is empty")


@dataclass(frozen=True)
class GameConfig:
    variant: str = "reward"
    iterations: int = 5000
    step_size_schedule: str = "anytime"
    horizon_T: int = 3
    certificate_tolerance: float = 0.02
    class_spec: ClassSpec | None = None
    trace_every: int = 50

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.iterations < 1 or self.trace_every < 1:
            raise ValueError("iterations and trace_every must be >= 1")
        if self.step_size_schedule not in SCHEDULES:
            raise ValueError(f"step_size_schedule must be one of {SCHEDULES}")
        if self.horizon_T < 1:
            raise ValueError("horizon_T must be >= 1")
        if self.certificate_tolerance <= 0:
            raise ValueError("certificate_tolerance must be positive")

    @property
    def spec(self) -> ClassSpec:
        return ClassSpec() if self.class_spec is None else self.class_spec


# ---------------------------------------------------------------------------
# Observable lift and history policy tables
# ---------------------------------------------------------------------------


def observable_lift(f: MomentFunction, cmdp: TabularCMDP, expert: ExpertPolicy) -> ObservableMoment:
    """``f~(h, a) = sum_c p_on(c | h) f(s_last(h), a, c)``."""

    def fn(h: History, a: int) -> float:
        post = posterior_from_scratch(cmdp, expert, FilterMode.ON_POLICY, h).normalized
        return float(sum(post[c] * f(h, a, c) for c in range(cmdp.num_contexts)))

    return ObservableMoment(fn, f.range_bound)


@dataclass(eq=False)
class HistoryPolicyTable:
    """An action distribution for every prefix of the enumerated tree."""

    tree: object = field(repr=False)
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (self.tree.size, self.tree.cmdp.num_actions):
            raise ValueError("policy table must have one row per tree node")
        if np.any(p < -1e-12) or np.any(np.abs(p.sum(1) - 1) > 1e-9):
            raise ValueError("policy rows must be simplex vectors")
        self.probs = p

    def __call__(self, history: History) -> np.ndarray:
        return self.probs[self.tree.index[history]]

    def __len__(self) -> int:
        return self.tree.size


# ---------------------------------------------------------------------------
# The game on a full history tree
# ---------------------------------------------------------------------------


class MomentGame:
    """Exact payoffs, best responses and counterfactual losses on one tree."""

    def __init__(self, cmdp: TabularCMDP, expert: ExpertPolicy, variant: str, spec: ClassSpec,
                 horizon: int | None = None, budget: int = DEFAULT_BUDGET):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.cmdp = cmdp if horizon is None else cmdp.with_horizon(horizon)
        self.T = self.cmdp.horizon
        self.expert = expert
        self.variant = variant
        self.spec = spec
        tree = self.tree = build_tree(self.cmdp, budget=budget)
        self.chance = tree.chance                                   # (n, c)
        self.post = tree.posterior_on()                             # (n, c)
        self.pe = np.transpose(expert.probs[tree.state], (0, 2, 1))  # (n, a, c)
        self.p_expert = tree.expert_joint(expert)                   # (n, c)
        S, A, C = self.cmdp.num_states, self.cmdp.num_actions, self.cmdp.num_contexts
        self.A = A
        self.key = (tree.depth - 1) * S + tree.state if spec.timed else tree.state.copy()
        self.num_keys = self.T * S if spec.timed else S
        self.members = [self._member_array(m) for m in spec.members]
        par, act, kid = [], [], []
        for n, ch in enumerate(tree.children):
            for (a, _s2), k in ch.items():
                par.append(n)
                act.append(a)
                kid.append(k)
        self._edges = (np.array(par, dtype=int), np.array(act, dtype=int), np.array(kid, dtype=int))
        self._levels = [tree.level(t) for t in range(1, self.T + 1)]
        self._edge_levels = [np.flatnonzero(tree.depth[self._edges[0]] == t) for t in range(1, self.T + 1)]
        bound = max([spec.box_bound or 0.0] + [float(np.abs(e).max()) if e.size else 0.0 for e in self.members])
        self.moment_bound = max(bound, 1e-12)
        # counterfactual losses at a node never exceed this in magnitude
        mass = self.chance.sum(1)
        self.loss_range = np.maximum(2 * self.moment_bound * mass * (self.T - tree.depth + 1) / self.T, 1e-300)

    # --- moments as node arrays -------------------------------------------------

    def _member_array(self, m) -> np.ndarray:
        tree = self.tree
        if isinstance(m, ObservableMoment):
            v = m.on_tree(tree)
            return np.repeat(v[:, :, None], self.cmdp.num_contexts, axis=2)
        vals = m.on_tree(tree)
        return self.lift(vals) if self.spec.lifted else vals

    def lift(self, vals: np.ndarray) -> np.ndarray:
        ft = np.einsum("nc,nac->na", self.post, vals)
        return np.repeat(ft[:, :, None], self.cmdp.num_contexts, axis=2)

    def box_moment(self, theta: np.ndarray) -> np.ndarray:
        vals = theta[self.key]
        return self.lift(vals) if self.spec.lifted else vals

    def moment_array(self, moment) -> np.ndarray:
        """Node array of any supported moment, as the game sees it."""
        if isinstance(moment, np.ndarray):
            return moment
        return self._member_array(moment)

    # --- payoffs -----------------------------------------------------------------

    def reach(self, probs: np.ndarray) -> np.ndarray:
        return self.tree.own_reach(probs)

    def weights(self, probs: np.ndarray, reach: np.ndarray | None = None) -> np.ndarray:
        reach = self.reach(probs) if reach is None else reach
        pl = self.chance * reach[:, None]
        if self.variant == "on_q":
            return pl[:, None, :] * (probs[:, :, None] - self.pe)
        return pl[:, None, :] * probs[:, :, None] - self.p_expert[:, None, :] * self.pe

    def payoff(self, probs: np.ndarray, e: np.ndarray) -> float:
        return float(np.einsum("nac,nac->", self.weights(probs), e) / self.T)

    def box_response(self, W: np.ndarray) -> tuple[np.ndarray, float]:
        """Sign-aligned box coefficients against weights ``W`` and their payoff."""
        if self.spec.lifted:
            coef = W.sum(2)[:, :, None] * self.post[:, None, :]
        else:
            coef = W
        phi = np.zeros((self.num_keys,) + W.shape[1:])
        np.add.at(phi, self.key, coef)
        B = self.spec.box_bound
        return B * np.sign(phi), float(np.abs(phi).sum() * B / self.T)

    def best_response(self, probs: np.ndarray, reach: np.ndarray | None = None):
        """(moment array, payoff) maximising the payoff against ``probs``."""
        W = self.weights(probs, reach)
        best_e, best_v = None, -np.inf
        if self.spec.box_bound is not None:
            theta, best_v = self.box_response(W)
            best_e = self.box_moment(theta)
        for e in self.members:
            v = float(np.einsum("nac,nac->", W, e) / self.T)
            for sign in (1.0, -1.0):
                if sign * v > best_v:
                    best_e, best_v = sign * e, sign * v
        return best_e, best_v

    def _node_costs(self, e: np.ndarray):
        """Own-action loss ``l[n, a]`` and action-free loss ``k[n]`` per node."""
        own = np.einsum("nc,nac->na", self.chance, e) / self.T
        if self.variant == "on_q":
            k = -np.einsum("nc,nac,nac->n", self.chance, self.pe, e) / self.T
            return own, k
        return own, np.zeros(self.tree.size)

    def _backward(self, e: np.ndarray, probs: np.ndarray | None):
        """Counterfactual action losses; ``probs=None`` takes the minimising action."""
        own, k = self._node_costs(e)
        q = own.copy()
        v = np.zeros(self.tree.size)
        par, act, kid = self._edges
        for t in range(self.T, 0, -1):
            if t < self.T:
                sel = self._edge_levels[t - 1]
                np.add.at(q, (par[sel], act[sel]), v[kid[sel]])
            idx = self._levels[t - 1]
            if probs is None:
                v[idx] = k[idx] + q[idx].min(1)
            else:
                v[idx] = k[idx] + (probs[idx] * q[idx]).sum(1)
        return q, v

    def expert_term(self, e: np.ndarray) -> float:
        if self.variant == "reward":
            return float(np.einsum("nc,nac,nac->", self.p_expert, self.pe, e) / self.T)
        return 0.0

    def min_payoff(self, e: np.ndarray) -> tuple[float, np.ndarray]:
        """min over history policies of the payoff against ``e``, and a minimiser."""
        q, v = self._backward(e, None)
        best = np.zeros_like(q)
        best[np.arange(len(q)), q.argmin(1)] = 1.0
        return float(v[self._levels[0]].sum() - self.expert_term(e)), best

    def counterfactual_losses(self, probs: np.ndarray, e: np.ndarray) -> np.ndarray:
        return self._backward(e, probs)[0]

    def returns(self, probs: np.ndarray) -> tuple[float, float]:
        """(J^E, J^pi) at horizon T."""
        frame = self.frame(probs)
        return frame.returns(self.cmdp.reward)

    def frame(self, probs: np.ndarray) -> _Frame:
        tree = self.tree
        return _Frame(tree, probs, self.expert.probs[tree.state], self.chance * self.reach(probs)[:, None],
                      self.p_expert, self.post)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@dataclass
class NashCertificate:
    duality_gap: float
    best_response_payoffs: tuple[float, float]
    average_policy: HistoryPolicyTable
    converged: bool
    variant: str
    T: int
    iterations: int
    gap_trace: list[tuple[int, float]]
    max_regret_ratio: float
    measured_aig: float
    residual: float | None
    H: float | None
    aig_bound: float | None
    aig_bound_from_gap: float | None
    average_moment: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "T": self.T,
            "iterations": self.iterations,
            "duality_gap": self.duality_gap,
            "best_response_payoffs": list(self.best_response_payoffs),
            "converged": self.converged,
            "max_regret_ratio": self.max_regret_ratio,
            "measured_aig": self.measured_aig,
            "residual": self.residual,
            "H": self.H,
            "aig_bound": self.aig_bound,
            "aig_bound_from_gap": self.aig_bound_from_gap,
        }


def _hedge(cum_loss: np.ndarray, scale: np.ndarray, eta: float) -> np.ndarray:
    z = -eta * cum_loss / scale[:, None]
    z -= z.max(1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(1, keepdims=True)


def _certify(game: MomentGame, probs: np.ndarray):
    """Measured AIG of ``probs`` and the bound the solved game implies for it.

    Returns ``(aig, residual, H)``; the bound is ``payoff + residual`` for the
    reward game and ``H (payoff + residual)`` for the on-Q game, whenever the
    class contains the moment the bound is built from (``r``, or the expert
    advantage divided by H).
    """
    je, j = game.returns(probs)
    measured = (je - j) / game.T
    spec = game.spec
    cmdp, expert = game.cmdp, game.expert
    frame = game.frame(probs)
    if game.variant == "reward":
        r = cmdp.reward
        if spec.box_bound is None or spec.box_bound < np.abs(r).max() - 1e-12:
            return measured, None, None
        if not spec.lifted:
            return measured, 0.0, None
        m = MomentFunction(r, max(1.0, float(np.abs(r).max())))
        s = _exact_series(frame, MomentClass([m]), "rew", 1.0)
        return measured, float(s.delta.sum() / game.T), None
    qe = expert_q_moment(cmdp, expert)
    H = recoverability_H(cmdp, expert, MomentClass([qe]))
    if spec.box_bound is None or not spec.timed:
        return measured, None, H
    if H <= 0:
        return measured, 0.0, H
    _, V = expert_q(cmdp, expert)
    adv = (qe.values - V[:, :, None, :]) / H
    if spec.box_bound < np.abs(adv).max() - 1e-12:
        return measured, None, H
    if not spec.lifted:
        return measured, 0.0, H
    s = _exact_series(frame, MomentClass([MomentFunction(adv, 1.0 + 1e-9, timed=True)]), "on", 1.0)
    return measured, float(s.delta.sum() / game.T), H


def solve_game(cmdp: TabularCMDP, expert: ExpertPolicy, config: GameConfig = GameConfig(),
               budget: int = DEFAULT_BUDGET) -> NashCertificate:
    """Approximate equilibrium by counterfactual exponential weights vs best response."""
    game = MomentGame(cmdp, expert, config.variant, config.spec, config.horizon_T, budget)
    n, A = game.tree.size, game.A
    cum_loss = np.zeros((n, A))
    cum_expected = np.zeros(n)
    avg_num = np.zeros((n, A))
    avg_den = np.zeros(n)
    e_sum = np.zeros((n, A, game.cmdp.num_contexts))
    trace = []
    log_a = np.log(A) if A > 1 else 0.0

    def averages(k):
        pbar = avg_num / avg_den[:, None]
        return pbar, e_sum / k

    def gap_of(pbar, ebar):
        _, br = game.best_response(pbar)
        lo, _ = game.min_payoff(ebar)
        return br - lo, br, lo

    for i in range(1, config.iterations + 1):
        eta = np.sqrt(log_a / i)
        probs = _hedge(cum_loss, game.loss_range, eta)
        reach = game.reach(probs)
        e, _ = game.best_response(probs, reach)
        q = game.counterfactual_losses(probs, e)
        cum_expected += (probs * q).sum(1)
        cum_loss += q
        avg_num += reach[:, None] * probs
        avg_den += reach
        e_sum += e
        if i % config.trace_every == 0 or i == config.iterations:
            trace.append((i, gap_of(*averages(i))[0]))

    pbar, ebar = averages(config.iterations)
    gap, br, lo = gap_of(pbar, ebar)
    regret = cum_expected - cum_loss.min(1)
    bound = game.loss_range * np.sqrt(config.iterations * log_a) if log_a > 0 else np.full(n, np.inf)
    ratio = float((regret / bound).max()) if log_a > 0 else 0.0
    measured, residual, H = _certify(game, pbar)
    if residual is None:
        aig_bound = from_gap = None
    elif game.variant == "reward":
        aig_bound, from_gap = br + residual, gap + residual
    else:
        aig_bound, from_gap = H * (br + residual), H * (gap + residual)
    return NashCertificate(
        duality_gap=float(gap), best_response_payoffs=(float(br), float(lo)),
        average_policy=HistoryPolicyTable(game.tree, pbar), converged=bool(gap <= config.certificate_tolerance),
        variant=game.variant, T=game.T, iterations=config.iterations, gap_trace=trace,
        max_regret_ratio=ratio, measured_aig=float(measured), residual=residual, H=H,
        aig_bound=aig_bound, aig_bound_from_gap=from_gap, average_moment=ebar,
    )


# ---------------------------------------------------------------------------
# Public single-shot evaluations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PayoffEstimate:
    value: float
    stderr: float = 0.0
    exact: bool = True

    def __float__(self) -> float:
        return self.value


def payoff(policy: PolicyInterface, expert: ExpertPolicy, moment, variant: str, cmdp: TabularCMDP,
           T: int | None = None, budget: int = DEFAULT_BUDGET, monte_carlo: int = 4000,
           stream: RandomStream | None = None) -> PayoffEstimate:
    """Time-averaged payoff of one moment against one policy.

    ``moment`` is an :class:`ObservableMoment` (seen through the history) or
    a tabular :class:`MomentFunction` (evaluated with the true context).
    Falls back to Monte-Carlo when the tree exceeds ``budget``.
    """
    spec = ClassSpec(None, lifted=False, members=(moment,))
    try:
        game = MomentGame(cmdp, expert, variant, spec, T, budget)
    except EnumerationBudgetExceeded:
        return _mc_payoff(policy, expert, moment, variant, cmdp if T is None else cmdp.with_horizon(T),
                          monte_carlo, stream or RandomStream(0))
    probs = game.tree.policy_table(policy)
    return PayoffEstimate(game.payoff(probs, game.members[0]))


def _mc_payoff(policy, expert, moment, variant, cmdp, n, stream) -> PayoffEstimate:
    from latchlab.theory import HistoryMoment
    T = cmdp.horizon
    observable = isinstance(moment, ObservableMoment)
    if observable:
        obs, ctx = moment, HistoryMoment(lambda h, a, c: 0.0, 1.0)
    else:
        # a zero observable leaves the whole context moment in the residual term
        obs, ctx = ObservableMoment(lambda h, a: 0.0, 1.0), moment

    def per_run(runs, comparator):
        e, d = _run_terms(cmdp, expert, policy, runs, ctx, obs, comparator)
        return (e if observable else d).sum(1) / T

    a = per_run(_sample_runs(cmdp, expert, policy, "learner", n, stream.child(0)),
                "expert" if variant == "on_q" else "none")
    if variant == "on_q":
        return PayoffEstimate(float(a.mean()), float(a.std(ddof=1) / np.sqrt(n)), False)
    b = per_run(_sample_runs(cmdp, expert, policy, "expert", n, stream.child(1)), "none")
    se = np.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
    return PayoffEstimate(float(a.mean() - b.mean()), float(se), False)


def best_response_moment(policy: PolicyInterface, expert: ExpertPolicy, variant: str, cmdp: TabularCMDP,
                         T: int | None = None, class_spec: ClassSpec = ClassSpec()):
    """The class member with the largest payoff against ``policy``, and that payoff.

    The moment comes back as a tabular :class:`MomentFunction` (box part; seen
    through its lift when the class is lifted) or as the winning member,
    negated if that is what the maximum needs.
    """
    game = MomentGame(cmdp, expert, variant, class_spec, T)
    probs = game.tree.policy_table(policy)
    W = game.weights(probs)
    best, value = None, -np.inf
    if class_spec.box_bound is not None:
        theta, value = game.box_response(W)
        if class_spec.timed:
            theta = theta.reshape((game.T, cmdp.num_states) + theta.shape[1:])
        best = MomentFunction(theta, class_spec.box_bound, timed=class_spec.timed)
        if class_spec.lifted:
            best = observable_lift(best, game.cmdp, expert)
    for m, e in zip(class_spec.members, game.members):
        v = float(np.einsum("nac,nac->", W, e) / game.T)
        if v > value:
            best, value = m, v
        if -v > value:
            best, value = _negate(m), -v
    return best, float(value)


def _negate(m):
    if isinstance(m, ObservableMoment):
        return ObservableMoment(lambda h, a: -m(h, a), m.range_bound)
    return -m


# ---------------------------------------------------------------------------
# Realizability probe and a grid-search oracle
# ---------------------------------------------------------------------------


@dataclass
class RealizabilityReport:
    horizons: list[int]
    minimax_error: list[float]
    lower_bound: list[float]
    duality_gap: list[float]

    @property
    def decreasing(self) -> bool:
        v = self.minimax_error
        return all(b <= a + 1e-9 for a, b in zip(v, v[1:]))

    def to_rows(self) -> list[tuple]:
        return list(zip(self.horizons, self.minimax_error, self.lower_bound, self.duality_gap))


def realizability_probe(cmdp: TabularCMDP, expert: ExpertPolicy, class_spec: ClassSpec | None = None,
                        horizons: Sequence[int] = (2, 4, 8), variant: str = "reward",
                        iterations: int = 1500) -> RealizabilityReport:
    """min over history policies of the max class error, along a horizon ladder.

    By default the class is ``{+-r}`` evaluated with the true context, so the
    minimax error is the smallest average gap any history policy can reach
    at that horizon. Each rung is solved as a game; the reported error is the
    best-response payoff of the average policy (an upper bound on the
    minimax value), and the lower bound comes from the average moment.
    """
    if class_spec is None:
        r = cmdp.reward
        class_spec = ClassSpec(None, lifted=False, members=(MomentFunction(r, max(1.0, float(np.abs(r).max()))),))
    out = RealizabilityReport([], [], [], [])
    for T in horizons:
        cert = solve_game(cmdp, expert, GameConfig(variant, iterations, horizon_T=T, class_spec=class_spec))
        br, lo = cert.best_response_payoffs
        out.horizons.append(int(T))
        out.minimax_error.append(br)
        out.lower_bound.append(lo)
        out.duality_gap.append(cert.duality_gap)
    return out


def grid_minimax(cmdp: TabularCMDP, expert: ExpertPolicy, variant: str = "reward",
                 class_spec: ClassSpec = ClassSpec(1.0, timed=True), resolution: int = 101):
    """Exhaustive minimax over a policy grid for two-action, horizon-2 games.

    Only the box part of a timed class is used, so the moment player's best
    response separates over ``(t, s)`` keys and each key's policy block can
    be searched independently given the first-step policy. Returns
    ``(value, first_step_probs, table)`` with ``table`` mapping each
    second-step history to its grid-optimal action distribution.
    """
    if cmdp.num_actions != 2 or class_spec.box_bound is None or not class_spec.timed or class_spec.members:
        raise ValueError("grid oracle needs two actions and a timed box class")
    game = MomentGame(cmdp, expert, variant, class_spec, 2)
    tree = game.tree
    roots, leaves = game._levels[0], game._levels[1]
    B, T = class_spec.box_bound, game.T
    grid = np.linspace(0.0, 1.0, resolution)

    def key_l1(nodes, p_nodes, reach_nodes):
        """L1 norm of the key's coefficient block for many candidate rows at once."""
        # p_nodes: (..., m) prob of action 0 at each node; reach_nodes: (..., m)
        probs = np.stack([p_nodes, 1 - p_nodes], -1)  # (..., m, 2)
        pl = game.chance[nodes] * reach_nodes[..., None]  # (..., m, c)
        if variant == "on_q":
            W = pl[..., None, :] * (probs[..., None] - game.pe[nodes])
        else:
            W = pl[..., None, :] * probs[..., None] - game.p_expert[nodes][:, None, :] * game.pe[nodes]
        if class_spec.lifted:
            coef = W.sum(-1)[..., None] * game.post[nodes][:, None, :]
        else:
            coef = W
        return np.abs(coef.sum(-3)).sum((-1, -2))

    # the first step has one node per initial state; search them jointly
    if len(roots) > 2:
        raise ValueError("grid oracle supports at most two initial states")
    root_grid = np.array(list(itertools.product(grid, repeat=len(roots))))
    best = (np.inf, None, None)
    root_keys = {int(k) for k in game.key[roots]}
    leaf_groups = {}
    for n in leaves:
        leaf_groups.setdefault(int(game.key[n]), []).append(int(n))
    for rp in root_grid:
        total = 0.0
        for k in root_keys:
            nodes = np.array([r for r in roots if game.key[r] == k])
            total += key_l1(nodes, rp[[list(roots).index(r) for r in nodes]], np.ones(len(nodes)))
        choice = {}
        for k, nodes in leaf_groups.items():
            nodes = np.array(nodes)
            parents = tree.parent[nodes]
            pa = tree.parent_action[nodes]
            rp_of = rp[[list(roots).index(p) for p in parents]]
            reach = np.where(pa == 0, rp_of, 1 - rp_of)
            cand = np.array(list(itertools.product(grid, repeat=len(nodes))))
            vals = key_l1(nodes, cand, np.broadcast_to(reach, cand.shape))
            j = int(vals.argmin())
            total += vals[j]
            for n, p in zip(nodes, cand[j]):
                choice[tree.histories[n]] = np.array([p, 1 - p])
        value = B * total / T
        if value < best[0]:
            best = (float(value), np.stack([rp, 1 - rp], -1), choice)
    return best
