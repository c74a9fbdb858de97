"""Numerical checks of the moment-matching guarantees.

Moments are test functions of ``(history, action, context)``. A learner never
sees the context, so every moment is paired with an observable surrogate: by
default its lift ``f~(h, a) = sum_c p_on(c | h) f(h, a, c)`` through the
on-policy context posterior. The per-step moment-matching errors are suprema
over a class of such pairs, and the residual between ``f`` and ``f~`` is
tracked separately as ``delta``.

Every expectation here is a linear functional of a node-indexed weight array
``W[n, a, c]`` on the enumerated history tree, so suprema over finite classes
are maxima and suprema over coefficient boxes are L1 norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from latchlab.bandit import MINUS, PLUS, BanditHistory, BanditParams, noise_from_uniforms
from latchlab.core import (
    DEFAULT_BUDGET,
    EnumerationBudgetExceeded,
    ExpertPolicy,
    History,
    PolicyInterface,
    RandomHistoryPolicy,
    TabularCMDP,
    build_tree,
    expert_q,
    random_cmdp,
    random_expert,
    rollout,
)
from latchlab.rng import RandomStream

KINDS = ("on", "off", "rew")
SLACK_TOL = 1e-9


class TheoremViolation(AssertionError):
    """A bound that holds unconditionally was measured to fail."""


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentFunction:
    """Tabular moment ``values[s, a, c]``, or ``values[t, s, a, c]`` when timed."""

    values: np.ndarray
    range_bound: float = 1.0
    timed: bool = False

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != (4 if self.timed else 3):
            raise ValueError("moment table must be (S, A, C), or (T, S, A, C) when timed")
        if self.range_bound <= 0 or np.any(np.abs(v) > self.range_bound + 1e-12):
            raise ValueError("moment values exceed range_bound")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, history: History, action: int, context: int) -> float:
        if self.timed:
            return float(self.values[history.t - 1, history.last_state, action, context])
        return float(self.values[history.last_state, action, context])

    def __neg__(self) -> "MomentFunction":
        return MomentFunction(-self.values, self.range_bound, self.timed)

    def on_tree(self, tree) -> np.ndarray:
        if self.timed:
            return self.values[tree.depth - 1, tree.state]
        return self.values[tree.state]

    @classmethod
    def constant(cls, cmdp: TabularCMDP, value: float = 1.0) -> "MomentFunction":
        shape = (cmdp.num_states, cmdp.num_actions, cmdp.num_contexts)
        return cls(np.full(shape, float(value)), max(abs(value), 1e-12))


@dataclass(frozen=True, eq=False)
class HistoryMoment:
    """Arbitrary moment ``fn(history, action, context)``."""

    fn: Callable[[History, int, int], float]
    range_bound: float

    def __call__(self, history: History, action: int, context: int) -> float:
        return float(self.fn(history, action, context))

    def __neg__(self) -> "HistoryMoment":
        return HistoryMoment(lambda h, a, c: -self.fn(h, a, c), self.range_bound)

    def on_tree(self, tree) -> np.ndarray:
        A, C = tree.cmdp.num_actions, tree.cmdp.num_contexts
        return np.array([[[self.fn(h, a, c) for c in range(C)] for a in range(A)] for h in tree.histories])


@dataclass(frozen=True, eq=False)
class NodeMoment:
    """Moment given directly as values on the nodes of one history tree."""

    values: np.ndarray
    tree: object = field(repr=False)
    range_bound: float = 1.0

    def __neg__(self) -> "NodeMoment":
        return NodeMoment(-self.values, self.tree, self.range_bound)

    def __call__(self, history: History, action: int, context: int) -> float:
        return float(self.values[self.tree.index[history], action, context])

    def on_tree(self, tree) -> np.ndarray:
        if tree is not self.tree:
            raise ValueError("node moment evaluated on a different tree")
        return self.values


@dataclass(frozen=True, eq=False)
class ObservableMoment:
    """History-only surrogate ``fn(history, action)``."""

    fn: Callable[[History, int], float]
    range_bound: float

    def __call__(self, history: History, action: int) -> float:
        return float(self.fn(history, action))

    def on_tree(self, tree) -> np.ndarray:
        A = tree.cmdp.num_actions
        return np.array([[self.fn(h, a) for a in range(A)] for h in tree.histories])


def onpolicy_posterior(cmdp: TabularCMDP, history: History) -> np.ndarray:
    """p(c | h) from transitions alone; uniform if the history has zero chance."""
    w = cmdp.context_prior * cmdp.initial_state_dist[history.states[0]]
    for s, a, s2 in zip(history.states, history.actions, history.states[1:]):
        w = w * cmdp.transition[s, a, :, s2]
    tot = w.sum()
    return w / tot if tot > 0 else np.full(cmdp.num_contexts, 1.0 / cmdp.num_contexts)


def lift(moment, cmdp: TabularCMDP) -> ObservableMoment:
    """The default observable surrogate of a context moment."""
    A, C = cmdp.num_actions, cmdp.num_contexts

    def fn(h: History, a: int) -> float:
        post = onpolicy_posterior(cmdp, h)
        return float(sum(post[c] * moment(h, a, c) for c in range(C)))

    return ObservableMoment(fn, moment.range_bound)


@dataclass(frozen=True)
class BoxClass:
    """All tabular moments with ``|f(s, a, c)| <= range_bound``.

    Suprema of linear functionals over the box are attained at sign vectors,
    so they are computed as ``range_bound`` times an L1 norm.
    """

    range_bound: float = 1.0


@dataclass(frozen=True)
class MomentClass:
    """Finite moments plus boxes; always treated as closed under negation.

    ``observables`` optionally pairs each member with an explicit surrogate;
    otherwise the on-policy lift is used.
    """

    members: tuple = ()
    boxes: tuple[BoxClass, ...] = ()
    observables: tuple | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.observables is not None:
            object.__setattr__(self, "observables", tuple(self.observables))
            if len(self.observables) != len(self.members):
                raise ValueError("observables must pair one-to-one with members")

    @property
    def range_bound(self) -> float:
        bounds = [m.range_bound for m in self.members] + [b.range_bound for b in self.boxes]
        return max(bounds) if bounds else 0.0


@dataclass
class ErrorSeries:
    """Per-step errors ``eps[t-1]`` and residuals ``delta[t-1]`` for t = 1..T."""

    kind: str
    eps: np.ndarray
    delta: np.ndarray
    scale: float = 1.0
    eps_stderr: np.ndarray | None = None
    delta_stderr: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not (np.all(np.isfinite(self.eps)) and np.all(np.isfinite(self.delta))):
            raise ValueError("error series must be finite")

    @property
    def total(self) -> float:
        return float(self.eps.sum() + self.delta.sum())


# ---------------------------------------------------------------------------
# Exact evaluation on the full history tree
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Frame:
    """Everything the linear functionals need, on one full tree."""

    tree: object
    pi: np.ndarray        # (n, a)
    pi_e: np.ndarray      # (n, c, a)
    p_learner: np.ndarray  # (n, c)
    p_expert: np.ndarray   # (n, c)
    post: np.ndarray       # (n, c)

    @classmethod
    def build(cls, cmdp, expert, policy, horizon=None, budget=DEFAULT_BUDGET):
        tree = build_tree(cmdp, horizon, budget=budget)
        pi = tree.policy_table(policy)
        return cls(tree, pi, expert.probs[tree.state], tree.learner_joint(pi),
                   tree.expert_joint(expert), tree.posterior_on())

    def weights(self, kind: str) -> np.ndarray:
        """``W[n, a, c]`` such that the kind's step-t expectation is ``<W_t, g>``."""
        pe = np.transpose(self.pi_e, (0, 2, 1))  # (n, a, c)
        if kind == "on":
            return self.p_learner[:, None, :] * (self.pi[:, :, None] - pe)
        if kind == "off":
            return self.p_expert[:, None, :] * (pe - self.pi[:, :, None])
        if kind == "rew":
            return self.p_learner[:, None, :] * self.pi[:, :, None] - self.p_expert[:, None, :] * pe
        raise ValueError(f"kind must be one of {KINDS}")

    def lifted(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("nc,nac->na", self.post, values)

    def returns(self, reward: np.ndarray) -> tuple[float, float]:
        r = reward[self.tree.state]
        j = float(np.einsum("nc,na,nac->", self.p_learner, self.pi, r))
        je = float(np.einsum("nc,nca,nac->", self.p_expert, self.pi_e, r))
        return je, j


def _level_sums(tree, x: np.ndarray) -> np.ndarray:
    """Sum a node-indexed quantity per depth."""
    return np.array([x[tree.level(t)].sum() for t in range(1, tree.horizon + 1)])


def _box_sup(tree, W: np.ndarray, post: np.ndarray, S: int, bound: float):
    """Per-step sup over the box of the lifted and residual functionals."""
    eps, delta = np.zeros(tree.horizon), np.zeros(tree.horizon)
    A, C = W.shape[1], W.shape[2]
    for t in range(1, tree.horizon + 1):
        idx = tree.level(t)
        st = tree.state[idx]
        raw = np.zeros((S, A, C))
        np.add.at(raw, st, W[idx])
        # <W, f~> = sum_n sum_a (sum_c' W[n,a,c']) sum_c post[n,c] f[s_n,a,c]
        lifted = np.zeros((S, A, C))
        np.add.at(lifted, st, W[idx].sum(2)[:, :, None] * post[idx][:, None, :])
        eps[t - 1] = bound * np.abs(lifted).sum()
        delta[t - 1] = bound * np.abs(raw - lifted).sum()
    return eps, delta


def _exact_series(frame: _Frame, moment_class: MomentClass, kind: str, scale: float) -> ErrorSeries:
    tree = frame.tree
    W = frame.weights(kind)
    T = tree.horizon
    eps, delta = np.zeros(T), np.zeros(T)
    obs = moment_class.observables or (None,) * len(moment_class.members)
    for m, o in zip(moment_class.members, obs):
        vals = m.on_tree(tree)
        ft = frame.lifted(vals) if o is None else o.on_tree(tree)
        e = _level_sums(tree, np.einsum("nac,na->n", W, ft))
        d = _level_sums(tree, np.einsum("nac,nac->n", W, vals - ft[:, :, None]))
        # closed under negation: the sup of +/- g is |g|
        eps = np.maximum(eps, np.abs(e))
        delta = np.maximum(delta, np.abs(d))
    for box in moment_class.boxes:
        e, d = _box_sup(tree, W, frame.post, tree.cmdp.num_states, box.range_bound)
        eps = np.maximum(eps, e)
        delta = np.maximum(delta, d)
    return ErrorSeries(kind, scale * eps, scale * delta, scale)


# ---------------------------------------------------------------------------
# Monte-Carlo fallback
# ---------------------------------------------------------------------------


def _sample_runs(cmdp, expert, policy, actor: str, n: int, stream: RandomStream):
    runs = []
    for i in range(n):
        sub = stream.child(i)
        if actor == "learner":
            runs.append(rollout(cmdp, policy, stream=sub))
        else:
            c = int(min(np.searchsorted(np.cumsum(cmdp.context_prior), sub.child(0).uniforms(1)[0], "right"),
                        cmdp.num_contexts - 1))
            runs.append(rollout(cmdp, expert.as_history_policy(c), context=c, stream=sub.child(1)))
    return runs


def _run_terms(cmdp, expert, policy, runs, moment, observable, comparator: str):
    """Per-run, per-step values of the observable and residual terms."""
    T, A = cmdp.horizon, cmdp.num_actions
    out_e = np.zeros((len(runs), T))
    out_d = np.zeros((len(runs), T))
    for i, run in enumerate(runs):
        c = run.context
        for t in range(1, T + 1):
            h = run.history.prefix(t)
            a_t = run.executed_actions[t - 1]
            f = np.array([moment(h, a, c) for a in range(A)])
            if observable is None:
                post = onpolicy_posterior(cmdp, h)
                ft = np.array([sum(post[k] * moment(h, a, k) for k in range(cmdp.num_contexts)) for a in range(A)])
            else:
                ft = np.array([observable(h, a) for a in range(A)])
            if comparator == "expert":
                ref = expert.probs[h.last_state, c]
            elif comparator == "learner":
                ref = np.asarray(policy(h), dtype=float)
            else:
                ref = None
            if ref is None:
                out_e[i, t - 1], out_d[i, t - 1] = ft[a_t], f[a_t] - ft[a_t]
            else:
                out_e[i, t - 1] = ft[a_t] - ref @ ft
                out_d[i, t - 1] = (f[a_t] - ft[a_t]) - ref @ (f - ft)
    return out_e, out_d


def _mc_series(cmdp, expert, policy, moment_class, kind, scale, n, stream) -> ErrorSeries:
    if moment_class.boxes:
        raise ValueError("box classes need exact enumeration; pass finite members for Monte-Carlo")
    T = cmdp.horizon
    obs = moment_class.observables or (None,) * len(moment_class.members)
    if kind == "rew":
        ra = _sample_runs(cmdp, expert, policy, "learner", n, stream.child(0))
        rb = _sample_runs(cmdp, expert, policy, "expert", n, stream.child(1))
    else:
        ra = _sample_runs(cmdp, expert, policy, "learner" if kind == "on" else "expert", n, stream.child(0))
    eps, delta = np.zeros(T), np.zeros(T)
    eps_se, delta_se = np.zeros(T), np.zeros(T)
    for m, o in zip(moment_class.members, obs):
        if kind == "rew":
            ea, da = _run_terms(cmdp, expert, policy, ra, m, o, "none")
            eb, db = _run_terms(cmdp, expert, policy, rb, m, o, "none")
            e = ea.mean(0) - eb.mean(0)
            d = da.mean(0) - db.mean(0)
            e_se = np.sqrt(ea.var(0, ddof=1) / n + eb.var(0, ddof=1) / n)
            d_se = np.sqrt(da.var(0, ddof=1) / n + db.var(0, ddof=1) / n)
        else:
            ea, da = _run_terms(cmdp, expert, policy, ra, m, o, "expert" if kind == "on" else "learner")
            e, d = ea.mean(0), da.mean(0)
            e_se, d_se = ea.std(0, ddof=1) / np.sqrt(n), da.std(0, ddof=1) / np.sqrt(n)
        better = np.abs(e) > eps
        eps, eps_se = np.where(better, np.abs(e), eps), np.where(better, e_se, eps_se)
        better = np.abs(d) > delta
        delta, delta_se = np.where(better, np.abs(d), delta), np.where(better, d_se, delta_se)
    return ErrorSeries(kind, scale * eps, scale * delta, scale, scale * eps_se, scale * delta_se)


def epsilon_series(cmdp: TabularCMDP, expert: ExpertPolicy, policy: PolicyInterface,
                   moment_class: MomentClass, kind: str, scale: float = 1.0,
                   budget: int = DEFAULT_BUDGET, monte_carlo: int = 2000,
                   stream: RandomStream | None = None) -> ErrorSeries:
    """Per-step moment-matching errors of ``policy`` against ``expert``.

    ``on`` compares the learner's action with the expert's on learner
    histories, ``off`` compares them on expert histories, and ``rew``
    contrasts the two trajectory distributions. Exact when the history tree
    fits in ``budget``; otherwise estimated from ``monte_carlo`` rollouts per
    actor, with standard errors attached.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    try:
        frame = _Frame.build(cmdp, expert, policy, budget=budget)
    except EnumerationBudgetExceeded:
        return _mc_series(cmdp, expert, policy, moment_class, kind, scale, monte_carlo,
                          stream or RandomStream(0))
    return _exact_series(frame, moment_class, kind, scale)


# ---------------------------------------------------------------------------
# Recoverability and the finite-horizon guarantees
# ---------------------------------------------------------------------------


def recoverability_H(cmdp: TabularCMDP, expert: ExpertPolicy, moment_class: MomentClass,
                     tree=None) -> float:
    """Largest one-step advantage of any class member over the expert's action.

    Tabular members range over every ``(s, a, c)`` (and ``t`` when timed);
    history members over the nodes of ``tree``. Negations are included.
    """
    best = 0.0
    pe = expert.probs  # (s, c, a)
    for m in moment_class.members:
        if isinstance(m, MomentFunction):
            v = m.values if m.timed else m.values[None]
            base = np.einsum("sca,tsac->tsc", pe, v)[:, :, None, :]
        else:
            if tree is None:
                raise ValueError("history moments need a tree to evaluate H")
            v = m.on_tree(tree)
            base = np.einsum("nca,nac->nc", pe[tree.state], v)[:, None, :]
        adv = v - base
        best = max(best, float(adv.max()), float((-adv).max()))
    for box in moment_class.boxes:
        # f = +B on a, -B elsewhere attains 2B(1 - pi^E(a|s,c))
        best = max(best, float(2 * box.range_bound * (1 - pe).max()))
    return best


def expert_q_moment(cmdp: TabularCMDP, expert: ExpertPolicy, horizon: int | None = None) -> MomentFunction:
    """Q^{pi^E}_t(s, a, c) as a timed moment."""
    T = cmdp.horizon if horizon is None else horizon
    Q, _ = expert_q(cmdp, expert, T)
    return MomentFunction(Q, max(float(T), float(np.abs(Q).max()), 1e-12), timed=True)


def learner_q_values(tree, probs: np.ndarray) -> np.ndarray:
    """Q^pi(h, a, c) on every node of a full tree, by backward induction."""
    cmdp = tree.cmdp
    r = cmdp.reward[tree.state]  # (n, a, c)
    Q = r.copy()
    V = np.zeros((tree.size, cmdp.num_contexts))
    par, act, kid = [], [], []
    for n, ch in enumerate(tree.children):
        for (a, _s2), k in ch.items():
            par.append(n); act.append(a); kid.append(k)
    par, act, kid = np.array(par, dtype=int), np.array(act, dtype=int), np.array(kid, dtype=int)
    for t in range(tree.horizon, 0, -1):
        if t < tree.horizon:
            sel = tree.depth[par] == t
            p, a, k = par[sel], act[sel], kid[sel]
            tr = cmdp.transition[tree.state[p], a, :, tree.state[k]]  # (m, c)
            np.add.at(Q, (p, a), tr * V[k])
        idx = tree.level(t)
        V[idx] = np.einsum("na,nac->nc", probs[idx], Q[idx])
    return Q


@dataclass
class Theorem1Report:
    gap: float
    H: float
    bounds: dict[str, float]
    literal_bounds: dict[str, float]
    series: dict[str, ErrorSeries]
    pdl_residual: dict[str, float]

    @property
    def slack(self) -> dict[str, float]:
        return {k: v - self.gap for k, v in self.bounds.items()}

    @property
    def literal_slack(self) -> dict[str, float]:
        return {k: v - self.gap for k, v in self.literal_bounds.items()}

    @property
    def ok(self) -> bool:
        return min(self.slack.values()) >= -SLACK_TOL


def theorem1_check(cmdp: TabularCMDP, expert: ExpertPolicy, policy: PolicyInterface,
                   T: int | None = None, extra: Sequence = (), budget: int = DEFAULT_BUDGET,
                   raise_on_violation: bool = True) -> Theorem1Report:
    """Finite-horizon versions of the three average-gap bounds, evaluated exactly.

    The classes are the smallest that the bounds require: ``{+-r}`` for the
    reward chain, ``{+-Q^E_t}`` for the on-Q chain and ``{+-Q^pi}`` for the
    off-Q chain, each joined with ``extra`` members. With the on-Q class
    scaled by ``1/2H`` and the off-Q class by ``1/2T`` the bounds read

        gap <= (1/T) sum (eps_rew + delta_rew)
        gap <= (2H/T) sum (eps_on + delta_on)
        gap <= 2 sum (eps_off + delta_off)

    ``literal_bounds`` drop the factor 2 and are reported for comparison only.
    """
    m = cmdp if T is None else cmdp.with_horizon(T)
    T = m.horizon
    frame = _Frame.build(m, expert, policy, budget=budget)
    tree = frame.tree
    je, j = frame.returns(m.reward)
    gap = (je - j) / T

    r_moment = MomentFunction(m.reward, max(1.0, float(np.abs(m.reward).max())))
    qe = expert_q_moment(m, expert)
    q_pi = NodeMoment(learner_q_values(tree, frame.pi), tree, float(T))
    extra = tuple(extra)
    classes = {
        "rew": MomentClass((r_moment,) + extra),
        "on": MomentClass((qe,) + extra),
        "off": MomentClass((q_pi,) + extra),
    }
    H = recoverability_H(m, expert, classes["on"], tree)
    scales = {"rew": 1.0, "on": 1 / (2 * H) if H > 0 else 1.0, "off": 1 / (2 * T)}
    series = {k: _exact_series(frame, classes[k], k, scales[k]) for k in KINDS}

    bounds = {
        "rew": series["rew"].total / T,
        # with H = 0 every member is flat in the action and the gap is 0
        "on": (2 * H / T) * series["on"].total if H > 0 else series["on"].total / T,
        "off": 2 * series["off"].total,
    }
    literal = {"rew": bounds["rew"], "on": bounds["on"] / 2, "off": bounds["off"] / 2}

    # the performance-difference identities the chains start from
    pdl = {
        "rew": float(np.einsum("nac,nac->", frame.weights("rew"), -r_moment.on_tree(tree)) - (je - j)),
        "on": float(np.einsum("nac,nac->", frame.weights("on"), -qe.on_tree(tree)) - (je - j)),
        "off": float(np.einsum("nac,nac->", frame.weights("off"), q_pi.values) - (je - j)),
    }
    report = Theorem1Report(gap, H, bounds, literal, series, pdl)
    if raise_on_violation and not report.ok:
        raise TheoremViolation(f"average-gap bound violated: gap={gap!r} bounds={bounds!r}")
    return report


def theorem1_suite(instances: int = 100, seed: int = 0, policies_per_instance: int = 1,
                   stream: RandomStream | None = None):
    """Average-gap bound reports on random small instances, without raising.

    Instance ``i`` draws its CMDP, expert and history policies from the stream
    keyed ``(seed, i)``; sizes range over 1-3 states, 2-3 actions, 1-3
    contexts and horizons 1-4. Yields ``(i, cmdp, report)``.
    """
    root = stream or RandomStream(seed)
    for i in range(instances):
        rng = root.child(i).generator()
        m = random_cmdp(rng, int(rng.integers(1, 4)), int(rng.integers(2, 4)),
                        int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        ex = random_expert(rng, m)
        for j in range(policies_per_instance):
            pol = RandomHistoryPolicy(m.num_actions, int(rng.integers(2**31)))
            yield i, m, theorem1_check(m, ex, pol, raise_on_violation=False)


# ---------------------------------------------------------------------------
# Cliff lower-bound construction
# ---------------------------------------------------------------------------

PATH, FALLEN = 0, 1
STAY, FALL = 0, 1


def cliff_gap_formula(T: int) -> Fraction:
    """``(1/T) sum_{t=1}^{T} (T - t)/(t + 1)`` in exact rational arithmetic."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return sum((Fraction(T - t, t + 1) for t in range(1, T + 1)), Fraction(0)) / T


def harmonic(n: int) -> Fraction:
    return sum((Fraction(1, k) for k in range(1, n + 1)), Fraction(0))


def cliff_exact_aig(T: int) -> Fraction:
    """AIG of the falling learner on the absorbing cliff: ``1 - H_T / T``."""
    return 1 - harmonic(T) / T


def cliff_cmdp(T: int) -> TabularCMDP:
    """Two states (path, fallen), two actions (stay, fall), one context.

    Reward is 1 for every step spent on the path; the fallen state absorbs.
    """
    trans = np.zeros((2, 2, 1, 2))
    trans[PATH, STAY, 0, PATH] = 1.0
    trans[PATH, FALL, 0, FALLEN] = 1.0
    trans[FALLEN, :, 0, FALLEN] = 1.0
    reward = np.zeros((2, 2, 1))
    reward[PATH] = 1.0
    return TabularCMDP(2, 2, 1, T, np.ones(1), np.array([1.0, 0.0]), trans, reward)


def cliff_expert() -> ExpertPolicy:
    return ExpertPolicy(np.array([[[1.0, 0.0]], [[1.0, 0.0]]]))


def cliff_learner(history: History) -> np.ndarray:
    """Falls with probability ``1/(t+1)`` while on the path at step ``t``."""
    if history.last_state == FALLEN:
        return np.array([1.0, 0.0])
    p = 1.0 / (history.t + 1)
    return np.array([1.0 - p, p])


@dataclass
class CliffResult:
    T: int
    trials: int
    aig: float
    aig_stderr: float
    eps_off: ErrorSeries
    exact_aig: float


def cliff_simulate(T: int, trials: int = 4000, stream: RandomStream | None = None,
                   learner: bool = True) -> CliffResult:
    """Monte-Carlo AIG of the falling learner, and its off-policy error series.

    ``eps_off(t)`` is estimated by querying the learner at the expert's own
    history (always the path) and counting how often it would fall; this is
    the moment error for the class of action indicators. With
    ``learner=False`` the expert is simulated against itself.
    """
    stream = stream or RandomStream(0)
    steps = np.arange(1, T + 1)
    fall_p = 1.0 / (steps + 1) if learner else np.zeros(T)
    u_roll = stream.child(0).uniforms((trials, T))
    u_query = stream.child(1).uniforms((trials, T))
    falls = u_roll < fall_p
    # steps on the path = index of the first fall (inclusive), or T
    first = np.where(falls.any(1), falls.argmax(1) + 1, T)
    learner_avg = first / T
    gap = 1.0 - learner_avg
    eps = (u_query < fall_p).mean(0)
    eps_se = np.sqrt(eps * (1 - eps) / trials)
    series = ErrorSeries("off", eps, np.zeros(T), 1.0, eps_se, np.zeros(T))
    exact = float(cliff_exact_aig(T)) if learner else 0.0
    return CliffResult(T, trials, float(gap.mean()), float(gap.std(ddof=1) / np.sqrt(trials)), series, exact)


def cliff_indicator_class() -> MomentClass:
    """Action indicators on the path, the class under which eps_off(t) = 1/(t+1)."""
    v = np.zeros((2, 2, 1))
    v[PATH, FALL, 0] = 1.0
    return MomentClass((MomentFunction(v, 1.0),))


# ---------------------------------------------------------------------------
# Identification moment for the bandit
# ---------------------------------------------------------------------------


def arm_rates(pulls: np.ndarray, plus: np.ndarray) -> np.ndarray:
    """Positive-feedback rate per arm; unpulled arms sit at 1/2."""
    pulls = np.asarray(pulls, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pulls > 0, np.asarray(plus, dtype=float) / np.where(pulls > 0, pulls, 1.0), 0.5)


def empirical_best_arm(pulls: np.ndarray, plus: np.ndarray) -> np.ndarray:
    """Argmax of the rates along the last axis; ``np.argmax`` keeps the lowest index on ties."""
    return np.argmax(arm_rates(pulls, plus), axis=-1)


def corollary_moment(history: BanditHistory, action: int, num_arms: int) -> int:
    """1 if ``action`` is the arm with the highest positive-feedback rate."""
    pulls = np.bincount(np.asarray(history.pulls, dtype=int), minlength=num_arms)[:num_arms]
    plus_arms = [a for a, f in zip(history.pulls, history.feedback) if f == PLUS]
    plus = np.bincount(np.asarray(plus_arms, dtype=int), minlength=num_arms)[:num_arms]
    return int(int(empirical_best_arm(pulls, plus)) == action)


def hoeffding_delta(n, rate_gap) -> float | np.ndarray:
    """``exp(-2 n gap^2)``: tail bound for an empirical rate off by ``gap``."""
    out = np.exp(-2.0 * np.asarray(n, dtype=float) * np.asarray(rate_gap, dtype=float) ** 2)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class DecayCurve:
    t: np.ndarray
    misid: np.ndarray
    stderr: np.ndarray
    envelope: np.ndarray
    trials: int

    @property
    def under_envelope(self) -> bool:
        return bool(np.all(self.misid <= self.envelope + 3 * self.stderr + 1e-12))

    @property
    def decays(self) -> bool:
        return bool(self.misid[-1] <= self.misid[0])


def corollary_decay_check(params: BanditParams, policy=None, horizon: int = 500, trials: int = 10_000,
                          stream: RandomStream | None = None, checkpoints: Sequence[int] | None = None) -> DecayCurve:
    """How often the empirical-best arm differs from the correct arm, over time.

    ``policy`` is a fixed intended-arm distribution (uniform by default); the
    executed arm then passes through the exploration noise. The envelope at
    each checkpoint is the union bound
    ``sum_{k != c} [delta(n_k, g/2) + delta(n_c, g/2)]`` with
    ``g = |1 - 2 eps_obs|`` at the realised pull counts, averaged over trials
    and capped at 1.
    """
    if params.eps_exp <= 0:
        raise ValueError("the identification argument needs eps_exp > 0")
    K = params.K
    probs = np.full(K, 1.0 / K) if policy is None else np.asarray(policy, dtype=float)
    if probs.shape != (K,) or abs(probs.sum() - 1) > 1e-9:
        raise ValueError("policy must be an arm distribution of length K")
    stream = stream or RandomStream(0)
    if checkpoints is None:
        checkpoints = sorted({max(1, horizon * k // 10) for k in range(1, 11)})
    checkpoints = [int(c) for c in checkpoints if 1 <= c <= horizon]
    contexts = np.minimum((stream.child(0).uniforms(trials) * K).astype(int), K - 1)
    pulls = np.zeros((trials, K))
    plus = np.zeros((trials, K))
    rows = np.arange(trials)
    cdf = np.cumsum(probs)
    g = abs(1.0 - 2.0 * params.eps_obs)
    out_t, out_m, out_se, out_env = [], [], [], []
    wanted = set(checkpoints)
    for t in range(1, horizon + 1):
        u = stream.child(1, t).uniforms((trials, 4))
        intended = np.minimum((cdf[None, :] <= u[:, 0:1]).sum(1), K - 1)
        executed = noise_from_uniforms(intended, u[:, 1], u[:, 2], K, params.eps_exp)
        p_plus = np.where(executed == contexts, 1.0 - params.eps_obs, params.eps_obs)
        fb = u[:, 3] < p_plus
        pulls[rows, executed] += 1
        plus[rows, executed] += fb
        if t in wanted:
            wrong = empirical_best_arm(pulls, plus) != contexts
            p = wrong.mean()
            n_c = pulls[rows, contexts]
            tail = hoeffding_delta(pulls, g / 2) + hoeffding_delta(n_c, g / 2)[:, None]
            tail[rows, contexts] = 0.0
            env = np.minimum(tail.sum(1), 1.0).mean()
            out_t.append(t); out_m.append(p); out_se.append(np.sqrt(p * (1 - p) / trials)); out_env.append(env)
    return DecayCurve(np.array(out_t), np.array(out_m), np.array(out_se), np.array(out_env), trials)


# ---------------------------------------------------------------------------
# Density ratio
# ---------------------------------------------------------------------------


def density_ratio(cmdp: TabularCMDP, expert: ExpertPolicy, policy: PolicyInterface, t: int,
                  budget: int = DEFAULT_BUDGET) -> float:
    """max_h p(h; pi) / p(h; pi^E) over histories with ``t`` actions.

    Returns ``inf`` when the learner reaches a history the expert cannot.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    tree = build_tree(cmdp, t + 1, policy=policy, expert=expert, budget=budget)
    idx = tree.level(t + 1)
    p_l = tree.learner_joint()[idx].sum(1)
    p_e = tree.expert_joint(expert)[idx].sum(1)
    if np.any((p_l > 0) & (p_e <= 0)):
        return float("inf")
    both = p_e > 0
    ratios = np.where(both, p_l / np.where(both, p_e, 1.0), 1.0)
    return float(ratios.max()) if len(ratios) else 1.0
