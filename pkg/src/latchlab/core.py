"""Tabular contextual MDPs, histories, rollouts and exact evaluation.

A context is drawn once per episode and held fixed. Policies see only the
:class:`History` (states and their own past actions), never the context or
the rewards. Exact quantities are computed by enumerating ``(context,
history)`` pairs; when that is too large a :class:`EnumerationBudgetExceeded`
is raised and the caller has to opt into the Monte-Carlo estimators.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from latchlab.rng import RandomStream

PROB_TOL = 1e-9
PRUNE_TOL = 1e-15
DEFAULT_BUDGET = 1_000_000


class EnumerationBudgetExceeded(RuntimeError):
    """Raised when exact enumeration would exceed the history budget."""

    def __init__(self, budget: int):
        super().__init__(
            f"exact enumeration exceeds the budget of {budget} weighted histories; "
            "use the Monte-Carlo estimator (monte_carlo_return) instead"
        )
        self.budget = budget


class CMDPValidationError(ValueError):
    pass


def is_simplex(p, tol: float = PROB_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(p.ndim == 1 and np.all(p >= -tol) and abs(p.sum() - 1.0) <= tol)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularCMDP:
    """Finite contextual MDP.

    ``transition[s, a, c, s']`` is the next-state distribution and
    ``reward[s, a, c]`` lies in [-1, 1].
    """

    num_states: int
    num_actions: int
    num_contexts: int
    horizon: int
    context_prior: np.ndarray
    initial_state_dist: np.ndarray
    transition: np.ndarray
    reward: np.ndarray

    def __post_init__(self) -> None:
        for name in ("context_prior", "initial_state_dist", "transition", "reward"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        problems = validate_cmdp_fields(
            self.num_states, self.num_actions, self.num_contexts, self.horizon,
            self.context_prior, self.initial_state_dist, self.transition, self.reward,
        )
        if problems:
            key, msg = problems[0]
            raise CMDPValidationError(f"{key}: {msg}")

    def with_horizon(self, horizon: int) -> "TabularCMDP":
        return TabularCMDP(
            self.num_states, self.num_actions, self.num_contexts, horizon,
            self.context_prior, self.initial_state_dist, self.transition, self.reward,
        )

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_contexts": self.num_contexts,
            "horizon": self.horizon,
            "context_prior": self.context_prior.tolist(),
            "initial_state_dist": self.initial_state_dist.tolist(),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularCMDP":
        return cls(**{k: doc[k] for k in _CMDP_KEYS})


_CMDP_KEYS = (
    "num_states", "num_actions", "num_contexts", "horizon",
    "context_prior", "initial_state_dist", "transition", "reward",
)


def validate_cmdp_fields(S, A, C, T, prior, init, trans, rew) -> list[tuple[str, str]]:
    """Return ``(key, message)`` for every violated invariant."""
    out: list[tuple[str, str]] = []
    for key, val in (("num_states", S), ("num_actions", A), ("num_contexts", C), ("horizon", T)):
        if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val < 1:
            out.append((key, f"must be a positive integer, got {val!r}"))
    if out:
        return out
    prior, init = np.asarray(prior, float), np.asarray(init, float)
    trans, rew = np.asarray(trans, float), np.asarray(rew, float)
    if prior.shape != (C,):
        out.append(("context_prior", f"expected shape ({C},), got {prior.shape}"))
    elif not is_simplex(prior):
        out.append(("context_prior", "must be a probability vector"))
    if init.shape != (S,):
        out.append(("initial_state_dist", f"expected shape ({S},), got {init.shape}"))
    elif not is_simplex(init):
        out.append(("initial_state_dist", "must be a probability vector"))
    if trans.shape != (S, A, C, S):
        out.append(("transition", f"expected shape {(S, A, C, S)}, got {trans.shape}"))
    else:
        bad = np.argwhere((np.abs(trans.sum(-1) - 1.0) > PROB_TOL) | np.any(trans < 0, axis=-1))
        if len(bad):
            s, a, c = bad[0]
            out.append(("transition", f"row [{s}][{a}][{c}] is not a probability distribution"))
    if rew.shape != (S, A, C):
        out.append(("reward", f"expected shape {(S, A, C)}, got {rew.shape}"))
    elif np.any(np.abs(rew) > 1.0) or not np.all(np.isfinite(rew)):
        s, a, c = np.argwhere(~(np.abs(rew) <= 1.0))[0]
        out.append(("reward", f"entry [{s}][{a}][{c}] outside [-1, 1]"))
    return out


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def loads_cmdp(text: str) -> TabularCMDP:
    """Parse and validate a CMDP document; errors carry the offending line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CMDPValidationError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CMDPValidationError("line 1: top level must be an object")
    for key in doc:
        if key not in _CMDP_KEYS:
            raise CMDPValidationError(f"line {_line_of(text, key)}: unknown key {key!r}")
    for key in _CMDP_KEYS:
        if key not in doc:
            raise CMDPValidationError(f"line 1: missing key {key!r}")
    try:
        problems = validate_cmdp_fields(*(doc[k] for k in _CMDP_KEYS))
    except (TypeError, ValueError) as exc:
        raise CMDPValidationError(f"line 1: malformed arrays ({exc})") from exc
    if problems:
        key, msg = problems[0]
        raise CMDPValidationError(f"line {_line_of(text, key)}: {key}: {msg}")
    return TabularCMDP.from_dict(doc)


def load_cmdp(path) -> TabularCMDP:
    with open(path) as fh:
        return loads_cmdp(fh.read())


def dumps_cmdp(cmdp: TabularCMDP) -> str:
    return json.dumps(cmdp.to_dict(), indent=1)


@dataclass(frozen=True)
class History:
    """``(s_1, a_1, ..., s_t)`` stored as index tuples."""

    states: tuple[int, ...]
    actions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a history holds exactly one more state than actions")

    @property
    def t(self) -> int:
        return len(self.states)

    @property
    def last_state(self) -> int:
        return self.states[-1]

    def extend(self, action: int, next_state: int) -> "History":
        return History(self.states + (int(next_state),), self.actions + (int(action),))

    def prefix(self, t: int) -> "History":
        return History(self.states[:t], self.actions[: t - 1])


@dataclass(frozen=True)
class Trajectory:
    context: int
    history: History
    rewards: tuple[float, ...]
    executed_actions: tuple[int, ...]

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


class PolicyInterface(Protocol):
    def __call__(self, history: History) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class ExpertPolicy:
    """Context-aware expert, ``probs[s, c, a]``."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=float)
        if p.ndim != 3 or np.any(p < -PROB_TOL) or np.any(np.abs(p.sum(-1) - 1) > PROB_TOL):
            raise ValueError("expert table must be (states, contexts, actions) simplex rows")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __call__(self, state: int, context: int) -> np.ndarray:
        return self.probs[state, context]

    def as_history_policy(self, context: int = 0) -> "PolicyInterface":
        """The expert with its context pinned, usable wherever a learner is."""
        probs = self.probs

        def policy(history: History) -> np.ndarray:
            return probs[history.last_state, context]

        return policy


def uniform_policy(num_actions: int) -> PolicyInterface:
    p = np.full(num_actions, 1.0 / num_actions)
    p.setflags(write=False)
    return lambda history: p


def random_cmdp(rng: np.random.Generator, num_states=2, num_actions=2, num_contexts=2,
                horizon=3, sparsity: float = 0.0) -> TabularCMDP:
    """Random instance for property tests; ``sparsity`` zeroes transition mass."""
    trans = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions, num_contexts))
    if sparsity > 0:
        mask = rng.random(trans.shape) < sparsity
        mask[..., 0] = False
        trans = np.where(mask, 0.0, trans)
        trans /= trans.sum(-1, keepdims=True)
    return TabularCMDP(
        num_states, num_actions, num_contexts, horizon,
        rng.dirichlet(np.ones(num_contexts)),
        rng.dirichlet(np.ones(num_states)),
        trans,
        rng.uniform(-1, 1, size=(num_states, num_actions, num_contexts)),
    )


def random_expert(rng: np.random.Generator, cmdp: TabularCMDP, concentration=0.5) -> ExpertPolicy:
    return ExpertPolicy(rng.dirichlet(
        np.full(cmdp.num_actions, concentration),
        size=(cmdp.num_states, cmdp.num_contexts),
    ))


class RandomHistoryPolicy:
    """Arbitrary deterministic-in-history stochastic policy (hash seeded)."""

    def __init__(self, num_actions: int, seed: int, concentration: float = 1.0):
        self.num_actions = num_actions
        self.seed = seed
        self.concentration = concentration
        self._cache: dict[History, np.ndarray] = {}

    def __call__(self, history: History) -> np.ndarray:
        p = self._cache.get(history)
        if p is None:
            key = (self.seed, len(history.states)) + history.states + history.actions
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))
            p = rng.dirichlet(np.full(self.num_actions, self.concentration))
            self._cache[history] = p
        return p


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _sample(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


def rollout(cmdp: TabularCMDP, policy: PolicyInterface, context: int | None = None,
            stream: RandomStream | None = None) -> Trajectory:
    """Sample one episode; the policy is only ever shown the history."""
    if stream is None:
        stream = RandomStream(0)
    T = cmdp.horizon
    u = stream.uniforms((T + 1, 2))
    c = _sample(cmdp.context_prior, u[0, 0]) if context is None else int(context)
    if not 0 <= c < cmdp.num_contexts:
        raise ValueError(f"context {c} out of range")
    history = History((_sample(cmdp.initial_state_dist, u[0, 1]),))
    rewards, actions = [], []
    for t in range(T):
        s = history.last_state
        a = _sample(np.asarray(policy(history)), u[t + 1, 0])
        actions.append(a)
        rewards.append(float(cmdp.reward[s, a, c]))
        if t < T - 1:
            history = history.extend(a, _sample(cmdp.transition[s, a, c], u[t + 1, 1]))
    return Trajectory(c, history, tuple(rewards), tuple(actions))


def monte_carlo_return(cmdp: TabularCMDP, policy: PolicyInterface, n: int,
                       stream: RandomStream, context: int | None = None) -> tuple[float, float]:
    """Mean return over ``n`` rollouts and its standard error.

    Rollouts are batched: trials sharing a history share one policy call.
    """
    T = cmdp.horizon
    u = stream.uniforms((T + 1, 2, n))
    cdf_prior = np.cumsum(cmdp.context_prior)
    if context is None:
        c = np.minimum(np.searchsorted(cdf_prior, u[0, 0], side="right"), cmdp.num_contexts - 1)
    else:
        c = np.full(n, int(context))
    s = np.minimum(np.searchsorted(np.cumsum(cmdp.initial_state_dist), u[0, 1], side="right"),
                   cmdp.num_states - 1)
    # history ids: index into a list of History objects
    hist_of: list[History] = []
    index: dict[History, int] = {}
    hid = np.empty(n, dtype=np.int64)
    for i in range(n):
        h = History((int(s[i]),))
        hid[i] = index.setdefault(h, len(hist_of))
        if hid[i] == len(hist_of):
            hist_of.append(h)
    total = np.zeros(n)
    cdf_trans = np.cumsum(cmdp.transition, axis=-1)
    for t in range(T):
        uniq, inv = np.unique(hid, return_inverse=True)
        probs = np.array([np.asarray(policy(hist_of[k]), dtype=float) for k in uniq])
        cdf = np.cumsum(probs, axis=1)[inv]
        a = np.minimum((cdf <= u[t + 1, 0][:, None]).sum(1), cmdp.num_actions - 1)
        total += cmdp.reward[s, a, c]
        if t == T - 1:
            break
        nxt = np.minimum((cdf_trans[s, a, c] <= u[t + 1, 1][:, None]).sum(1), cmdp.num_states - 1)
        keys = uniq[inv] * (cmdp.num_actions * cmdp.num_states) + a * cmdp.num_states + nxt
        new_keys, new_inv = np.unique(keys, return_inverse=True)
        new_ids = np.empty(len(new_keys), dtype=np.int64)
        for j, key in enumerate(new_keys):
            parent, rest = divmod(int(key), cmdp.num_actions * cmdp.num_states)
            act, st = divmod(rest, cmdp.num_states)
            h = hist_of[parent].extend(act, st)
            k = index.get(h)
            if k is None:
                k = index[h] = len(hist_of)
                hist_of.append(h)
            new_ids[j] = k
        hid = new_ids[new_inv]
        s = nxt
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class HistoryTree:
    """Enumerated history prefixes up to the horizon.

    Node ``n`` carries ``chance[n, c] = p(c) p(s_1) prod T(s_{i+1}|s_i, a_i, c)``,
    the policy-free part of every trajectory measure. Nodes are stored in
    breadth-first order so parents always precede children.
    """

    cmdp: TabularCMDP
    horizon: int
    histories: list[History]
    depth: np.ndarray
    state: np.ndarray
    parent: np.ndarray
    parent_action: np.ndarray
    chance: np.ndarray
    children: list[dict[tuple[int, int], int]] = field(repr=False)
    index: dict[History, int] = field(repr=False)
    learner_probs: np.ndarray | None = None
    expert_probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        self._levels = [np.flatnonzero(self.depth == t) for t in range(1, self.horizon + 1)]

    @property
    def size(self) -> int:
        return len(self.histories)

    def level(self, t: int) -> np.ndarray:
        return self._levels[t - 1]

    def own_reach(self, probs: np.ndarray) -> np.ndarray:
        """prod_i pi(a_i|h_i) along each node's path for a node-indexed policy."""
        reach = np.ones(self.size)
        for idx in self._levels[1:]:
            par = self.parent[idx]
            reach[idx] = reach[par] * probs[par, self.parent_action[idx]]
        return reach

    def expert_reach(self, expert: ExpertPolicy) -> np.ndarray:
        """prod_i pi^E(a_i|s_i, c), shape (nodes, contexts)."""
        reach = np.ones((self.size, self.cmdp.num_contexts))
        for idx in self._levels[1:]:
            par = self.parent[idx]
            reach[idx] = reach[par] * expert.probs[self.state[par], :, self.parent_action[idx]]
        return reach

    def learner_joint(self, probs: np.ndarray | None = None) -> np.ndarray:
        """p(c, h; pi) per node, shape (nodes, contexts)."""
        probs = self.learner_probs if probs is None else probs
        return self.chance * self.own_reach(probs)[:, None]

    def expert_joint(self, expert: ExpertPolicy) -> np.ndarray:
        return self.chance * self.expert_reach(expert)

    def posterior_on(self) -> np.ndarray:
        """On-policy context posterior per node (actions carry no evidence)."""
        tot = self.chance.sum(1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(tot > 0, self.chance / np.where(tot > 0, tot, 1.0), 1.0 / self.cmdp.num_contexts)
        return post

    def policy_table(self, policy: PolicyInterface) -> np.ndarray:
        return np.array([np.asarray(policy(h), dtype=float) for h in self.histories])

    def expert_table(self, expert: ExpertPolicy) -> np.ndarray:
        """pi^E(a|s_n, c) per node, shape (nodes, contexts, actions)."""
        return expert.probs[self.state]


def build_tree(cmdp: TabularCMDP, horizon: int | None = None,
               policy: PolicyInterface | None = None,
               expert: ExpertPolicy | None = None,
               budget: int = DEFAULT_BUDGET, tol: float = PRUNE_TOL) -> HistoryTree:
    """Depth-first product expansion, pruned to the support of the given actors.

    With neither ``policy`` nor ``expert`` every action is expanded (the full
    history tree used by the moment game). Branches whose joint probability
    under every supplied actor falls below ``tol`` are dropped.
    """
    T = cmdp.horizon if horizon is None else horizon
    C = cmdp.num_contexts
    full = policy is None and expert is None
    histories: list[History] = []
    depth, state, parent, paction = [], [], [], []
    chance_rows, children = [], []
    lp_rows, lreach, ereach = [], [], []
    index: dict[History, int] = {}

    def add(h, d, s, par, act, ch, lr, er):
        if len(histories) >= budget:
            raise EnumerationBudgetExceeded(budget)
        index[h] = len(histories)
        histories.append(h)
        depth.append(d); state.append(s); parent.append(par); paction.append(act)
        chance_rows.append(ch); children.append({}); lreach.append(lr); ereach.append(er)
        if policy is not None:
            lp_rows.append(np.asarray(policy(h), dtype=float))
        return index[h]

    for s1 in range(cmdp.num_states):
        p1 = cmdp.initial_state_dist[s1]
        if p1 <= 0:
            continue
        add(History((s1,)), 1, s1, -1, -1, cmdp.context_prior * p1, 1.0, np.ones(C))

    head = 0
    while head < len(histories):
        n = head
        head += 1
        if depth[n] >= T:
            continue
        s, ch = state[n], chance_rows[n]
        for a in range(cmdp.num_actions):
            lr = lreach[n] * lp_rows[n][a] if policy is not None else 0.0
            er = ereach[n] * expert.probs[s, :, a] if expert is not None else np.zeros(C)
            if not full and lr <= 0 and not np.any(er > 0):
                continue
            for s2 in range(cmdp.num_states):
                ch2 = ch * cmdp.transition[s, a, :, s2]
                if full:
                    keep = np.any(ch2 > 0)
                else:
                    keep = lr * ch2.sum() > tol or float(er @ ch2) > tol
                if not keep:
                    continue
                h2 = histories[n].extend(a, s2)
                k = add(h2, depth[n] + 1, s2, n, a, ch2, lr, er)
                children[n][(a, s2)] = k

    tree = HistoryTree(
        cmdp=cmdp, horizon=T, histories=histories,
        depth=np.array(depth), state=np.array(state), parent=np.array(parent),
        parent_action=np.array(paction), chance=np.array(chance_rows).reshape(-1, C),
        children=children, index=index,
    )
    if policy is not None:
        tree.learner_probs = np.array(lp_rows)
    return tree


def expected_return(cmdp: TabularCMDP, policy: PolicyInterface, horizon: int | None = None,
                    budget: int = DEFAULT_BUDGET) -> float:
    """Exact J(pi) under the learner's trajectory measure."""
    tree = build_tree(cmdp, horizon, policy=policy, budget=budget)
    joint = tree.learner_joint()
    r = cmdp.reward[tree.state]  # (n, a, c)
    return float(np.einsum("nc,na,nac->", joint, tree.learner_probs, r))


def expected_return_expert(cmdp: TabularCMDP, expert: ExpertPolicy, horizon: int | None = None,
                           budget: int = DEFAULT_BUDGET) -> float:
    """Exact J(pi^E) under the expert's trajectory measure."""
    tree = build_tree(cmdp, horizon, expert=expert, budget=budget)
    joint = tree.expert_joint(expert)
    return float(np.einsum("nc,nca,nac->", joint, expert.probs[tree.state], cmdp.reward[tree.state]))


def aig(cmdp: TabularCMDP, expert: ExpertPolicy, policy: PolicyInterface, T: int | None = None,
        budget: int = DEFAULT_BUDGET) -> float:
    """Average imitation gap ``(J(pi^E) - J(pi)) / T`` at horizon ``T``."""
    T = cmdp.horizon if T is None else T
    m = cmdp.with_horizon(T)
    return (expected_return_expert(m, expert, budget=budget)
            - expected_return(m, policy, budget=budget)) / T


class ValueTables:
    """Exact finite-horizon V^pi(h, c) and Q^pi(h, a, c), computed on demand.

    Backward induction is memoised per ``(history, context)`` so only the
    part of the history space that is actually queried gets expanded.
    """

    def __init__(self, cmdp: TabularCMDP, policy: PolicyInterface, budget: int = DEFAULT_BUDGET):
        self.cmdp = cmdp
        self.policy = policy
        self.budget = budget
        self._v: dict[tuple[History, int], float] = {}
        self._pi: dict[History, np.ndarray] = {}

    def _probs(self, h: History) -> np.ndarray:
        p = self._pi.get(h)
        if p is None:
            p = self._pi[h] = np.asarray(self.policy(h), dtype=float)
        return p

    def Q(self, h: History, a: int, c: int) -> float:
        m = self.cmdp
        s = h.last_state
        q = float(m.reward[s, a, c])
        if h.t < m.horizon:
            row = m.transition[s, a, c]
            for s2 in np.flatnonzero(row > 0):
                q += row[s2] * self.V(h.extend(a, s2), c)
        return q

    def V(self, h: History, c: int) -> float:
        key = (h, c)
        v = self._v.get(key)
        if v is None:
            if len(self._v) >= self.budget:
                raise EnumerationBudgetExceeded(self.budget)
            p = self._probs(h)
            v = sum(p[a] * self.Q(h, a, c) for a in np.flatnonzero(p > 0))
            self._v[key] = v = float(v)
        return v

    def Q_row(self, h: History, c: int) -> np.ndarray:
        return np.array([self.Q(h, a, c) for a in range(self.cmdp.num_actions)])


def q_and_value(cmdp: TabularCMDP, policy: PolicyInterface, budget: int = DEFAULT_BUDGET) -> ValueTables:
    return ValueTables(cmdp, policy, budget)


def expert_q(cmdp: TabularCMDP, expert: ExpertPolicy, horizon: int | None = None):
    """Markov expert values: ``Q[t, s, a, c]`` and ``V[t, s, c]`` for steps t = 0..T-1."""
    T = cmdp.horizon if horizon is None else horizon
    S, A, C = cmdp.num_states, cmdp.num_actions, cmdp.num_contexts
    Q = np.zeros((T, S, A, C))
    V = np.zeros((T + 1, S, C))
    for t in range(T - 1, -1, -1):
        Q[t] = cmdp.reward + np.einsum("sacn,nc->sac", cmdp.transition, V[t + 1])
        V[t] = np.einsum("sca,sac->sc", expert.probs, Q[t])
    return Q, V[:T]


def start_value(cmdp: TabularCMDP, values: ValueTables) -> float:
    """sum_{s, c} p(s_1) p(c) V(s_1, c), the backward-induction route to J."""
    total = 0.0
    for s in np.flatnonzero(cmdp.initial_state_dist > 0):
        for c in np.flatnonzero(cmdp.context_prior > 0):
            total += cmdp.initial_state_dist[s] * cmdp.context_prior[c] * values.V(History((int(s),)), int(c))
    return total
