"""Exact context posteriors for history-based imitators.

Two filters share one update rule and differ in a single factor. The
off-policy filter scores each past action by the expert's probability of
playing it, as if the expert had produced the history. The on-policy filter
treats past actions as interventions and scores only the observed
transitions. Mixing the expert's per-context action distributions under each
posterior gives the behaviour-cloning and DAgger learners.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass

import numpy as np

from latchlab.bandit import BanditParams, as_cmdp, expert_policy, noise_from_uniforms
from latchlab.core import ExpertPolicy, History, TabularCMDP


class FilterMode(str, enum.Enum):
    OFF_POLICY = "off"
    ON_POLICY = "on"


def _log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class Posterior:
    """Context posterior kept in log space.

    ``degenerate`` is set when every context was ruled out; the weights are
    then reset to the prior's uniform fallback and the flag stays visible.
    """

    log_weights: np.ndarray
    degenerate: bool = False

    @classmethod
    def uniform(cls, num_contexts: int) -> "Posterior":
        return cls(np.zeros(num_contexts))

    @classmethod
    def from_prior(cls, prior) -> "Posterior":
        return cls(_log(prior))

    @property
    def normalized(self) -> np.ndarray:
        w = self.log_weights
        top = w.max()
        if not np.isfinite(top):
            return np.full(len(w), 1.0 / len(w))
        p = np.exp(w - top)
        return p / p.sum()


def posterior_update(post: Posterior, mode: FilterMode, transition_likelihoods,
                     expert_action_likelihoods=None) -> Posterior:
    """Fold one step of evidence into ``post``.

    ``transition_likelihoods[c]`` is T(s_{t+1} | s_t, a_t, c) and
    ``expert_action_likelihoods[c]`` is pi^E(a_t | c, s_t); the latter only
    enters in off-policy mode.
    """
    w = post.log_weights + _log(transition_likelihoods)
    if FilterMode(mode) is FilterMode.OFF_POLICY:
        if expert_action_likelihoods is None:
            raise ValueError("off-policy update needs the expert action likelihoods")
        w = w + _log(expert_action_likelihoods)
    if not np.isfinite(w.max()):
        return Posterior(np.zeros(len(w)), degenerate=True)
    # max-shift keeps long products representable
    return Posterior(w - w.max(), degenerate=post.degenerate)


def mixture_policy(post: Posterior, expert: ExpertPolicy, state: int) -> np.ndarray:
    """sum_c p(c|h) pi^E(.|c, s)."""
    return post.normalized @ expert.probs[state]


def bc_policy(post: Posterior, expert: ExpertPolicy, state: int) -> np.ndarray:
    """Behaviour-cloning learner: expert mixture under the off-policy posterior."""
    return mixture_policy(post, expert, state)


def dagger_policy(post: Posterior, expert: ExpertPolicy, state: int) -> np.ndarray:
    """DAgger learner: expert mixture under the on-policy posterior."""
    return mixture_policy(post, expert, state)


def evidence(cmdp: TabularCMDP, expert: ExpertPolicy, history: History, i: int):
    """Likelihood vectors for the ``i``-th transition of ``history`` (0-based)."""
    s, a, s2 = history.states[i], history.actions[i], history.states[i + 1]
    return cmdp.transition[s, a, :, s2], expert.probs[s, :, a]


def posterior_from_scratch(cmdp: TabularCMDP, expert: ExpertPolicy, mode: FilterMode,
                           history: History) -> Posterior:
    post = Posterior.from_prior(cmdp.context_prior)
    for i in range(len(history.actions)):
        post = posterior_update(post, mode, *evidence(cmdp, expert, history, i))
    return post


class FilterPolicy:
    """History policy driven by an exact context filter.

    Posteriors are cached per history prefix so extending a history costs one
    update. With ``audit_every`` set, every that-many steps the incremental
    posterior is checked against a from-scratch recomputation.
    """

    def __init__(self, cmdp: TabularCMDP, expert: ExpertPolicy, mode: FilterMode,
                 audit_every: int | None = None, cache_limit: int = 200_000):
        self.cmdp = cmdp
        self.expert = expert
        self.mode = FilterMode(mode)
        self.audit_every = audit_every
        self.cache_limit = cache_limit
        self._cache: dict[History, Posterior] = {}

    def posterior(self, history: History) -> Posterior:
        cached = self._cache.get(history)
        if cached is not None:
            return cached
        t = history.t
        start = t
        while start > 1 and history.prefix(start) not in self._cache:
            start -= 1
        post = self._cache.get(history.prefix(start)) or Posterior.from_prior(self.cmdp.context_prior)
        if len(self._cache) > self.cache_limit:
            self._cache.clear()
        for i in range(start - 1, t - 1):
            post = posterior_update(post, self.mode, *evidence(self.cmdp, self.expert, history, i))
            if self.audit_every and (i + 1) % self.audit_every == 0:
                ref = posterior_from_scratch(self.cmdp, self.expert, self.mode, history.prefix(i + 2))
                if not np.allclose(ref.normalized, post.normalized, atol=1e-9, rtol=0):
                    raise AssertionError(f"posterior drift at step {i + 1}")
            self._cache[history.prefix(i + 2)] = post
        self._cache[history] = post
        return post

    def __call__(self, history: History) -> np.ndarray:
        return mixture_policy(self.posterior(history), self.expert, history.last_state)


def filter_policy_factory(params: BanditParams, mode: FilterMode, **kwargs) -> FilterPolicy:
    """BC (off) or DAgger (on) learner for the bandit, starting from a uniform prior."""
    return FilterPolicy(as_cmdp(params), expert_policy(params), mode, **kwargs)


# ---------------------------------------------------------------------------
# Vectorised bandit episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeBatch:
    """Outcome of a batch of bandit episodes run by one filter learner.

    ``final_policy[i]`` is the learner's arm distribution after all ``T``
    pulls; ``success[i]`` is the mass it puts on the correct arm. Traces are
    only filled when requested: ``posteriors[i, t]`` is the posterior after
    the ``t+1``-th pull.
    """

    contexts: np.ndarray
    final_policy: np.ndarray
    success: np.ndarray
    degenerate: np.ndarray
    posteriors: np.ndarray | None = None
    intended: np.ndarray | None = None
    executed: np.ndarray | None = None
    feedback_plus: np.ndarray | None = None
    success_trace: np.ndarray | None = None


def episode_uniforms(stream, T: int) -> tuple[int, np.ndarray]:
    """Draw what one episode consumes: a context uniform and ``(T, 4)`` step uniforms."""
    u = stream.uniforms(1 + 4 * T)
    return u[0], u[1:].reshape(T, 4)


def run_bandit_episodes(params: BanditParams, mode: FilterMode, contexts: np.ndarray,
                        uniforms: np.ndarray, record: bool = False) -> EpisodeBatch:
    """Run ``len(contexts)`` episodes of one bandit instance in lock-step.

    ``uniforms[i, t]`` holds four numbers for pull ``t`` of episode ``i``:
    intended-arm draw, noise flip, redirected-arm draw, feedback draw. Two
    modes fed the same array face identical exogenous noise.
    """
    n = len(contexts)
    return simulate_episodes(params.K, np.full(n, params.eps_obs), np.full(n, params.eps_exp),
                             mode, contexts, uniforms, record)


def simulate_episodes(K: int, eps_obs: np.ndarray, eps_exp: np.ndarray, mode: FilterMode,
                      contexts: np.ndarray, uniforms: np.ndarray, record: bool = False) -> EpisodeBatch:
    """Vectorised episodes where every episode may carry its own noise rates."""
    mode = FilterMode(mode)
    contexts = np.asarray(contexts, dtype=int)
    N, T = uniforms.shape[:2]
    eps_obs = np.asarray(eps_obs, dtype=float)[:, None]
    eps_exp = np.asarray(eps_exp, dtype=float)
    # expert row for context c: off_mass everywhere, on_mass at c
    off_mass = (eps_exp / (K - 1))[:, None]
    on_mass = (1.0 - eps_exp)[:, None]
    log_on, log_off = _log(on_mass), _log(off_mass)
    arms = np.arange(K)[None, :]
    rows = np.arange(N)
    logw = np.zeros((N, K))
    degenerate = np.zeros(N, dtype=int)
    if record:
        posts = np.empty((N, T, K))
        intended_tr = np.empty((N, T), dtype=int)
        executed_tr = np.empty((N, T), dtype=int)
        fb_tr = np.empty((N, T), dtype=bool)
        succ_tr = np.empty((N, T))

    def normalise(lw):
        p = np.exp(lw - lw.max(1, keepdims=True))
        return p / p.sum(1, keepdims=True)

    def mix(post):
        return post * (on_mass - off_mass) + off_mass

    for t in range(T):
        probs = mix(normalise(logw))
        u = uniforms[:, t]
        cdf = np.cumsum(probs, axis=1)
        intended = np.minimum((cdf <= u[:, 0:1]).sum(1), K - 1)
        executed = noise_from_uniforms(intended, u[:, 1], u[:, 2], K, eps_exp)
        hit = executed == contexts
        plus = u[:, 3] < np.where(hit, 1.0 - eps_obs[:, 0], eps_obs[:, 0])
        # likelihood of the observed symbol under each hypothesised context
        is_arm = arms == executed[:, None]
        lik_plus = np.where(is_arm, 1.0 - eps_obs, eps_obs)
        logw = logw + _log(np.where(plus[:, None], lik_plus, 1.0 - lik_plus))
        if mode is FilterMode.OFF_POLICY:
            logw = logw + np.where(is_arm, log_on, log_off)
        top = logw.max(1, keepdims=True)
        dead = ~np.isfinite(top[:, 0])
        if dead.any():
            degenerate += dead
            logw[dead] = 0.0
            top[dead] = 0.0
        logw = logw - top
        if record:
            posts[:, t] = normalise(logw)
            intended_tr[:, t], executed_tr[:, t], fb_tr[:, t] = intended, executed, plus
            succ_tr[:, t] = mix(posts[:, t])[rows, contexts]

    final = mix(normalise(logw))
    batch = EpisodeBatch(contexts, final, final[rows, contexts], degenerate)
    if record:
        batch.posteriors, batch.intended, batch.executed = posts, intended_tr, executed_tr
        batch.feedback_plus, batch.success_trace = fb_tr, succ_tr
    return batch


def fmt(x: float) -> str:
    return f"{x:.6g}"


def posterior_trace_csv(batch: EpisodeBatch, episode: int = 0) -> str:
    """Per-step dump: ``t, c0..c{K-1}, intended_arm, executed_arm, feedback``."""
    if batch.posteriors is None:
        raise ValueError("batch was run without record=True")
    K = batch.posteriors.shape[2]
    out = io.StringIO()
    out.write(",".join(["t"] + [f"c{k}" for k in range(K)] + ["intended_arm", "executed_arm", "feedback"]) + "\n")
    for t in range(batch.posteriors.shape[1]):
        row = [str(t + 1)] + [fmt(v) for v in batch.posteriors[episode, t]]
        row += [str(batch.intended[episode, t]), str(batch.executed[episode, t]),
                "+" if batch.feedback_plus[episode, t] else "-"]
        out.write(",".join(row) + "\n")
    return out.getvalue()
