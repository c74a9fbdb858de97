"""K-armed causal bandit with noisy binary feedback.

Each episode hides a correct arm ``c``. Pulling arm ``a`` yields ``+`` when
``a == c`` and ``-`` otherwise, flipped with probability ``eps_obs``. The
expert plays ``c`` with probability ``1 - eps_exp`` and a uniformly chosen
other arm otherwise. Learners suffer the same ``eps_exp`` chance of their
intended arm being replaced by a uniformly chosen other arm, and the history
records the arm that was actually pulled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latchlab.core import ExpertPolicy, History, PolicyInterface, TabularCMDP
from latchlab.rng import RandomStream

PLUS, MINUS = "+", "-"

# CMDP encoding of the observation stream
START_STATE, PLUS_STATE, MINUS_STATE = 0, 1, 2
_STATE_OF = {PLUS: PLUS_STATE, MINUS: MINUS_STATE}
_SYMBOL_OF = {PLUS_STATE: PLUS, MINUS_STATE: MINUS}


@dataclass(frozen=True)
class BanditParams:
    K: int
    eps_obs: float
    eps_exp: float
    T: int = 2000

    def __post_init__(self) -> None:
        if int(self.K) != self.K or self.K < 2:
            raise ValueError(f"K must be an integer >= 2, got {self.K}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        for name in ("eps_obs", "eps_exp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "eps_obs", float(self.eps_obs))
        object.__setattr__(self, "eps_exp", float(self.eps_exp))

    @classmethod
    def from_config(cls, doc: dict) -> "BanditParams":
        return cls(K=doc["K"], eps_obs=doc["eps_obs"], eps_exp=doc["eps_exp"], T=doc.get("T", 2000))


@dataclass(frozen=True)
class BanditHistory:
    pulls: tuple[int, ...] = ()
    feedback: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.pulls) != len(self.feedback):
            raise ValueError("pulls and feedback must have equal length")
        if any(f not in (PLUS, MINUS) for f in self.feedback):
            raise ValueError("feedback symbols must be '+' or '-'")

    def append(self, arm: int, symbol: str) -> "BanditHistory":
        return BanditHistory(self.pulls + (int(arm),), self.feedback + (symbol,))

    def to_history(self) -> History:
        return History((START_STATE,) + tuple(_STATE_OF[f] for f in self.feedback), self.pulls)

    @classmethod
    def from_history(cls, history: History) -> "BanditHistory":
        return cls(tuple(history.actions), tuple(_SYMBOL_OF[s] for s in history.states[1:]))


def expert_action_dist(params: BanditParams, context: int) -> np.ndarray:
    K = params.K
    if not 0 <= context < K:
        raise ValueError(f"context {context} out of range for K={K}")
    p = np.full(K, params.eps_exp / (K - 1))
    p[context] = 1.0 - params.eps_exp
    return p


def expert_matrix(params: BanditParams) -> np.ndarray:
    """Row ``c`` is the expert's arm distribution when ``c`` is correct."""
    K, e = params.K, params.eps_exp
    return np.full((K, K), e / (K - 1)) + np.eye(K) * (1.0 - e - e / (K - 1))


def expert_policy(params: BanditParams) -> ExpertPolicy:
    """The expert as a (state, context) -> arm table over the encoded states."""
    return ExpertPolicy(np.broadcast_to(expert_matrix(params), (3, params.K, params.K)).copy())


def feedback_likelihood(params: BanditParams, obs: str, arm: int, context: int) -> float:
    p_plus = 1.0 - params.eps_obs if arm == context else params.eps_obs
    return p_plus if obs == PLUS else 1.0 - p_plus


def noise_from_uniforms(intended, u_flip, u_other, K: int, eps_exp: float):
    """Map two uniforms to the executed arm; works elementwise on arrays."""
    shift = 1 + np.minimum(np.floor(np.asarray(u_other) * (K - 1)).astype(int), K - 2)
    other = (np.asarray(intended) + shift) % K
    return np.where(np.asarray(u_flip) < eps_exp, other, intended)


def apply_exploration_noise(params: BanditParams, intended: int, stream: RandomStream) -> int:
    u = stream.uniforms(2)
    return int(noise_from_uniforms(intended, u[0], u[1], params.K, params.eps_exp))


def step(params: BanditParams, context: int, intended: int, stream: RandomStream) -> tuple[int, str]:
    """Execute one pull: exploration noise, then noisy feedback on the executed arm."""
    u = stream.uniforms(3)
    executed = int(noise_from_uniforms(intended, u[0], u[1], params.K, params.eps_exp))
    p_plus = feedback_likelihood(params, PLUS, executed, context)
    return executed, (PLUS if u[2] < p_plus else MINUS)


def as_cmdp(params: BanditParams, horizon: int | None = None) -> TabularCMDP:
    """The bandit as a CMDP whose observed states carry the last feedback.

    States: ``START`` (only at t=1), ``PLUS`` and ``MINUS``. The transition
    from any state on arm ``a`` under context ``c`` is the feedback likelihood.
    Rewards are 1 for the correct arm and 0 otherwise.
    """
    K, e = params.K, params.eps_obs
    trans = np.zeros((3, K, K, 3))
    for a in range(K):
        for c in range(K):
            p_plus = 1.0 - e if a == c else e
            trans[:, a, c, PLUS_STATE] = p_plus
            trans[:, a, c, MINUS_STATE] = 1.0 - p_plus
    reward = np.broadcast_to(np.eye(K), (3, K, K)).copy()
    return TabularCMDP(
        num_states=3, num_actions=K, num_contexts=K,
        horizon=params.T if horizon is None else horizon,
        context_prior=np.full(K, 1.0 / K),
        initial_state_dist=np.array([1.0, 0.0, 0.0]),
        transition=trans, reward=reward,
    )


def with_exploration(policy: PolicyInterface, params: BanditParams) -> PolicyInterface:
    """Distribution of the executed arm when ``policy`` picks the intended one."""
    K, e = params.K, params.eps_exp

    def noisy(history: History) -> np.ndarray:
        p = np.asarray(policy(history), dtype=float)
        return (1.0 - e) * p + e / (K - 1) * (1.0 - p)

    return noisy
