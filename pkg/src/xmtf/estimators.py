"""scikit-learn style wrappers around the rankers.

``X`` is always a candidate matrix of shape (n_candidates, K) holding the
predicted feedback probabilities of one request. Personalized rankers also
take the raw user ``state`` of that request. ``fit`` trains against the
simulated session environment, so ``y`` is ignored.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array, check_random_state
from sklearn.utils.validation import check_is_fitted

from .baselines import DEFAULT_OFFSET, cem_optimize, env_objective, formula_scores
from .env import SessionConfig, SessionEnv
from .exceptions import ContractViolation
from .mfc import fuse, inner_outputs, rank_top_n
from .trainer import TrainConfig, Trainer, train_user_seed


def _seed(random_state) -> int:
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    return int(check_random_state(random_state).randint(2 ** 31 - 1))


def _env(env_config):
    if env_config is None:
        return SessionEnv()
    if isinstance(env_config, dict):
        env_config = SessionConfig(**env_config)
    return SessionEnv(env_config)


class _RankerMixin:
    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractViolation(f"expected {self.n_features_in_} feedback types, got {X.shape[1]}")
        return X

    def predict(self, X, state=None, n=None):
        """Indices of the top ``n`` candidates (all of them when ``n`` is None), best first."""
        scores = self.decision_function(X, state) if state is not None else self.decision_function(X)
        return np.asarray(rank_top_n(scores, len(scores) if n is None else n))


class FormulaRanker(_RankerMixin, BaseEstimator):
    """A fixed fusion formula with global coefficients."""

    def __init__(self, kind="log_offset", coefficients=None, offset=DEFAULT_OFFSET):
        self.kind = kind
        self.coefficients = coefficients
        self.offset = offset

    def fit(self, X=None, y=None):
        if self.coefficients is None:
            raise ContractViolation("FormulaRanker needs coefficients")
        a = np.asarray(self.coefficients, dtype=np.float64)
        self.coef_ = a
        self.n_features_in_ = a.size
        if X is not None:
            self._check_X(X)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = self._check_X(X)
        return formula_scores(self.kind, self.coef_, X, np.full(self.coef_.size, self.offset))

    def transform(self, X):
        """Per-type additive terms whose (outer-transformed) sum is the score."""
        check_is_fitted(self, "coef_")
        X = self._check_X(X)
        if self.kind == "linear":
            return X * self.coef_
        base = X + self.offset if self.kind == "log_offset" else X
        if np.any(base <= 0.0):
            raise ContractViolation(f"{self.kind} terms need positive arguments")
        return self.coef_ * np.log(base)


class CEMRanker(FormulaRanker):
    """Global formula coefficients found by cross-entropy search on the simulator."""

    def __init__(self, kind="log_offset", iterations=40, population=64, elite_fraction=0.125,
                 seeds_per_eval=8, init_std=1.0, offset=DEFAULT_OFFSET, env_config=None,
                 random_state=None):
        self.kind = kind
        self.iterations = iterations
        self.population = population
        self.elite_fraction = elite_fraction
        self.seeds_per_eval = seeds_per_eval
        self.init_std = init_std
        self.offset = offset
        self.env_config = env_config
        self.random_state = random_state

    def fit(self, X=None, y=None):
        env = _env(self.env_config)
        seed = _seed(self.random_state)
        rng = np.random.default_rng([seed, 17])
        counter = iter(range(1 << 62))

        def seeds_fn():
            return [train_user_seed(seed, 0, next(counter)) for _ in range(self.seeds_per_eval)]

        offsets = np.full(env.K, self.offset)
        state = cem_optimize(env_objective(env, self.kind, seeds_fn, offsets), np.zeros(env.K),
                             np.full(env.K, self.init_std), self.iterations, self.population,
                             self.elite_fraction, rng)
        self.coef_ = state.best
        self.history_ = state.history
        self.n_features_in_ = env.K
        return self


class _ActorCriticRanker(_RankerMixin, BaseEstimator):
    def _train_config(self):
        raise NotImplementedError

    def fit(self, X=None, y=None):
        """Train from scratch for ``n_sessions`` simulated sessions."""
        self.env_ = _env(self.env_config)
        cfg = TrainConfig.from_dict({**self._train_config(), "seed": _seed(self.random_state)})
        self.trainer_ = Trainer(cfg, self.env_, 0).run()
        self.n_features_in_ = self.env_.K
        return self

    def partial_fit(self, X=None, y=None, n_sessions=100):
        """Continue training for ``n_sessions`` more sessions (fits first if needed)."""
        if not hasattr(self, "trainer_"):
            self.env_ = _env(self.env_config)
            cfg = TrainConfig.from_dict({**self._train_config(), "n_sessions": 0,
                                         "seed": _seed(self.random_state)})
            self.trainer_ = Trainer(cfg, self.env_, 0)
            self.n_features_in_ = self.env_.K
        self.trainer_.run(n_sessions)
        return self

    def _state(self, state):
        s = np.asarray(state, dtype=np.float64).ravel()
        if s.size != self.env_.state_dim:
            raise ContractViolation(f"state must have {self.env_.state_dim} entries")
        return self.trainer_.agent.norm(s)

    def action(self, state):
        """Deterministic outer-stage action for a raw user state."""
        check_is_fitted(self, "trainer_")
        return self.trainer_.agent.action(self._state(state))

    def decision_function(self, X, state):
        check_is_fitted(self, "trainer_")
        X = self._check_X(X)
        s = self._state(state)
        agent = self.trainer_.agent
        return agent.scores(s, agent.action(s), X)

    def score(self, X=None, y=None, n_users=None):
        """Mean session watch time on held-out simulated users."""
        check_is_fitted(self, "trainer_")
        totals, _ = self.trainer_.evaluate(n_users)
        return float(totals.mean())


class FormulaRLRanker(_ActorCriticRanker):
    """Actor-critic that outputs per-user coefficients of a fixed formula."""

    def __init__(self, kind="log_offset", n_sessions=2000, actor_lr=1e-4, critic_lr=1e-3,
                 gamma=0.9, batch_size=64, env_config=None, random_state=None):
        self.kind = kind
        self.n_sessions = n_sessions
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.gamma = gamma
        self.batch_size = batch_size
        self.env_config = env_config
        self.random_state = random_state

    def _train_config(self):
        return dict(method="formula_rl", formula=self.kind, n_sessions=self.n_sessions,
                    actor_lr=self.actor_lr, critic_lr=self.critic_lr, gamma=self.gamma,
                    batch_size=self.batch_size)


class XMTFRanker(_ActorCriticRanker):
    """Monotone per-type cells fused by a personalized outer stage."""

    def __init__(self, lam=0.4, ablation="full", n_sessions=2000, actor_lr=1e-4, critic_lr=1e-3,
                 inner_lr=2e-4, gamma=0.9, batch_size=64, env_config=None, random_state=None):
        self.lam = lam
        self.ablation = ablation
        self.n_sessions = n_sessions
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.inner_lr = inner_lr
        self.gamma = gamma
        self.batch_size = batch_size
        self.env_config = env_config
        self.random_state = random_state

    def _train_config(self):
        return dict(method="xmtf", lam=self.lam, ablation=self.ablation,
                    n_sessions=self.n_sessions, actor_lr=self.actor_lr,
                    critic_lr=self.critic_lr, inner_lr=self.inner_lr, gamma=self.gamma,
                    batch_size=self.batch_size)

    def transform(self, X, state):
        """Inner-cell outputs (n_candidates, K) for one request."""
        check_is_fitted(self, "trainer_")
        X = self._check_X(X)
        s = self._state(state)
        return inner_outputs(self.trainer_.agent.mfc, s[None, :], X[None])[0]

    def fusion(self, X, state):
        """Both score vectors of one request."""
        check_is_fitted(self, "trainer_")
        X = self._check_X(X)
        s = self._state(state)
        agent = self.trainer_.agent
        return fuse(agent.mfc, agent.action(s), s, X)
