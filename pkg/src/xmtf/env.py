"""Synthetic short-video sessions with a latent satisfaction budget.

A user arrives with a taste vector over feedback types and a patience
budget. Each request draws a candidate pool whose true feedback
probabilities follow the population sparsity of a short-video platform;
the ranker sees noisy predictions of those probabilities. Watching items
earns watch time (the reward); interactions the user cares about refill the
budget, every request drains it, and the session ends when it runs out.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .exceptions import ContractViolation, SessionDone

FEEDBACK_TYPES = ("click", "long_view", "like", "follow", "comment", "share")
BASE_RATES = (0.3793, 0.2635, 0.0151, 0.0012, 0.0025, 0.0009)
LONG_VIEW = 1


@dataclass
class SessionConfig:
    candidate_count: int = 50
    slate_size: int = 6
    t_max: int = 30
    prediction_noise: float = 0.05
    base_rates: tuple = BASE_RATES
    # logit-scale spread of each type's true probability across items
    logit_spread: tuple = (1.0, 1.0, 1.2, 1.4, 1.4, 1.4)
    # correlation between an item's watchability and engagement factors
    watch_engage_corr: float = -0.3
    # loading of the shared engagement factor on the interaction types
    engage_loading: float = 0.4
    watch_time_mean: float = 20.0
    watch_time_spread: float = 0.4
    patience_mean: float = 2.0
    patience_shape: float = 4.0
    preference_concentration: float = 0.3
    kappa_gain: float = 0.08
    kappa_cost: float = 1.0
    interaction_weights: tuple = (0.3, 0.1, 10.0, 60.0, 40.0, 80.0)
    history_decay: float = 0.8
    observe_budget: bool = True
    # "outcomes": sampled interactions refill the budget; "expected": their probabilities do
    budget_signal: str = "expected"
    # watch time scales with exp(effect * taste match) of user and item
    taste_watch_effect: float = 0.6

    def __post_init__(self):
        self.base_rates = tuple(self.base_rates)
        self.logit_spread = tuple(self.logit_spread)
        self.interaction_weights = tuple(self.interaction_weights)
        if self.slate_size > self.candidate_count:
            raise ContractViolation("slate_size cannot exceed candidate_count")
        if self.t_max < 1 or self.slate_size < 1:
            raise ContractViolation("t_max and slate_size must be at least 1")
        if not (len(self.base_rates) == len(self.logit_spread) == len(self.interaction_weights)):
            raise ContractViolation("per-type settings must share one length")
        if self.patience_mean <= 0 or self.patience_shape <= 0:
            raise ContractViolation("patience parameters must be positive")
        if self.budget_signal not in ("outcomes", "expected"):
            raise ContractViolation(f"unknown budget_signal {self.budget_signal!r}")

    @property
    def K(self) -> int:
        return len(self.base_rates)

    @property
    def state_dim(self) -> int:
        return 2 * self.K + 3 + int(self.observe_budget)

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentUser:
    preference: np.ndarray
    patience: float
    affinity_seed: int


@dataclass
class SimItem:
    true_probs: np.ndarray
    base_watch_time: float


@lru_cache(maxsize=64)
def _logit_offsets(base_rates, spreads):
    # offset mu_k with E[sigmoid(mu_k + spread_k * Z)] = base_rate_k, Z ~ N(0, 1)
    x, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    out = []
    for m, sd in zip(base_rates, spreads):
        out.append(brentq(lambda mu: float(w @ expit(mu + sd * x)) - m, -40.0, 40.0))
    return tuple(out)


class Session:
    """One user's session. Owns its RNG stream; not shared between threads."""

    def __init__(self, env: "SessionEnv", user: LatentUser):
        self.env = env
        self.config = env.config
        self.user = user
        self.rng = np.random.default_rng([user.affinity_seed, 1])
        self.budget = float(user.patience)
        self.t = 0
        self.done = False
        self.history = np.zeros(self.config.K + 1)
        self.total_reward = 0.0
        self._items = None
        self.state = self._state()

    def _state(self) -> np.ndarray:
        c = self.config
        return np.concatenate([
            self.user.preference,
            [self.user.patience / c.patience_mean],
            self.history,
            [self.budget / c.patience_mean] if c.observe_budget else [],
            [self.t / c.t_max],
        ])

    def gen_candidates(self):
        """Draw the request's candidate pool.

        Returns ``(true_probs (N, K), base_watch_time (N,), predictions (N, K))``.
        """
        if self.done:
            raise SessionDone("session has ended")
        P, W = self.env.draw_items(self.rng, self.config.candidate_count)
        O = self.env.predict(self.rng, P)
        self._items = (P, W)
        return P, W, O

    def items(self):
        if self._items is None:
            raise ContractViolation("no candidates drawn for this request")
        P, W = self._items
        return [SimItem(p, w) for p, w in zip(P, W)]

    def step(self, slate):
        """Serve ``slate`` (indices into the current candidates).

        Returns ``(reward, next_state, done)``.
        """
        if self.done:
            raise SessionDone("session has ended")
        if self._items is None:
            raise ContractViolation("call gen_candidates before step")
        c = self.config
        slate = np.asarray(slate, dtype=int)
        P, W = self._items
        if slate.shape != (c.slate_size,) or slate.min() < 0 or slate.max() >= len(P) \
                or len(np.unique(slate)) != len(slate):
            raise ContractViolation(f"invalid slate {slate.tolist()}")
        outcomes = self.rng.random((len(slate), c.K)) < P[slate]
        watch = W[slate] * (0.3 + 0.7 * outcomes[:, LONG_VIEW])
        if c.taste_watch_effect:
            watch = watch * self.env.taste_multiplier(self.user.preference, P[slate])
        reward = float(watch.sum())
        w = np.asarray(c.interaction_weights) * c.K * self.user.preference
        felt = outcomes if c.budget_signal == "outcomes" else P[slate]
        gain = c.kappa_gain * float((felt @ w).sum())
        self.budget += gain - c.kappa_cost
        consumed = np.concatenate([outcomes.mean(axis=0), [watch.mean() / c.watch_time_mean]])
        self.history = c.history_decay * self.history + (1.0 - c.history_decay) * consumed
        self.t += 1
        self.total_reward += reward
        self.done = self.budget <= 0.0 or self.t >= c.t_max
        self._items = None
        self.state = self._state()
        return reward, self.state, self.done


class SessionEnv:
    def __init__(self, config: SessionConfig | None = None):
        self.config = config or SessionConfig()
        c = self.config
        self.K = c.K
        self.state_dim = c.state_dim
        self._mu = np.asarray(_logit_offsets(c.base_rates, c.logit_spread))
        self._sd = np.asarray(c.logit_spread)
        self.base_rates = np.asarray(c.base_rates)
        rho = c.watch_engage_corr
        sd = np.full(c.K, np.sqrt(c.engage_loading ** 2 + 0.64))
        sd[0] = np.sqrt(0.36 + 0.36 + 0.72 * rho + 0.25)
        sd[1] = np.sqrt(1.0 + 0.16)
        self._lat_sd = sd
        self._lat_corr = self._latent_correlation()

    def _latent_correlation(self):
        # Monte Carlo estimate, fixed seed: only used to centre the taste factor
        P, _ = self.draw_items(np.random.default_rng(12345), 20_000)
        return np.corrcoef(self.item_latents(P), rowvar=False)

    def sample_user(self, seed) -> LatentUser:
        c = self.config
        rng = np.random.default_rng([int(seed), 0])
        pref = rng.dirichlet(np.full(c.K, c.preference_concentration))
        pref = pref / pref.sum()
        scale = c.patience_mean / c.patience_shape
        patience = float(rng.gamma(c.patience_shape, scale))
        return LatentUser(pref, max(patience, 1e-6), int(seed))

    def reset(self, seed) -> Session:
        return Session(self, self.sample_user(seed))

    def draw_items(self, rng, n):
        c = self.config
        rho = c.watch_engage_corr
        z = rng.standard_normal((n, 2 + c.K + 1))
        watch = z[:, 0]
        engage = rho * watch + np.sqrt(1.0 - rho * rho) * z[:, 1]
        eps = z[:, 2:2 + c.K]
        lat = np.empty((n, c.K))
        lat[:, 0] = (0.6 * watch + 0.6 * engage + 0.5 * eps[:, 0])
        lat[:, 1] = (watch + 0.4 * eps[:, 1])
        lat[:, 2:] = c.engage_loading * engage[:, None] + 0.8 * eps[:, 2:]
        lat /= self._lat_sd
        P = expit(self._mu + self._sd * lat)
        W = c.watch_time_mean * np.exp(c.watch_time_spread * (0.8 * watch + 0.6 * z[:, -1])
                                       - 0.5 * c.watch_time_spread ** 2)
        return P, W

    def item_latents(self, P):
        """Standardized per-type latent of each item, recovered from its true probabilities."""
        P = np.clip(P, 1e-300, 1.0 - 1e-16)
        return np.clip((np.log(P) - np.log1p(-P) - self._mu) / self._sd, -6.0, 6.0)

    def taste_multiplier(self, preference, P):
        """Mean-one watch-time factor growing with the preference-weighted item latent."""
        e = self.config.taste_watch_effect
        m = self.item_latents(P) @ preference
        var = float(preference @ self._lat_corr @ preference)
        return np.exp(e * m - 0.5 * e * e * var)

    def predict(self, rng, P):
        """Noisy predictions: Gaussian noise sized to each type's base rate."""
        c = self.config
        if c.prediction_noise == 0.0:
            return P.copy()
        scale = c.prediction_noise * self.base_rates / self.base_rates.max()
        return np.clip(P + scale * rng.standard_normal(P.shape), 0.0, 1.0)

    def to_dict(self):
        return self.config.to_dict()


def trace_record(session: Session, state, O, action, slate, reward) -> str:
    """One JSONL line describing a served request."""
    digest = float(np.round(np.sum(np.asarray(state) * np.arange(1, len(state) + 1)), 9))
    return json.dumps({
        "t": session.t - 1,
        "state_digest": digest,
        "predictions": np.round(O, 6).tolist(),
        "action": None if action is None else np.asarray(action).tolist(),
        "slate": list(map(int, slate)),
        "reward": reward,
        "budget": session.budget,
    })
