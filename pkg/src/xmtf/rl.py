"""Deterministic-policy actor-critic with target networks and a replay buffer."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import BufferNotReady, ContractViolation
from .nn import Adam, AdamState, DenseNet, backward_cached, forward, forward_cache, init_dense


@dataclass
class SessionTransition:
    s: np.ndarray
    a: np.ndarray
    r: float
    predictions: np.ndarray  # (N, K)
    s_next: np.ndarray
    done: bool

    def to_json(self) -> str:
        return json.dumps({"s": self.s.tolist(), "a": self.a.tolist(), "r": self.r,
                           "predictions": self.predictions.tolist(),
                           "s_next": self.s_next.tolist(), "done": self.done})

    @classmethod
    def from_json(cls, line: str) -> "SessionTransition":
        d = json.loads(line)
        return cls(np.asarray(d["s"]), np.asarray(d["a"]), float(d["r"]),
                   np.asarray(d["predictions"]), np.asarray(d["s_next"]), bool(d["done"]))


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    O: np.ndarray
    S2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.S.shape[0]

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        if not items:
            raise ContractViolation("empty batch")
        return cls(np.stack([t.s for t in items]), np.stack([t.a for t in items]),
                   np.array([t.r for t in items], dtype=np.float64),
                   np.stack([t.predictions for t in items]),
                   np.stack([t.s_next for t in items]),
                   np.array([t.done for t in items], dtype=bool))


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("buffer capacity must be positive")
        self.capacity = int(capacity)
        self._items: list = []
        self._next = 0  # slot overwritten by the next push once full
        self.pushed = 0

    def __len__(self):
        return len(self._items)

    def push(self, transition: SessionTransition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity
        self.pushed += 1

    def items(self):
        """Transitions oldest first."""
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, batch_size: int, rng) -> list:
        if batch_size > len(self._items):
            raise BufferNotReady(f"buffer holds {len(self._items)} transitions, "
                                 f"{batch_size} requested")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def sample_batch(self, batch_size: int, rng) -> Batch:
        return Batch.from_transitions(self.sample(batch_size, rng))

    def metadata(self) -> dict:
        return {"capacity": self.capacity, "size": len(self), "pushed": self.pushed,
                "next_slot": self._next}

    def dump_jsonl(self, path):
        """Write transitions in storage-slot order (see ``next_slot`` in metadata)."""
        with open(path, "w") as fh:
            for t in self._items:
                fh.write(t.to_json() + "\n")

    @classmethod
    def load_jsonl(cls, path, capacity, pushed=None, next_slot=0) -> "ReplayBuffer":
        buf = cls(capacity)
        with open(path) as fh:
            buf._items = [SessionTransition.from_json(line) for line in fh if line.strip()]
        if len(buf._items) > capacity:
            raise ContractViolation("stored buffer exceeds its capacity")
        buf._next = next_slot
        buf.pushed = len(buf._items) if pushed is None else pushed
        return buf


class RunningNormalizer:
    """Per-feature z-scoring with running (Welford) mean and variance."""

    def __init__(self, dim: int, clip: float = 5.0, eps: float = 1e-8):
        self.dim = dim
        self.clip = clip
        self.eps = eps
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for row in x:
            self.count += 1
            delta = row - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (row - self.mean)

    @property
    def std(self):
        if self.count < 2:
            return np.ones(self.dim)
        return np.sqrt(self.m2 / (self.count - 1) + self.eps)

    def __call__(self, x):
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) / self.std,
                       -self.clip, self.clip)

    def to_dict(self):
        return {"dim": self.dim, "clip": self.clip, "eps": self.eps, "count": self.count,
                "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d):
        n = cls(d["dim"], d["clip"], d["eps"])
        n.count = d["count"]
        n.mean = np.asarray(d["mean"], dtype=np.float64)
        n.m2 = np.asarray(d["m2"], dtype=np.float64)
        return n


def make_actor(state_dim, action_dim, hidden, rng) -> DenseNet:
    sizes = [state_dim, *hidden, action_dim]
    return init_dense(sizes, ["relu"] * len(hidden) + ["tanh"], rng)


def make_critic(state_dim, action_dim, hidden, rng) -> DenseNet:
    sizes = [state_dim + action_dim, *hidden, 1]
    return init_dense(sizes, ["relu"] * len(hidden) + ["identity"], rng)


def _scale(y, bounds):
    lo, hi = bounds
    return lo + (hi - lo) * 0.5 * (y + 1.0)


def policy(actor: DenseNet, S, bounds=(-1.0, 1.0)):
    """Deterministic action(s), tanh output rescaled to ``bounds``."""
    return _scale(forward(actor, S), bounds)


def act(actor: DenseNet, s, explore=False, rng=None, sigma=0.1, bounds=(-1.0, 1.0)):
    a = policy(actor, s, bounds)
    if explore:
        if rng is None:
            raise ContractViolation("exploration needs an rng")
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, bounds[0], bounds[1])


def _q(critic, S, A):
    return forward(critic, np.concatenate([S, A], axis=-1))[..., 0]


def td_target(target_actor, target_critics, batch: Batch, gamma, bounds=(-1.0, 1.0),
              smoothing=None, rng=None):
    """``r + gamma * Q'(s', mu'(s'))`` with no bootstrap on terminal transitions.

    With several target critics the minimum is taken. ``smoothing`` is an
    optional ``(sigma, clip)`` pair of clipped Gaussian target-policy noise.
    """
    if not 0.0 <= gamma < 1.0:
        raise ContractViolation(f"discount must lie in [0, 1), got {gamma}")
    A2 = policy(target_actor, batch.S2, bounds)
    if smoothing is not None:
        sigma, clip = smoothing
        A2 = np.clip(A2 + np.clip(rng.normal(0.0, sigma, A2.shape), -clip, clip),
                     bounds[0], bounds[1])
    q2 = np.min([_q(c, batch.S2, A2) for c in target_critics], axis=0)
    return batch.R + gamma * np.where(batch.done, 0.0, q2)


def critic_regression(critic: DenseNet, S, A, y):
    """Mean squared error of ``Q(S, A)`` against fixed targets ``y``, with grads."""
    if len(S) == 0:
        raise ContractViolation("empty batch")
    out, cache = forward_cache(critic, np.concatenate([S, A], axis=1))
    err = out[:, 0] - y
    loss = float(np.mean(err * err))
    grads, _ = backward_cached(critic, cache, (2.0 / len(y)) * err[:, None],
                               need_input_grad=False)
    return loss, grads


def critic_loss(critic, target_actor, target_critic, batch: Batch, gamma, bounds=(-1.0, 1.0)):
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    y = td_target(target_actor, [target_critic], batch, gamma, bounds)
    return critic_regression(critic, batch.S, batch.A, y)


def actor_gradient(actor: DenseNet, critic: DenseNet, S, bounds=(-1.0, 1.0)):
    """Ascent gradient of ``mean_s Q(s, mu(s))`` w.r.t. the actor parameters.

    Returns ``(objective, grads)``. The critic is only read.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if len(S) == 0:
        raise ContractViolation("empty batch")
    y, a_cache = forward_cache(actor, S)
    A = _scale(y, bounds)
    q, c_cache = forward_cache(critic, np.concatenate([S, A], axis=1))
    _, dx = backward_cached(critic, c_cache, np.full((len(S), 1), 1.0 / len(S)))
    dA = dx[:, S.shape[1]:]
    grads, _ = backward_cached(actor, a_cache, dA * 0.5 * (bounds[1] - bounds[0]),
                               need_input_grad=False)
    return float(q.mean()), grads


def soft_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ContractViolation(f"tau must lie in (0, 1], got {tau}")
    tp, op = target.params(), online.params()
    if len(tp) != len(op) or any(t.shape != o.shape for t, o in zip(tp, op)):
        raise ContractViolation("target and online networks differ in shape")
    for t, o in zip(tp, op):
        t *= 1.0 - tau
        t += tau * o
    return target


class ActorCritic:
    """Online and target networks plus optimizers for one agent.

    ``twin=True`` switches on the clipped double-critic target, delayed
    actor updates and target-policy smoothing.
    """

    def __init__(self, state_dim, action_dim, hidden=(64, 64, 32, 16), rng=None,
                 actor_lr=1e-4, critic_lr=2e-4, gamma=0.9, tau=0.005,
                 bounds=(-1.0, 1.0), twin=False, policy_delay=2,
                 target_noise=0.2, target_noise_clip=0.5):
        rng = np.random.default_rng(rng)
        self.bounds = tuple(bounds)
        self.gamma = gamma
        self.tau = tau
        self.twin = twin
        self.policy_delay = policy_delay if twin else 1
        half = 0.5 * (self.bounds[1] - self.bounds[0])
        self.smoothing = (target_noise * half, target_noise_clip * half) if twin else None
        self.actor = make_actor(state_dim, action_dim, hidden, rng)
        self.critics = [make_critic(state_dim, action_dim, hidden, rng)
                        for _ in range(2 if twin else 1)]
        self.target_actor = self.actor.copy()
        self.target_critics = [c.copy() for c in self.critics]
        self.actor_opt = Adam(self.actor, actor_lr)
        self.critic_opts = [Adam(c, critic_lr) for c in self.critics]
        self.updates = 0

    def act(self, s, explore=False, rng=None, sigma=0.1):
        return act(self.actor, s, explore, rng, sigma, self.bounds)

    def q(self, S, A):
        return _q(self.critics[0], S, A)

    def update_critic(self, batch: Batch, rng=None) -> float:
        y = td_target(self.target_actor, self.target_critics, batch, self.gamma,
                      self.bounds, self.smoothing, rng)
        losses = []
        for critic, opt in zip(self.critics, self.critic_opts):
            loss, grads = critic_regression(critic, batch.S, batch.A, y)
            opt.step(grads)
            losses.append(loss)
        return float(np.mean(losses))

    def update_actor(self, S):
        """One policy-gradient step; returns the objective or None when delayed."""
        self.updates += 1
        if self.updates % self.policy_delay:
            return None
        obj, grads = actor_gradient(self.actor, self.critics[0], S, self.bounds)
        self.actor_opt.step(grads, ascend=True)
        return obj

    def update_targets(self):
        if self.updates % self.policy_delay:
            return
        soft_update(self.target_actor, self.actor, self.tau)
        for t, c in zip(self.target_critics, self.critics):
            soft_update(t, c, self.tau)

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds), "gamma": self.gamma, "tau": self.tau,
            "twin": self.twin, "policy_delay": self.policy_delay,
            "smoothing": list(self.smoothing) if self.smoothing else None,
            "updates": self.updates,
            "actor": self.actor.to_dict(),
            "critics": [c.to_dict() for c in self.critics],
            "target_actor": self.target_actor.to_dict(),
            "target_critics": [c.to_dict() for c in self.target_critics],
            "actor_opt": {"lr": self.actor_opt.lr, "state": self.actor_opt.state.to_dict()},
            "critic_opts": [{"lr": o.lr, "state": o.state.to_dict()} for o in self.critic_opts],
        }

    @classmethod
    def from_dict(cls, d) -> "ActorCritic":
        ac = cls.__new__(cls)
        ac.bounds = tuple(d["bounds"])
        ac.gamma, ac.tau, ac.twin = d["gamma"], d["tau"], d["twin"]
        ac.policy_delay = d["policy_delay"]
        ac.smoothing = tuple(d["smoothing"]) if d["smoothing"] else None
        ac.updates = d["updates"]
        ac.actor = DenseNet.from_dict(d["actor"])
        ac.critics = [DenseNet.from_dict(c) for c in d["critics"]]
        ac.target_actor = DenseNet.from_dict(d["target_actor"])
        ac.target_critics = [DenseNet.from_dict(c) for c in d["target_critics"]]
        ac.actor_opt = Adam(ac.actor, d["actor_opt"]["lr"])
        ac.actor_opt.state = AdamState.from_dict(d["actor_opt"]["state"])
        ac.critic_opts = []
        for c, od in zip(ac.critics, d["critic_opts"]):
            opt = Adam(c, od["lr"])
            opt.state = AdamState.from_dict(od["state"])
            ac.critic_opts.append(opt)
        return ac
