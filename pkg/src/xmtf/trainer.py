"""Two-stage hybrid training loop, rollouts and evaluation.

One :class:`Agent` covers xMTF (with its two ablations) and the
formula-based actor-critic baseline; they differ only in how an action
turns candidate predictions into ranking scores.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .baselines import formula_scores
from .env import SessionConfig, SessionEnv, trace_record
from .exceptions import ContractViolation, NonFiniteError
from .mfc import MfcModel, fuse, inner_loss_batch, inner_outputs, outer_eval, rank_top_n
from .nn import AdamState, adam_step
from .rl import ActorCritic, Batch, ReplayBuffer, RunningNormalizer, SessionTransition, policy

log = logging.getLogger(__name__)

METHODS = ("xmtf", "formula_rl")
ABLATIONS = ("full", "no_outer", "no_inner")
EVAL_SEED_BASE = 1_000_000_000


@dataclass
class TrainConfig:
    method: str = "xmtf"
    formula: str = "log_offset"  # formula_rl only
    ablation: str = "full"
    lam: float = 0.4
    gamma: float = 0.9
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    inner_lr: float = 2e-4
    batch_size: int = 64
    inner_batch_size: int = 16
    buffer_size: int = 100_000
    n_sessions: int = 2000
    warmup_sessions: int = 500
    actor_delay_sessions: int = 300  # critic-only updates for the first sessions
    random_action_sessions: int = 300  # uniform random actions for the first sessions
    updates_per_request: float = 1.0
    tau: float = 0.005
    reward_scale: float = 0.01  # critic regresses on scaled rewards
    explore_sigma: float = 0.3
    action_low: float | None = None  # None: 0 for formula_rl (positive coefficients), -1 for xmtf
    action_high: float = 1.0
    hidden: tuple = (64, 64, 32, 16)
    inner_hidden: tuple = (32, 16)
    inner_output: str = "sigmoid"
    inner_input_scale: str = "base_rate"  # or "raw"
    inner_input_gain: float = 0.1  # base_rate scale is gain / base rate
    max_pairs: int = 256
    inner_candidates: int = 16  # candidates per request fed to the inner loss
    inner_subset: str = "top"  # highest fused scores under the policy, or "random"
    twin: bool | None = None  # None: on for formula_rl, off for xmtf
    transfer_action: str = "policy"  # or "buffer"
    normalize_obs: bool = True
    eval_users: int = 100
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.inner_hidden = tuple(self.inner_hidden)
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}")
        if self.ablation not in ABLATIONS:
            raise ContractViolation(f"unknown ablation {self.ablation!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractViolation(f"lambda must lie in [0, 1], got {self.lam}")
        if min(self.actor_lr, self.critic_lr, self.inner_lr) <= 0:
            raise ContractViolation("learning rates must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must lie in [0, 1)")
        if self.inner_subset not in ("random", "top"):
            raise ContractViolation("inner_subset must be 'random' or 'top'")
        if self.transfer_action not in ("policy", "buffer"):
            raise ContractViolation("transfer_action must be 'policy' or 'buffer'")

    @property
    def low(self) -> float:
        if self.action_low is not None:
            return float(self.action_low)
        return 0.0 if self.method == "formula_rl" else -1.0

    @property
    def use_twin(self) -> bool:
        return self.method == "formula_rl" if self.twin is None else bool(self.twin)

    @property
    def has_outer(self) -> bool:
        return self.method == "formula_rl" or self.ablation != "no_outer"

    @property
    def has_inner(self) -> bool:
        return self.method == "xmtf" and self.ablation != "no_inner"

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["inner_hidden"] = list(self.inner_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Agent:
    """All learnable state of one run: normalizer, actor-critic, inner cells."""

    def __init__(self, config: TrainConfig, env_config: SessionConfig, rng=None):
        self.config = config
        rng = np.random.default_rng(rng)
        K, d = env_config.K, env_config.state_dim
        self.K, self.state_dim = K, d
        self.bounds = (config.low, config.action_high)
        self.normalizer = RunningNormalizer(d)
        self.ac = None
        if config.has_outer:
            self.ac = ActorCritic(d, K, config.hidden, rng, config.actor_lr, config.critic_lr,
                                  config.gamma, config.tau, self.bounds, twin=config.use_twin)
        self.mfc = None
        self.inner_opt = None
        if config.method == "xmtf":
            if config.has_inner:
                scale = None
                if config.inner_input_scale == "base_rate":
                    scale = config.inner_input_gain / np.asarray(env_config.base_rates)
                self.mfc = MfcModel.init(K, d, config.inner_hidden, rng,
                                         output_activation=config.inner_output, o_scale=scale)
                self.inner_opt = AdamState.for_params(self.mfc.params())
            else:
                self.mfc = MfcModel.identity(K, d)

    def norm(self, S):
        return self.normalizer(S) if self.config.normalize_obs else np.asarray(S, dtype=np.float64)

    def action(self, s_norm, explore=False, rng=None):
        if self.ac is None:
            return np.zeros(self.K)
        return self.ac.act(s_norm, explore, rng, self.config.explore_sigma)

    def scores(self, s_norm, a, O):
        if self.config.method == "formula_rl":
            return formula_scores(self.config.formula, a, O)
        return fuse(self.mfc, a, s_norm, O).z_full

    def to_dict(self):
        return {
            "normalizer": self.normalizer.to_dict(),
            "ac": None if self.ac is None else self.ac.to_dict(),
            "mfc": None if self.mfc is None else self.mfc.to_dict(),
            "inner_opt": None if self.inner_opt is None else self.inner_opt.to_dict(),
        }

    def load_dict(self, d):
        self.normalizer = RunningNormalizer.from_dict(d["normalizer"])
        self.ac = None if d["ac"] is None else ActorCritic.from_dict(d["ac"])
        self.mfc = None if d["mfc"] is None else MfcModel.from_dict(d["mfc"])
        self.inner_opt = None if d["inner_opt"] is None else AdamState.from_dict(d["inner_opt"])


def rollout_session(env: SessionEnv, agent: Agent, seed, explore=False, rng=None,
                    update_normalizer=False, trace=None, uniform=False):
    """Serve one session with ``agent``; returns (transitions, total watch time)."""
    session = env.reset(seed)
    n = env.config.slate_size
    transitions = []
    while not session.done:
        s = session.state
        if update_normalizer:
            agent.normalizer.update(s)
        _, _, O = session.gen_candidates()
        if uniform and agent.ac is not None:
            a = rng.uniform(agent.bounds[0], agent.bounds[1], agent.K)
        else:
            a = agent.action(agent.norm(s), explore, rng)
        slate = rank_top_n(agent.scores(agent.norm(s), a, O), n)
        r, s_next, done = session.step(slate)
        transitions.append(SessionTransition(s, a, r, O, s_next, done))
        if trace is not None:
            trace.append(trace_record(session, s, O, a, slate, r))
    return transitions, session.total_reward


def train_step(agent: Agent, buffer: ReplayBuffer, rng, lam=None, train_actor=True) -> dict:
    """Critic, actor, inner cells, then target networks, in that order."""
    cfg = agent.config
    lam = cfg.lam if lam is None else lam
    batch = buffer.sample_batch(cfg.batch_size, rng)
    S, S2 = agent.norm(batch.S), agent.norm(batch.S2)
    report = {"critic": np.nan, "actor": np.nan, "inner": np.nan}
    nb = Batch(S, batch.A, batch.R * cfg.reward_scale, batch.O, S2, batch.done)
    if agent.ac is not None:
        report["critic"] = agent.ac.update_critic(nb, rng)
        obj = agent.ac.update_actor(S) if train_actor else None
        report["actor"] = np.nan if obj is None else obj
    if agent.inner_opt is not None:
        m = min(cfg.inner_batch_size, len(batch))
        Si, Oi = S[:m], batch.O[:m]
        N = Oi.shape[1]
        if agent.ac is None:
            A = np.zeros((m, agent.K))
        elif cfg.transfer_action == "policy":
            A = policy(agent.ac.actor, Si, agent.bounds)
        else:
            A = batch.A[:m]
        if cfg.inner_candidates and cfg.inner_candidates < N:
            if cfg.inner_subset == "top":
                Q = inner_outputs(agent.mfc, Si, Oi)
                key = -outer_eval(Q, A[:, None, :]).sum(axis=2)
            else:
                key = rng.random((m, N))
            pick = np.argsort(key, axis=1, kind="stable")[:, :cfg.inner_candidates]
            Oi = np.take_along_axis(Oi, pick[:, :, None], axis=1)
        loss, grads, _ = inner_loss_batch(agent.mfc, Si, Oi, None, lam, cfg.max_pairs, rng,
                                          actions=A)
        adam_step(agent.mfc.params(), grads, agent.inner_opt, cfg.inner_lr)
        report["inner"] = loss
    if agent.ac is not None:
        agent.ac.update_targets()
    for key in ("critic", "inner"):
        if not (np.isnan(report[key]) or np.isfinite(report[key])):
            raise NonFiniteError(f"{key} loss is not finite")
    return report


def train_user_seed(seed, trial, i):
    return int(np.random.SeedSequence([seed, trial, i, 7]).generate_state(1)[0])


def eval_user_seeds(n):
    """Held-out users, identical for every trial and method."""
    return [EVAL_SEED_BASE + j for j in range(n)]


class Trainer:
    """Streams sessions into the buffer and updates after each one."""

    def __init__(self, config: TrainConfig, env: SessionEnv, trial=0):
        self.config = config
        self.env = env
        self.trial = trial
        self.rng = np.random.default_rng([config.seed, trial, 11])
        self.agent = Agent(config, env.config, np.random.default_rng([config.seed, trial, 13]))
        self.buffer = ReplayBuffer(config.buffer_size)
        self.sessions_done = 0
        self.losses: list[dict] = []

    def run(self, n_sessions=None, trace=None):
        cfg = self.config
        target = cfg.n_sessions if n_sessions is None else self.sessions_done + n_sessions
        while self.sessions_done < target:
            seed = train_user_seed(cfg.seed, self.trial, self.sessions_done)
            transitions, total = rollout_session(self.env, self.agent, seed, explore=True,
                                                 rng=self.rng, update_normalizer=True,
                                                 trace=trace,
                                                 uniform=self.sessions_done < cfg.random_action_sessions)
            for t in transitions:
                self.buffer.push(t)
            lam = 1.0 if self.sessions_done < cfg.warmup_sessions else cfg.lam
            n_updates = int(round(len(transitions) * cfg.updates_per_request))
            if len(self.buffer) >= cfg.batch_size:
                for _ in range(n_updates):
                    rep = train_step(self.agent, self.buffer, self.rng, lam,
                                     self.sessions_done >= cfg.actor_delay_sessions)
                    rep.update(session=self.sessions_done, total=total)
                self.losses.append(rep)
            self.sessions_done += 1
        return self

    def evaluate(self, n_users=None):
        n = self.config.eval_users if n_users is None else n_users
        totals, lengths = [], []
        for seed in eval_user_seeds(n):
            tr, total = rollout_session(self.env, self.agent, seed)
            totals.append(total)
            lengths.append(len(tr))
        return np.asarray(totals), np.asarray(lengths)

    # checkpoints --------------------------------------------------------
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        state = {
            "config": self.config.to_dict(),
            "env_config": self.env.config.to_dict(),
            "trial": self.trial,
            "sessions_done": self.sessions_done,
            "rng_state": self.rng.bit_generator.state,
            "buffer": self.buffer.metadata(),
            "agent": self.agent.to_dict(),
        }
        with open(os.path.join(directory, "checkpoint.json"), "w") as fh:
            json.dump(_jsonable(state), fh)
        self.buffer.dump_jsonl(os.path.join(directory, "buffer.jsonl"))

    @classmethod
    def load(cls, directory, env=None):
        with open(os.path.join(directory, "checkpoint.json")) as fh:
            state = json.load(fh)
        config = TrainConfig.from_dict(state["config"])
        env = env or SessionEnv(SessionConfig(**state["env_config"]))
        tr = cls(config, env, state["trial"])
        tr.sessions_done = state["sessions_done"]
        tr.rng.bit_generator.state = state["rng_state"]
        tr.agent.load_dict(state["agent"])
        meta = state["buffer"]
        path = os.path.join(directory, "buffer.jsonl")
        tr.buffer = ReplayBuffer.load_jsonl(path, meta["capacity"], meta["pushed"],
                                           meta["next_slot"])
        return tr


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
