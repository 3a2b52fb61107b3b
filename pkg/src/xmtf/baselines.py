"""Formula-based fusion: fixed formulas, CEM search over global coefficients."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, XmtfError
from .mfc import rank_top_n

FORMULA_KINDS = ("linear", "log_offset", "power")
DEFAULT_OFFSET = 0.01


@dataclass
class FusionFormula:
    kind: str
    coefficients: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in FORMULA_KINDS:
            raise ContractViolation(f"unknown formula kind {self.kind!r}")
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.kind == "log_offset":
            if self.offsets is None:
                self.offsets = np.full(self.coefficients.shape, DEFAULT_OFFSET)
            self.offsets = np.asarray(self.offsets, dtype=np.float64)


def formula_scores(kind, coefficients, O, offsets=None) -> np.ndarray:
    """Vectorized formula over candidates ``O`` (N, K); returns (N,)."""
    O = np.asarray(O, dtype=np.float64)
    a = np.asarray(coefficients, dtype=np.float64)
    if O.shape[-1] != a.shape[-1]:
        raise ContractViolation(f"{a.shape[-1]} coefficients for {O.shape[-1]} predictions")
    if kind == "linear":
        return O @ a
    if kind == "log_offset":
        b = np.full(a.shape, DEFAULT_OFFSET) if offsets is None else np.asarray(offsets)
        x = O + b
        if np.any(x <= 0.0):
            raise ContractViolation("log_offset needs o + beta > 0")
        return np.log(x) @ a
    if kind == "power":
        if np.any(O <= 0.0):
            raise ContractViolation("power formula needs strictly positive predictions")
        return np.exp(np.log(O) @ a)
    raise ContractViolation(f"unknown formula kind {kind!r}")


def formula_eval(formula: FusionFormula, o) -> float:
    o = np.asarray(o, dtype=np.float64)
    if o.ndim != 1:
        raise ContractViolation("formula_eval takes one prediction vector")
    return float(formula_scores(formula.kind, formula.coefficients, o[None, :], formula.offsets)[0])


def rollout_formula(env, kind, coefficients, seed, offsets=None):
    """Serve one session ranking by a fixed formula; returns (total watch time, length)."""
    session = env.reset(seed)
    n = env.config.slate_size
    while not session.done:
        _, _, O = session.gen_candidates()
        session.step(rank_top_n(formula_scores(kind, coefficients, O, offsets), n))
    return session.total_reward, session.t


@dataclass
class CemState:
    mean: np.ndarray
    std: np.ndarray
    elite_fraction: float = 0.125
    population: int = 64
    std_smoothing: float = 0.5  # weight of the elite std in the refit; 1 is plain CEM
    iteration: int = 0
    best: np.ndarray | None = None
    best_value: float = -np.inf
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.std = np.asarray(self.std, dtype=np.float64).copy()
        if self.mean.shape != self.std.shape:
            raise ContractViolation("mean and std differ in shape")
        if np.any(self.std <= 0.0):
            raise ContractViolation("CEM needs strictly positive initial std")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ContractViolation("elite_fraction must lie in (0, 1]")
        if self.population < 8:
            raise ContractViolation("CEM population must be at least 8")
        if not 0.0 < self.std_smoothing <= 1.0:
            raise ContractViolation("std_smoothing must lie in (0, 1]")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.elite_fraction * self.population)))


def cem_step(state: CemState, objective, rng, min_std=0.0):
    """One sample / evaluate / refit round. ``objective`` maps an (P, dim)
    array of candidates to P values (higher is better)."""
    X = state.mean + state.std * rng.standard_normal((state.population, state.mean.size))
    values = np.asarray(objective(X), dtype=np.float64)
    ok = np.isfinite(values)
    if not ok.any():
        raise XmtfError(f"CEM iteration {state.iteration}: every candidate failed to evaluate")
    values = np.where(ok, values, -np.inf)
    order = np.argsort(-values, kind="stable")
    elite = X[order[:state.n_elite]]
    state.mean = elite.mean(axis=0)
    a = state.std_smoothing
    state.std = np.maximum(a * elite.std(axis=0) + (1.0 - a) * state.std, min_std)
    if values[order[0]] > state.best_value:
        state.best_value = float(values[order[0]])
        state.best = X[order[0]].copy()
    state.iteration += 1
    state.history.append({"iteration": state.iteration, "mean": state.mean.copy(),
                          "std": state.std.copy(), "best": state.best_value})
    return state


def cem_optimize(objective, mean, std, iterations=40, population=64, elite_fraction=0.125,
                 rng=None, min_std=0.0, std_smoothing=0.5):
    """Cross-entropy search; returns the final :class:`CemState` (``best`` holds the best-ever point)."""
    rng = np.random.default_rng(rng)
    state = CemState(mean, std, elite_fraction, population, std_smoothing)
    for _ in range(iterations):
        cem_step(state, objective, rng, min_std)
    return state


def env_objective(env, kind, seeds_fn, offsets=None):
    """Objective for :func:`cem_optimize`: mean session watch time of each
    candidate coefficient vector over a shared set of user seeds.

    ``seeds_fn()`` is called once per population so every candidate in one
    iteration sees the same users.
    """
    def objective(X):
        seeds = seeds_fn()
        out = np.empty(len(X))
        for i, a in enumerate(X):
            out[i] = np.mean([rollout_formula(env, kind, a, s, offsets)[0] for s in seeds])
        return out
    return objective


def write_cem_history(state, path):
    """``state`` is a :class:`CemState` or its ``history`` list."""
    history = state.history if isinstance(state, CemState) else state
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean", "std", "best_objective"])
        for h in history:
            w.writerow([h["iteration"], " ".join(f"{v:.6g}" for v in h["mean"]),
                        " ".join(f"{v:.6g}" for v in h["std"]), f"{h['best']:.6f}"])
