"""Experiment runner: configs, multi-trial runs, method comparison, lambda sweep.

Every command is a pure function of (config, seed). Trials are independent
jobs; with ``workers > 1`` they run in a process pool and results are
gathered back in submission order, so outputs do not depend on scheduling.
"""
from __future__ import annotations

import csv
import json
import hashlib
import logging
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from . import __version__
from .baselines import cem_optimize, env_objective, rollout_formula, write_cem_history
from .env import FEEDBACK_TYPES, SessionConfig, SessionEnv
from .exceptions import ContractViolation, NonFiniteError, XmtfError
from .mfc import inner_outputs
from .trainer import TrainConfig, Trainer, _jsonable, eval_user_seeds, rollout_session, train_user_seed

log = logging.getLogger(__name__)

Z95 = 1.959963984540054

# name -> (family, overrides)
COMPARE_METHODS = {
    "cem_linear": ("cem", {"formula": "linear"}),
    "cem_log_offset": ("cem", {"formula": "log_offset"}),
    "formula_rl_linear": ("rl", {"method": "formula_rl", "formula": "linear"}),
    "formula_rl_log_offset": ("rl", {"method": "formula_rl", "formula": "log_offset"}),
    "xmtf": ("rl", {"method": "xmtf", "ablation": "full"}),
    "xmtf_no_inner": ("rl", {"method": "xmtf", "ablation": "no_inner"}),
    "xmtf_no_outer": ("rl", {"method": "xmtf", "ablation": "no_outer"}),
}
DEFAULT_LAMBDAS = (0.0, 0.1, 0.4, 0.9, 1.0)


@dataclass
class CemConfig:
    iterations: int = 40
    population: int = 64
    elite_fraction: float = 0.125
    seeds_per_eval: int = 8
    init_std: float = 1.0
    std_smoothing: float = 0.5

    def __post_init__(self):
        if self.iterations < 1 or self.seeds_per_eval < 1:
            raise ContractViolation("CEM needs at least one iteration and one seed per evaluation")


@dataclass
class ExperimentConfig:
    env: SessionConfig = field(default_factory=SessionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    trials: int = 20
    eval_users: int = 100
    eval_every: int = 0  # sessions between evaluations; 0 evaluates once at the end
    lambdas: tuple = DEFAULT_LAMBDAS
    probes: int = 1000
    curve_points: int = 21
    curve_users: int = 5
    save_traces: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.trials < 1 or self.eval_users < 1:
            raise ContractViolation("trials and eval_users must be at least 1")
        if any(not 0.0 <= x <= 1.0 for x in self.lambdas):
            raise ContractViolation("lambda values must lie in [0, 1]")
        if self.eval_every < 0:
            raise ContractViolation("eval_every must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ContractViolation("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            env = SessionConfig(**d.pop("env", {}))
            train = TrainConfig.from_dict(d.pop("train", {}))
            cem = CemConfig(**d.pop("cem", {}))
            return cls(env=env, train=train, cem=cem, **d)
        except TypeError as exc:
            raise ContractViolation(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["env"] = self.env.to_dict()
        out["train"] = self.train.to_dict()
        out["cem"] = {f.name: getattr(self.cem, f.name) for f in fields(self.cem)}
        out["lambdas"] = list(self.lambdas)
        return _jsonable(out)

    def with_train(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        d["train"].update(overrides)
        return ExperimentConfig.from_dict(d)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractViolation(f"cannot read config {path}: {exc}") from exc
    for key, val in (overrides or {}).items():
        d[key] = val
    return ExperimentConfig.from_dict(d)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def mean_ci(values):
    """(mean, sample std, ci_low, ci_high) with a normal-approximation 95% interval."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    s = float(v.std(ddof=1)) if v.size > 1 else 0.0
    h = Z95 * s / np.sqrt(v.size)
    return m, s, m - h, m + h


def diff_ci(a, b):
    """Mean difference a - b with a normal-approximation 95% interval."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    va = a.var(ddof=1) / a.size if a.size > 1 else 0.0
    vb = b.var(ddof=1) / b.size if b.size > 1 else 0.0
    d = float(a.mean() - b.mean())
    h = Z95 * float(np.sqrt(va + vb))
    return d, d - h, d + h


def ci_disjoint(a, b) -> bool:
    _, _, lo_a, hi_a = mean_ci(a)
    _, _, lo_b, hi_b = mean_ci(b)
    return hi_a < lo_b or hi_b < lo_a


# single trials -------------------------------------------------------------

def _eval_formula(env, kind, a, n_users):
    out = [rollout_formula(env, kind, a, s) for s in eval_user_seeds(n_users)]
    totals = np.array([o[0] for o in out])
    lengths = np.array([o[1] for o in out], dtype=float)
    return totals, lengths


def cem_trial(cfg: ExperimentConfig, kind: str, seed: int, trial: int):
    """Global-coefficient CEM search for one trial; returns (state, totals, lengths)."""
    env = SessionEnv(cfg.env)
    c = cfg.cem
    rng = np.random.default_rng([seed, trial, 17])
    counter = iter(range(1 << 62))

    def seeds_fn():
        return [train_user_seed(seed, trial, next(counter)) for _ in range(c.seeds_per_eval)]

    state = cem_optimize(env_objective(env, kind, seeds_fn), np.zeros(env.K),
                         np.full(env.K, c.init_std), c.iterations, c.population,
                         c.elite_fraction, rng, std_smoothing=c.std_smoothing)
    totals, lengths = _eval_formula(env, kind, state.best, cfg.eval_users)
    return state, totals, lengths


def monotone_fraction(agent, env: SessionEnv, n_probes=1000, seed=0) -> float:
    """Share of random probes ``(k, s, o < o')`` where ``q_k(o', s) >= q_k(o, s)``.

    States come from sessions served by the agent itself; ``o`` and ``o'`` are
    drawn from the true-probability distribution of type ``k``.
    """
    if agent.mfc is None:
        raise ContractViolation("probe needs an xMTF agent")
    rng = np.random.default_rng([seed, 29])
    states = []
    for s in eval_user_seeds(20):
        tr, _ = rollout_session(env, agent, s)
        states.extend(t.s for t in tr)
    S = agent.norm(np.asarray(states))[rng.integers(len(states), size=n_probes)]
    P, _ = env.draw_items(rng, 2 * n_probes)
    k = rng.integers(env.K, size=n_probes)
    lo = P[np.arange(n_probes), k]
    hi = P[n_probes + np.arange(n_probes), k]
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    O = np.zeros((n_probes, 2, env.K))
    O[:, 0, :] = P[:n_probes]
    O[:, 1, :] = P[:n_probes]
    O[np.arange(n_probes), 0, k] = lo
    O[np.arange(n_probes), 1, k] = hi
    Q = inner_outputs(agent.mfc, S, O)
    q_lo, q_hi = Q[np.arange(n_probes), 0, k], Q[np.arange(n_probes), 1, k]
    ok = (hi == lo) | (q_hi >= q_lo)
    return float(ok.mean())


def mfc_curves(agent, env: SessionEnv, n_users=5, points=21):
    """Rows ``(k, user_id, o, q)``: each inner cell over a grid of its own type's
    probability range, at the first-request state of ``n_users`` held-out users."""
    P, _ = env.draw_items(np.random.default_rng(31), 20_000)
    rows = []
    for user in eval_user_seeds(n_users):
        s = agent.norm(env.reset(user).state)
        for k in range(env.K):
            grid = np.quantile(P[:, k], np.linspace(0.0, 0.999, points))
            O = np.tile(np.quantile(P, 0.5, axis=0), (points, 1))
            O[:, k] = grid
            q = inner_outputs(agent.mfc, s[None, :], O[None])[0, :, k]
            rows.extend((k, user, float(o), float(v)) for o, v in zip(grid, q))
    return rows


def rl_trial(cfg: ExperimentConfig, seed: int, trial: int, run_dir=None, resume=False,
             probes=False):
    """Train and evaluate one actor-critic trial (xMTF, an ablation or formula-RL)."""
    env = SessionEnv(cfg.env)
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    ckpt = None if run_dir is None else os.path.join(run_dir, "checkpoints", f"trial_{trial}")
    if resume and ckpt and os.path.exists(os.path.join(ckpt, "checkpoint.json")):
        trainer = Trainer.load(ckpt, env)
        trainer.config = TrainConfig.from_dict({**trainer.config.to_dict(),
                                                "n_sessions": tcfg.n_sessions})
        trainer.agent.config = trainer.config
    else:
        trainer = Trainer(tcfg, env, trial)
    trace = [] if (cfg.save_traces and run_dir) else None
    metrics = []
    step = cfg.eval_every or max(trainer.config.n_sessions, 1)
    try:
        while True:
            todo = min(step, trainer.config.n_sessions - trainer.sessions_done)
            if todo > 0:
                trainer.run(todo, trace=trace)
            if todo > 0 or not metrics:
                totals, lengths = trainer.evaluate(cfg.eval_users)
                metrics.append({"trial": trial, "sessions": trainer.sessions_done,
                                "mean_watch_time": float(totals.mean()),
                                "std_watch_time": float(totals.std()),
                                "mean_session_length": float(lengths.mean())})
            if trainer.sessions_done >= trainer.config.n_sessions:
                break
    except NonFiniteError:
        if ckpt:
            trainer.save(ckpt + "_failed")
        raise
    if ckpt:
        trainer.save(ckpt)
    if trace is not None:
        os.makedirs(os.path.join(run_dir, "traces"), exist_ok=True)
        with open(os.path.join(run_dir, "traces", f"trial_{trial}.jsonl"), "w") as fh:
            fh.write("\n".join(trace) + ("\n" if trace else ""))
    out = {"metrics": metrics, "losses": [dict(l, trial=trial) for l in trainer.losses],
           "totals": totals, "lengths": lengths}
    if probes and trainer.agent.mfc is not None and trainer.config.has_inner:
        out["monotone_fraction"] = monotone_fraction(trainer.agent, env, cfg.probes, seed + trial)
        out["curves"] = mfc_curves(trainer.agent, env, cfg.curve_users, cfg.curve_points)
    return out


def _job(args):
    family, cfg_dict, seed, trial, extra = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        if family == "cem":
            state, totals, lengths = cem_trial(cfg, extra["formula"], seed, trial)
            return {"ok": True, "totals": totals, "lengths": lengths,
                    "cem_history": state.history, "best": state.best}
        res = rl_trial(cfg, seed, trial, extra.get("run_dir"), extra.get("resume", False),
                       extra.get("probes", False))
        res["ok"] = True
        return res
    except XmtfError as exc:
        log.error("%s trial %d failed: %s", family, trial, exc)
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


@lru_cache(maxsize=1)
def code_digest() -> str:
    """Hash of the package sources, so cached results never outlive a code change."""
    h = hashlib.sha256(__version__.encode())
    root = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as fh:
                h.update(name.encode() + fh.read())
    return h.hexdigest()


def job_key(job) -> str:
    """Content hash of a job: code, family, resolved config, seed, trial and formula."""
    family, cfg_dict, seed, trial, extra = job
    # rl jobs carry everything in the config; cem jobs also need the formula kind
    opts = {"formula": extra["formula"]} if family == "cem" else {}
    blob = json.dumps([code_digest(), family, cfg_dict, seed, trial, opts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def _cached(cache_dir, job):
    path = os.path.join(cache_dir, job_key(job) + ".pkl")
    if not os.path.exists(path):
        return None, path
    with open(path, "rb") as fh:
        res = pickle.load(fh)
    if job[4].get("probes") and "monotone_fraction" not in res:
        return None, path
    return res, path


def run_jobs(jobs, workers=1, cache_dir=None):
    """Run ``_job`` over ``jobs``; results come back in input order.

    With ``cache_dir`` successful results are stored under :func:`job_key` and
    reused by later calls with identical jobs (compare and the lambda sweep
    share their default xMTF runs this way).
    """
    results = [None] * len(jobs)
    paths = [None] * len(jobs)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        for i, job in enumerate(jobs):
            results[i], paths[i] = _cached(cache_dir, job)
    todo = [i for i, r in enumerate(results) if r is None]

    def store(i, res):
        results[i] = res
        if cache_dir and res["ok"]:
            tmp = paths[i] + ".tmp"
            with open(tmp, "wb") as fh:
                pickle.dump(res, fh)
            os.replace(tmp, paths[i])

    # results are stored as they arrive so an interrupted batch keeps finished trials
    if workers <= 1 or len(todo) <= 1:
        for i in todo:
            store(i, _job(jobs[i]))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in zip(todo, pool.map(_job, [jobs[i] for i in todo])):
                store(i, res)
    return results


# CSV helpers ---------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


METRIC_COLUMNS = ["trial", "sessions", "mean_watch_time", "std_watch_time", "mean_session_length"]
LOSS_COLUMNS = ["trial", "session", "critic", "actor", "inner", "total"]


def write_metrics(run_dir, results):
    rows = [[m["trial"], m["sessions"]] + [_fmt(m[c]) for c in METRIC_COLUMNS[2:]]
            for r in results if r["ok"] for m in r["metrics"]]
    _write_csv(os.path.join(run_dir, "metrics.csv"), METRIC_COLUMNS, rows)
    rows = [[l["trial"], l["session"]] + [_fmt(l[c]) for c in LOSS_COLUMNS[2:]]
            for r in results if r["ok"] for l in r["losses"]]
    _write_csv(os.path.join(run_dir, "losses.csv"), LOSS_COLUMNS, rows)


def write_curves(path, rows):
    _write_csv(path, ["k", "feedback_type", "user_id", "o", "q"],
               [[k, FEEDBACK_TYPES[k] if k < len(FEEDBACK_TYPES) else k, u, _fmt(o), _fmt(q)]
                for k, u, o, q in rows])


# commands -----------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out, seed=0, trials=None, workers=1, resume=False):
    """Train ``cfg.train`` for several trials; writes config.json, metrics.csv,
    losses.csv, checkpoints/ and (optionally) traces/. Returns a summary dict."""
    trials = cfg.trials if trials is None else trials
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), {"seed": seed, "trials": trials, **cfg.to_dict()})
    jobs = [("rl", cfg.to_dict(), seed, t, {"run_dir": out, "resume": resume})
            for t in range(trials)]
    results = run_jobs(jobs, workers)
    write_metrics(out, results)
    finals = [r["metrics"][-1]["mean_watch_time"] for r in results if r["ok"]]
    failed = [t for t, r in enumerate(results) if not r["ok"]]
    summary = {"trials": trials, "failed_trials": failed}
    if finals:
        m, s, lo, hi = mean_ci(finals)
        summary.update(mean=m, std=s, ci_low=lo, ci_high=hi)
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def compare(cfg: ExperimentConfig, out, seed=0, trials=None, workers=1, methods=None,
            cache_dir=None):
    """Every method in :data:`COMPARE_METHODS` under shared seeds.

    Writes ``compare.csv`` (one row per method), ``pairwise.csv`` (mean
    differences with 95% intervals), ``trials.csv`` and one CEM history per
    CEM trial. Returns ``{method: per-trial means}``; failed methods map to None.
    """
    trials = cfg.trials if trials is None else trials
    methods = list(COMPARE_METHODS) if methods is None else list(methods)
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), {"seed": seed, "trials": trials, **cfg.to_dict()})
    jobs, keys = [], []
    for name in methods:
        family, over = COMPARE_METHODS[name]
        d = cfg.to_dict() if family == "cem" else cfg.with_train(**over).to_dict()
        for t in range(trials):
            # probing the full model here lets a later lambda sweep reuse these trials
            jobs.append((family, d, seed, t, dict(over, probes=name == "xmtf")))
            keys.append((name, t))
    results = run_jobs(jobs, workers, cache_dir)
    per_method = {name: [] for name in methods}
    errors = {name: [] for name in methods}
    trial_rows = []
    os.makedirs(os.path.join(out, "cem"), exist_ok=True)
    for (name, t), r in zip(keys, results):
        if not r["ok"]:
            errors[name].append(r["error"])
            continue
        per_method[name].append(float(r["totals"].mean()))
        trial_rows.append([name, t, _fmt(r["totals"].mean()), _fmt(r["lengths"].mean())])
        if "cem_history" in r:
            write_cem_history(r["cem_history"], os.path.join(out, "cem", f"{name}_trial_{t}.csv"))
    _write_csv(os.path.join(out, "trials.csv"),
               ["method", "trial", "mean_watch_time", "mean_session_length"], trial_rows)
    rows, table = [], {}
    for name in methods:
        vals = per_method[name]
        if errors[name] or not vals:
            rows.append([name, len(vals), "", "", "", "", "", "failed: " + "; ".join(errors[name])])
            table[name] = None
            continue
        m, s, lo, hi = mean_ci(vals)
        rows.append([name, len(vals), _fmt(m), _fmt(s), _fmt(lo), _fmt(hi),
                     f"{m:.1f} ± {s:.1f}", "ok"])
        table[name] = vals
    _write_csv(os.path.join(out, "compare.csv"),
               ["method", "n_trials", "mean", "std", "ci_low", "ci_high", "formatted", "status"], rows)
    pair_rows = []
    ok = [n for n in methods if table[n] is not None]
    for i, a in enumerate(ok):
        for b in ok[i + 1:]:
            d, lo, hi = diff_ci(table[a], table[b])
            pair_rows.append([a, b, _fmt(d), _fmt(lo), _fmt(hi)])
    _write_csv(os.path.join(out, "pairwise.csv"), ["method_a", "method_b", "diff", "ci_low", "ci_high"],
               pair_rows)
    return table


def sweep_lambda(cfg: ExperimentConfig, out, seed=0, trials=None, workers=1, lambdas=None,
                 cache_dir=None):
    """Full xMTF once per lambda. Writes ``sweep.csv`` and per-lambda MFC curve CSVs.

    Returns ``{lam: {"totals": per-trial means, "monotone": per-trial probe fractions}}``.
    """
    trials = cfg.trials if trials is None else trials
    lambdas = cfg.lambdas if lambdas is None else tuple(float(x) for x in lambdas)
    if any(not 0.0 <= x <= 1.0 for x in lambdas):
        raise ContractViolation("lambda values must lie in [0, 1]")
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"),
               {"seed": seed, "trials": trials, **cfg.to_dict(), "lambdas": list(lambdas)})
    jobs = [("rl", cfg.with_train(method="xmtf", ablation="full", lam=lam).to_dict(), seed, t,
             {"probes": True}) for lam in lambdas for t in range(trials)]
    results = run_jobs(jobs, workers, cache_dir)
    out_table, rows = {}, []
    for i, lam in enumerate(lambdas):
        chunk = results[i * trials:(i + 1) * trials]
        good = [r for r in chunk if r["ok"]]
        if not good:
            rows.append([lam, 0, "", "", "", "", "", "failed"])
            continue
        totals = [float(r["totals"].mean()) for r in good]
        mono = [r["monotone_fraction"] for r in good]
        m, s, lo, hi = mean_ci(totals)
        rows.append([lam, len(good), _fmt(m), _fmt(s), _fmt(lo), _fmt(hi), _fmt(np.mean(mono)),
                     "ok" if len(good) == trials else "partial"])
        out_table[lam] = {"totals": totals, "monotone": mono}
        write_curves(os.path.join(out, f"curves_lambda_{lam:g}.csv"), good[0]["curves"])
    _write_csv(os.path.join(out, "sweep.csv"),
               ["lambda", "n_trials", "mean", "std", "ci_low", "ci_high", "monotone_fraction",
                "status"], rows)
    return out_table


def evaluate_run(run_dir, n_users=None):
    """Re-evaluate every saved trial checkpoint of a run directory with exploration off."""
    ckpts = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpts):
        raise ContractViolation(f"no checkpoints under {run_dir}")
    names = sorted((d for d in os.listdir(ckpts) if d.startswith("trial_") and
                    not d.endswith("_failed")), key=lambda d: int(d.split("_")[1]))
    rows = []
    for name in names:
        tr = Trainer.load(os.path.join(ckpts, name))
        totals, lengths = tr.evaluate(n_users)
        rows.append([int(name.split("_")[1]), tr.sessions_done, _fmt(totals.mean()),
                     _fmt(totals.std()), _fmt(lengths.mean())])
    _write_csv(os.path.join(run_dir, "eval.csv"), METRIC_COLUMNS, rows)
    return rows


def dump_mfc_curves(run_dir, out_path, n_users=5, points=21):
    """Curves of every trained xMTF checkpoint under ``run_dir`` into one CSV (trial 0 first)."""
    ckpts = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpts):
        raise ContractViolation(f"no checkpoints under {run_dir}")
    name = sorted((d for d in os.listdir(ckpts) if d.startswith("trial_")
                   and not d.endswith("_failed")), key=lambda d: int(d.split("_")[1]))
    if not name:
        raise ContractViolation(f"no trial checkpoints under {run_dir}")
    tr = Trainer.load(os.path.join(ckpts, name[0]))
    if tr.agent.mfc is None or not tr.config.has_inner:
        raise ContractViolation("curves need a run with trained inner cells")
    rows = mfc_curves(tr.agent, tr.env, n_users, points)
    write_curves(out_path, rows)
    return rows
