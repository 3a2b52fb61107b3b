"""Heuristic rankers and checks used to calibrate the session simulator."""
from __future__ import annotations

import numpy as np

from .env import LONG_VIEW, SessionEnv
from .mfc import rank_top_n


def greedy_watch_scores(O, session):
    """Rank by the long-view prediction alone."""
    return O[:, LONG_VIEW]


def balanced_scores(O, session):
    """Sum of predictions, each relative to its type's base rate."""
    return (O / session.env.base_rates).sum(axis=1)


HEURISTICS = {"greedy_watch": greedy_watch_scores, "balanced": balanced_scores}


def run_heuristic(env: SessionEnv, scorer, seeds):
    """Session lengths and totals of a fixed scoring rule over ``seeds``."""
    lengths, totals = [], []
    n = env.config.slate_size
    for seed in seeds:
        session = env.reset(seed)
        while not session.done:
            _, _, O = session.gen_candidates()
            session.step(rank_top_n(scorer(O, session), n))
        lengths.append(session.t)
        totals.append(session.total_reward)
    return np.asarray(lengths, dtype=float), np.asarray(totals)


def tradeoff_report(env: SessionEnv, n_seeds=500, seed0=0) -> dict:
    """Compare greedy watch-time ranking against the balanced heuristic.

    ``shortening`` is the relative drop in mean session length of the greedy
    ranker; the long-horizon problem is only interesting when it is large.
    """
    seeds = range(seed0, seed0 + n_seeds)
    out = {}
    for name, fn in HEURISTICS.items():
        lengths, totals = run_heuristic(env, fn, seeds)
        out[name] = {"mean_length": float(lengths.mean()), "mean_total": float(totals.mean())}
    g, b = out["greedy_watch"]["mean_length"], out["balanced"]["mean_length"]
    out["shortening"] = 1.0 - g / b
    return out


def base_rate_report(env: SessionEnv, n_items=100_000, seed=0) -> dict:
    """Empirical mean true probability per type next to its configured base rate."""
    P, W = env.draw_items(np.random.default_rng(seed), n_items)
    return {"empirical": P.mean(axis=0).tolist(), "target": list(env.config.base_rates),
            "watch_time_mean": float(W.mean())}
