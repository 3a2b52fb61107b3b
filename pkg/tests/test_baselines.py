import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmtf.baselines import (CemState, FusionFormula, cem_optimize, cem_step, formula_eval,
                            formula_scores, rollout_formula, write_cem_history)
from xmtf.env import SessionEnv
from xmtf.exceptions import ContractViolation, XmtfError
from xmtf.mfc import rank_top_n


def test_formula_examples():
    assert formula_eval(FusionFormula("linear", [1, 1]), [0.2, 0.3]) == pytest.approx(0.5)
    assert formula_eval(FusionFormula("power", [1, 1, 1]), [0.2, 0.5, 0.4]) == pytest.approx(0.04)
    assert formula_eval(FusionFormula("log_offset", [0, 0]), [0.7, 0.0]) == 0.0
    f = FusionFormula("log_offset", [2.0, 1.0])
    assert formula_eval(f, [0.09, 0.99]) == pytest.approx(2 * np.log(0.1) + np.log(1.0))


def test_formula_domain_violations():
    with pytest.raises(ContractViolation):
        formula_eval(FusionFormula("power", [1, 1]), [0.0, 0.5])
    with pytest.raises(ContractViolation):
        formula_eval(FusionFormula("log_offset", [1, 1], offsets=[0.0, 0.0]), [0.0, 0.5])
    with pytest.raises(ContractViolation):
        FusionFormula("cubic", [1.0])
    with pytest.raises(ContractViolation):
        formula_scores("linear", [1.0, 2.0], np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(0.01, 1.0)),
       arrays(np.float64, 3, elements=st.floats(-2.0, 2.0)))
def test_power_and_log_rank_identically(O, a):
    p = formula_scores("power", a, O)
    l = formula_scores("log_offset", a, O, offsets=np.zeros(3))
    assert rank_top_n(p, 12) == rank_top_n(l, 12) or np.allclose(np.sort(l), np.sort(l)[::-1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0.01, 0.98)),
       arrays(np.float64, 4, elements=st.floats(0.05, 3.0)),
       st.integers(0, 3))
def test_formulas_increasing_with_positive_coefficients(o, a, k):
    up = o.copy()
    up[k] += 0.01
    for kind in ("linear", "log_offset", "power"):
        f = FusionFormula(kind, a)
        assert formula_eval(f, up) > formula_eval(f, o)


def test_rollout_with_fixed_coefficients_is_deterministic():
    env = SessionEnv()
    a = np.ones(6)
    assert rollout_formula(env, "linear", a, 4) == rollout_formula(env, "linear", a, 4)


@pytest.mark.parametrize("seed", range(5))
def test_cem_quadratic_optimum(seed):
    rng = np.random.default_rng(100 + seed)
    target = rng.uniform(-2, 2, 6) if seed else np.array([0.3, -1.2, 2.0, 0.5, 0.0, -2.5])

    def objective(X):
        return -((X - target) ** 2).sum(axis=1)

    state = cem_optimize(objective, np.zeros(6), np.ones(6), iterations=50, population=64,
                         elite_fraction=0.125, rng=np.random.default_rng(seed))
    assert np.max(np.abs(state.mean - target)) < 1e-2
    assert np.max(np.abs(state.best - target)) < 1e-2
    bests = [h["best"] for h in state.history]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))


def test_cem_full_elite_is_population_mean():
    rng = np.random.default_rng(3)
    state = CemState(np.zeros(2), np.ones(2), elite_fraction=1.0, population=16,
                     std_smoothing=1.0)
    seen = {}

    def objective(X):
        seen["X"] = X.copy()
        return -np.abs(X).sum(axis=1)

    cem_step(state, objective, rng)
    np.testing.assert_allclose(state.mean, seen["X"].mean(axis=0))
    np.testing.assert_allclose(state.std, seen["X"].std(axis=0))


def test_cem_std_smoothing_blends_previous_std():
    state = CemState(np.zeros(2), np.full(2, 2.0), elite_fraction=1.0, population=16,
                     std_smoothing=0.5)
    seen = {}

    def objective(X):
        seen["X"] = X.copy()
        return np.zeros(len(X))

    cem_step(state, objective, np.random.default_rng(0))
    np.testing.assert_allclose(state.std, 0.5 * seen["X"].std(axis=0) + 1.0)


def test_cem_rejects_bad_state():
    with pytest.raises(ContractViolation):
        CemState(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ContractViolation):
        CemState(np.zeros(2), np.ones(2), population=4)
    with pytest.raises(ContractViolation):
        CemState(np.zeros(2), np.ones(2), elite_fraction=0.0)


def test_cem_all_failures_abort():
    state = CemState(np.zeros(2), np.ones(2), population=8)
    with pytest.raises(XmtfError, match="every candidate"):
        cem_step(state, lambda X: np.full(len(X), np.nan), np.random.default_rng(0))


def test_cem_std_shrinks_on_stationary_objective():
    state = cem_optimize(lambda X: -(X ** 2).sum(axis=1), np.ones(3), np.ones(3),
                         iterations=10, rng=np.random.default_rng(1))
    assert np.all(state.history[-1]["std"] < state.history[0]["std"])


def test_cem_history_csv(tmp_path):
    state = cem_optimize(lambda X: -(X ** 2).sum(axis=1), np.ones(2), np.ones(2),
                         iterations=3, rng=np.random.default_rng(1))
    path = tmp_path / "cem.csv"
    write_cem_history(state, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iteration", "mean", "std", "best_objective"]
    assert len(rows) == 4
    assert len(rows[1][1].split()) == 2
