"""Closed-form outer/inner decompositions of the classic fusion formulas.

Each formula ``f(o)`` is rewritten as ``g(sum_k h_k(o_k))`` with a single
outer function ``g`` and per-type increasing ``h_k``. The functions here
evaluate both sides independently so the identity can be checked
numerically.
"""
from __future__ import annotations

import numpy as np

from .baselines import DEFAULT_OFFSET, formula_scores
from .exceptions import ContractViolation

# row -> (formula kind, outer function name)
DECOMPOSITIONS = {1: ("linear", "identity"), 2: ("log_offset", "identity"), 3: ("power", "exp")}
_EPS = 1e-300


def _check(row, a, beta):
    if row not in DECOMPOSITIONS:
        raise ContractViolation(f"unknown decomposition row {row!r}")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size < 1 or np.any(a <= 0.0) or not np.all(np.isfinite(a)):
        raise ContractViolation("coefficients must be a finite positive vector")
    if beta is None:
        beta = np.full(a.shape, DEFAULT_OFFSET)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != a.shape:
        raise ContractViolation("one offset per coefficient")
    return a, beta


def _check_domain(row, O):
    O = np.asarray(O, dtype=np.float64)
    lo_ok = O > 0.0 if row == 3 else O >= 0.0
    if not (np.all(lo_ok) and np.all(O <= 1.0)):
        dom = "(0, 1]" if row == 3 else "[0, 1]"
        raise ContractViolation(f"row {row} needs predictions in {dom}")
    return O


def inner_terms(row, a, beta, O):
    """``h_k(o_k)`` for every entry of ``O`` (..., K)."""
    a, beta = _check(row, a, beta)
    O = _check_domain(row, O)
    if row == 1:
        return a * O
    if row == 2:
        return a * np.log(O + beta)
    return a * np.log(O)


def outer(row, x):
    return np.exp(x) if DECOMPOSITIONS[row][1] == "exp" else np.asarray(x)


def decomposed(row, a, beta, O):
    """Right-hand side ``g(sum_k h_k(o_k))``."""
    return outer(row, inner_terms(row, a, beta, O).sum(axis=-1))


def direct(row, a, beta, O):
    """Left-hand side: the fusion formula itself."""
    a, beta = _check(row, a, beta)
    O = _check_domain(row, np.atleast_2d(O))
    if row == 3:
        return np.prod(np.power(O, a), axis=-1)
    kind = DECOMPOSITIONS[row][0]
    return formula_scores(kind, a, O, beta if kind == "log_offset" else None)


def verify_representation(row, a, beta=None, samples=1000, rng=None) -> float:
    """Max relative gap between a formula and its decomposition over random inputs."""
    a, beta = _check(row, a, beta)
    if samples < 1:
        raise ContractViolation("need at least one sample")
    rng = np.random.default_rng(rng)
    O = rng.random((samples, a.size))
    if row == 3:
        O = 1.0 - O  # (0, 1]
    lhs = direct(row, a, beta, O)
    rhs = decomposed(row, a, beta, O)
    return float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(lhs), _EPS)))


def h_is_increasing(row, a, beta=None, grid=100) -> bool:
    """Each ``h_k`` strictly increasing on a grid over its domain."""
    a, beta = _check(row, a, beta)
    lo = 1.0 / grid if row == 3 else 0.0
    o = np.linspace(lo, 1.0, grid)
    H = inner_terms(row, a, beta, np.repeat(o[:, None], a.size, axis=1))
    return bool(np.all(np.diff(H, axis=0) > 0.0))
