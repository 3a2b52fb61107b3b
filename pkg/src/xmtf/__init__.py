"""Multi-task fusion for short-video ranking: monotone per-type cells with a
personalized outer stage trained by actor-critic RL, plus formula baselines
and a session simulator to compare them in."""
__version__ = "0.1.0"

from .baselines import FusionFormula, cem_optimize, formula_eval, formula_scores
from .env import FEEDBACK_TYPES, SessionConfig, SessionEnv
from .estimators import CEMRanker, FormulaRanker, FormulaRLRanker, XMTFRanker
from .exceptions import BufferNotReady, ContractViolation, NonFiniteError, SessionDone, XmtfError
from .mfc import MfcModel, fuse, rank_top_n
from .trainer import TrainConfig, Trainer

__all__ = [
    "FEEDBACK_TYPES", "BufferNotReady", "CEMRanker", "ContractViolation", "FormulaRLRanker",
    "FormulaRanker", "FusionFormula", "MfcModel", "NonFiniteError", "SessionConfig",
    "SessionDone", "SessionEnv", "TrainConfig", "Trainer", "XMTFRanker", "XmtfError",
    "cem_optimize", "formula_eval", "formula_scores", "fuse", "rank_top_n",
]
