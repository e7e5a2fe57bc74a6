"""Black-box, one-run privacy auditing of (DP-)SGD training.

The package trains tiny models with a replayable (DP-)SGD loop, optimizes
audit canaries by differentiating exactly through recorded training runs,
plays membership guessing games against the final model, and converts guess
counts into statistically sound lower bounds on the privacy parameter.
"""

from ._backend import BACKEND
from .bounds import (
    EpsilonEstimate,
    TradeoffCurve,
    binom_tail,
    estimate_from_record,
    fdp_guess_test,
    pairs_epsilon_lb,
    simulate_rr_audit,
    steinke_epsilon_lb,
    steinke_prob_bound,
)
from .canary import (
    CanarySet,
    MetaConfig,
    assemble_training_set,
    clip_jvp,
    load_canaries,
    loss_gap,
    metagradient,
    optimize_canaries,
    save_canaries,
)
from .data import Dataset, Example, ingest_cifar_binary, synth_gaussians, synth_two_moons
from .errors import (
    AssignmentError,
    AuditError,
    BudgetError,
    DimensionError,
    DivergenceError,
    FormatError,
    ReplayMismatchError,
)
from .game import (
    GuessRecord,
    PairAssignment,
    guess_pairs,
    guess_top_bottom,
    load_guess_record,
    make_pairs,
    run_audit_game,
    save_guess_record,
    score_canaries,
    split_canaries,
)
from .models import (
    ModelSpec,
    cross_hvp_input,
    forward,
    grad_input,
    grad_params,
    hvp_params,
    init_params,
    loss,
)
from .pipeline import AuditReport, ExperimentConfig, emit_steps_curve, run_pipeline
from .training import (
    DPSGDConfig,
    TrainingTape,
    clip_gradient,
    dpsgd_train,
    load_tape,
    replay_step,
    save_tape,
    sgd_train,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AuditError",
    "AssignmentError",
    "AuditReport",
    "BudgetError",
    "CanarySet",
    "DPSGDConfig",
    "Dataset",
    "DimensionError",
    "DivergenceError",
    "EpsilonEstimate",
    "Example",
    "ExperimentConfig",
    "FormatError",
    "GuessRecord",
    "MetaConfig",
    "ModelSpec",
    "PairAssignment",
    "ReplayMismatchError",
    "TradeoffCurve",
    "TrainingTape",
    "assemble_training_set",
    "binom_tail",
    "clip_gradient",
    "clip_jvp",
    "cross_hvp_input",
    "dpsgd_train",
    "emit_steps_curve",
    "estimate_from_record",
    "fdp_guess_test",
    "forward",
    "grad_input",
    "grad_params",
    "guess_pairs",
    "guess_top_bottom",
    "hvp_params",
    "ingest_cifar_binary",
    "init_params",
    "load_canaries",
    "load_guess_record",
    "load_tape",
    "loss",
    "loss_gap",
    "make_pairs",
    "metagradient",
    "optimize_canaries",
    "pairs_epsilon_lb",
    "replay_step",
    "run_audit_game",
    "run_pipeline",
    "save_canaries",
    "save_guess_record",
    "save_tape",
    "score_canaries",
    "sgd_train",
    "simulate_rr_audit",
    "split_canaries",
    "steinke_epsilon_lb",
    "steinke_prob_bound",
    "synth_gaussians",
    "synth_two_moons",
]
