"""Piecewise-affine decision rules for contextual stochastic programs.

Learns decision rules of the form max-affine minus max-affine directly
against the downstream cost by stochastic majorization-minimization,
with exact-penalty support for capacity-coupled decisions, stationarity
diagnostics, and a reproducible newsvendor benchmark suite.
"""

from .core import (Dataset, HypothesisConfig, RngHandle, Theta, derive_seed,
                   erm_cost, load_dataset, load_model, random_init,
                   save_dataset, save_model)
from .rules import decisions, evaluate
from .costs import capacity_addon, newsvendor, squared_loss
from .penalty import (ConcaveSumConstraint, ConstraintSpec, MaxAffineConstraint,
                      build_penalized, constraint_gap, feasibility_rate,
                      linear_constraint)
from .smm import Problem, SmmConfig, multi_start, run_smm, sweep
from .diagnostics import (check_surrogation, directional_probe,
                          eps_all_threshold, interpolate_pa, residual_exact,
                          residual_sampled)
from .bench import (CostSetup, DemandModel, ExperimentConfig, baseline_gldr,
                    baseline_po_linear, baseline_po_pa, gen_dataset, preset,
                    run_benchmark, simopt_decisions, train_decision_rule)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "HypothesisConfig", "RngHandle", "Theta", "derive_seed",
    "erm_cost", "load_dataset", "load_model", "random_init", "save_dataset",
    "save_model", "decisions", "evaluate", "capacity_addon", "newsvendor",
    "squared_loss", "ConcaveSumConstraint", "ConstraintSpec",
    "MaxAffineConstraint", "build_penalized", "constraint_gap",
    "feasibility_rate", "linear_constraint", "Problem", "SmmConfig",
    "multi_start", "run_smm", "sweep", "check_surrogation",
    "directional_probe", "eps_all_threshold", "interpolate_pa",
    "residual_exact", "residual_sampled", "CostSetup", "DemandModel",
    "ExperimentConfig", "baseline_gldr", "baseline_po_linear",
    "baseline_po_pa", "gen_dataset", "preset", "run_benchmark",
    "simopt_decisions", "train_decision_rule",
    "__version__",
]
