"""Stochastic majorization-minimization training loop.

Each iteration draws a minibatch with replacement (growing linearly in the
iteration count), linearizes the rule at the incumbent via a random
near-active index mapping, majorizes the cost, and solves the resulting
proximal subproblem.  The candidate is kept only when its surrogate value
(including the proximal term) does not exceed the incumbent's minibatch cost
plus a vanishing slack; with epsilon zero the surrogate touches the
incumbent, so the candidate is always kept.

The returned parameter is either the iterate with the best full-sample
objective or one drawn uniformly from the visited iterates.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import costs, rules, subproblem
from .core import Dataset, HypothesisConfig, RngHandle, Theta, derive_seed, random_init

OUTPUT_RULES = ("best_erm", "uniform_iterate")


@dataclass(frozen=True)
class SmmConfig:
    """Training schedule.

    epsilon follows a two-phase schedule: ``eps0`` for the first
    ``switch_after`` iterations, ``eps1`` afterwards.  A constant schedule is
    ``eps0 == eps1`` (or ``switch_after == 0``).  The minibatch at iteration
    nu has ``batch_slope * nu + batch_base`` draws with replacement.
    """

    iterations: int = 10
    eta: float = 0.5
    eps0: float = 0.0
    eps1: float = 0.0
    switch_after: int = 0
    batch_slope: int = 25
    batch_base: int = 25
    rounds: int = 10
    output_rule: str = "best_erm"
    seed: int = 0
    delta0: float = 1e-3
    eps_outer: float | None = None
    tol: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eta < 0 or self.eps0 < 0 or self.eps1 < 0:
            raise ValueError("eta and epsilon values must be >= 0")
        if self.switch_after < 0:
            raise ValueError("switch_after must be >= 0")
        if self.batch_slope < 0 or self.batch_base < 1:
            raise ValueError("need batch_base >= 1 and batch_slope >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.output_rule not in OUTPUT_RULES:
            raise ValueError(f"output_rule must be one of {OUTPUT_RULES}")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be > 0")

    def epsilon_at(self, nu: int) -> float:
        return self.eps0 if nu < self.switch_after else self.eps1

    def batch_size_at(self, nu: int) -> int:
        return self.batch_slope * nu + self.batch_base

    def replace(self, **kw) -> "SmmConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SmmConfig":
        return cls(**d)


@dataclass(frozen=True)
class Problem:
    """Training data, rule shape, and cost; theta0 None means random init."""

    data: Dataset
    cfg: HypothesisConfig
    cost: object
    theta0: Theta | None = None

    def __post_init__(self):
        if self.cfg.n_features != self.data.p:
            raise ValueError(f"rule expects p={self.cfg.n_features}, data has p={self.data.p}")
        if self.theta0 is not None and self.theta0.cfg != self.cfg:
            raise ValueError("theta0 shape does not match the rule config")


@dataclass
class IterRecord:
    iteration: int
    batch_size: int
    epsilon: float
    accepted: bool
    batch_objective: float      # minibatch cost of the incumbent
    surrogate_value: float      # prox-regularized surrogate at the candidate
    step_norm: float
    seconds: float


@dataclass
class SmmTrace:
    records: list
    output_rule: str
    chosen_index: int
    output_objective: float

    def __len__(self) -> int:
        return len(self.records)

    def accepted_all(self) -> bool:
        return all(r.accepted for r in self.records)

    def csv_lines(self) -> list:
        """Trace table; wall times stay in memory only so artifacts hash stably."""
        lines = ["iteration,batch_size,epsilon,accepted,batch_objective,surrogate_value,step_norm"]
        for r in self.records:
            lines.append(
                f"{r.iteration},{r.batch_size},{r.epsilon!r},{int(r.accepted)},"
                f"{r.batch_objective!r},{r.surrogate_value!r},{r.step_norm!r}"
            )
        return lines


def full_objective(problem: Problem, theta: Theta) -> float:
    """Mean training cost of theta over the full dataset."""
    z = rules.decisions(theta, problem.data.features)
    return float(np.mean(costs.cost_values(problem.cost, z, problem.data.outcomes)))


def run_smm(problem: Problem, cfg: SmmConfig) -> tuple[Theta, SmmTrace]:
    """One training round from one initial point."""
    data = problem.data
    theta = problem.theta0
    if theta is None:
        theta = random_init(problem.cfg, RngHandle(cfg.seed, "init"))
    mini_rng = RngHandle(cfg.seed, "minibatch")
    index_rng = RngHandle(cfg.seed, "index")
    iterates = [theta]
    records = []
    for nu in range(cfg.iterations):
        t0 = time.perf_counter()
        eps = cfg.epsilon_at(nu)
        size = cfg.batch_size_at(nu)
        draw = mini_rng.child(nu).generator().integers(0, data.n, size=size)
        ids, counts = np.unique(draw, return_counts=True)
        weights = counts.astype(np.float64) / size
        mapping = rules.mapping_at(theta, data, eps, index_rng.child(nu), sample_ids=ids)
        inner = rules.build_inner_surrogates(theta, data, mapping, ids)
        batch = costs.build_surrogates(problem.cost, inner, theta, eps,
                                       index_rng.child(nu), cfg.eps_outer)
        incumbent_cost = float(batch.true_values(theta) @ weights)
        cand, cand_val = subproblem.solve_prox((batch, weights), theta, cfg.eta,
                                               problem.cfg.bound, cfg.tol)
        delta = cfg.delta0 / (nu + 1)
        accepted = cand_val <= incumbent_cost + delta
        step = float(np.linalg.norm((cand.weights - theta.weights).ravel())) if accepted else 0.0
        if accepted:
            theta = cand
        iterates.append(theta)
        records.append(IterRecord(
            iteration=nu, batch_size=size, epsilon=eps, accepted=bool(accepted),
            batch_objective=incumbent_cost, surrogate_value=cand_val,
            step_norm=step, seconds=time.perf_counter() - t0,
        ))
    if cfg.output_rule == "uniform_iterate":
        j = int(RngHandle(cfg.seed, "output").generator().integers(0, cfg.iterations))
        theta_out = iterates[j]
        chosen = j
    else:
        objs = [full_objective(problem, t) for t in iterates]
        chosen = int(np.argmin(objs))
        theta_out = iterates[chosen]
    out_obj = full_objective(problem, theta_out)
    return theta_out, SmmTrace(records, cfg.output_rule, chosen, out_obj)


@dataclass
class RoundResult:
    round_id: int
    seed: int
    objective: float
    theta: Theta
    trace: SmmTrace


@dataclass
class MultiStartResult:
    best: Theta
    best_objective: float
    best_round: int
    rounds: list

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.rounds])


def multi_start(problem: Problem, cfg: SmmConfig) -> MultiStartResult:
    """Independent training rounds from fresh random initial points."""
    results = []
    for r in range(cfg.rounds):
        seed_r = derive_seed(cfg.seed, r)
        prob_r = problem if problem.theta0 is None else dataclasses.replace(problem, theta0=None)
        theta, trace = run_smm(prob_r, cfg.replace(seed=seed_r, rounds=1))
        results.append(RoundResult(r, seed_r, trace.output_objective, theta, trace))
    best = min(results, key=lambda r: (r.objective, r.round_id))
    return MultiStartResult(best.theta, best.objective, best.round_id, results)


DEFAULT_SWEEP_GRID = {
    "eps0": [0.0, 10.0, 100.0, 1000.0, 3000.0],
    "eps1": [0.0, 0.1, 1.0],
    "switch_after": [1, 2, 3, 4, 5, 6],
    "eta": [0.001, 0.005, 0.02, 0.1, 0.5],
    "batch_slope": [5, 15, 25, 50],
    "batch_base": [10, 25, 40],
}


@dataclass
class SweepEntry:
    params: dict
    validation_cost: float
    feasibility: float


def sweep(problem: Problem, grid: dict | None = None, validation_split: float = 0.2,
          rng: RngHandle | None = None, budget: int = 20, base_cfg: SmmConfig | None = None,
          min_feasibility: float = 0.9) -> tuple[SmmConfig, Theta, list]:
    """Random search over the schedule grid, scored on a held-out split.

    Each candidate trains one round on the training part; the winner is
    retrained on all data with the full round count.  For penalized costs,
    candidates reaching ``min_feasibility`` on the split are preferred and
    ranked by cost; otherwise by feasibility first.
    """
    if grid is None:
        grid = DEFAULT_SWEEP_GRID
    if rng is None:
        rng = RngHandle(0, "sweep")
    if base_cfg is None:
        base_cfg = SmmConfig()
    if not 0.0 < validation_split < 1.0:
        raise ValueError("validation_split must be in (0, 1)")
    bad = set(grid) - set(f.name for f in dataclasses.fields(SmmConfig))
    if bad:
        raise ValueError(f"unknown sweep fields: {sorted(bad)}")
    n = problem.data.n
    n_val = max(1, int(round(validation_split * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    perm = rng.child(0).generator().permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train = problem.data.subset(train_idx)
    val = problem.data.subset(val_idx)
    train_problem = dataclasses.replace(problem, data=train, theta0=None)

    gen = rng.child(1).generator()
    entries = []
    best_key = None
    best_cfg = None
    for c in range(budget):
        params = {k: v[int(gen.integers(0, len(v)))] for k, v in sorted(grid.items())}
        cand_cfg = base_cfg.replace(seed=derive_seed(base_cfg.seed, 1000 + c), rounds=1, **params)
        theta, _ = run_smm(train_problem, cand_cfg)
        zc = rules.decisions(theta, val.features)
        cost_val = float(np.mean(costs.cost_values(problem.cost, zc, val.outcomes)))
        feas = _feasibility(problem.cost, zc)
        entries.append(SweepEntry(params, cost_val, feas))
        feasible = feas >= min_feasibility
        key = (0 if feasible else 1, cost_val if feasible else -feas, c)
        if best_key is None or key < best_key:
            best_key = key
            best_cfg = base_cfg.replace(seed=base_cfg.seed, **params)
    final = multi_start(problem, best_cfg)
    return best_cfg, final.best, entries


def _feasibility(cost, decisions: np.ndarray) -> float:
    check = getattr(cost, "feasibility_of", None)
    if check is None:
        return 1.0
    return float(check(decisions))
