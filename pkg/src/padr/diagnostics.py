"""Validation and stationarity diagnostics.

* ``check_surrogation`` empirically verifies the three surrogate conditions
  on random parameter probes: touching at the reference under an argmax
  mapping with epsilon zero, majorization everywhere, and midpoint convexity.
* ``residual_exact`` / ``residual_sampled`` measure approximate stationarity
  at a candidate parameter: the mean distance to the gated proximal points
  taken over the near-active index mappings, enumerated exactly when the
  mapping count is small and Monte Carlo averaged otherwise.
* ``interpolate_pa`` builds a difference-of-max-affine rule matching a target
  function on a uniform grid, with certified sup-error and Lipschitz bounds.
* ``eps_all_threshold`` is the epsilon level beyond which every piece of
  every sample is active, making the active-set relaxation saturate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import costs, rules, subproblem
from .core import Dataset, HypothesisConfig, RngHandle, Theta, random_init
from .smm import Problem, full_objective


@dataclass
class SurrogationReport:
    probes: int
    touch_gap: float          # max |surrogate - true| at epsilon-zero references
    majorization_gap: float   # max (true - surrogate) at probe points
    convexity_gap: float      # max midpoint violation
    epsilon: float

    def ok(self, touch_tol: float = 1e-12, major_tol: float = 1e-9,
           convex_tol: float = 1e-9) -> bool:
        return (self.touch_gap <= touch_tol and self.majorization_gap <= major_tol
                and self.convexity_gap <= convex_tol)


def check_surrogation(problem: Problem, theta_ref: Theta | None = None,
                      epsilon: float = 0.0, probes: int = 100,
                      rng: RngHandle | None = None) -> SurrogationReport:
    """Probe the surrogate construction for touching, majorization, convexity.

    Each probe point doubles as a fresh reference for the touching check;
    majorization and convexity are tested against the surrogate built at
    ``theta_ref`` (random mapping when epsilon > 0).
    """
    if rng is None:
        rng = RngHandle(0, "index")
    data, cfg = problem.data, problem.cfg
    if theta_ref is None:
        theta_ref = random_init(cfg, rng.child(10_000))
    mapping = rules.mapping_at(theta_ref, data, epsilon, rng if epsilon > 0 else None)
    inner = rules.build_inner_surrogates(theta_ref, data, mapping)
    batch = costs.build_surrogates(problem.cost, inner, theta_ref, epsilon,
                                   rng if epsilon > 0 else None)
    touch = 0.0
    major = 0.0
    convex = 0.0
    prev = None
    for s in range(probes):
        probe = random_init(cfg, rng.child(20_000 + s))
        # touching at the probe itself, argmax mapping, epsilon zero
        m0 = rules.mapping_at(probe, data, 0.0, None)
        i0 = rules.build_inner_surrogates(probe, data, m0)
        b0 = costs.build_surrogates(problem.cost, i0, probe, 0.0, None)
        touch = max(touch, float(np.max(np.abs(b0.values(probe) - b0.true_values(probe)))))
        # majorization of the reference surrogate
        major = max(major, float(np.max(batch.true_values(probe) - batch.values(probe))))
        if prev is not None:
            mid = Theta(cfg, 0.5 * (prev.weights + probe.weights), validate=False)
            gap = batch.values(mid) - 0.5 * (batch.values(prev) + batch.values(probe))
            convex = max(convex, float(np.max(gap)))
        prev = probe
    return SurrogationReport(probes, touch, major, convex, epsilon)


def _entry_choices(sets: rules.ActiveSets):
    """Per (sample, output) lists of active piece indices, convex then concave."""
    u, d = sets.convex_mask.shape[:2]
    conv = [
        np.flatnonzero(sets.convex_mask[s, i]) for s in range(u) for i in range(d)
    ]
    if sets.cfg.k_concave > 0:
        conc = [
            np.flatnonzero(sets.concave_mask[s, i]) for s in range(u) for i in range(d)
        ]
    else:
        conc = []
    return conv, conc


def _gated_prox_residual(problem: Problem, theta_ref: Theta, mapping, rho: float,
                         f_ref: float, tol: float) -> float:
    inner = rules.build_inner_surrogates(theta_ref, problem.data, mapping)
    batch = costs.build_surrogates(problem.cost, inner, theta_ref, 0.0, None)
    cand, val = subproblem.solve_prox(batch, theta_ref, rho, problem.cfg.bound, tol=1e-9)
    if val <= f_ref + tol:
        step = cand.weights - theta_ref.weights
        return float(np.sqrt(np.sum(step * step)))
    return 0.0


@dataclass
class ResidualReport:
    epsilon: float
    rho: float
    mapping_count: float       # |near-active mappings|; may exceed the cap
    exact: bool                # enumerated vs Monte Carlo
    residual: float            # mean gated prox step norm
    step_norms: list | None    # per-mapping norms (exact mode only)
    std_error: float = 0.0     # sampling error (sampled mode only)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "rho": self.rho,
            "mapping_count": self.mapping_count, "exact": self.exact,
            "residual": self.residual, "std_error": self.std_error,
        }


def residual_exact(problem: Problem, theta_ref: Theta, epsilon: float, rho: float,
                   cap: int = 10_000, gate_tol: float = 1e-9) -> ResidualReport:
    """Mean gated prox residual over every near-active index mapping.

    Raises when the mapping count exceeds ``cap``; use ``residual_sampled``
    then.  The gate keeps the prox point only when its regularized surrogate
    value does not exceed the current objective.
    """
    data = problem.data
    sets = rules.active_sets(theta_ref, data, epsilon)
    count = sets.mapping_count()
    if count > cap:
        raise ValueError(f"mapping count {count:g} exceeds cap {cap}; sample instead")
    conv, conc = _entry_choices(sets)
    u = data.n
    d = problem.cfg.n_outputs
    f_ref = full_objective(problem, theta_ref)
    norms = []
    for combo in itertools.product(*conv, *conc):
        conv_pick = np.asarray(combo[: u * d], dtype=np.int64).reshape(u, d)
        if conc:
            conc_pick = np.asarray(combo[u * d :], dtype=np.int64).reshape(u, d)
        else:
            conc_pick = np.zeros((u, d), dtype=np.int64)
        mapping = rules.IndexMapping(sets.ids, conv_pick, conc_pick, theta_ref)
        norms.append(_gated_prox_residual(problem, theta_ref, mapping, rho, f_ref, gate_tol))
    return ResidualReport(epsilon, rho, float(count), True,
                          float(np.mean(norms)), norms)


def residual_sampled(problem: Problem, theta_ref: Theta, epsilon: float, rho: float,
                     draws: int = 100, rng: RngHandle | None = None,
                     gate_tol: float = 1e-9) -> ResidualReport:
    """Monte Carlo residual estimate with its standard error."""
    if rng is None:
        rng = RngHandle(0, "index")
    data = problem.data
    sets = rules.active_sets(theta_ref, data, epsilon)
    f_ref = full_objective(problem, theta_ref)
    vals = np.zeros(draws)
    for s in range(draws):
        mapping = rules.draw_index_mapping(sets, rng.child(s))
        vals[s] = _gated_prox_residual(problem, theta_ref, mapping, rho, f_ref, gate_tol)
    se = float(vals.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("inf")
    return ResidualReport(epsilon, rho, float(sets.mapping_count()), False,
                          float(vals.mean()), None, se)


@dataclass
class InterpolationReport:
    nodes_per_axis: int
    n_pieces: int
    spacing: float
    eps_effective: float
    slope_scale: float
    lipschitz_bound: float
    sup_error_bound: float


def interpolate_pa(f0, lipschitz: float, bound: float, p: int, grid_eps: float,
                   x_max: float) -> tuple[Theta, InterpolationReport]:
    """Difference-of-max-affine interpolant of ``f0`` on ``[-x_max, x_max]^p``.

    ``f0`` maps an (n, p) array to (n,) values, ``lipschitz`` bounds its
    variation, ``bound`` its magnitude on the box.  Nodes sit at the centers
    of a uniform grid whose spacing keeps the effective activity radius at or
    below ``grid_eps``; both returned bounds are certified for the result.
    """
    if grid_eps <= 0 or x_max <= 0 or lipschitz <= 0:
        raise ValueError("grid_eps, x_max, and lipschitz must be > 0")
    if p < 1:
        raise ValueError("p must be >= 1")
    m = max(1, math.ceil(math.sqrt(p) * x_max / grid_eps))
    spacing = 2.0 * x_max / m
    eps_eff = spacing * math.sqrt(p) / 2.0
    slope = lipschitz / spacing
    axis = -x_max + spacing * (np.arange(m) + 0.5)
    nodes = np.array(list(itertools.product(axis, repeat=p)))
    k = nodes.shape[0]
    f_vals = np.asarray(f0(nodes), dtype=np.float64).reshape(k)
    if np.any(np.abs(f_vals) > bound + 1e-9):
        raise ValueError("f0 exceeds its declared bound on the grid")
    sq = 0.5 * slope * np.sum(nodes * nodes, axis=1)
    alpha = slope * nodes
    a_pos = -sq + 0.5 * f_vals
    a_neg = -sq - 0.5 * f_vals
    theta_bound = float(max(
        np.max(np.abs(alpha)) if alpha.size else 0.0,
        np.max(np.abs(a_pos)), np.max(np.abs(a_neg)),
    )) * (1.0 + 1e-9) + 1e-12
    cfg = HypothesisConfig(1, k, k, p, theta_bound)
    weights = np.zeros((1, 2 * k, p + 1))
    weights[0, :k, :p] = alpha
    weights[0, :k, p] = a_pos
    weights[0, k:, :p] = alpha
    weights[0, k:, p] = a_neg
    theta = Theta(cfg, weights)
    report = InterpolationReport(
        nodes_per_axis=m, n_pieces=k, spacing=spacing, eps_effective=eps_eff,
        slope_scale=slope,
        lipschitz_bound=(math.sqrt(p) + 2.0) * lipschitz,
        sup_error_bound=2.0 * (math.sqrt(p) + 3.0) * math.sqrt(p) * lipschitz
        * x_max * k ** (-1.0 / p),
    )
    return theta, report


def eps_all_threshold(cfg: HypothesisConfig, data: Dataset) -> float:
    """Epsilon at which every piece is active for every sample, regardless of
    the reference parameter."""
    q = cfg.n_params
    sq = float(np.max(np.sum(data.features ** 2, axis=1))) if data.n else 0.0
    return 2.0 * cfg.bound * math.sqrt(q) * math.sqrt(sq + 1.0)


def directional_probe(problem: Problem, theta: Theta, rng: RngHandle | None = None,
                      directions: int = 64, step: float = 1e-4) -> float:
    """Smallest forward slope of the objective over coordinate and random
    directions.  A nonnegative result is necessary, not sufficient, for
    local minimality."""
    if rng is None:
        rng = RngHandle(0, "output")
    cfg = problem.cfg
    q = cfg.n_params
    flat = theta.flatten()
    f0 = full_objective(problem, theta)
    dirs = [np.eye(q)[j] for j in range(q)] + [-np.eye(q)[j] for j in range(q)]
    gen = rng.generator()
    extra = gen.normal(size=(directions, q))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    dirs.extend(extra)
    worst = np.inf
    for d in dirs:
        cand = np.clip(flat + step * d, -cfg.bound, cfg.bound)
        slope = (full_objective(problem, Theta.from_flat(cfg, cand)) - f0) / step
        worst = min(worst, slope)
    return float(worst)
