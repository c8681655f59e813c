"""Constrained training through exact penalization.

Decision constraints psi_j(z) <= 0 are enforced during training by adding
lam * sum_j max{psi_j(z) + gamma, 0} to the cost, with a feasibility margin
gamma tightening the constraint and lam the penalty weight.  Since max{., 0}
is convex and nondecreasing, composing it with a majorant of psi_j(rule(x))
keeps the majorization and touching properties, so the penalized objective
trains with the same machinery as the plain cost.

Two constraint shapes are supported:

* ``MaxAffineConstraint`` — psi(z) = max_j (w_j'z + b_j), convex piecewise
  affine; covers linear capacity limits as the single-piece case.
* ``ConcaveSumConstraint`` — psi(z) = sum_i C_i(z_i) - rhs with each C_i a
  min of affine pieces; linearized at the reference via one near-minimal
  piece per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import costs, rules, subproblem
from .core import Dataset, RngHandle, Theta

_OUTER_TAG = 3


@dataclass(frozen=True)
class MaxAffineConstraint:
    """psi(z) = max_j (pieces[j, :d] @ z + pieces[j, d]) <= 0."""

    pieces: np.ndarray

    def __post_init__(self):
        pieces = np.atleast_2d(np.asarray(self.pieces, dtype=np.float64))
        if pieces.shape[0] < 1 or pieces.shape[1] < 2:
            raise ValueError("need at least one piece with a slope and an offset")
        object.__setattr__(self, "pieces", pieces)

    @property
    def n_outputs(self) -> int:
        return self.pieces.shape[1] - 1

    def values(self, Z: np.ndarray) -> np.ndarray:
        return (Z @ self.pieces[:, :-1].T + self.pieces[None, :, -1]).max(axis=1)

    @property
    def is_convex(self) -> bool:
        return True


def linear_constraint(weights, rhs: float) -> MaxAffineConstraint:
    """weights @ z <= rhs."""
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    return MaxAffineConstraint(np.concatenate([w, [-float(rhs)]])[None, :])


@dataclass(frozen=True)
class ConcaveSumConstraint:
    """psi(z) = sum_i min_j (pieces[i][j, 0]*z_i + pieces[i][j, 1]) - rhs <= 0."""

    pieces: tuple
    rhs: float

    def __post_init__(self):
        pieces = tuple(np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in self.pieces)
        if any(a.shape[0] < 1 for a in pieces):
            raise ValueError("every output needs at least one piece")
        object.__setattr__(self, "pieces", pieces)

    @property
    def n_outputs(self) -> int:
        return len(self.pieces)

    def values(self, Z: np.ndarray) -> np.ndarray:
        total = np.full(Z.shape[0], -self.rhs)
        for i, p in enumerate(self.pieces):
            total += (np.outer(Z[:, i], p[:, 0]) + p[None, :, 1]).min(axis=1)
        return total

    @property
    def is_convex(self) -> bool:
        return False


@dataclass(frozen=True)
class ConstraintSpec:
    """Constraint list plus the penalty margin and weight."""

    constraints: tuple
    gamma: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.constraints:
            raise ValueError("constraint list is empty")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def violation_sum(self, Z: np.ndarray, use_margin: bool = True) -> np.ndarray:
        """sum_j max{psi_j(z) + gamma, 0} per row (gamma dropped when unmargined)."""
        g = self.gamma if use_margin else 0.0
        total = np.zeros(Z.shape[0])
        for con in self.constraints:
            total += np.maximum(con.values(Z) + g, 0.0)
        return total

    def feasible_mask(self, Z: np.ndarray, use_margin: bool = False) -> np.ndarray:
        g = self.gamma if use_margin else 0.0
        ok = np.ones(Z.shape[0], dtype=bool)
        for con in self.constraints:
            ok &= con.values(Z) + g <= 1e-9
        return ok


@dataclass(frozen=True)
class PenalizedProblem:
    """Cost plus penalized constraints; trains like any other cost spec."""

    cost: object
    cons: ConstraintSpec

    # -- cost-spec protocol ---------------------------------------------------
    def objective_values(self, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        base = costs.cost_values(self.cost, Z, Y)
        return base + self.cons.lam * self.cons.violation_sum(Z)

    def feasibility_of(self, Z: np.ndarray) -> float:
        return float(np.mean(self.cons.feasible_mask(Z)))

    def surrogate_batch(self, inner, theta_ref: Theta, epsilon: float,
                        rng: RngHandle | None, eps_outer: float | None = None):
        batch = costs.build_surrogates(self.cost, inner, theta_ref, epsilon, rng, eps_outer)
        if not batch.has_epigraph:
            raise ValueError("penalized training requires an epigraph-capable cost")
        batch._true_cost = self
        if self.cons.lam == 0.0:
            return batch
        extra = penalty_families(self.cons, inner, theta_ref, epsilon, rng, eps_outer)
        batch.families.extend(extra)
        return batch


def build_penalized(cost, cons: ConstraintSpec) -> PenalizedProblem:
    for con in cons.constraints:
        if not isinstance(con, (MaxAffineConstraint, ConcaveSumConstraint)):
            raise TypeError(f"unsupported constraint type {type(con).__name__}")
    return PenalizedProblem(cost, cons)


def penalty_families(cons: ConstraintSpec, inner, theta_ref: Theta, epsilon: float,
                     rng: RngHandle | None, eps_outer: float | None = None) -> list:
    """Hinge terms lam * max{psi_hat_j + gamma, 0} for each constraint."""
    u = inner.n
    cfg = inner.cfg
    cave_eps = epsilon if eps_outer is None else eps_outer
    lam = np.full(u, cons.lam)
    out = []
    for ci, con in enumerate(cons.constraints):
        if con.n_outputs != cfg.n_outputs:
            raise ValueError("constraint dimension != rule outputs")
        if isinstance(con, MaxAffineConstraint):
            placement_lists, offset_lists = [], []
            for row in con.pieces:
                pl, offs = costs.compose_linear(inner, row[:-1], row[-1] + cons.gamma)
                placement_lists.append(pl)
                offset_lists.append(offs)
            fam = costs._merge_pieces(placement_lists, offset_lists, u)
            out.append(costs.HingeFamily(lam, True, fam.placements, fam.offsets))
        else:
            # linearize each concave term at the reference decision
            fref = inner.rule_values(theta_ref)
            coeffs = np.zeros((u, cfg.n_outputs))
            const = np.full(u, -con.rhs + cons.gamma)
            for i, p in enumerate(con.pieces):
                vals = np.outer(fref[:, i], p[:, 0]) + p[None, :, 1]
                mask = vals <= vals.min(axis=1, keepdims=True) + cave_eps
                if rng is None:
                    j = vals.argmin(axis=1)
                else:
                    j = rules._choose(mask, rng.keyed_units(inner.ids, ci, i, _OUTER_TAG))
                coeffs[:, i] = p[j, 0]
                const += p[j, 1]
            # per-sample slopes: group identical slope rows to share placements
            out.extend(_grouped_linear_families(inner, coeffs, const, lam))
    return out


def _grouped_linear_families(inner, coeffs: np.ndarray, const: np.ndarray,
                             lam: np.ndarray) -> list:
    """Hinge families for per-sample linear forms, grouped by slope pattern."""
    u = coeffs.shape[0]
    out = []
    _, inverse = np.unique(coeffs, axis=0, return_inverse=True)
    for g in np.unique(inverse):
        rows = inverse == g
        pl, offs = costs.compose_linear(inner, coeffs[np.argmax(rows)], const)
        weight = np.where(rows, lam, 0.0)
        out.append(costs.HingeFamily(weight, True, pl, offs))
    return out


def constraint_gap(theta: Theta, data: Dataset, cons: ConstraintSpec) -> float:
    """Mean margined violation of the rule over the dataset."""
    Z = rules.decisions(theta, data.features)
    return float(np.mean(cons.violation_sum(Z)))


def feasibility_rate(theta: Theta, data: Dataset, cons: ConstraintSpec,
                     use_margin: bool = False) -> float:
    """Fraction of samples whose decision satisfies every constraint."""
    Z = rules.decisions(theta, data.features)
    return float(np.mean(cons.feasible_mask(Z, use_margin)))


def project_convex(z, cons: ConstraintSpec, use_margin: bool = False) -> np.ndarray:
    """Euclidean projection of a decision onto the convex feasible set.

    Raises for concave constraints, whose feasible set is not convex.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    rows = []
    rhs = []
    g = cons.gamma if use_margin else 0.0
    for con in cons.constraints:
        if not con.is_convex:
            raise ValueError("projection needs convex constraints only")
        for row in con.pieces:
            rows.append(row[:-1])
            rhs.append(-row[-1] - g)
    A = sp.csc_matrix(np.asarray(rows))
    lower = np.full(len(rhs), -np.inf)
    upper = np.asarray(rhs)
    if np.all(A @ z <= upper + 1e-12):
        return z
    qp = subproblem.EpigraphQp(
        p_diag=np.ones(z.size), lin=-z, A=A, lower=lower, upper=upper,
        const=0.5 * float(z @ z), n_theta=z.size, n_hinge=0,
        theta_ref_flat=z, cfg=None, n_piece_rows=len(rhs), n_gauge_rows=0,
        n_box_rows=0, warm_hinges=np.zeros(0),
    )
    report = subproblem.admm_solve(qp, 1e-9, 1e-9)
    return report.x[: z.size]
