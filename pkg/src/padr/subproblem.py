"""Proximal subproblem solvers: epigraph QP assembly and an ADMM backend.

The inner iteration minimizes a weighted sum of per-sample convex surrogates
plus a proximal term over the parameter box.  When every surrogate is built
from hinge terms, that is a convex QP in (theta, hinge epigraph variables):

    min  0.5*rho_tot*||theta - ref||^2 + lin.theta + sum_h w_h t_h
    s.t. t_h >= piece values (affine in theta), t_h >= 0 for gauge hinges,
         -mu <= theta_j <= mu (two one-sided rows per coordinate)

Single-piece hinge terms without the zero gauge are affine and fold into the
linear objective instead of spending an epigraph variable.  Costs expressed
through callbacks have no epigraph form; a projected-subgradient fallback
handles them.

The ADMM solver follows the operator-splitting scheme used by OSQP: an
over-relaxed x-update against a fixed factorization plus projection of the
constraint activity onto its bounds.  Eliminating the epigraph variables
(whose block of A^T A is diagonal, since no row couples two of them) leaves a
dense Schur system in theta, factored once per penalty value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .core import Theta
from .costs import SampleSurrogate, SurrogateBatch

_BALANCE_EVERY = 25
_RHO_JUMP = 5.0


@dataclass
class EpigraphQp:
    """min 0.5 x'Px + lin'x + const  s.t.  lower <= A x <= upper."""

    p_diag: np.ndarray
    lin: np.ndarray
    A: sp.csc_matrix
    lower: np.ndarray
    upper: np.ndarray
    const: float
    n_theta: int
    n_hinge: int
    theta_ref_flat: np.ndarray
    cfg: object
    n_piece_rows: int
    n_gauge_rows: int
    n_box_rows: int
    warm_hinges: np.ndarray = field(default=None)
    mu: float | None = None

    @property
    def n_vars(self) -> int:
        return self.n_theta + self.n_hinge

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]


@dataclass
class SolveReport:
    theta: Theta
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str
    rho: float


def _as_batch(surrogates) -> tuple[SurrogateBatch, np.ndarray]:
    """Normalize the input to (batch, weights summing to 1)."""
    if isinstance(surrogates, SurrogateBatch):
        return surrogates, np.full(surrogates.n, 1.0 / surrogates.n)
    if isinstance(surrogates, tuple) and len(surrogates) == 2:
        batch, w = surrogates
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (batch.n,) or np.any(w < 0):
            raise ValueError("weights must be nonnegative, one per sample")
        return batch, w
    if isinstance(surrogates, (list,)):
        if not surrogates or not all(isinstance(s, SampleSurrogate) for s in surrogates):
            raise TypeError("expected a surrogate batch or a list of sample views")
        base = surrogates[0].batch
        if any(s.batch is not base for s in surrogates):
            raise ValueError("sample views must share one underlying batch")
        rows = [s.i for s in surrogates]
        w = np.zeros(base.n)
        for r in rows:
            w[r] += 1.0 / len(rows)
        return base, w
    raise TypeError(f"unsupported surrogate container {type(surrogates).__name__}")


def build_epigraph_qp(surrogates, theta_ref: Theta | None = None, eta: float = 0.0,
                      mu: float | None = None) -> EpigraphQp:
    """Assemble the prox QP for hinge-form surrogates.

    Row layout: piece rows and gauge (nonnegativity) rows per hinge, then two
    one-sided box rows per parameter coordinate.
    """
    batch, weights = _as_batch(surrogates)
    if not batch.has_epigraph:
        raise ValueError("callback surrogates have no epigraph form")
    if theta_ref is None:
        theta_ref = batch.theta_ref
    elif theta_ref is not batch.theta_ref and not np.array_equal(
        theta_ref.weights, batch.theta_ref.weights
    ):
        raise ValueError("theta_ref differs from the surrogate linearization point")
    cfg = batch.cfg
    if mu is None:
        mu = cfg.bound
    q = cfg.n_params
    ref_flat = theta_ref.flatten()
    Xt = batch.inner.Xt
    pp1 = cfg.n_features + 1

    rho_tot = eta + float(batch.quad @ weights)
    lin_theta = np.zeros((cfg.n_outputs * cfg.k_total, pp1))
    const = float(batch.base_offset @ weights)
    for blocks, scale in batch.base_placements:
        np.add.at(lin_theta, blocks, (weights * scale)[:, None] * Xt)

    hinge_cost = []      # objective coefficient per hinge var
    warm = []            # hinge value at theta_ref, for warm starts
    rows_i, cols_i, vals_i = [], [], []
    low, high = [], []
    n_piece_rows = 0
    n_gauge_rows = 0
    row0 = 0
    n_hinge = 0
    dots_ref = batch.inner.block_dots(theta_ref)

    for fam in batch.families:
        live = np.flatnonzero(weights * fam.weight > 0)
        if live.size == 0:
            continue
        r = fam.n_pieces
        offs = fam.offsets[live]
        if r == 1 and not fam.include_zero:
            # affine term: fold into the linear objective
            wl = weights[live] * fam.weight[live]
            for blocks, scale in fam.placements:
                np.add.at(lin_theta, blocks[live, 0], (wl * scale[live, 0])[:, None] * Xt[live])
            const += float(wl @ offs[:, 0])
            continue
        u_count = live.size
        h_ids = n_hinge + np.arange(u_count)
        n_hinge += u_count
        hinge_cost.append(weights[live] * fam.weight[live])
        pv = fam.piece_values(dots_ref)[live]
        m = pv.max(axis=1)
        warm.append(np.maximum(m, 0.0) if fam.include_zero else m)
        # piece rows: t - sum scale*<Xt, theta_block> >= offset
        prow = row0 + (np.arange(u_count)[:, None] * r + np.arange(r)[None, :])
        rows_i.append(np.broadcast_to(prow[:, :, None], (u_count, r, 1)).ravel())
        cols_i.append(np.broadcast_to((q + h_ids)[:, None, None], (u_count, r, 1)).ravel())
        vals_i.append(np.ones(u_count * r))
        for blocks, scale in fam.placements:
            cols = blocks[live][:, :, None] * pp1 + np.arange(pp1)[None, None, :]
            vals = -scale[live][:, :, None] * Xt[live][:, None, :]
            rows_i.append(np.broadcast_to(prow[:, :, None], cols.shape).ravel())
            cols_i.append(cols.ravel())
            vals_i.append(vals.ravel())
        low.append(offs.ravel())
        high.append(np.full(u_count * r, np.inf))
        row0 += u_count * r
        n_piece_rows += u_count * r
        if fam.include_zero:
            grow = row0 + np.arange(u_count)
            rows_i.append(grow)
            cols_i.append(q + h_ids)
            vals_i.append(np.ones(u_count))
            low.append(np.zeros(u_count))
            high.append(np.full(u_count, np.inf))
            row0 += u_count
            n_gauge_rows += u_count

    # box rows, two one-sided rows per coordinate
    j = np.arange(q)
    rows_i.append(row0 + j)
    cols_i.append(j)
    vals_i.append(np.ones(q))
    low.append(np.full(q, -mu))
    high.append(np.full(q, np.inf))
    rows_i.append(row0 + q + j)
    cols_i.append(j)
    vals_i.append(np.ones(q))
    low.append(np.full(q, -np.inf))
    high.append(np.full(q, mu))
    n_rows = row0 + 2 * q

    nv = q + n_hinge
    A = sp.coo_matrix(
        (np.concatenate(vals_i), (np.concatenate(rows_i), np.concatenate(cols_i))),
        shape=(n_rows, nv),
    ).tocsc()
    p_diag = np.concatenate([np.full(q, rho_tot), np.zeros(n_hinge)])
    lin = np.concatenate([
        lin_theta.ravel() - rho_tot * ref_flat,
        np.concatenate(hinge_cost) if hinge_cost else np.zeros(0),
    ])
    const += 0.5 * rho_tot * float(ref_flat @ ref_flat)
    return EpigraphQp(
        p_diag=p_diag, lin=lin, A=A,
        lower=np.concatenate(low), upper=np.concatenate(high),
        const=const, n_theta=q, n_hinge=n_hinge, theta_ref_flat=ref_flat, cfg=cfg,
        n_piece_rows=n_piece_rows, n_gauge_rows=n_gauge_rows, n_box_rows=2 * q,
        warm_hinges=np.concatenate(warm) if warm else np.zeros(0),
        mu=float(mu),
    )


class _SchurSolver:
    """Solves (P + sigma I + rho A'A) x = b with the hinge block eliminated."""

    def __init__(self, qp: EpigraphQp, sigma: float):
        q = qp.n_theta
        A_th = qp.A[:, :q]
        A_t = qp.A[:, q:]
        self._gram_hinge = np.asarray(A_t.multiply(A_t).sum(axis=0)).ravel()
        self._gram_cross = (A_th.T @ A_t).toarray() if qp.n_hinge else np.zeros((q, 0))
        self._gram_theta = (A_th.T @ A_th).toarray()
        self._p = qp.p_diag
        self._sigma = sigma
        self._q = q

    def factor(self, rho: float):
        q = self._q
        dt = self._p[q:] + self._sigma + rho * self._gram_hinge
        cross = rho * self._gram_cross
        S = np.diag(self._p[:q] + self._sigma) + rho * self._gram_theta
        if cross.shape[1]:
            S = S - (cross / dt) @ cross.T
        self._dt = dt
        self._cross = cross
        self._cho = scipy.linalg.cho_factor(S, lower=True, check_finite=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        q = self._q
        bt = b[q:]
        w = bt / self._dt
        rhs = b[:q] - (self._cross @ w if w.size else 0.0)
        x_th = scipy.linalg.cho_solve(self._cho, rhs, check_finite=False)
        x_t = (bt - self._cross.T @ x_th) / self._dt if w.size else bt[:0]
        return np.concatenate([x_th, x_t])


def admm_solve(qp: EpigraphQp, tol_primal: float = 1e-6, tol_dual: float = 1e-6,
               max_iter: int = 4000, x0: np.ndarray | None = None,
               rho0: float = 1.0, sigma: float = 1e-6, alpha: float = 1.6) -> SolveReport:
    """Operator-splitting solve of the epigraph QP.

    Deterministic: no randomization anywhere, iteration order fixed.
    """
    A = qp.A
    n = qp.n_vars
    if x0 is None:
        x = np.concatenate([qp.theta_ref_flat, qp.warm_hinges])
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
        if x.shape != (n,):
            raise ValueError("warm start has wrong dimension")
    z = A @ x
    y = np.zeros(qp.n_rows)
    rho = rho0
    solver = _SchurSolver(qp, sigma)
    solver.factor(rho)
    status = "max_iter"
    it = 0
    r_p = r_d = np.inf
    for it in range(1, max_iter + 1):
        b = sigma * x - qp.lin + A.T @ (rho * z - y)
        x_new = solver.solve(b)
        z_tilde = A @ x_new
        x = alpha * x_new + (1.0 - alpha) * x
        z_relax = alpha * z_tilde + (1.0 - alpha) * z
        z = np.clip(z_relax + y / rho, qp.lower, qp.upper)
        y = y + rho * (z_relax - z)
        if not np.all(np.isfinite(x)):
            status = "infeasible_numerics"
            break
        if it % 5 == 0 or it == max_iter:
            Ax = A @ x
            r_p = float(np.max(np.abs(Ax - z))) if qp.n_rows else 0.0
            dual_vec = qp.p_diag * x + qp.lin + A.T @ y
            r_d = float(np.max(np.abs(dual_vec)))
            s_p = max(float(np.max(np.abs(Ax))), float(np.max(np.abs(z))), 1.0)
            s_d = max(float(np.max(np.abs(qp.p_diag * x))), float(np.max(np.abs(qp.lin))),
                      float(np.max(np.abs(A.T @ y))), 1.0)
            if r_p <= tol_primal * s_p and r_d <= tol_dual * s_d:
                status = "optimal"
                break
            if it % _BALANCE_EVERY == 0:
                ratio = math.sqrt((r_p / s_p) / max(r_d / s_d, 1e-16))
                if ratio > _RHO_JUMP or ratio < 1.0 / _RHO_JUMP:
                    rho = min(max(rho * ratio, 1e-6), 1e6)
                    solver.factor(rho)
    obj = float(0.5 * (qp.p_diag * x) @ x + qp.lin @ x + qp.const)
    theta = None
    if qp.cfg is not None:
        cap = qp.cfg.bound if qp.mu is None else min(qp.mu, qp.cfg.bound)
        theta_flat = np.clip(x[: qp.n_theta], -cap, cap)
        theta = Theta.from_flat(qp.cfg, theta_flat)
    return SolveReport(theta=theta, x=x, objective=obj, primal_residual=r_p,
                       dual_residual=r_d, iterations=it, status=status, rho=rho)


def _prox_objective(batch: SurrogateBatch, weights: np.ndarray, eta: float,
                    theta_ref: Theta, theta: Theta) -> float:
    step = theta.weights - theta_ref.weights
    return float(batch.values(theta) @ weights) + 0.5 * eta * float(np.sum(step * step))


def _subgradient_descent(batch: SurrogateBatch, weights: np.ndarray, eta: float,
                         mu: float, tol: float) -> tuple[Theta, float]:
    cfg = batch.cfg
    ref = batch.theta_ref
    ref_flat = ref.flatten()
    q = cfg.n_params
    flat = ref_flat.copy()
    best_flat = flat.copy()
    best_val = _prox_objective(batch, weights, eta, ref, ref)
    radius = 2.0 * mu * math.sqrt(q)
    max_iter = min(2000, max(300, 20 * q))
    since_best = 0
    for k in range(max_iter):
        theta = Theta.from_flat(cfg, flat)
        val, grad = batch.mean_value_and_subgrad(theta, weights)
        grad = grad + eta * (flat - ref_flat)
        val = val + 0.5 * eta * float(np.sum((flat - ref_flat) ** 2))
        if val < best_val - tol * (1.0 + abs(best_val)):
            best_val, best_flat = val, flat.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best > 50:
                break
        gn = float(np.linalg.norm(grad))
        if gn <= 1e-14:
            break
        if eta > 0:
            step = 2.0 / (eta * (k + 2))
        else:
            step = radius / (gn * math.sqrt(k + 1.0))
        flat = np.clip(flat - step * grad, -mu, mu)
    return Theta.from_flat(cfg, best_flat), best_val


def solve_prox(surrogates, theta_ref: Theta | None = None, eta: float = 0.0,
               mu: float | None = None, tol: float = 1e-6,
               x0: np.ndarray | None = None) -> tuple[Theta, float]:
    """Minimize weighted surrogates + (eta/2)||theta - ref||^2 over the box.

    Returns (theta_plus, value) where the value is the true surrogate
    objective at theta_plus, never the solver's internal estimate, and never
    exceeds the objective at the reference point.
    """
    batch, weights = _as_batch(surrogates)
    if theta_ref is None:
        theta_ref = batch.theta_ref
    cfg = batch.cfg
    if mu is None:
        mu = cfg.bound
    ref_val = _prox_objective(batch, weights, eta, theta_ref, theta_ref)
    if batch.has_epigraph:
        qp = build_epigraph_qp((batch, weights), theta_ref, eta, mu)
        report = admm_solve(qp, tol_primal=tol, tol_dual=tol, x0=x0)
        cand = report.theta
        cand_val = _prox_objective(batch, weights, eta, theta_ref, cand)
    else:
        cand, cand_val = _subgradient_descent(batch, weights, eta, mu, tol)
    if cand_val > ref_val:
        return theta_ref, ref_val
    return cand, cand_val
