"""Synthetic newsvendor benchmark suite.

Feature-dependent demand generators with known means, oracle decisions
computed from the generative model (closed form where available, sample
average approximation otherwise), baseline methods, and the per-cell
report table.  Every cell (method x setting x seed) is deterministic
given the experiment seed.
"""

from __future__ import annotations

import dataclasses
import itertools
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import costs, penalty, rules, smm, subproblem
from .core import Dataset, HypothesisConfig, RngHandle, Theta, derive_seed

DEMAND_KINDS = (
    "maxaffine_basic",
    "maxaffine_sparse",
    "maxaffine_dense",
    "sine_seasonal",
    "two_product_linear",
)

COST_KINDS = ("newsvendor", "newsvendor_capacity", "two_product_capacity")

METHOD_LABELS = {
    "simopt": "SIMOPT",
    "padr": "PADR",
    "ldr": "LDR",
    "po_l": "PO-L",
    "po_pa": "PO-PA",
    "gldr2": "GLDR-2",
    "gldr3": "GLDR-3",
}

_LABEL_KEYS = {v.lower(): k for k, v in METHOD_LABELS.items()}


# ---------------------------------------------------------------------------
# demand models

@dataclass(frozen=True)
class DemandModel:
    """Conditional demand mean plus additive standard normal noise.

    The max-affine family keeps its mean above 5 everywhere on [-1,1]^p,
    so order quantities stay in a sane range for every setting.
    """

    kind: str
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in DEMAND_KINDS:
            raise ValueError(f"unknown demand kind {self.kind!r}; use one of {DEMAND_KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def n_outputs(self) -> int:
        return 2 if self.kind == "two_product_linear" else 1

    @property
    def min_features(self) -> int:
        return 2

    def mean(self, X: np.ndarray) -> np.ndarray:
        """Demand mean per row; (n, p) -> (n, n_outputs)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] < self.min_features:
            raise ValueError(f"{self.kind} needs at least {self.min_features} features")
        if self.kind in ("maxaffine_basic", "maxaffine_sparse", "maxaffine_dense"):
            if self.kind == "maxaffine_dense":
                half = X.shape[1] // 2
                u = X[:, :half].mean(axis=1)
                v = X[:, half:].mean(axis=1)
            else:
                u, v = X[:, 0], X[:, 1]
            m = np.maximum.reduce([5.0 * u - 10.0 * v, -10.0 * u + 5.0 * v, 15.0 * u])
            return (self.scale * m + 10.0)[:, None]
        if self.kind == "sine_seasonal":
            m = 4.0 * np.sin(np.pi * X[:, 0]) + np.maximum(16.0 * X[:, 1], -20.0 * X[:, 1])
            return (m + 10.0)[:, None]
        return np.stack(
            [15.0 * X[:, 0] - 5.0 * X[:, 1] + 30.0, 15.0 * X[:, 0] + 5.0 * X[:, 1] + 30.0],
            axis=1,
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "DemandModel":
        d = dict(d)
        unknown = set(d) - {"kind", "scale"}
        if unknown:
            raise ValueError(f"unknown demand-model key {sorted(unknown)[0]!r}")
        return cls(kind=str(d["kind"]), scale=float(d.get("scale", 1.0)))


def gen_dataset(model: DemandModel, n: int, p: int, rng) -> Dataset:
    """Features uniform on [-1,1]^p, outcomes = mean + standard normal noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if p < model.min_features:
        raise ValueError(f"{model.kind} needs p >= {model.min_features}, got {p}")
    gen = rng.generator() if isinstance(rng, RngHandle) else rng
    X = gen.uniform(-1.0, 1.0, size=(n, p))
    noise = gen.standard_normal((n, model.n_outputs))
    return Dataset(X, model.mean(X) + noise)


# ---------------------------------------------------------------------------
# cost setups

@dataclass(frozen=True)
class CostSetup:
    """Objective family plus any capacity coupling between the outputs.

    kinds: plain per-output newsvendor; newsvendor with the concave
    capacity charge added to the objective; two products under a shared
    capacity budget (linear total, or routed through the capacity curve).
    """

    kind: str
    backlog: tuple
    holding: tuple
    cap_rhs: float | None = None
    cap_kind: str = "linear"

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; use one of {COST_KINDS}")
        backlog = tuple(float(v) for v in np.atleast_1d(self.backlog))
        holding = tuple(float(v) for v in np.atleast_1d(self.holding))
        object.__setattr__(self, "backlog", backlog)
        object.__setattr__(self, "holding", holding)
        if len(backlog) != len(holding):
            raise ValueError("backlog/holding length mismatch")
        if any(v <= 0 for v in backlog + holding):
            raise ValueError("newsvendor costs must be positive")
        if self.kind == "newsvendor_capacity" and len(backlog) != 1:
            raise ValueError("the capacity-cost objective is single-output")
        if self.kind == "two_product_capacity":
            if len(backlog) != 2:
                raise ValueError("two-product setup needs exactly two outputs")
            if self.cap_rhs is None or not self.cap_rhs > 0:
                raise ValueError("capacity budget must be > 0")
            if self.cap_kind not in ("linear", "nonconvex"):
                raise ValueError(f"unknown capacity kind {self.cap_kind!r}")
            object.__setattr__(self, "cap_rhs", float(self.cap_rhs))
        elif self.cap_rhs is not None:
            raise ValueError(f"{self.kind} takes no capacity budget")

    @property
    def n_outputs(self) -> int:
        return len(self.backlog)

    def cost_spec(self) -> costs.PaCost:
        base = costs.newsvendor(self.backlog, self.holding)
        if self.kind == "newsvendor_capacity":
            return costs.capacity_addon(base)
        return base

    def constraint(self):
        if self.kind != "two_product_capacity":
            return None
        if self.cap_kind == "linear":
            return penalty.linear_constraint(np.ones(2), self.cap_rhs)
        pieces = tuple((s, c) for s, _, c in costs.CAPACITY_PIECES)
        return penalty.ConcaveSumConstraint((pieces, pieces), self.cap_rhs)

    def constraint_spec(self, gamma: float = 0.0, lam: float = 0.0):
        con = self.constraint()
        if con is None:
            return None
        return penalty.ConstraintSpec((con,), gamma=gamma, lam=lam)

    def training_cost(self, gamma: float = 0.0, lam: float = 0.0):
        cons = self.constraint_spec(gamma, lam)
        if cons is None:
            return self.cost_spec()
        return penalty.build_penalized(self.cost_spec(), cons)

    def feasible_mask(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        cons = self.constraint_spec()
        if cons is None:
            return np.ones(Z.shape[0], dtype=bool)
        return cons.feasible_mask(Z)

    def feasibility(self, Z: np.ndarray) -> float:
        return float(np.mean(self.feasible_mask(Z)))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "backlog": list(self.backlog), "holding": list(self.holding)}
        if self.kind == "two_product_capacity":
            d["cap_rhs"] = self.cap_rhs
            d["cap_kind"] = self.cap_kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostSetup":
        d = dict(d)
        allowed = {"kind", "backlog", "holding", "cap_rhs", "cap_kind"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown cost-setup key {sorted(unknown)[0]!r}")
        return cls(
            kind=str(d["kind"]),
            backlog=tuple(d["backlog"]),
            holding=tuple(d["holding"]),
            cap_rhs=d.get("cap_rhs"),
            cap_kind=str(d.get("cap_kind", "linear")),
        )


def feasible_cost(setup: CostSetup, Z: np.ndarray, Y: np.ndarray) -> float:
    """Mean objective cost over the rows whose decision is feasible."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    mask = setup.feasible_mask(Z)
    if not mask.any():
        return float("nan")
    return float(np.mean(costs.cost_values(setup.cost_spec(), Z[mask], np.atleast_2d(Y)[mask])))


# ---------------------------------------------------------------------------
# oracle decisions

def capacity_value(z) -> np.ndarray:
    """The concave capacity charge: min over its affine pieces."""
    z = np.asarray(z, dtype=np.float64)
    P = np.asarray(costs.CAPACITY_PIECES, dtype=np.float64)
    return np.min(P[:, 0] * z[..., None] + P[:, 2], axis=-1)


def _capacity_breakpoints() -> list:
    P = np.asarray(costs.CAPACITY_PIECES, dtype=np.float64)
    pts = []
    for i in range(P.shape[0]):
        for j in range(i + 1, P.shape[0]):
            ds = P[i, 0] - P[j, 0]
            if ds == 0:
                continue
            z = (P[j, 2] - P[i, 2]) / ds
            if abs(capacity_value(z) - (P[i, 0] * z + P[i, 2])) < 1e-9:
                pts.append(float(z))
    return sorted(pts)


def _gaussian_newsvendor_cost(u, cb: float, ch: float) -> np.ndarray:
    """E[cb*(N-u)+ + ch*(u-N)+] for N ~ N(0,1)."""
    u = np.asarray(u, dtype=np.float64)
    pdf = stats.norm.pdf(u)
    cdf = stats.norm.cdf(u)
    return cb * (pdf - u * (1.0 - cdf)) + ch * (pdf + u * cdf)


class _EmpiricalNewsvendor:
    """Scenario-average newsvendor cost as an exact function of z - mean.

    Sorted scenarios plus prefix sums make evaluation at arbitrary offsets
    exact, so searches over the offset are limited only by their candidate
    sets, not by interpolation error.
    """

    def __init__(self, cb: float, ch: float, samples: np.ndarray):
        self.cb = float(cb)
        self.ch = float(ch)
        self.sorted = np.sort(np.asarray(samples, dtype=np.float64))
        self.prefix = np.concatenate([[0.0], np.cumsum(self.sorted)])
        self.n = self.sorted.shape[0]

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        shape = u.shape
        flat = u.ravel()
        idx = np.searchsorted(self.sorted, flat, side="right")
        below = flat * idx - self.prefix[idx]
        above = (self.prefix[-1] - self.prefix[idx]) - flat * (self.n - idx)
        return ((self.ch * below + self.cb * above) / self.n).reshape(shape)

    def quantile_offset(self) -> float:
        tau = self.cb / (self.cb + self.ch)
        return float(np.quantile(self.sorted, tau, method="inverted_cdf"))


def _capacity_objective_decisions(mu: np.ndarray, cb: float, ch: float) -> np.ndarray:
    """Minimize the Gaussian newsvendor cost plus the capacity charge in z.

    Candidates: a coarse grid of offsets around the mean, the charge's
    breakpoints, and each affine segment's stationary point; a fine pass
    around the incumbent settles grid ties.
    """
    n = mu.shape[0]
    U = np.linspace(-8.0, 8.0, 321)
    cols = [mu[:, None] + U[None, :]]
    cols += [np.full((n, 1), b) for b in _capacity_breakpoints()]
    for s in np.asarray(costs.CAPACITY_PIECES)[:, 0]:
        ratio = (cb - s) / (cb + ch)
        if 0.0 < ratio < 1.0:
            cols.append((mu + stats.norm.ppf(ratio))[:, None])

    def best(cands):
        H = _gaussian_newsvendor_cost(cands - mu[:, None], cb, ch) + capacity_value(cands)
        return np.take_along_axis(cands, H.argmin(axis=1)[:, None], axis=1)[:, 0]

    z0 = best(np.concatenate(cols, axis=1))
    fine = z0[:, None] + np.linspace(-0.06, 0.06, 61)[None, :]
    return best(np.concatenate([fine, z0[:, None]], axis=1))[:, None]


def _linear_boundary(h1, h2, mu: np.ndarray, rhs: float) -> np.ndarray:
    # on z1 + z2 = rhs the scenario-average cost is convex piecewise linear
    # in z1, so its minimum sits on a kink of either product
    cands = np.concatenate(
        [mu[:, :1] + h1.sorted[None, :], rhs - mu[:, 1:2] - h2.sorted[None, :]], axis=1
    )
    vals = h1(cands - mu[:, :1]) + h2(rhs - cands - mu[:, 1:2])
    z1 = np.take_along_axis(cands, vals.argmin(axis=1)[:, None], axis=1)[:, 0]
    return np.stack([z1, rhs - z1], axis=1)


def _capacity_region_row(h1, h2, mu_row: np.ndarray, rhs: float) -> np.ndarray:
    # grid over order levels relative to the means, keep the cells inside
    # the capacity region, then refine around the incumbent
    offs = np.arange(-14.0, 4.0001, 0.05)
    base = h1(offs)[:, None] + h2(offs)[None, :]

    def best(z1, z2, cost):
        feas = capacity_value(z1)[:, None] + capacity_value(z2)[None, :] <= rhs + 1e-9
        if not feas.any():
            raise ValueError("no feasible point on the search grid")
        masked = np.where(feas, cost, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        return z1[i], z2[j]

    z1c, z2c = best(mu_row[0] + offs, mu_row[1] + offs, base)
    offs2 = np.arange(-0.06, 0.0601, 0.002)
    w1 = z1c + offs2
    w2 = z2c + offs2
    fine = h1(w1 - mu_row[0])[:, None] + h2(w2 - mu_row[1])[None, :]
    z1f, z2f = best(w1, w2, fine)
    return np.array([z1f, z2f])


def _solve_two_product(setup: CostSetup, mu: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Scenario-average optimal orders for each row of means.

    Quantile orders when the capacity budget is slack; otherwise an exact
    kink search on the budget line (linear) or a masked grid search over
    the capacity region (nonconvex).
    """
    h1 = _EmpiricalNewsvendor(setup.backlog[0], setup.holding[0], samples[:, 0])
    h2 = _EmpiricalNewsvendor(setup.backlog[1], setup.holding[1], samples[:, 1])
    Z = mu + np.array([h1.quantile_offset(), h2.quantile_offset()])
    rhs = setup.cap_rhs
    if setup.cap_kind == "linear":
        bad = Z.sum(axis=1) > rhs
        if bad.any():
            Z[bad] = _linear_boundary(h1, h2, mu[bad], rhs)
        return Z
    bad = capacity_value(Z[:, 0]) + capacity_value(Z[:, 1]) > rhs
    for r in np.flatnonzero(bad):
        Z[r] = _capacity_region_row(h1, h2, mu[r], rhs)
    return Z


def simopt_decisions(model: DemandModel, setup: CostSetup, X: np.ndarray,
                     rng: RngHandle | None = None, n_scenarios: int = 1000) -> np.ndarray:
    """Oracle decisions from the known demand model, one row per feature row."""
    if setup.n_outputs != model.n_outputs:
        raise ValueError(
            f"cost setup expects {setup.n_outputs} outputs, demand model has {model.n_outputs}"
        )
    mu = model.mean(X)
    if setup.kind == "newsvendor":
        shifts = [stats.norm.ppf(cb / (cb + ch)) for cb, ch in zip(setup.backlog, setup.holding)]
        return mu + np.asarray(shifts)[None, :]
    if setup.kind == "newsvendor_capacity":
        return _capacity_objective_decisions(mu[:, 0], setup.backlog[0], setup.holding[0])
    if rng is None:
        rng = RngHandle(0, "data")
    samples = rng.generator().standard_normal((n_scenarios, 2))
    return _solve_two_product(setup, mu, samples)


def simopt_decision(model: DemandModel, setup: CostSetup, x,
                    rng: RngHandle | None = None, n_scenarios: int = 1000) -> np.ndarray:
    """Single-point convenience wrapper around simopt_decisions()."""
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return simopt_decisions(model, setup, X, rng=rng, n_scenarios=n_scenarios)[0]


def plug_in_decisions(setup: CostSetup, yhat: np.ndarray) -> np.ndarray:
    """Best orders when the demand forecast is taken at face value."""
    yhat = np.atleast_2d(np.asarray(yhat, dtype=np.float64))
    if yhat.shape[1] != setup.n_outputs:
        raise ValueError(f"forecast has {yhat.shape[1]} outputs, setup expects {setup.n_outputs}")
    if setup.kind == "newsvendor":
        return yhat.copy()
    if setup.kind == "newsvendor_capacity":
        y = yhat[:, 0]
        cands = [y[:, None]]
        cands += [np.full((y.shape[0], 1), b) for b in _capacity_breakpoints()]
        cands = np.concatenate(cands, axis=1)
        cb, ch = setup.backlog[0], setup.holding[0]
        cost = (cb * np.maximum(y[:, None] - cands, 0.0)
                + ch * np.maximum(cands - y[:, None], 0.0) + capacity_value(cands))
        return np.take_along_axis(cands, cost.argmin(axis=1)[:, None], axis=1)
    return _solve_two_product(setup, yhat, np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# baselines

def _ols_weights(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    A = rules.augment(X)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    W, _, rank, _ = np.linalg.lstsq(A, Y, rcond=None)
    if rank < A.shape[1]:
        G = A.T @ A + 1e-8 * np.eye(A.shape[1])
        W = np.linalg.solve(G, A.T @ Y)
    return W


def monomial_lift(X: np.ndarray, degree: int) -> np.ndarray:
    """Monomial features of total degree 1..degree, no constant column."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cols = [X]
    for deg in range(2, degree + 1):
        for combo in itertools.combinations_with_replacement(range(X.shape[1]), deg):
            cols.append(np.prod(X[:, combo], axis=1)[:, None])
    return np.hstack(cols)


@dataclass
class LinearForecastRule:
    """Least-squares demand forecast feeding the plug-in order rule."""

    weights: np.ndarray
    setup: CostSetup

    def predict(self, X: np.ndarray) -> np.ndarray:
        return rules.augment(X) @ self.weights

    def decide(self, X: np.ndarray) -> np.ndarray:
        return plug_in_decisions(self.setup, self.predict(X))


@dataclass
class ForecastRule:
    """Trained piecewise-affine demand forecast plus the plug-in order rule."""

    theta: object
    setup: CostSetup

    def predict(self, X: np.ndarray) -> np.ndarray:
        return rules.decisions(self.theta, X)

    def decide(self, X: np.ndarray) -> np.ndarray:
        return plug_in_decisions(self.setup, self.predict(X))


@dataclass
class LiftedRule:
    """Decision rule trained on monomial-lifted features."""

    theta: object
    degree: int

    def decide(self, X: np.ndarray) -> np.ndarray:
        return rules.decisions(self.theta, monomial_lift(X, self.degree))


@dataclass
class RuleFit:
    """Decision rule trained on the task cost, with the selected schedule."""

    theta: object
    cfg: smm.SmmConfig
    gamma: float
    lam: float
    margin_gap: float
    entries: list

    def decide(self, X: np.ndarray) -> np.ndarray:
        return rules.decisions(self.theta, X)


def baseline_po_linear(data: Dataset, setup: CostSetup) -> LinearForecastRule:
    """Least-squares forecast, then order as if the forecast were exact."""
    return LinearForecastRule(_ols_weights(data.features, data.outcomes), setup)


def _alternating_refit_init(data: Dataset, cfg: HypothesisConfig, rng: RngHandle,
                            sweeps: int = 8) -> Theta:
    """Max-affine warm start: nearest-center partition, per-cell least squares,
    then a few assign/refit sweeps.  Squared-loss SMM from a random box init
    tends to settle on a poor piece partition; this lands it in a good basin.
    """
    X, Xt = data.features, rules.augment(data.features)
    n = data.n
    gen = rng.generator()
    w = np.zeros((cfg.n_outputs, cfg.k_total, data.p + 1))
    for i in range(cfg.n_outputs):
        y = data.outcomes[:, i]
        k = cfg.k_total
        centers = X[gen.choice(n, size=min(k, n), replace=False)]
        labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for _ in range(sweeps + 1):
            for j in range(k):
                mask = labels == j
                if np.count_nonzero(mask) >= data.p + 2:
                    w[i, j] = np.linalg.lstsq(Xt[mask], y[mask], rcond=None)[0]
            labels = (Xt @ w[i].T).argmax(axis=1)
    np.clip(w, -cfg.bound, cfg.bound, out=w)
    return Theta(cfg, w)


def baseline_po_pa(data: Dataset, setup: CostSetup, cfg: HypothesisConfig | None = None,
                   smm_cfg: smm.SmmConfig | None = None, starts: int = 3,
                   seed: int = 0) -> ForecastRule:
    """Piecewise-affine regression under squared loss, then plug-in orders."""
    if cfg is None:
        cfg = HypothesisConfig(data.m, 3, 0, data.p, 50.0)
    if smm_cfg is None:
        smm_cfg = smm.SmmConfig(iterations=60, rounds=1, eta=0.2, seed=seed,
                                batch_slope=50, batch_base=50)
    best_theta, best_obj = None, np.inf
    for s in range(starts):
        theta0 = _alternating_refit_init(data, cfg,
                                         RngHandle(derive_seed(seed, 97 + s), "init"))
        problem = smm.Problem(data, cfg, costs.squared_loss(), theta0=theta0)
        theta, _ = smm.run_smm(problem, smm_cfg)
        resid = rules.decisions(theta, data.features) - data.outcomes
        obj = float(np.mean(resid ** 2))
        if obj < best_obj:
            best_theta, best_obj = theta, obj
    return ForecastRule(best_theta, setup)


def baseline_gldr(data: Dataset, setup: CostSetup, degree: int,
                  smm_cfg: smm.SmmConfig | None = None, sweep_budget: int = 0,
                  seed: int = 0, gamma: float = 0.05, lam: float = 100.0) -> LiftedRule:
    """Linear decision rule on monomial-lifted features."""
    lifted = Dataset(monomial_lift(data.features, degree), data.outcomes)
    cfg = HypothesisConfig(data.m, 1, 0, lifted.p, 50.0)
    cost = setup.training_cost(gamma, lam) if setup.constraint() is not None else setup.cost_spec()
    if smm_cfg is None:
        smm_cfg = smm.SmmConfig(seed=seed)
    problem = smm.Problem(lifted, cfg, cost)
    if sweep_budget > 0:
        _, theta, _ = smm.sweep(problem, budget=sweep_budget, base_cfg=smm_cfg,
                                rng=RngHandle(smm_cfg.seed, "sweep"))
    else:
        theta = smm.multi_start(problem, smm_cfg).best
    return LiftedRule(theta, degree)


def _polish_cell(data: Dataset, cfg: HypothesisConfig, cost, theta: Theta,
                 eta: float = 0.1, iterations: int = 10, seed: int = 0) -> Theta:
    """Exact-weight proximal descent from a minibatch-trained point.

    Large penalty weights leave boundary samples a solver tolerance away
    from their margins after stochastic training; a few full-data proximal
    steps settle them.  Steps are kept only when the true objective drops,
    so the loop can only improve the penalized training cost.
    """
    weights = np.full(data.n, 1.0 / data.n)
    rng = RngHandle(seed, "index")
    cur = theta
    z = rules.decisions(cur, data.features)
    cur_val = float(np.mean(costs.cost_values(cost, z, data.outcomes)))
    x0 = None
    for it in range(iterations):
        mapping = rules.mapping_at(cur, data, 0.0, rng.child(it))
        inner = rules.build_inner_surrogates(cur, data, mapping)
        batch = costs.build_surrogates(cost, inner, cur, 0.0, rng.child(it))
        qp = subproblem.build_epigraph_qp((batch, weights), cur, eta, cfg.bound)
        report = subproblem.admm_solve(qp, tol_primal=1e-9, tol_dual=1e-9,
                                       max_iter=20_000, x0=x0)
        x0 = report.x
        val = float(batch.true_values(report.theta) @ weights)
        if val >= cur_val - 1e-12:
            break
        cur, cur_val = report.theta, val
    return cur


def train_decision_rule(data: Dataset, setup: CostSetup, k_convex: int, k_concave: int,
                        sweep_budget: int = 20, seed: int = 0, rounds: int = 10,
                        iterations: int = 10, theta_bound: float = 50.0,
                        gamma_grid: tuple = (0.05, 0.2),
                        lambda_grid: tuple = (10.0, 100.0, 1000.0),
                        validation_split: float = 0.2,
                        min_feasibility: float = 0.95) -> RuleFit:
    """Train the rule on the task cost with a swept schedule.

    Constrained setups also sweep the penalty margin and weight; cells
    whose margin violations vanish on the training data are preferred and
    ranked by raw cost, the rest by how close they come.
    """
    cfg = HypothesisConfig(setup.n_outputs, k_convex, k_concave, data.p, theta_bound)
    base = smm.SmmConfig(iterations=iterations, rounds=rounds, seed=seed)
    if setup.constraint() is None:
        problem = smm.Problem(data, cfg, setup.cost_spec())
        best_cfg, theta, entries = smm.sweep(
            problem, budget=sweep_budget, base_cfg=base,
            rng=RngHandle(seed, "sweep"), validation_split=validation_split)
        return RuleFit(theta, best_cfg, 0.0, 0.0, 0.0, entries)

    cells = list(itertools.product(gamma_grid, lambda_grid))
    cell_budget = max(3, sweep_budget // len(cells))
    base_cost = setup.cost_spec()
    best = None
    for idx, (gamma, lam) in enumerate(cells):
        cons = setup.constraint_spec(gamma, lam)
        problem = smm.Problem(data, cfg, penalty.build_penalized(base_cost, cons))
        cell_cfg, theta, entries = smm.sweep(
            problem, budget=cell_budget, base_cfg=base,
            rng=RngHandle(derive_seed(seed, 31 + idx), "sweep"),
            validation_split=validation_split, min_feasibility=min_feasibility)
        theta = _polish_cell(data, cfg, problem.cost, theta,
                             seed=derive_seed(seed, 61 + idx))
        Z = rules.decisions(theta, data.features)
        margin_gap = float(np.mean(cons.violation_sum(Z, use_margin=True)))
        raw = float(np.mean(costs.cost_values(base_cost, Z, data.outcomes)))
        clean = margin_gap <= 1e-6
        key = (0 if clean else 1, raw if clean else margin_gap, idx)
        if best is None or key < best[0]:
            best = (key, RuleFit(theta, cell_cfg, gamma, lam, margin_gap, entries))
    return best[1]


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark setting: demand model, cost setup, methods, seeds."""

    setting: str = "custom"
    model: DemandModel = DemandModel("maxaffine_basic")
    setup: CostSetup = CostSetup("newsvendor", (8.0,), (2.0,))
    p: int = 2
    k_convex: int = 3
    k_concave: int = 0
    n_train: int = 1000
    n_test: int = 1000
    methods: tuple = ("simopt", "padr")
    seeds: tuple = (0,)
    sweep_budget: int = 20
    rounds: int = 10
    iterations: int = 10
    theta_bound: float = 50.0
    n_scenarios: int = 1000
    gamma_grid: tuple = (0.05, 0.2)
    lambda_grid: tuple = (10.0, 100.0, 1000.0)
    validation_split: float = 0.2

    def __post_init__(self):
        methods = tuple(_canonical_method(m) for m in self.methods)
        if not methods:
            raise ValueError("method list is empty")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seed list is empty")
        object.__setattr__(self, "gamma_grid", tuple(float(g) for g in self.gamma_grid))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.p < self.model.min_features:
            raise ValueError(f"{self.model.kind} needs p >= {self.model.min_features}")
        if self.setup.n_outputs != self.model.n_outputs:
            raise ValueError("cost setup and demand model disagree on the output count")
        if min(self.n_train, self.n_test) < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if min(self.k_convex, self.sweep_budget, self.rounds, self.iterations) < 1:
            raise ValueError("k_convex, sweep_budget, rounds, iterations must be >= 1")
        if self.k_concave < 0:
            raise ValueError("k_concave must be >= 0")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["setup"] = self.setup.to_dict()
        for k in ("methods", "seeds", "gamma_grid", "lambda_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown benchmark key {sorted(unknown)[0]!r}")
        if isinstance(d.get("model"), dict):
            d["model"] = DemandModel.from_dict(d["model"])
        if isinstance(d.get("setup"), dict):
            d["setup"] = CostSetup.from_dict(d["setup"])
        for k in ("methods", "seeds", "gamma_grid", "lambda_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _canonical_method(name: str) -> str:
    key = str(name).lower()
    key = _LABEL_KEYS.get(key, key)
    if key not in METHOD_LABELS:
        raise ValueError(f"unknown method {name!r}; use one of {sorted(METHOD_LABELS)}")
    return key


PRESETS = {
    "nv-basic": ExperimentConfig(
        setting="nv-basic",
        methods=("simopt", "padr", "ldr", "po_l", "po_pa", "gldr2", "gldr3"),
    ),
    "nv-sparse-p50": ExperimentConfig(
        setting="nv-sparse-p50",
        model=DemandModel("maxaffine_sparse"),
        p=50,
        methods=("simopt", "padr", "ldr", "po_l"),
    ),
    "nv-sine": ExperimentConfig(
        setting="nv-sine",
        model=DemandModel("sine_seasonal"),
        setup=CostSetup("newsvendor", (5.0,), (5.0,)),
        k_convex=5,
        k_concave=5,
        methods=("simopt", "padr", "ldr", "po_l"),
    ),
    "nv-capacity": ExperimentConfig(
        setting="nv-capacity",
        model=DemandModel("two_product_linear"),
        setup=CostSetup("two_product_capacity", (8.0, 2.0), (2.0, 8.0), cap_rhs=60.0),
        k_convex=2,
        k_concave=2,
        methods=("simopt", "padr", "po_l"),
    ),
    "nv-ncvx-obj": ExperimentConfig(
        setting="nv-ncvx-obj",
        model=DemandModel("sine_seasonal"),
        setup=CostSetup("newsvendor_capacity", (5.0,), (5.0,)),
        k_convex=5,
        k_concave=5,
        methods=("simopt", "padr", "ldr", "po_l"),
    ),
    "nv-ncvx-constr": ExperimentConfig(
        setting="nv-ncvx-constr",
        model=DemandModel("two_product_linear"),
        setup=CostSetup("two_product_capacity", (7.0, 3.0), (7.0, 3.0),
                        cap_rhs=50.0, cap_kind="nonconvex"),
        k_convex=2,
        k_concave=2,
        methods=("simopt", "padr", "po_l"),
    ),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; use one of {sorted(PRESETS)}")
    return PRESETS[name]


# ---------------------------------------------------------------------------
# benchmark runner

REPORT_COLUMNS = ("method", "setting", "n", "p", "seed",
                  "test_cost", "gap", "feasibility", "train_seconds")


@dataclass(frozen=True)
class BenchRow:
    method: str
    setting: str
    n: int
    p: int
    seed: int
    test_cost: float
    gap: float
    feasibility: float
    train_seconds: float


@dataclass
class BenchReport:
    config: ExperimentConfig
    rows: list
    failures: list

    def csv_text(self, timing: bool = True) -> str:
        return report_csv(self.rows, timing=timing)


def report_csv(rows, timing: bool = True) -> str:
    """Fixed-schema report; wall times are the one nondeterministic field,
    so they are zeroed unless timing output is requested."""
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        secs = f"{r.train_seconds:.3f}" if timing else "0.000"
        lines.append(f"{r.method},{r.setting},{r.n},{r.p},{r.seed},"
                     f"{r.test_cost!r},{r.gap!r},{r.feasibility!r},{secs}")
    return "\n".join(lines) + "\n"


def _fit_method(method: str, cfg: ExperimentConfig, data: Dataset, seed: int):
    if method == "padr":
        return train_decision_rule(
            data, cfg.setup, cfg.k_convex, cfg.k_concave, sweep_budget=cfg.sweep_budget,
            seed=seed, rounds=cfg.rounds, iterations=cfg.iterations,
            theta_bound=cfg.theta_bound, gamma_grid=cfg.gamma_grid,
            lambda_grid=cfg.lambda_grid, validation_split=cfg.validation_split)
    if method == "ldr":
        return train_decision_rule(
            data, cfg.setup, 1, 0, sweep_budget=cfg.sweep_budget,
            seed=seed, rounds=cfg.rounds, iterations=cfg.iterations,
            theta_bound=cfg.theta_bound, gamma_grid=cfg.gamma_grid,
            lambda_grid=cfg.lambda_grid, validation_split=cfg.validation_split)
    if method == "po_l":
        return baseline_po_linear(data, cfg.setup)
    if method == "po_pa":
        return baseline_po_pa(data, cfg.setup, seed=seed)
    if method in ("gldr2", "gldr3"):
        degree = int(method[-1])
        smm_cfg = smm.SmmConfig(iterations=cfg.iterations, rounds=cfg.rounds, seed=seed)
        return baseline_gldr(data, cfg.setup, degree, smm_cfg=smm_cfg,
                             sweep_budget=cfg.sweep_budget, seed=seed,
                             gamma=cfg.gamma_grid[0], lam=cfg.lambda_grid[-1])
    raise ValueError(f"unknown method {method!r}")


def run_benchmark(cfg: ExperimentConfig, threads: int = 1) -> BenchReport:
    """Train and score every requested method on every seed.

    The oracle is always computed (the gap column needs it) but only
    reported when requested.  Failed cells keep their row with NaN
    metrics and land in the failure list.
    """
    spec = cfg.setup.cost_spec()
    per_seed = []
    for seed in cfg.seeds:
        drng = RngHandle(seed, "data")
        train = gen_dataset(cfg.model, cfg.n_train, cfg.p, drng.child(0))
        test = gen_dataset(cfg.model, cfg.n_test, cfg.p, drng.child(1))
        t0 = time.perf_counter()
        z_opt = simopt_decisions(cfg.model, cfg.setup, test.features,
                                 rng=drng.child(2), n_scenarios=cfg.n_scenarios)
        opt_seconds = time.perf_counter() - t0
        opt_cost = float(np.mean(costs.cost_values(spec, z_opt, test.outcomes)))
        per_seed.append((seed, train, test, z_opt, opt_cost, opt_seconds))

    def run_cell(job):
        seed, train, test, z_opt, opt_cost, opt_seconds, method = job
        label = METHOD_LABELS[method]
        if method == "simopt":
            return BenchRow(label, cfg.setting, cfg.n_train, cfg.p, seed,
                            opt_cost, 0.0, cfg.setup.feasibility(z_opt), opt_seconds), None
        t0 = time.perf_counter()
        try:
            fit = _fit_method(method, cfg, train, seed)
            Z = fit.decide(test.features)
        except Exception as exc:
            nan = float("nan")
            row = BenchRow(label, cfg.setting, cfg.n_train, cfg.p, seed,
                           nan, nan, nan, time.perf_counter() - t0)
            return row, f"{label} seed {seed}: {exc}"
        seconds = time.perf_counter() - t0
        test_cost = float(np.mean(costs.cost_values(spec, Z, test.outcomes)))
        row = BenchRow(label, cfg.setting, cfg.n_train, cfg.p, seed,
                       test_cost, test_cost - opt_cost, cfg.setup.feasibility(Z), seconds)
        return row, None

    jobs = [entry + (method,) for entry in per_seed for method in cfg.methods]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_cell, jobs))
    else:
        outcomes = [run_cell(j) for j in jobs]

    rows = [row for row, _ in outcomes]
    failures = [msg for _, msg in outcomes if msg is not None]
    return BenchReport(cfg, rows, failures)
