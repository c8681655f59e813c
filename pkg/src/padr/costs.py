"""Outer cost specifications and convex per-sample surrogate builders.

Three cost families are supported, mirroring how the decision cost enters
the training objective:

* ``PaCost`` — separable piecewise-affine scalar cost per output (max of
  affine pieces in the decision), optionally plus a concave piecewise-affine
  add-on (min of affine pieces).  Covers newsvendor and capacity costs.
* ``MonotoneCost`` — a nondecreasing-convex plus nonincreasing-convex
  callback decomposition.  No epigraph export; the first-order solver
  backend is used.
* ``SmoothCost`` — differentiable cost with a Lipschitz gradient; the
  surrogate is the signed-gradient composition with the inner models plus a
  quadratic curvature term.

Every builder produces a :class:`SurrogateBatch`: per sample, an affine base
plus weighted hinge terms ``weight * max(pieces..., [0])`` in the rule
parameters, plus an optional quadratic proximal coefficient.  The same
representation evaluates values, subgradients, and exports the epigraph QP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngHandle, Theta
from .rules import InnerSurrogates, _choose

_OUTER_TAG = 2


# ---------------------------------------------------------------------------
# cost specifications

@dataclass(frozen=True)
class PaCost:
    """Separable piecewise-affine cost.

    ``convex_pieces[i]`` is an array (J_i, 3) of rows (slope_z, slope_y,
    const): output i contributes max_j of ``slope_z*z_i + slope_y*y_i +
    const``.  ``concave_pieces[i]``, if given, adds min_j of the same form.
    """

    convex_pieces: tuple
    concave_pieces: tuple | None = None

    def __post_init__(self):
        conv = tuple(np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in self.convex_pieces)
        if any(a.shape[0] < 1 for a in conv):
            raise ValueError("every output needs at least one convex piece")
        object.__setattr__(self, "convex_pieces", conv)
        if self.concave_pieces is not None:
            cave = tuple(np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in self.concave_pieces)
            if len(cave) != len(conv):
                raise ValueError("concave add-on must cover every output")
            if any(a.shape[0] < 1 for a in cave):
                raise ValueError("empty concave piece list")
            object.__setattr__(self, "concave_pieces", cave)

    @property
    def n_outputs(self) -> int:
        return len(self.convex_pieces)


@dataclass(frozen=True)
class MonotoneCost:
    """Cost split as inc(z, y) + dec(z, y), inc nondecreasing convex in z,
    dec nonincreasing convex in z.  Callbacks are vectorized over rows:
    value (n, d), (n, m) -> (n,); gradient -> (n, d)."""

    inc: object
    dec: object
    inc_grad: object
    dec_grad: object
    n_outputs: int = 1


@dataclass(frozen=True)
class SmoothCost:
    """Differentiable cost with Lipschitz gradient.  Vectorized callbacks:
    value (n, d), (n, m) -> (n,); gradient -> (n, d)."""

    value: object
    grad: object
    grad_lipschitz: float
    n_outputs: int = 1

    def __post_init__(self):
        if not self.grad_lipschitz > 0:
            raise ValueError("grad_lipschitz must be > 0")


def newsvendor(backlog, holding) -> PaCost:
    """max{backlog*(y-z), holding*(z-y)} per output; scalars or per-output sequences."""
    backlog = np.atleast_1d(np.asarray(backlog, dtype=np.float64))
    holding = np.atleast_1d(np.asarray(holding, dtype=np.float64))
    if backlog.shape != holding.shape:
        raise ValueError("backlog/holding length mismatch")
    if np.any(backlog <= 0) or np.any(holding <= 0):
        raise ValueError("newsvendor costs must be positive")
    pieces = tuple(
        np.array([[-cb, cb, 0.0], [ch, -ch, 0.0]]) for cb, ch in zip(backlog, holding)
    )
    return PaCost(pieces)


CAPACITY_PIECES = ((1.0, 0.0, 0.0), (0.6, 0.0, 0.8), (0.4, 0.0, 15.6))


def capacity_addon(cost: PaCost) -> PaCost:
    """Attach the concave capacity cost min{z, 0.6z+0.8, 0.4z+15.6} to every output."""
    cave = tuple(np.asarray(CAPACITY_PIECES, dtype=np.float64) for _ in range(cost.n_outputs))
    return PaCost(cost.convex_pieces, cave)


def squared_loss() -> SmoothCost:
    """Sum of squared errors; gradient Lipschitz constant 2."""

    def value(Z, Y):
        return np.sum((Z - Y) ** 2, axis=1)

    def grad(Z, Y):
        return 2.0 * (Z - Y)

    return SmoothCost(value, grad, grad_lipschitz=2.0)


# ---------------------------------------------------------------------------
# cost evaluation

def cost_values(spec, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-row cost; Z (n, d), Y (n, m) -> (n,)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("row mismatch between decisions and outcomes")
    if isinstance(spec, PaCost):
        if Z.shape[1] != spec.n_outputs:
            raise ValueError(f"cost expects {spec.n_outputs} outputs, got {Z.shape[1]}")
        needs_y = any(np.any(a[:, 1] != 0) for a in spec.convex_pieces)
        if needs_y and Y.shape[1] < spec.n_outputs:
            raise ValueError("cost references y_i beyond outcome dimension")
        total = np.zeros(Z.shape[0])
        for i, pieces in enumerate(spec.convex_pieces):
            yi = Y[:, i] if Y.shape[1] > i else np.zeros(Z.shape[0])
            vals = np.outer(Z[:, i], pieces[:, 0]) + np.outer(yi, pieces[:, 1]) + pieces[None, :, 2]
            total += vals.max(axis=1)
        if spec.concave_pieces is not None:
            for i, pieces in enumerate(spec.concave_pieces):
                yi = Y[:, i] if Y.shape[1] > i else np.zeros(Z.shape[0])
                vals = np.outer(Z[:, i], pieces[:, 0]) + np.outer(yi, pieces[:, 1]) + pieces[None, :, 2]
                total += vals.min(axis=1)
        return total
    if isinstance(spec, MonotoneCost):
        return np.asarray(spec.inc(Z, Y), dtype=np.float64) + np.asarray(spec.dec(Z, Y), dtype=np.float64)
    if isinstance(spec, SmoothCost):
        return np.asarray(spec.value(Z, Y), dtype=np.float64)
    values = getattr(spec, "objective_values", None)
    if values is not None:
        return np.asarray(values(Z, Y), dtype=np.float64)
    raise TypeError(f"unsupported cost spec {type(spec).__name__}")


def cost_eval(spec, z, y) -> float:
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return float(cost_values(spec, z[None, :], y[None, :])[0])


# ---------------------------------------------------------------------------
# hinge representation

@dataclass
class HingeFamily:
    """weight * max(pieces..., 0 if include_zero) per sample.

    A piece value is sum over placements of scale * <Xt[u], theta_block> plus
    an offset; placements share block/scale arrays of shape (u, r).
    """

    weight: np.ndarray                 # (u,)
    include_zero: bool
    placements: list                   # [(blocks (u, r) int64, scale (u, r))]
    offsets: np.ndarray                # (u, r)

    @property
    def n_pieces(self) -> int:
        return self.offsets.shape[1]

    def piece_values(self, dots: np.ndarray) -> np.ndarray:
        rows = np.arange(dots.shape[0])[:, None]
        val = np.zeros_like(self.offsets)
        for blocks, scale in self.placements:
            val += scale * dots[rows, blocks]
        # offsets last: anchored pieces then cancel their reference value in
        # the same floating-point order it was produced, making them vanish
        # at the reference to the bit
        val += self.offsets
        return val

    def values(self, dots: np.ndarray) -> np.ndarray:
        m = self.piece_values(dots).max(axis=1)
        if self.include_zero:
            m = np.maximum(m, 0.0)
        return self.weight * m

    def select(self, rows) -> "HingeFamily":
        return HingeFamily(
            self.weight[rows],
            self.include_zero,
            [(b[rows], s[rows]) for b, s in self.placements],
            self.offsets[rows],
        )


def _full(arr, shape) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(np.asarray(arr, dtype=np.float64), shape))


class SurrogateBatch:
    """Convex majorants of the per-sample cost, linearized at ``theta_ref``.

    value_u(theta) = base_u(theta) + sum_h hinge_h,u(theta)
                     + quad_u * 0.5 * ||theta - theta_ref||^2
    """

    def __init__(self, inner: InnerSurrogates, theta_ref: Theta, families,
                 base_offset=None, base_placements=None, quad=None,
                 callback_spec: MonotoneCost | None = None, true_cost=None):
        u = inner.n
        self.inner = inner
        self.cfg = inner.cfg
        self.theta_ref = theta_ref
        self.families = list(families)
        self.base_offset = np.zeros(u) if base_offset is None else np.asarray(base_offset, dtype=np.float64)
        self.base_placements = list(base_placements or [])
        self.quad = np.zeros(u) if quad is None else _full(quad, (u,))
        self.callback_spec = callback_spec
        self._true_cost = true_cost
        self.lipschitz_inner = None  # set by smooth builder

    @property
    def n(self) -> int:
        return self.inner.n

    @property
    def has_epigraph(self) -> bool:
        return self.callback_spec is None

    def _step_sq(self, theta: Theta) -> float:
        d = theta.weights - self.theta_ref.weights
        return float(np.sum(d * d))

    def values(self, theta: Theta) -> np.ndarray:
        dots = self.inner.block_dots(theta)
        val = self.base_offset.copy()
        rows = np.arange(self.n)
        for blocks, scale in self.base_placements:
            val += scale * dots[rows, blocks]
        if self.callback_spec is not None:
            up = self.inner.upper_values(theta, dots)
            lo = self.inner.lower_values(theta, dots)
            val = val + np.asarray(self.callback_spec.inc(up, self.inner.outcomes), dtype=np.float64)
            val = val + np.asarray(self.callback_spec.dec(lo, self.inner.outcomes), dtype=np.float64)
        for fam in self.families:
            val += fam.values(dots)
        if np.any(self.quad):
            val = val + self.quad * (0.5 * self._step_sq(theta))
        return val

    def true_values(self, theta: Theta) -> np.ndarray:
        """The actual per-sample cost at theta (no surrogation)."""
        z = self.inner.rule_values(theta)
        return cost_values(self._true_cost, z, self.inner.outcomes)

    def mean_value_and_subgrad(self, theta: Theta, weights: np.ndarray):
        """(weighted mean value, weighted mean subgradient) over the batch."""
        cfg = self.cfg
        dots = self.inner.block_dots(theta)
        rows = np.arange(self.n)
        acc = np.zeros((cfg.n_outputs * cfg.k_total, cfg.n_features + 1))
        val = self.base_offset.copy()
        for blocks, scale in self.base_placements:
            val += scale * dots[rows, blocks]
            np.add.at(acc, blocks, (weights * scale)[:, None] * self.inner.Xt)
        if self.callback_spec is not None:
            spec = self.callback_spec
            up = self.inner.upper_values(theta, dots)
            lo = self.inner.lower_values(theta, dots)
            val = val + np.asarray(spec.inc(up, self.inner.outcomes), dtype=np.float64)
            val = val + np.asarray(spec.dec(lo, self.inner.outcomes), dtype=np.float64)
            gi = np.asarray(spec.inc_grad(up, self.inner.outcomes), dtype=np.float64)
            gd = np.asarray(spec.dec_grad(lo, self.inner.outcomes), dtype=np.float64)
            karg = self.inner.upper_arg(theta, dots)
            marg = self.inner.lower_max_arg(theta, dots)
            for i in range(cfg.n_outputs):
                # upper model: active convex piece minus the picked concave piece
                blk = i * cfg.k_total + karg[:, i]
                np.add.at(acc, blk, (weights * gi[:, i])[:, None] * self.inner.Xt)
                if cfg.k_concave > 0:
                    blk = self.inner.picked_concave_block()[:, i]
                    np.add.at(acc, blk, -(weights * gi[:, i])[:, None] * self.inner.Xt)
                # lower model: picked convex piece minus active concave piece
                blk = self.inner.picked_convex_block()[:, i]
                np.add.at(acc, blk, (weights * gd[:, i])[:, None] * self.inner.Xt)
                if cfg.k_concave > 0:
                    blk = i * cfg.k_total + cfg.k_convex + marg[:, i]
                    np.add.at(acc, blk, -(weights * gd[:, i])[:, None] * self.inner.Xt)
        for fam in self.families:
            pv = fam.piece_values(dots)
            rstar = pv.argmax(axis=1)
            top = pv[rows, rstar]
            live = np.ones(self.n, dtype=bool) if not fam.include_zero else top > 0.0
            contrib = np.maximum(top, 0.0) if fam.include_zero else top
            val += fam.weight * contrib
            w = weights * fam.weight * live
            for blocks, scale in fam.placements:
                np.add.at(acc, blocks[rows, rstar], (w * scale[rows, rstar])[:, None] * self.inner.Xt)
        mean_val = float(val @ weights)
        grad = acc.reshape(-1)
        if np.any(self.quad):
            wq = float(self.quad @ weights)
            mean_val += wq * 0.5 * self._step_sq(theta)
            grad = grad + wq * (theta.weights - self.theta_ref.weights).ravel()
        return mean_val, grad

    def select(self, rows) -> "SurrogateBatch":
        rows = np.asarray(rows, dtype=np.int64)
        sub_inner = InnerSurrogates(
            self.theta_ref,
            _DataView(self.inner.Xt[rows, :-1], self.inner.outcomes[rows]),
            _SubMapping(self.inner, rows, self.theta_ref),
        )
        batch = SurrogateBatch(
            sub_inner, self.theta_ref,
            [f.select(rows) for f in self.families],
            self.base_offset[rows],
            [(b[rows], np.asarray(s)[rows] if np.ndim(s) else s) for b, s in self.base_placements],
            self.quad[rows],
            self.callback_spec,
            self._true_cost,
        )
        batch.lipschitz_inner = self.lipschitz_inner
        return batch

    def view(self, i: int) -> "SampleSurrogate":
        return SampleSurrogate(self, int(i))


class _DataView:
    """Minimal Dataset-alike over already-augmented rows (internal)."""

    def __init__(self, features, outcomes):
        self.features = np.asarray(features)
        self.outcomes = np.asarray(outcomes)
        self.n = self.features.shape[0]
        self.p = self.features.shape[1]
        self.m = self.outcomes.shape[1]


def _sub_mapping_ids(n):
    return np.arange(n)


class _SubMapping:
    def __init__(self, inner: InnerSurrogates, rows, ref):
        self.ids = _sub_mapping_ids(rows.shape[0])
        self.convex_choice = inner.convex_choice[rows]
        self.concave_choice = inner.concave_choice[rows]
        self.ref = ref


class SampleSurrogate:
    """Single-sample convex majorant view (evaluation + subgradient)."""

    def __init__(self, batch: SurrogateBatch, i: int):
        self.batch = batch
        self.i = i
        self._one = batch.select([i])
        self.theta_ref = batch.theta_ref
        self.lipschitz_inner = batch.lipschitz_inner

    @property
    def has_epigraph(self) -> bool:
        return self.batch.has_epigraph

    def evaluate(self, theta: Theta) -> float:
        return float(self._one.values(theta)[0])

    def true_value(self, theta: Theta) -> float:
        return float(self._one.true_values(theta)[0])

    def subgradient(self, theta: Theta) -> np.ndarray:
        _, g = self._one.mean_value_and_subgrad(theta, np.ones(1))
        return g


# ---------------------------------------------------------------------------
# surrogate builders

_CROSS_CAP = 512


def compose_linear(inner: InnerSurrogates, coeffs, offsets):
    """Majorant of ``sum_i coeffs[i] * rule_i + offsets`` as a max-affine list.

    Positive coefficients ride the upper model, negative the lower, so the
    result dominates the true linear combination and touches it where the
    inner models do.  Each output with a piece choice multiplies the combo
    axis; returns (placements, piece offsets of shape (u, combos)).
    """
    cfg = inner.cfg
    u = inner.n
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(cfg.n_outputs)
    choice = []   # (blocks (r_i,), scale) entries that multiply the combo axis
    fixed = []    # (blocks (u,), scale) entries common to every combo
    for i in range(cfg.n_outputs):
        w = coeffs[i]
        if w == 0.0:
            continue
        if w > 0:
            choice.append((inner.convex_blocks()[i], w))
            if cfg.k_concave > 0:
                fixed.append((inner.picked_concave_block()[:, i], -w))
        else:
            fixed.append((inner.picked_convex_block()[:, i], w))
            if cfg.k_concave > 0:
                choice.append((inner.concave_blocks()[i], -w))
    r_total = 1
    for blocks, _ in choice:
        r_total *= blocks.shape[0]
    if r_total > _CROSS_CAP:
        raise ValueError(
            f"piece cross product has {r_total} combinations (cap {_CROSS_CAP}); "
            "reduce piece counts or split the constraint"
        )
    placements = []
    stride = r_total
    for blocks, scale in choice:
        r_i = blocks.shape[0]
        stride //= r_i
        pattern = (np.arange(r_total) // stride) % r_i
        placements.append((_full_int(blocks[pattern][None, :], (u, r_total)), _full(scale, (u, r_total))))
    for blocks, scale in fixed:
        placements.append((_full_int(blocks[:, None], (u, r_total)), _full(scale, (u, r_total))))
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim == 1:
        offsets = offsets[:, None]
    return placements, _full(offsets, (u, r_total))


def _full_int(arr, shape) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(np.asarray(arr, dtype=np.int64), shape))


def _is_complementary_pair(pieces: np.ndarray) -> bool:
    # two pieces of opposite slope sign crossing at value zero for every y
    if pieces.shape[0] != 2:
        return False
    s1, s2 = pieces[0, 0], pieces[1, 0]
    if not (s1 * s2 < 0):
        return False
    a = pieces[0, 1:] / (-s1)
    b = pieces[1, 1:] / (-s2)
    return bool(np.all(np.abs(a - b) <= 1e-12 * (1 + np.abs(a) + np.abs(b))))


def _compose_convex_piece(inner, i, slope, offsets, weight, include_zero):
    """Hinge family for weight*max(slope*inner_model_i + offsets [, 0])."""
    coeffs = np.zeros(inner.cfg.n_outputs)
    coeffs[i] = slope
    placements, offs = compose_linear(inner, coeffs, offsets)
    return HingeFamily(_full(weight, (inner.n,)), include_zero, placements, offs)


def _outer_offsets(pieces_row, yi, u):
    return pieces_row[1] * yi + np.full(u, pieces_row[2])


def surrogate_pa_scalar(spec: PaCost, inner: InnerSurrogates, theta_ref: Theta,
                        epsilon: float, rng: RngHandle | None,
                        eps_outer: float | None = None) -> SurrogateBatch:
    """Case-1 composition for separable piecewise-affine costs.

    Nonnegative-slope pieces compose with the upper model, negative with the
    lower.  A complementary piece pair (one increasing, one decreasing,
    joint root) splits into two independent hinge terms; a general max stays
    one hinge over all composed pieces.  Concave add-on pieces are linearized
    at the reference: one near-minimal piece is drawn per sample/output.
    """
    if spec.n_outputs != inner.cfg.n_outputs:
        raise ValueError("cost outputs != rule outputs")
    u = inner.n
    cave_eps = epsilon if eps_outer is None else eps_outer
    families = []
    y = inner.outcomes
    for i, pieces in enumerate(spec.convex_pieces):
        yi = y[:, i] if y.shape[1] > i else np.zeros(u)
        if _is_complementary_pair(pieces):
            for row in pieces:
                families.append(_compose_convex_piece(
                    inner, i, row[0], _outer_offsets(row, yi, u), 1.0, include_zero=True))
        else:
            placements, offsets = [], []
            for row in pieces:
                fam = _compose_convex_piece(
                    inner, i, row[0], _outer_offsets(row, yi, u), 1.0, include_zero=False)
                placements.append(fam.placements)
                offsets.append(fam.offsets)
            families.append(_merge_pieces(placements, offsets, u))
    if spec.concave_pieces is not None:
        fref = inner.rule_values(theta_ref)
        for i, pieces in enumerate(spec.concave_pieces):
            yi = y[:, i] if y.shape[1] > i else np.zeros(u)
            # near-minimal outer pieces at the reference decision
            vals = np.outer(fref[:, i], pieces[:, 0]) + np.outer(yi, pieces[:, 1]) + pieces[None, :, 2]
            mask = vals <= vals.min(axis=1, keepdims=True) + cave_eps
            if rng is None:
                j = vals.argmin(axis=1)
            else:
                j = _choose(mask, rng.keyed_units(inner.ids, i, _OUTER_TAG))
            for jj in np.unique(j):
                rowsel = j == jj
                row = pieces[jj]
                fam = _compose_convex_piece(
                    inner, i, row[0], _outer_offsets(row, yi, u), rowsel.astype(np.float64),
                    include_zero=False)
                families.append(fam)
    batch = SurrogateBatch(inner, theta_ref, _fold_affine(families), true_cost=spec)
    return batch


def _merge_pieces(placement_lists, offset_lists, u):
    """Union of piece lists into one hinge family (weight 1, no zero piece).

    Piece sub-lists may differ in placement count; pad with a repeated
    first placement at zero scale so arrays align.
    """
    width = max(len(pl) for pl in placement_lists)
    blocks_cols, scale_cols, off_cols = [], [], []
    for pl, off in zip(placement_lists, offset_lists):
        r = off.shape[1]
        blks = [b for b, _ in pl] + [pl[0][0]] * (width - len(pl))
        scls = [s for _, s in pl] + [np.zeros((u, r))] * (width - len(pl))
        blocks_cols.append(blks)
        scale_cols.append(scls)
        off_cols.append(off)
    placements = []
    for t in range(width):
        blocks = np.concatenate([bc[t] for bc in blocks_cols], axis=1)
        scale = np.concatenate([sc[t] for sc in scale_cols], axis=1)
        placements.append((blocks, scale))
    offsets = np.concatenate(off_cols, axis=1)
    return HingeFamily(np.ones(u), False, placements, offsets)


def _fold_affine(families):
    """Families are kept as-is; single-piece no-zero hinges are already affine
    and could fold into the base, but keeping them uniform simplifies the QP
    bookkeeping; the builder folds them there instead."""
    return families


def surrogate_monotone(spec: MonotoneCost, inner: InnerSurrogates,
                       theta_ref: Theta) -> SurrogateBatch:
    """Case-2 composition: inc(upper model) + dec(lower model)."""
    _probe_monotone(spec, inner, theta_ref)
    return SurrogateBatch(inner, theta_ref, [], callback_spec=spec, true_cost=spec)


def _probe_monotone(spec: MonotoneCost, inner: InnerSurrogates, theta_ref: Theta):
    """Spot-check the declared monotonicity on reference decisions."""
    z = inner.rule_values(theta_ref)
    y = inner.outcomes
    step = np.ones_like(z)
    inc0, inc1 = np.asarray(spec.inc(z, y)), np.asarray(spec.inc(z + step, y))
    dec0, dec1 = np.asarray(spec.dec(z, y)), np.asarray(spec.dec(z + step, y))
    if np.any(inc1 < inc0 - 1e-9):
        raise ValueError("inc callback is not nondecreasing on probe points")
    if np.any(dec1 > dec0 + 1e-9):
        raise ValueError("dec callback is not nonincreasing on probe points")


def surrogate_smooth(spec: SmoothCost, inner: InnerSurrogates,
                     theta_ref: Theta) -> SurrogateBatch:
    """Case-3 composition for smooth costs.

    Linearizes the cost at the reference decision, routes positive gradient
    coordinates through the upper model and negative ones through the lower
    model, and adds the curvature term 0.5*L_grad*L_inner^2*||theta-ref||^2.
    """
    cfg = inner.cfg
    u = inner.n
    fref = inner.rule_values(theta_ref)
    y = inner.outcomes
    grad = np.asarray(spec.grad(fref, y), dtype=np.float64).reshape(u, cfg.n_outputs)
    val0 = np.asarray(spec.value(fref, y), dtype=np.float64).reshape(u)
    # per sample the rule's parameter gradient stacks x-tilde once per model
    # block, so the modulus gains sqrt(2) only when a block is subtracted
    factor = np.sqrt(2.0) if cfg.k_concave > 0 else 1.0
    lip_inner = factor * float(np.sqrt(np.max(np.sum(inner.Xt[:, :-1] ** 2, axis=1)) + 1.0))
    quad = spec.grad_lipschitz * lip_inner ** 2
    # anchor each model term at the reference decision, so the pieces vanish
    # there exactly and the batch value at the reference is val0 to the bit
    families = []
    for i in range(cfg.n_outputs):
        wpos = np.maximum(grad[:, i], 0.0)
        wneg = np.maximum(-grad[:, i], 0.0)
        if np.any(wpos > 0):
            families.append(_compose_convex_piece(inner, i, 1.0, -fref[:, i], wpos, include_zero=False))
        if np.any(wneg > 0):
            # -w * (lower(theta) - ref) = w * max over negated anchored pieces
            families.append(_compose_convex_piece(inner, i, -1.0, fref[:, i], wneg, include_zero=False))
    batch = SurrogateBatch(inner, theta_ref, families, base_offset=val0,
                           quad=quad, true_cost=spec)
    batch.lipschitz_inner = lip_inner
    return batch


def build_surrogates(spec, inner: InnerSurrogates, theta_ref: Theta, epsilon: float,
                     rng: RngHandle | None, eps_outer: float | None = None) -> SurrogateBatch:
    """Dispatch to the builder matching the cost family."""
    if isinstance(spec, PaCost):
        return surrogate_pa_scalar(spec, inner, theta_ref, epsilon, rng, eps_outer)
    if isinstance(spec, MonotoneCost):
        return surrogate_monotone(spec, inner, theta_ref)
    if isinstance(spec, SmoothCost):
        return surrogate_smooth(spec, inner, theta_ref)
    builder = getattr(spec, "surrogate_batch", None)
    if builder is not None:
        return builder(inner, theta_ref, epsilon, rng, eps_outer)
    raise TypeError(f"no surrogate builder for cost spec {type(spec).__name__}")
