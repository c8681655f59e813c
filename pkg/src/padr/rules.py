"""Piecewise-affine rule evaluation and the per-sample linearization machinery.

Each output coordinate of the rule is a difference of two max-affine
functions of the features.  Training linearizes the subtracted part (and,
for lower bounds, the convex part) at a reference parameter: an index
mapping picks one near-active piece per sample and output, which yields a
per-sample convex upper model and a concave lower model of the rule, both
piecewise affine in the parameters.

Blocks: piece ``r`` of output ``i`` occupies the weight row
``i * k_total + r``; a piece value is the dot product of that row with the
augmented feature vector ``(x, 1)``.  All evaluations below reduce to one
``(n, n_blocks)`` matrix of such dot products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, HypothesisConfig, RngHandle, Theta

_CONVEX_TAG = 0
_CONCAVE_TAG = 1


def augment(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.hstack([X, np.ones((X.shape[0], 1))])


def block_values(theta: Theta, Xt: np.ndarray) -> np.ndarray:
    """All piece values: (n, n_outputs, k_total)."""
    cfg = theta.cfg
    wall = theta.weights.reshape(cfg.n_outputs * cfg.k_total, cfg.n_features + 1)
    return (Xt @ wall.T).reshape(Xt.shape[0], cfg.n_outputs, cfg.k_total)


def decisions(theta: Theta, X: np.ndarray) -> np.ndarray:
    """Rule decisions for a feature matrix; shape (n, n_outputs)."""
    cfg = theta.cfg
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != cfg.n_features:
        raise ValueError(f"feature dim {X.shape[1]} != configured {cfg.n_features}")
    vals = block_values(theta, augment(X))
    out = vals[:, :, : cfg.k_convex].max(axis=2)
    if cfg.k_concave > 0:
        out = out - vals[:, :, cfg.k_convex :].max(axis=2)
    return out


def evaluate(theta: Theta, x) -> np.ndarray:
    """Single-point convenience wrapper around decisions()."""
    return decisions(theta, np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


@dataclass(frozen=True)
class ActiveSets:
    """Near-maximal piece indicators at a reference parameter.

    Masks mark pieces whose value is within ``epsilon`` of the part's max;
    the argmax is always marked.  ``ids`` are row indices into the dataset
    the sets were computed from.
    """

    cfg: HypothesisConfig
    ref: Theta
    ids: np.ndarray
    epsilon: float
    convex_mask: np.ndarray    # (u, d, k_convex) bool
    concave_mask: np.ndarray   # (u, d, k_concave) bool
    convex_vals: np.ndarray    # (u, d, k_convex)
    concave_vals: np.ndarray   # (u, d, k_concave)

    @property
    def convex_arg(self) -> np.ndarray:
        return self.convex_vals.argmax(axis=2)

    @property
    def concave_arg(self) -> np.ndarray:
        if self.cfg.k_concave == 0:
            return np.zeros(self.convex_vals.shape[:2], dtype=np.int64)
        return self.concave_vals.argmax(axis=2)

    def mapping_count(self) -> float:
        """Number of distinct index mappings over these samples (may overflow to inf)."""
        counts = self.convex_mask.sum(axis=2).astype(np.float64)
        if self.cfg.k_concave > 0:
            counts = counts * self.concave_mask.sum(axis=2)
        with np.errstate(over="ignore"):
            return float(np.prod(counts))


@dataclass(frozen=True)
class IndexMapping:
    """One chosen near-active piece per sample and output, per part.

    ``convex_choice`` feeds the lower model (which convex piece is kept
    affine); ``concave_choice`` feeds the upper model (which concave piece is
    subtracted).  ``ref`` is the parameter the choice was made at.
    """

    ids: np.ndarray
    convex_choice: np.ndarray   # (u, d) int
    concave_choice: np.ndarray  # (u, d) int; unused when k_concave == 0
    ref: Theta


def active_sets(theta_ref: Theta, data: Dataset, epsilon: float, sample_ids=None) -> ActiveSets:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    cfg = theta_ref.cfg
    if sample_ids is None:
        ids = np.arange(data.n)
        X = data.features
    else:
        ids = np.asarray(sample_ids, dtype=np.int64)
        X = data.features[ids]
    vals = block_values(theta_ref, augment(X))
    cv = vals[:, :, : cfg.k_convex]
    cc = vals[:, :, cfg.k_convex :]
    cmask = cv >= cv.max(axis=2, keepdims=True) - epsilon
    if cfg.k_concave > 0:
        ccmask = cc >= cc.max(axis=2, keepdims=True) - epsilon
    else:
        ccmask = np.zeros(cc.shape, dtype=bool)
    return ActiveSets(cfg, theta_ref, ids, float(epsilon), cmask, ccmask, cv, cc)


def argmax_mapping(sets: ActiveSets) -> IndexMapping:
    """Deterministic touching mapping: lowest-index argmax per entry."""
    return IndexMapping(sets.ids, sets.convex_arg, sets.concave_arg, sets.ref)


def _choose(mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the ceil(u*count)-th active piece per row; mask (n, k), u (n,)
    counts = mask.sum(axis=1)
    k = np.floor(u * counts).astype(np.int64) + 1
    c = mask.cumsum(axis=1)
    return np.argmax(c >= k[:, None], axis=1)


def draw_index_mapping(sets: ActiveSets, rng: RngHandle) -> IndexMapping:
    """Uniform independent choice per entry; keyed by sample id.

    The draw for a sample depends only on (rng, sample id, output), so a
    minibatch draw coincides with the restriction of a full-dataset draw
    under the same handle.
    """
    cfg = sets.cfg
    u_count = sets.ids.shape[0]
    conv = np.zeros((u_count, cfg.n_outputs), dtype=np.int64)
    conc = np.zeros((u_count, cfg.n_outputs), dtype=np.int64)
    for i in range(cfg.n_outputs):
        u = rng.keyed_units(sets.ids, i, _CONVEX_TAG)
        conv[:, i] = _choose(sets.convex_mask[:, i, :], u)
        if cfg.k_concave > 0:
            u = rng.keyed_units(sets.ids, i, _CONCAVE_TAG)
            conc[:, i] = _choose(sets.concave_mask[:, i, :], u)
    return IndexMapping(sets.ids, conv, conc, sets.ref)


def mapping_at(theta_ref: Theta, data: Dataset, epsilon: float, rng: RngHandle | None,
               sample_ids=None) -> IndexMapping:
    """Active sets + mapping draw in one step (argmax mapping when rng is None)."""
    sets = active_sets(theta_ref, data, epsilon, sample_ids)
    if rng is None:
        return argmax_mapping(sets)
    return draw_index_mapping(sets, rng)


class InnerSurrogates:
    """Per-sample affine-in-parameters upper and lower models of the rule.

    For sample u and output i, with mapping choices (i1, i2):

        upper(theta) = max_k piece(i, k) - piece(i, k_convex + i2)   (k < k_convex)
        lower(theta) = piece(i, i1)      - max_k piece(i, k_convex + k)

    Upper is convex piecewise affine in theta, lower concave; both equal the
    rule at the reference when the mapping is an argmax mapping.
    """

    def __init__(self, theta_ref: Theta, data: Dataset, mapping: IndexMapping,
                 sample_ids=None):
        cfg = theta_ref.cfg
        if mapping.ref is not theta_ref and not (
            mapping.ref.cfg == cfg and np.array_equal(mapping.ref.weights, theta_ref.weights)
        ):
            raise ValueError("index mapping was drawn at a different reference parameter")
        if sample_ids is None:
            ids = np.asarray(mapping.ids, dtype=np.int64)
            rows = np.arange(ids.shape[0])
        else:
            ids = np.asarray(sample_ids, dtype=np.int64)
            pos = {int(s): j for j, s in enumerate(mapping.ids)}
            try:
                rows = np.asarray([pos[int(s)] for s in ids], dtype=np.int64)
            except KeyError as exc:
                raise ValueError(f"sample id {exc} not covered by the mapping") from None
        self.cfg = cfg
        self.theta_ref = theta_ref
        self.ids = ids
        self.Xt = augment(data.features[ids])
        self.outcomes = data.outcomes[ids]
        self.convex_choice = mapping.convex_choice[rows]
        self.concave_choice = mapping.concave_choice[rows]
        self.n = ids.shape[0]
        self._rows = np.arange(self.n)[:, None]
        self._out = np.arange(cfg.n_outputs)

    # -- block index helpers -------------------------------------------------
    def convex_blocks(self) -> np.ndarray:
        """(d, k_convex) block ids of the convex-part pieces."""
        cfg = self.cfg
        return self._out[:, None] * cfg.k_total + np.arange(cfg.k_convex)[None, :]

    def concave_blocks(self) -> np.ndarray:
        cfg = self.cfg
        return self._out[:, None] * cfg.k_total + cfg.k_convex + np.arange(cfg.k_concave)[None, :]

    def picked_concave_block(self) -> np.ndarray:
        """(u, d) block id of the subtracted piece in the upper model."""
        cfg = self.cfg
        return self._out[None, :] * cfg.k_total + cfg.k_convex + self.concave_choice

    def picked_convex_block(self) -> np.ndarray:
        cfg = self.cfg
        return self._out[None, :] * cfg.k_total + self.convex_choice

    # -- evaluation ----------------------------------------------------------
    def block_dots(self, theta: Theta) -> np.ndarray:
        """(u, n_blocks) piece values at theta."""
        return block_values(theta, self.Xt).reshape(self.n, -1)

    def _shaped(self, dots: np.ndarray) -> np.ndarray:
        return dots.reshape(self.n, self.cfg.n_outputs, self.cfg.k_total)

    def upper_values(self, theta: Theta, dots: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        if dots is None:
            dots = self.block_dots(theta)
        g = self._shaped(dots)[:, :, : cfg.k_convex].max(axis=2)
        if cfg.k_concave == 0:
            return g
        return g - dots[self._rows, self.picked_concave_block()]

    def lower_values(self, theta: Theta, dots: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        if dots is None:
            dots = self.block_dots(theta)
        gpick = dots[self._rows, self.picked_convex_block()]
        if cfg.k_concave == 0:
            return gpick
        return gpick - self._shaped(dots)[:, :, cfg.k_convex :].max(axis=2)

    def rule_values(self, theta: Theta, dots: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        if dots is None:
            dots = self.block_dots(theta)
        shaped = self._shaped(dots)
        f = shaped[:, :, : cfg.k_convex].max(axis=2)
        if cfg.k_concave > 0:
            f = f - shaped[:, :, cfg.k_convex :].max(axis=2)
        return f

    # argmax piece per output of the upper/lower models at theta (subgradient picks)
    def upper_arg(self, theta: Theta, dots=None) -> np.ndarray:
        if dots is None:
            dots = self.block_dots(theta)
        return self._shaped(dots)[:, :, : self.cfg.k_convex].argmax(axis=2)

    def lower_max_arg(self, theta: Theta, dots=None):
        if self.cfg.k_concave == 0:
            return None
        if dots is None:
            dots = self.block_dots(theta)
        return self._shaped(dots)[:, :, self.cfg.k_convex :].argmax(axis=2)


def build_inner_surrogates(theta_ref: Theta, data: Dataset, mapping: IndexMapping,
                           sample_ids=None) -> InnerSurrogates:
    return InnerSurrogates(theta_ref, data, mapping, sample_ids)


def inner_lipschitz(data: Dataset, k_concave: int = 1) -> float:
    """Uniform Lipschitz modulus of the rule in its parameters over the data.

    Per sample the parameter gradient stacks the augmented features once
    per model block: sqrt(2)*||x_tilde|| with a subtracted block, plain
    ||x_tilde|| without one.
    """
    sq = float(np.max(np.sum(data.features ** 2, axis=1))) if data.n else 0.0
    factor = float(np.sqrt(2.0)) if k_concave > 0 else 1.0
    return factor * float(np.sqrt(sq + 1.0))
