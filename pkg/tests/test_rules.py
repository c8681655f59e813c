import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padr import rules
from padr.core import Dataset, HypothesisConfig, RngHandle, Theta, random_init


def naive_rule(theta: Theta, x: np.ndarray) -> np.ndarray:
    """Scalar reference: per output, max over convex rows minus max over
    concave rows of (w[:p] @ x + w[p])."""
    cfg = theta.cfg
    out = np.zeros(cfg.n_outputs)
    for i in range(cfg.n_outputs):
        vals = [float(w[:-1] @ x + w[-1]) for w in theta.weights[i]]
        top = max(vals[: cfg.k_convex])
        bottom = max(vals[cfg.k_convex:]) if cfg.k_concave else 0.0
        out[i] = top - bottom
    return out


def _random_instance(seed, n=6, d=2, k1=2, k2=1, p=3, bound=4.0):
    cfg = HypothesisConfig(d, k1, k2, p, bound)
    theta = random_init(cfg, RngHandle(seed, "init"))
    X = RngHandle(seed, "data").generator().uniform(-2, 2, size=(n, p))
    return cfg, theta, X


def test_decisions_match_naive_reference():
    cfg, theta, X = _random_instance(0)
    Z = rules.decisions(theta, X)
    for s in range(X.shape[0]):
        np.testing.assert_allclose(Z[s], naive_rule(theta, X[s]), atol=1e-12)


def test_decisions_hand_value():
    # pieces y = max{x, -x} - max{0.5x} at x = 3: 3 - 1.5 = 1.5
    cfg = HypothesisConfig(1, 2, 1, 1, 50.0)
    theta = Theta(cfg, np.array([[[1.0, 0.0], [-1.0, 0.0], [0.5, 0.0]]]))
    assert rules.evaluate(theta, [3.0])[0] == pytest.approx(1.5)
    assert rules.evaluate(theta, [-4.0])[0] == pytest.approx(4.0 + 2.0)


def test_ldr_is_affine():
    cfg = HypothesisConfig(1, 1, 0, 2, 50.0)
    theta = Theta(cfg, np.array([[[2.0, -1.0, 3.0]]]))
    X = np.array([[1.0, 1.0], [0.0, 0.0], [-2.0, 0.5]])
    np.testing.assert_allclose(rules.decisions(theta, X)[:, 0],
                               X @ np.array([2.0, -1.0]) + 3.0)


def test_decisions_feature_mismatch():
    cfg, theta, X = _random_instance(1)
    with pytest.raises(ValueError, match="feature dim"):
        rules.decisions(theta, X[:, :-1])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rule_is_positive_homogeneous_in_scale(seed):
    # doubling every weight doubles the rule value: both blocks are maxima
    # of affine pieces through the same scaling
    cfg, theta, X = _random_instance(seed, n=3)
    doubled = Theta(cfg, 2.0 * theta.weights, validate=False)
    np.testing.assert_allclose(rules.decisions(doubled, X),
                               2.0 * rules.decisions(theta, X), atol=1e-10)


# ---------------------------------------------------------------------------
# active sets and index mappings

def test_active_sets_hand_case():
    # pieces at x=1: values {1, 0.5}; eps=0.4 keeps only the top,
    # eps=0.6 keeps both
    cfg = HypothesisConfig(1, 2, 0, 1, 50.0)
    theta = Theta(cfg, np.array([[[1.0, 0.0], [0.5, 0.0]]]))
    data = Dataset(np.array([[1.0]]), np.array([[0.0]]))
    tight = rules.active_sets(theta, data, 0.4)
    loose = rules.active_sets(theta, data, 0.6)
    np.testing.assert_array_equal(tight.convex_mask[0, 0], [True, False])
    np.testing.assert_array_equal(loose.convex_mask[0, 0], [True, True])
    assert tight.mapping_count() == 1.0
    assert loose.mapping_count() == 2.0


def test_active_sets_argmax_always_active():
    cfg, theta, X = _random_instance(2)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    sets = rules.active_sets(theta, data, 0.0)
    assert np.all(sets.convex_mask.sum(axis=2) >= 1)
    assert np.all(sets.concave_mask.sum(axis=2) >= 1)


def test_argmax_mapping_picks_maximizer():
    cfg, theta, X = _random_instance(3)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    mapping = rules.argmax_mapping(rules.active_sets(theta, data, 0.0))
    vals = rules.block_values(theta, rules.augment(X))
    np.testing.assert_array_equal(mapping.convex_choice,
                                  vals[:, :, : cfg.k_convex].argmax(axis=2))
    np.testing.assert_array_equal(mapping.concave_choice,
                                  vals[:, :, cfg.k_convex:].argmax(axis=2))


def test_mapping_monotone_in_epsilon():
    cfg, theta, X = _random_instance(4, n=12)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    small = rules.active_sets(theta, data, 0.1)
    large = rules.active_sets(theta, data, 5.0)
    assert np.all(large.convex_mask >= small.convex_mask)
    assert np.all(large.concave_mask >= small.concave_mask)


def test_draw_mapping_stays_in_active_set():
    cfg, theta, X = _random_instance(5, n=20)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    sets = rules.active_sets(theta, data, 2.0)
    mapping = rules.draw_index_mapping(sets, RngHandle(9, "index"))
    rows = np.arange(data.n)[:, None]
    cols = np.arange(cfg.n_outputs)[None, :]
    assert np.all(sets.convex_mask[rows, cols, mapping.convex_choice])
    assert np.all(sets.concave_mask[rows, cols, mapping.concave_choice])


def test_draw_mapping_keyed_by_sample_id():
    # the same sample id must draw the same piece regardless of where it
    # sits in the minibatch
    cfg, theta, X = _random_instance(6, n=10)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    rng = RngHandle(1, "index")
    full = rules.draw_index_mapping(rules.active_sets(theta, data, 3.0), rng)
    ids = np.array([7, 2, 5])
    part = rules.draw_index_mapping(
        rules.active_sets(theta, data, 3.0, sample_ids=ids), rng)
    np.testing.assert_array_equal(part.convex_choice, full.convex_choice[ids])
    np.testing.assert_array_equal(part.concave_choice, full.concave_choice[ids])


def test_draw_mapping_deterministic():
    cfg, theta, X = _random_instance(7)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    sets = rules.active_sets(theta, data, 4.0)
    a = rules.draw_index_mapping(sets, RngHandle(2, "index"))
    b = rules.draw_index_mapping(sets, RngHandle(2, "index"))
    np.testing.assert_array_equal(a.convex_choice, b.convex_choice)
    np.testing.assert_array_equal(a.concave_choice, b.concave_choice)


# ---------------------------------------------------------------------------
# inner surrogates

def _inner(seed, epsilon=0.0, **kw):
    cfg, theta, X = _random_instance(seed, **kw)
    data = Dataset(X, np.zeros((X.shape[0], cfg.n_outputs)))
    mapping = rules.mapping_at(theta, data, epsilon,
                               RngHandle(seed, "index") if epsilon > 0 else None)
    return theta, data, rules.build_inner_surrogates(theta, data, mapping)


def test_inner_touches_rule_at_reference():
    theta, data, inner = _inner(8)
    f = rules.decisions(theta, data.features)
    np.testing.assert_allclose(inner.upper_values(theta), f, atol=1e-12)
    np.testing.assert_allclose(inner.lower_values(theta), f, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_inner_brackets_rule_everywhere(seed):
    theta, data, inner = _inner(seed % 50, epsilon=float(seed % 3))
    probe = random_init(theta.cfg, RngHandle(seed + 1, "init"))
    f = rules.decisions(probe, data.features)
    up = inner.upper_values(probe)
    lo = inner.lower_values(probe)
    assert np.all(up >= f - 1e-9)
    assert np.all(lo <= f + 1e-9)


def test_inner_lipschitz_bounds_value_change():
    theta, data, inner = _inner(9)
    lip = rules.inner_lipschitz(data, theta.cfg.k_concave)
    probe = random_init(theta.cfg, RngHandle(99, "init"))
    df = np.abs(rules.decisions(probe, data.features) - rules.decisions(theta, data.features))
    step = float(np.linalg.norm(probe.weights - theta.weights))
    assert np.max(df) <= lip * step + 1e-9
