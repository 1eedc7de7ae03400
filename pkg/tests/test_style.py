import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridcf.idm import ParamBounds
from hybridcf.style import (SIGNS, DegenerateInputError, DiffScaling, StyleMapping, aggressiveness_index,
                            differential_sequences, fit_mapping, fit_pca, fit_style_map, index_terms,
                            load_mapping, population_scaling, save_mapping, style_from_index)

BOUNDS = ParamBounds()


def unit_scaling():
    return DiffScaling(np.zeros(5), np.ones(5), np.zeros(5), np.ones(5))


def drifting(seed, n=40):
    rng = np.random.default_rng(seed)
    base = BOUNDS.lb + rng.uniform(0.2, 0.8, 5) * BOUNDS.width
    return base * (1 + 0.05 * np.cumsum(rng.normal(0, 0.2, (n, 5)), axis=0))


# ----------------------------------------------------------------------------
# differential sequences

def test_constant_series_has_no_increments():
    for pos, neg in differential_sequences(np.full((10, 5), 3.0)):
        assert len(pos) == 0 and len(neg) == 0


def test_up_down_series():
    (pos, neg), = differential_sequences(np.array([1.0, 2.0, 1.0]))
    np.testing.assert_array_equal(pos, [1.0])
    np.testing.assert_array_equal(neg, [-1.0])


def test_increasing_series():
    (pos, neg), = differential_sequences(np.arange(7.0) ** 2)
    assert len(pos) == 6 and len(neg) == 0


def test_scaled_sequences_lie_in_unit_interval():
    pop = [drifting(s) for s in range(6)]
    scaling = population_scaling(pop)
    for series in pop:
        for pos, neg in differential_sequences(series, scaling):
            assert np.all((pos >= 0) & (pos <= 1)) and np.all((neg >= 0) & (neg <= 1))


def test_too_short_series():
    with pytest.raises(ValueError):
        differential_sequences(np.ones((1, 5)))


# ----------------------------------------------------------------------------
# index

def test_constant_parameters_use_only_level_statistics():
    theta = BOUNDS.lb + 0.3 * BOUNDS.width
    series = np.tile(theta, (20, 1))
    norm = BOUNDS.normalize(theta)
    assert aggressiveness_index(series, unit_scaling()) == pytest.approx(float(SIGNS @ (3 * norm)))


@pytest.mark.parametrize("i", range(5))
def test_uniform_shift_follows_sign_vector(i):
    base = drifting(11)
    pop = [base, drifting(12), drifting(13)]
    scaling = population_scaling(pop)
    shifted = base.copy()
    shifted[:, i] += 0.05 * BOUNDS.width[i]
    delta = aggressiveness_index(shifted, scaling) - aggressiveness_index(base, scaling)
    assert np.sign(delta) == SIGNS[i]


def test_index_terms_shape_and_finiteness():
    pop = [drifting(s) for s in range(4)]
    scaling = population_scaling(pop)
    t = index_terms(pop[0], scaling)
    assert t.shape == (5,) and np.all(np.isfinite(t))
    raw = index_terms(pop[0], scaling, normalize=False)
    assert not np.allclose(raw, t)


# ----------------------------------------------------------------------------
# PCA

def test_points_on_a_line_reconstruct_exactly():
    u, d = np.arange(5.0), np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    styles = u + np.linspace(-2, 2, 9)[:, None] * d
    pca = fit_pca(styles)
    np.testing.assert_allclose(pca.reconstruct(pca.reduce(styles)), styles, atol=1e-12)
    assert pca.explained_ratio == pytest.approx(1.0)
    assert np.linalg.norm(pca.W) == pytest.approx(1.0)


def test_mirrored_pair():
    u, d = np.ones(5), np.array([0.0, 3.0, 0.0, 4.0, 0.0])
    pca = fit_pca(np.array([u + d, u - d, u]))
    np.testing.assert_allclose(pca.reduce(np.array([u + d, u - d])), [5.0, -5.0], atol=1e-12)
    assert pca.W[np.flatnonzero(np.abs(pca.W) > 1e-12)[0]] > 0


def test_isotropic_cloud_share():
    X = np.random.default_rng(0).standard_normal((1000, 5))
    assert fit_pca(X).explained_ratio == pytest.approx(0.2, abs=0.05)


def test_identical_styles_are_degenerate():
    with pytest.raises(DegenerateInputError):
        fit_pca(np.ones((4, 5)))


styles_strategy = arrays(np.float64, (8, 5), elements=st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(styles_strategy, arrays(np.float64, 5, elements=st.floats(-50, 50)))
def test_translation_changes_only_the_mean(X, shift):
    try:
        a = fit_pca(X)
    except DegenerateInputError:
        return
    b = fit_pca(X + shift)
    np.testing.assert_allclose(b.u, a.u + shift, atol=1e-9)
    ra, rb = a.reduce(X), b.reduce(X + shift)
    # the leading direction is only defined up to sign when eigenvalues tie
    if not np.allclose(np.abs(a.W @ b.W), 1.0, atol=1e-6):
        return
    np.testing.assert_allclose(np.abs(ra), np.abs(rb), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(styles_strategy)
def test_projection_never_moves_away_from_mean(X):
    try:
        pca = fit_pca(X)
    except DegenerateInputError:
        return
    rec = pca.reconstruct(pca.reduce(X))
    assert np.all(np.linalg.norm(rec - pca.u, axis=1) <= np.linalg.norm(X - pca.u, axis=1) + 1e-9)


# ----------------------------------------------------------------------------
# index -> style map

def test_collinear_fit():
    H = np.array([0.5, 1.0, 2.0, 3.5])
    slope, intercept, corr = fit_style_map(H, -2.0 * H + 1.0)
    assert (slope, intercept) == pytest.approx((-2.0, 1.0))
    assert corr == pytest.approx(-1.0)


def test_constant_reduced_values():
    slope, intercept, _ = fit_style_map([1.0, 2.0, 3.0], [0.7, 0.7, 0.7])
    assert slope == 0.0 and intercept == 0.7


def test_map_input_checks():
    with pytest.raises(DegenerateInputError):
        fit_style_map([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        fit_style_map([1.0, 2.0], [0.0, 1.0])


@pytest.fixture
def linear_population():
    rng = np.random.default_rng(0)
    H = rng.uniform(0, 4, 12)
    W = np.array([0.2, -0.4, 0.8, 0.0, 0.4])
    W /= np.linalg.norm(W)
    u = np.array([1.0, 2.0, -1.0, 0.5, 0.0])
    return H, u + np.outer(1.5 * H - 2.0, W)


def test_perfect_fit_rebuilds_training_styles(linear_population):
    H, styles = linear_population
    m = fit_mapping(H, styles)
    np.testing.assert_allclose(style_from_index(H, m), styles, atol=1e-9)
    assert m.diagnostics["reconstruction_rmse"] < 1e-9
    assert abs(m.diagnostics["pearson"]) == pytest.approx(1.0)
    centre = style_from_index(H.mean(), m)
    # reduced coordinates are centred, so the mean index maps back to u
    np.testing.assert_allclose(centre, m.u, atol=1e-9)


def test_unseen_indices_differ_along_the_component(linear_population):
    H, styles = linear_population
    m = fit_mapping(H, styles)
    r0, r5 = style_from_index(0.0, m), style_from_index(5.0, m)
    np.testing.assert_allclose(r5 - r0, 5 * m.slope * m.W, atol=1e-12)
    assert np.linalg.norm(r5 - r0) > 0


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_style_is_affine_in_index(h1, h2):
    m = StyleMapping(np.array([0.6, 0.8, 0, 0, 0]), np.arange(5.0), 0.7, -0.3)
    np.testing.assert_allclose(m.style(h1) - m.style(h2), (h1 - h2) * 0.7 * m.W, atol=1e-9)


def test_mapping_file_round_trip(tmp_path, linear_population):
    H, styles = linear_population
    scaling = population_scaling([drifting(s) for s in range(3)])
    m = fit_mapping(H, styles, scaling)
    save_mapping(m, tmp_path / "map.json")
    back = load_mapping(tmp_path / "map.json")
    np.testing.assert_array_equal(back.W, m.W)
    np.testing.assert_array_equal(back.u, m.u)
    assert (back.slope, back.intercept) == (m.slope, m.intercept)
    np.testing.assert_array_equal(back.scaling.pos_max, scaling.pos_max)
    assert back.diagnostics == m.diagnostics


def test_index_of_true_schedules_tracks_aggressiveness(np_world):
    # the generator's own parameter paths, sampled at the calibration stride
    truth = [g[0].schedule[::25] for g in np_world.train_drivers]
    scaling = population_scaling(truth)
    H = np.array([aggressiveness_index(t, scaling) for t in truth])
    g = np.array([grp[0].aggressiveness for grp in np_world.train_drivers])
    assert np.corrcoef(g, H)[0, 1] > 0.5
