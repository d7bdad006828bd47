import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astain import stain as S


def angle(u, v):
    c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def random_stain_matrix(rng):
    h = np.array(S.REFERENCE_HEMATOXYLIN) + rng.normal(0, 0.08, 3)
    e = np.array(S.REFERENCE_EOSIN) + rng.normal(0, 0.08, 3)
    a = np.abs(np.column_stack([h, e]))
    return a / np.linalg.norm(a, axis=0)


def composed_image(rng, a, size=128):
    conc = rng.uniform(0, 2, size=(size, size, 2))
    return S.compose_image(conc, a)


def test_od_round_trip_and_clamp():
    img = np.array([[[255, 128, 0]]], np.uint8)
    od = S.rgb_to_od(img)
    assert od[0, 0, 0] == 0.0
    assert od[0, 0, 2] == pytest.approx(np.log(255.0))
    np.testing.assert_array_equal(S.od_to_rgb(od), [[[255, 128, 1]]])


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_closed_form_eigh_matches_lapack(seed):
    r = np.random.default_rng(seed)
    m = r.normal(size=(3, 3))
    m = m @ m.T
    vals, vecs = S.eigh_symmetric_3x3(m)
    ref = np.linalg.eigvalsh(m)[::-1]
    np.testing.assert_allclose(vals, ref, atol=1e-9 * max(1, abs(ref).max()))
    np.testing.assert_allclose(m @ vecs, vecs * vals, atol=1e-8 * max(1, abs(ref).max()))
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-9)


def test_eigh_near_repeated_eigenvalues():
    q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))
    m = q @ np.diag([2.0, 1.0 + 1e-9, 1.0]) @ q.T
    vals, vecs = S.eigh_symmetric_3x3(m)
    np.testing.assert_allclose(m @ vecs, vecs * vals, atol=1e-8)


def test_eigh_scalar_matrix():
    vals, vecs = S.eigh_symmetric_3x3(3 * np.eye(3))
    np.testing.assert_allclose(vals, 3.0)
    np.testing.assert_allclose(vecs, np.eye(3))


def test_recovers_known_stains():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = random_stain_matrix(rng)
        est = S.estimate_stain_matrix(composed_image(rng, a))
        ref = S.StainModel(a).A
        assert angle(est.A[:, 0], ref[:, 0]) < 2.0
        assert angle(est.A[:, 1], ref[:, 1]) < 2.0


def test_hematoxylin_column_first():
    a = np.column_stack([S.REFERENCE_EOSIN, S.REFERENCE_HEMATOXYLIN])
    m = S.StainModel(a)
    assert m.A[2, 0] > m.A[2, 1]


def test_background_only_is_rejected():
    with pytest.raises(S.UnderTissueError):
        S.estimate_stain_matrix(np.full((64, 64, 3), 250, np.uint8))


def test_single_stain_is_degenerate():
    c = np.random.default_rng(2).uniform(0.2, 2, (64, 64))
    od = c[..., None] * S.StainModel().A[:, 0]
    # float intensities keep the optical-density field exactly rank one
    with pytest.raises(S.DegenerateStainError):
        S.estimate_stain_matrix(255.0 * np.exp(-od))


def test_dependent_columns_rejected():
    a = np.column_stack([S.REFERENCE_HEMATOXYLIN, S.REFERENCE_HEMATOXYLIN])
    with pytest.raises(S.DegenerateStainError):
        S.compute_concentrations(np.ones((2, 3)), a)


def test_concentrations_invert_composition():
    a = S.StainModel().A
    c = np.random.default_rng(3).uniform(0, 2, (50, 2))
    np.testing.assert_allclose(S.compute_concentrations(c @ a.T, a), c, atol=1e-12)


def test_normalize_idempotent_within_three_levels():
    rng = np.random.default_rng(4)
    img = composed_image(rng, random_stain_matrix(rng), 96)
    once = S.normalize_image(img)
    twice = S.normalize_image(once)
    assert np.abs(once.astype(int) - twice.astype(int)).max() <= 3


def test_normalize_maps_to_reference_stains():
    rng = np.random.default_rng(5)
    img = composed_image(rng, random_stain_matrix(rng), 96)
    est = S.estimate_stain_matrix(S.normalize_image(img))
    ref = S.StainModel().A
    assert angle(est.A[:, 0], ref[:, 0]) < 2.0 and angle(est.A[:, 1], ref[:, 1]) < 2.0


def test_stain_model_dict_round_trip():
    m = S.StainModel()
    m2 = S.StainModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(m.A, m2.A)
    np.testing.assert_array_equal(m.concentration_scale, m2.concentration_scale)


def test_stain_model_rejects_negative_entries():
    with pytest.raises(ValueError):
        S.StainModel(np.array([[1, -1], [0, 1], [0, 0]], float))


# ---------------------------------------------------------------- color augmentation

def test_color_transform_by_hand():
    img = np.array([[[100, 200, 250]]], np.uint8)
    out = S.apply_color_transform(img, np.array([1.1, 0.9, 1.1]), np.array([-5.0, 2.4, 10.0]))
    np.testing.assert_array_equal(out, [[[105, 182, 255]]])
    assert out.dtype == np.uint8


def test_identity_transform():
    img = np.random.default_rng(6).integers(0, 256, (8, 8, 3)).astype(np.uint8)
    np.testing.assert_array_equal(S.apply_color_transform(img, 1.0, 0.0), img)


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_color_augment_draws_in_range(seed):
    cfg = S.ColorAugmentConfig()
    a, b = cfg.draw(np.random.default_rng(seed), 16)
    assert np.all((a >= 0.9) & (a <= 1.1)) and np.all((b >= -10) & (b <= 10))


def test_color_augment_bounded_change():
    img = np.random.default_rng(7).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    out = S.color_augment(img, seed=3)
    diff = np.abs(out.astype(int) - img.astype(int))
    assert diff.max() <= np.ceil(0.1 * 255 + 10)


def test_color_augment_reproducible():
    img = np.random.default_rng(8).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    np.testing.assert_array_equal(S.color_augment(img, seed=11), S.color_augment(img, seed=11))


def test_color_config_validation():
    with pytest.raises(ValueError):
        S.ColorAugmentConfig(1.2, 1.1)
