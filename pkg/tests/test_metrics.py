import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from lmcyclegan import metrics
from lmcyclegan.geometry import encode_heatmaps
from lmcyclegan.metrics import (COV_EPS, FEATURE_DIM, FeatureSet, extract_features, frechet_distance,
                                landmark_error, normalize_intensity, projection_matrix)
from lmcyclegan.nets import ModelBundle
from lmcyclegan.tensor import Tensor


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(size=32, ngf=4, ndf=8, ndf_local=4, n_res=1, seed=0)


def _exact_moments(n, mu, sd, seed):
    z = np.random.default_rng(seed).standard_normal(n)
    z = (z - z.mean()) / z.std(ddof=1)
    return mu + sd * z


def _oracle(a, b):
    ca = np.cov(a, rowvar=False) + COV_EPS * np.eye(a.shape[1])
    cb = np.cov(b, rowvar=False) + COV_EPS * np.eye(a.shape[1])
    covmean = scipy.linalg.sqrtm(ca @ cb).real
    mu = a.mean(0) - b.mean(0)
    return mu @ mu + np.trace(ca + cb - 2 * covmean)


def test_self_distance_is_zero(rng):
    a = rng.standard_normal((200, 16))
    assert frechet_distance(a, a) < 1e-6


def test_one_dimensional_exact_moments():
    a = _exact_moments(500, 0.0, 1.0, 1)
    b = _exact_moments(500, 1.0, 2.0, 2)
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-6)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_matches_scipy_sqrtm(seed, d):
    r = np.random.default_rng(seed)
    a = r.standard_normal((60, d)) @ r.standard_normal((d, d))
    b = r.standard_normal((50, d)) * r.uniform(0.5, 2, d) + r.standard_normal(d)
    assert frechet_distance(a, b) == pytest.approx(_oracle(a, b), rel=1e-6, abs=1e-8)


@given(st.integers(0, 2 ** 31 - 1))
def test_symmetric_and_non_negative(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((30, 5)), r.standard_normal((12, 5)) * 3
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-9)


def test_rank_deficient_sets_stay_finite(rng):
    a, b = rng.standard_normal((5, 64)), rng.standard_normal((7, 64))
    assert np.isfinite(frechet_distance(a, b))


def test_input_errors(rng):
    with pytest.raises(ValueError):
        frechet_distance(rng.standard_normal((1, 3)), rng.standard_normal((5, 3)))
    with pytest.raises(ValueError):
        frechet_distance(rng.standard_normal((5, 3)), rng.standard_normal((5, 4)))
    with pytest.raises(ValueError):
        FeatureSet(np.array([[np.nan, 1.0]]))


def test_projection_is_orthonormal():
    p = projection_matrix()
    assert p.shape == (1024, FEATURE_DIM)
    assert np.allclose(p.T @ p, np.eye(FEATURE_DIM), atol=1e-12)
    assert np.array_equal(p, projection_matrix())


def _faces(n, seed, s=32):
    r = np.random.default_rng(seed)
    return r.uniform(-1, 1, (n, 3, s, s)).astype(np.float32)


def test_features_shape_and_determinism(bundle, tiny_data):
    from lmcyclegan.data import load_dataset
    imgs = np.stack([s.image for s in load_dataset(tiny_data, "Y", 32)[:10]])
    f1 = extract_features(imgs, bundle)
    f2 = extract_features(imgs, bundle, batch=3)
    assert f1.features.shape == (10, FEATURE_DIM)
    assert np.allclose(f1.features, f2.features, rtol=1e-5, atol=1e-6)
    assert np.array_equal(f1.features, extract_features(imgs, bundle).features)


def test_noise_monotonicity(bundle, tiny_data):
    from lmcyclegan.data import load_dataset
    imgs = np.stack([s.image for s in load_dataset(tiny_data, "Y", 32)])
    ref = extract_features(imgs, bundle)
    r = np.random.default_rng(0)
    noise = r.standard_normal(imgs.shape).astype(np.float32)
    d = [frechet_distance(ref, extract_features(np.clip(imgs + a * noise, -1, 1), bundle)) for a in (0.1, 0.3, 0.9)]
    assert d[0] <= d[1] <= d[2]
    assert d[2] > 0


def test_noise_differs_from_faces(bundle, tiny_data):
    from lmcyclegan.data import load_dataset
    imgs = np.stack([s.image for s in load_dataset(tiny_data, "Y", 32)])
    ref = extract_features(imgs, bundle)
    assert frechet_distance(ref, extract_features(_faces(len(imgs), 1), bundle)) > frechet_distance(ref, ref)


# ---------------------------------------------------------------- landmark error

LMS = np.array([[[8, 10], [22, 10], [15, 16], [10, 24], [21, 24]],
                [[9, 11], [23, 11], [16, 17], [11, 25], [22, 25]]], dtype=float)


def _oracle_regressor(monkeypatch, truth):
    """Regressor stand-in that reads back the true landmarks of each image id
    (stored in the top-left pixel)."""
    def fake(bundle, domain, x, keep=()):
        ids = np.rint((x.data[:, 0, 0, 0] + 1) * 10).astype(int)
        return Tensor(np.stack([encode_heatmaps(truth[i], 32) for i in ids]))
    monkeypatch.setattr(metrics, "regressor_forward", fake)


def _tagged(n):
    imgs = np.zeros((n, 3, 32, 32), np.float32)
    imgs[:, 0, 0, 0] = np.arange(n) / 10 - 1
    return imgs


def test_landmark_error_zero_for_perfect_regressor(monkeypatch):
    _oracle_regressor(monkeypatch, LMS)
    assert landmark_error(_tagged(2), LMS, None, "Y") == 0.0
    assert landmark_error(_tagged(2), LMS[::-1], None, "Y") == pytest.approx(np.sqrt(2))


def test_landmark_error_grows_with_permuted_points(monkeypatch):
    _oracle_regressor(monkeypatch, LMS)
    assert landmark_error(_tagged(2), LMS[:, [1, 0, 2, 3, 4]], None, "Y") > 0


def test_landmark_error_affine_invariant_after_renormalise(bundle, rng):
    imgs = rng.uniform(-0.5, 0.3, (3, 3, 32, 32)).astype(np.float32)
    lm = np.repeat(LMS[:1], 3, axis=0)
    a = landmark_error(imgs, lm, bundle, "X", renormalize=True)
    b = landmark_error(0.5 * imgs + 0.2, lm, bundle, "X", renormalize=True)
    assert a == b
    assert np.allclose(normalize_intensity(imgs), normalize_intensity(0.5 * imgs + 0.2), atol=1e-6)


def test_landmark_error_input_checks(bundle):
    with pytest.raises(ValueError):
        landmark_error(np.zeros((0, 3, 32, 32)), np.zeros((0, 5, 2)), bundle, "X")
    with pytest.raises(ValueError):
        landmark_error(np.zeros((2, 3, 32, 32)), LMS[:1], bundle, "X")
