import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedktl.etf import (CONTRASTIVE, ArcFaceParams, arcface_loss, cosine_logits, predict,
                        synthesize_etf)
from fedktl.numeric import Tensor, fd_gradcheck, precision


def _check_geometry(etf, C):
    V = etf.V
    np.testing.assert_allclose(np.linalg.norm(V, axis=0), 1.0, atol=1e-6)
    gram = V.T @ V
    off = gram[~np.eye(C, dtype=bool)]
    np.testing.assert_allclose(off, -1.0 / (C - 1), atol=1e-6)


def test_two_classes_antipodal():
    etf = synthesize_etf(2, 2, seed=0)
    assert etf.V[:, 0] @ etf.V[:, 1] == pytest.approx(-1.0, abs=1e-12)


def test_three_classes_in_plane():
    etf = synthesize_etf(3, 2, seed=0)
    _check_geometry(etf, 3)


def test_gram_matches_closed_form():
    C = 10
    etf = synthesize_etf(C, 10, seed=7)
    closed = (C / (C - 1)) * (np.eye(C) - np.ones((C, C)) / C)
    np.testing.assert_allclose(etf.V.T @ etf.V, closed, atol=1e-6)


@pytest.mark.parametrize("C", [2, 3, 10, 100])
@pytest.mark.parametrize("mult", ["C-1", "C", "2C"])
def test_geometry_grid(C, mult):
    K = {"C-1": max(C - 1, 1), "C": C, "2C": 2 * C}[mult]
    etf = synthesize_etf(C, K, seed=1)
    assert etf.V.shape == (K, C)
    _check_geometry(etf, C)


def test_rotation_orthonormal_when_it_fits():
    etf = synthesize_etf(5, 8, seed=3)
    np.testing.assert_allclose(etf.U.T @ etf.U, np.eye(5), atol=1e-10)


def test_etf_rejects_small_K():
    with pytest.raises(ValueError):
        synthesize_etf(10, 8, seed=0)


def test_etf_seeded():
    a = synthesize_etf(6, 6, seed=4)
    b = synthesize_etf(6, 6, seed=4)
    np.testing.assert_array_equal(a.V, b.V)
    assert not np.array_equal(a.V, synthesize_etf(6, 6, seed=5).V)


def test_cosine_logits_at_vertices():
    etf = synthesize_etf(4, 4, seed=2)
    for c in range(4):
        logits = cosine_logits(etf.V[:, c], etf).data
        assert logits[c] == pytest.approx(1.0, abs=1e-6)
        others = np.delete(logits, c)
        np.testing.assert_allclose(others, -1 / 3, atol=1e-6)
        assert cosine_logits(-etf.V[:, c], etf).data[c] == pytest.approx(-1.0, abs=1e-6)


def test_cosine_logits_sum_of_vertices():
    with precision(64):
        etf = synthesize_etf(3, 3, seed=0)
        f = etf.V[:, 0] + etf.V[:, 1]
        expected = np.array([f @ etf.V[:, c] / np.linalg.norm(f) for c in range(3)])
        np.testing.assert_allclose(cosine_logits(f, etf).data, expected, atol=1e-12)


def test_cosine_logits_zero_feature():
    etf = synthesize_etf(3, 3, seed=0)
    with pytest.raises(ValueError):
        cosine_logits(np.zeros(3), etf)


def test_uniform_softmax_gives_log_C(f64):
    C = 5
    etf = synthesize_etf(C, C + 1, seed=0)
    # a direction orthogonal to every ETF column: all cosines are zero
    null = np.linalg.svd(etf.V.T)[2][-1]
    loss = arcface_loss(null[None, :], [2], etf, CONTRASTIVE)
    assert loss.item() == pytest.approx(math.log(C), rel=1e-12)


def test_margin_loss_on_vertex_is_tiny(f64):
    etf = synthesize_etf(2, 2, seed=0)
    loss = arcface_loss(etf.V[:, 1][None, :], [1], etf, ArcFaceParams(64, 0.5)).item()
    # closed form -log(sigmoid(64*cos(0.5) + 64)) is about exp(-120)
    expected = math.log1p(math.exp(-64 * math.cos(0.5) - 64))
    assert expected < 1e-30
    assert 0.0 <= loss < 1e-30


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("params", [ArcFaceParams(), CONTRASTIVE, ArcFaceParams(8, 0.3)])
def test_arcface_gradcheck(f64, seed, params):
    rng = np.random.default_rng(seed)
    etf = synthesize_etf(6, 6, seed)
    raw = rng.standard_normal((5, 6))
    # hardest labels keep s=64 away from saturation, where gradients vanish
    labels = np.argmin(cosine_logits(raw, etf).data, axis=1)
    feats = Tensor(raw, requires_grad=True, name="feats")
    assert fd_gradcheck({"feats": feats}, lambda: arcface_loss(feats, labels, etf, params), 1e-6) < 1e-4


def test_arcface_label_range():
    etf = synthesize_etf(3, 3, seed=0)
    with pytest.raises(ValueError):
        arcface_loss(np.ones((1, 3)), [3], etf)


def test_arcface_params_validate():
    with pytest.raises(ValueError):
        ArcFaceParams(s=0.0)
    with pytest.raises(ValueError):
        ArcFaceParams(m=2.0)


@given(scale=st.floats(min_value=1e-2, max_value=1e2), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_arcface_scale_invariant(scale, seed):
    with precision(64):
        rng = np.random.default_rng(seed)
        etf = synthesize_etf(4, 4, 0)
        f = rng.standard_normal((3, 4))
        y = rng.integers(0, 4, 3)
        a = arcface_loss(f, y, etf).item()
        b = arcface_loss(f * scale, y, etf).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_loss_decreases_as_true_cosine_grows(f64):
    etf = synthesize_etf(4, 4, 0)
    v, u = etf.V[:, 0], etf.V[:, 1]
    losses = [arcface_loss((t * v + (1 - t) * u)[None, :], [0], etf, ArcFaceParams(4, 0.0)).item()
              for t in np.linspace(0.05, 0.95, 10)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_prediction_ignores_scale_and_margin(seed):
    rng = np.random.default_rng(seed)
    etf = synthesize_etf(5, 5, 1)
    f = rng.standard_normal((6, 5))
    pred = predict(f, etf)
    np.testing.assert_array_equal(pred, np.argmax(cosine_logits(f, etf).data, axis=1))
