import numpy as np
import pytest

from fedktl.client import (ClientModel, build_client, combined_loss, evaluate, extract_prototypes,
                           extractor_recipe, knowledge_transfer_loss, local_loss, local_train_epoch,
                           reinit_h_prime)
from fedktl.data import make_synthetic_dataset
from fedktl.etf import ArcFaceParams, cosine_logits, synthesize_etf
from fedktl.generator import ImageVectorPair, build_synthetic_generator, sample_latents, synthesize_images
from fedktl.numeric import Module, fd_gradcheck

PALETTE = ((1, 64), (2, 128), (3, 128), (3, 256))


@pytest.fixture(scope="module")
def etf():
    return synthesize_etf(10, 10, 0)


def _pairs(gen, C, seed=0):
    latents = sample_latents(gen, C, seed, "pairs")
    images = synthesize_images(gen, latents)
    return [ImageVectorPair(c, latents[c], images[c], 0) for c in range(C)]


def test_architecture_index_wraps(etf):
    palette = [(1, 64 + 8 * k) for k in range(8)]
    assert build_client(9, palette, 32, 64, 10, 32, etf, 0).arch == 1


def test_single_architecture_distinct_parameters(etf):
    a = build_client(0, [(2, 64)], 32, 64, 10, 32, etf, 0)
    b = build_client(1, [(2, 64)], 32, 64, 10, 32, etf, 0)
    assert a.f.recipe == b.f.recipe
    assert a.f.digest() != b.f.digest()
    assert a.h.digest() != b.h.digest()


def test_forward_shapes_follow_recipes(etf):
    x = np.zeros((3, 32))
    for i, (depth, width) in enumerate(PALETTE[:3]):
        model = build_client(i, PALETTE, 32, 64, 10, 32, etf, 0)
        assert model.f.recipe == extractor_recipe(32, depth, width, 64)
        n_fc = sum(1 for step in model.f.recipe if step[0] == "fc")
        assert n_fc == depth
        assert model.f(x).shape == (3, 64)
        assert model.embed(x).shape == (3, 10)
        assert model.h_prime(model.f(x)).shape == (3, 32)


def test_extractor_recipe_rejects_narrow_width():
    with pytest.raises(ValueError):
        extractor_recipe(32, 1, 16, 64)


def test_transfer_loss_arithmetic(etf):
    model = build_client(0, [(1, 4)], 3, 4, 10, 1, etf, 0)
    model.h_prime.parameters()["h_prime.0.weight"].data[:] = 0.0
    model.h_prime.parameters()["h_prime.0.bias"].data[:] = 0.0
    pair = ImageVectorPair(0, np.array([2.0]), np.ones(3), 0)
    assert knowledge_transfer_loss(model, [pair]).item() == pytest.approx(4.0)


def test_transfer_loss_zero_when_prediction_matches(etf):
    model = build_client(0, [(1, 4)], 3, 4, 10, 2, etf, 0)
    images = np.random.default_rng(0).standard_normal((3, 3))
    target = model.h_prime(model.f(images, True), True).data
    pairs = [ImageVectorPair(c, target[c], images[c], 0) for c in range(3)]
    assert knowledge_transfer_loss(model, pairs).item() == pytest.approx(0.0, abs=1e-12)


def test_transfer_loss_needs_pairs(etf):
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    with pytest.raises(ValueError):
        knowledge_transfer_loss(model, [])


def test_gradient_flow_separation(etf):
    gen = build_synthetic_generator(64, 32, 32, 0)
    model = build_client(1, PALETTE, 32, 64, 10, 32, etf, 0)
    grads_m = knowledge_transfer_loss(model, _pairs(gen, 10)).backward()
    h_names = set(model.h.parameters())
    assert not h_names & set(grads_m)
    assert any(np.abs(grads_m[k]).max() > 0 for k in model.f.parameters())

    x = np.random.default_rng(0).standard_normal((10, 32))
    y = np.arange(10)
    grads_a = local_loss(model, x, y).backward()
    assert not set(model.h_prime.parameters()) & set(grads_a)
    assert any(np.abs(grads_a[k]).max() > 0 for k in h_names)


def test_h_prime_shared_across_clients_and_fresh_each_round(etf):
    a = build_client(0, PALETTE, 32, 64, 10, 32, etf, 7)
    b = build_client(3, PALETTE, 32, 64, 10, 32, etf, 7)
    reinit_h_prime(a, 5, 7)
    reinit_h_prime(b, 5, 7)
    assert a.h_prime.digest() == b.h_prime.digest()
    before = a.h_prime.digest()
    reinit_h_prime(a, 6, 7)
    assert a.h_prime.digest() != before


def _local_data(seed=0, n=60):
    ds = make_synthetic_dataset(10, 32, n // 10, 0.5, seed)
    return ds.features, ds.labels.astype(np.int64)


def test_mu_zero_matches_no_transfer(etf):
    gen = build_synthetic_generator(64, 32, 32, 0)
    pairs = _pairs(gen, 10)
    x, y = _local_data()

    def run(**kw):
        model = build_client(2, PALETTE, 32, 64, 10, 32, etf, 0)
        for epoch in range(2):
            local_train_epoch(model, x, y, pairs, seed=0, round_idx=1, epoch=epoch, **kw)
        return model.digest()

    assert run(mu=0.0) == run(mu=50.0, use_transfer=False)
    assert run(mu=0.0) != run(mu=50.0)


def test_bootstrap_round_reports_zero_transfer_loss(etf):
    x, y = _local_data()
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    la, lm = local_train_epoch(model, x, y, [], mu=50.0)
    assert lm == 0.0
    assert la > 0


def test_step_count_is_floor_n_over_batch(etf, monkeypatch):
    import fedktl.client as client
    x, y = _local_data(n=60)
    calls = []
    real = client.combined_loss
    monkeypatch.setattr(client, "combined_loss", lambda *a, **k: calls.append(1) or real(*a, **k))
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    local_train_epoch(model, x[:57], y[:57], [], batch=10)
    assert len(calls) == 5


def test_mix_pairs_extends_pool(etf, monkeypatch):
    import fedktl.client as client
    gen = build_synthetic_generator(64, 32, 32, 0)
    x, y = _local_data(n=60)
    seen = []
    real = client.combined_loss
    monkeypatch.setattr(client, "combined_loss",
                        lambda m, xb, yb, pa, *a, **k: seen.append(pa) or real(m, xb, yb, pa, *a, **k))
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    local_train_epoch(model, x, y, _pairs(gen, 10), mix_pairs=True)
    assert len(seen) == 7 and all(p is None for p in seen)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_combined_loss_gradcheck(f64, seed):
    etf = synthesize_etf(5, 5, seed)
    model = build_client(seed, [(2, 6)], 4, 6, 5, 3, etf, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4))
    # hardest labels keep the margin loss out of its saturated region
    y = np.argmin(cosine_logits(model.embed(x, True), etf).data, axis=1)
    images, latents = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    params = model.parameters()
    loss = lambda: combined_loss(model, x, y, (images, latents), 50.0, ArcFaceParams(8, 0.3))[0]
    assert fd_gradcheck(params, loss, 1e-6) < 1e-4


def test_prototypes_are_class_means(etf):
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    x = np.random.default_rng(1).standard_normal((3, 32))
    y = np.array([4, 7, 7])
    g = model.embed(x).data
    protos = extract_prototypes(model, x, y)
    assert protos.classes() == [4, 7]
    np.testing.assert_array_equal(protos.entries[4], g[0])
    np.testing.assert_allclose(protos.entries[7], (g[1] + g[2]) / 2, rtol=1e-6)
    assert protos.entries[4].shape == (10,)
    assert protos.n_elements() == 20


def _identity_client(etf):
    K = etf.K
    f = Module("f", [("fc", K, K)], 0)
    h = Module("h", [("fc", K, K)], 0)
    for m in (f, h):
        p = m.parameters()
        p[f"{m.name}.0.weight"].data[:] = np.eye(K)
        p[f"{m.name}.0.bias"].data[:] = 0.0
    return ClientModel(0, 0, f, h, Module("h_prime", [("fc", K, 2)], 0), etf)


def test_evaluate_perfect_when_features_are_vertices(etf):
    model = _identity_client(etf)
    y = np.repeat(np.arange(10), 3)
    assert evaluate(model, etf.V.T[y], y) == 1.0


def test_untrained_model_near_chance(etf):
    accs = []
    for seed in range(5):
        ds = make_synthetic_dataset(10, 32, 20, 0.5, seed)
        model = build_client(seed, PALETTE, 32, 64, 10, 32, etf, seed)
        accs.append(evaluate(model, ds.features, ds.labels))
    assert abs(np.mean(accs) - 0.1) <= 0.1


def test_evaluate_ignores_margin_settings(etf):
    # evaluation reads raw cosines only, so no ArcFace argument exists
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0)
    x, y = _local_data()
    assert evaluate(model, x, y) == evaluate(model, x, y)
    with pytest.raises(ValueError):
        evaluate(model, x[:0], y[:0])


def test_without_etf_uses_linear_head(etf):
    model = build_client(0, PALETTE, 32, 64, 10, 32, etf, 0, use_etf=False)
    assert not model.uses_etf
    x, y = _local_data()
    local_train_epoch(model, x, y, [])
    protos = extract_prototypes(model, x, y)
    assert all(v.shape == (10,) for v in protos.entries.values())
