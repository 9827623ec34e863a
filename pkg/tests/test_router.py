import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ragstereo.router import (Autoencoder, RepresentationEncoder, RouterBank,
                              reconstruction_error, route, scene_contrastive_loss,
                              train_router_entry)
from ragstereo.scenes import SceneSpec, generate_scene

TINTS = [(1.5, 0.5, 0.4), (0.4, 0.5, 1.5), (0.4, 1.5, 0.5), (1.3, 1.3, 0.3)]
SHIFTS = [0.0, -0.1, 0.05, 0.1]


def scenes(pairs=16, test_pairs=6, size=36):
    return [generate_scene(SceneSpec(f"s{k}", tint=t, brightness=b, height=size, width=size,
                                     pairs=pairs, test_pairs=test_pairs, seed=40 + k))
            for k, (t, b) in enumerate(zip(TINTS, SHIFTS))]


def fit_bank(data, lam, seed=0, epochs=200):
    bank = RouterBank(RepresentationEncoder(seed=seed), lam=lam, epochs=epochs)
    for t, ds in enumerate(data):
        train_router_entry(list(ds.left[ds.train_idx]), bank, seed=seed * 10 + t)
    return bank


def accuracy(bank, data):
    hits = [route(im, bank) == t + 1 for t, ds in enumerate(data) for im in ds.left[ds.test_idx]]
    return float(np.mean(hits))


def test_encoder_is_fixed_and_bounded():
    enc = RepresentationEncoder(seed=3)
    img = np.random.default_rng(0).random((20, 30, 3))
    a, b = enc(img), RepresentationEncoder(seed=3)(img)
    assert np.array_equal(a, b) and a.shape == (64,)
    assert np.all((a > 0) & (a < 1))
    with pytest.raises(ValueError):
        enc.projection[0, 0] = 1.0


def test_contrastive_loss_basics():
    x = np.random.default_rng(1).random(64)
    assert scene_contrastive_loss(x * 0.9, x, []) == 0.0
    far = [x + 0.5]
    # a perfect own reconstruction makes the own similarity dominate
    assert scene_contrastive_loss(x, x, far) < 1e-6
    # an old autoencoder reproducing our reconstruction exactly dominates instead
    assert scene_contrastive_loss(x + 0.5, x, [x + 0.5]) > 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_contrastive_loss_non_negative(seed, n_old):
    rng = np.random.default_rng(seed)
    x, rec = rng.random(16), rng.random(16)
    olds = [rng.random(16) for _ in range(n_old)]
    assert scene_contrastive_loss(rec, x, olds) >= 0
    t = scene_contrastive_loss(torch.tensor(rec[None]), torch.tensor(x[None]),
                               [torch.tensor(o[None]) for o in olds])
    assert abs(float(t) - scene_contrastive_loss(rec, x, olds)) < 1e-9


def test_route_depends_only_on_error_order():
    class Fixed(RouterBank):
        def __init__(self, errs):
            super().__init__()
            self.autoencoders = [None] * len(errs)
            self._errs = np.asarray(errs)

        def errors(self, image):
            return self._errs

    errs = [0.3, 0.05, 0.2, 0.05]
    for f in (lambda e: e, np.exp, lambda e: 5 * e + 2, np.sqrt):
        assert route(None, Fixed(f(np.asarray(errs)))) == 2
    with pytest.raises(ValueError):
        route(np.zeros((4, 4, 3)), RouterBank())


def test_new_entry_leaves_old_autoencoders_untouched():
    data = scenes(pairs=8, test_pairs=2)
    bank = fit_bank(data[:2], lam=0.1, epochs=30)
    before = [{k: v.clone() for k, v in ae.state_dict().items()} for ae in bank.autoencoders]
    train_router_entry(list(data[2].left), bank, seed=5)
    for old, ae in zip(before, bank.autoencoders):
        assert all(torch.equal(old[k], ae.state_dict()[k]) for k in old)


def test_zero_weight_is_plain_reconstruction_training():
    data = scenes(pairs=8, test_pairs=2)
    with_old = fit_bank(data[:1], lam=0.0, epochs=30)
    train_router_entry(list(data[1].left), with_old, seed=7)
    alone = RouterBank(RepresentationEncoder(seed=0), lam=0.0, epochs=30)
    train_router_entry(list(data[1].left), alone, seed=7)
    a, b = with_old.autoencoders[1].state_dict(), alone.autoencoders[0].state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_routing_accuracy_on_distinct_tints():
    data = scenes()
    acc = {lam: accuracy(fit_bank(data, lam), data) for lam in (0.0, 0.1)}
    assert acc[0.1] >= 0.95
    assert acc[0.0] <= acc[0.1]


def test_bank_round_trip(tmp_path):
    data = scenes(pairs=8, test_pairs=2)
    bank = fit_bank(data[:3], lam=0.1, epochs=30)
    bank.save(tmp_path / "r")
    back = RouterBank.load(tmp_path / "r")
    rng = np.random.default_rng(0)
    probes = [rng.random((36, 36, 3)) for _ in range(100)]
    assert [route(p, bank) for p in probes] == [route(p, back) for p in probes]
    assert np.array_equal(bank.errors(probes[0]), back.errors(probes[0]))


def test_reconstruction_error_checks_shape():
    ae = Autoencoder()
    assert reconstruction_error(np.full(64, 0.5), ae) >= 0
    assert reconstruction_error(np.full((3, 64), 0.5), ae).shape == (3,)

    class Broken:
        def reconstruct(self, x):
            return np.zeros(10)

    with pytest.raises(ValueError):
        reconstruction_error(np.zeros(64), Broken())
