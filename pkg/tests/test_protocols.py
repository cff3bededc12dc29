from dataclasses import replace

import numpy as np
import pytest

from adaptlab import model, protocols as P
from adaptlab.errors import ConfigError
from adaptlab.numerics import Affine, entropy, softmax
from adaptlab.safety_eval import linear_cka

from oracles import loss_value

FAST = P.ProtocolConfig(lp_epochs=3, ft_epochs=2, seed=3)


def _same_params(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def _head_params(adapted):
    return [adapted.model.head.weight, adapted.model.head.bias]


@pytest.fixture(scope="module")
def plain_lp(pretrained, small_train):
    return P.run_lp(pretrained, small_train, FAST, 5)


def test_lp_leaves_extractor_untouched(pretrained, small_train, plain_lp):
    before = [p.copy() for p in pretrained.params()]
    out = P.run_lp(pretrained, small_train, FAST, 5)
    assert _same_params(pretrained.params(), before)
    assert _same_params(out.model.extractor.params(), before)
    h = model.embed(pretrained, small_train.inputs)
    assert linear_cka(h, model.embed(out.model.extractor, small_train.inputs)) == 1.0
    assert _same_params(_head_params(out), _head_params(plain_lp))


def test_lp_loss_decreases(plain_lp):
    assert plain_lp.lp_losses[-1] < plain_lp.lp_losses[0]


@pytest.mark.parametrize("cfg", [
    replace(FAST, mitigation="VAT", vat=P.VATConfig(alpha=0.0)),
    replace(FAST, mitigation="UDP", udp=P.UDPConfig(epsilon=0.0)),
    replace(FAST, mitigation="Soup", soup=P.SoupConfig(k=1, sparsity=0.0)),
], ids=["vat_alpha0", "udp_eps0", "soup_k1"])
def test_vanishing_mitigation_reproduces_lp(pretrained, small_train, plain_lp, cfg):
    out = P.run_lp(pretrained, small_train, cfg, 5)
    assert _same_params(_head_params(out), _head_params(plain_lp))


def test_zero_epoch_ft_is_identity(pretrained, small_train, plain_lp):
    out = P.run_ft(plain_lp.model, small_train, replace(FAST, kind="LP_FT", ft_epochs=0))
    assert _same_params(out.model.extractor.params(), pretrained.params())
    assert _same_params(_head_params(out), _head_params(plain_lp))


def test_lp_ft_with_zero_ft_lr_equals_lp(pretrained, small_train, plain_lp):
    out = P.run_protocol(pretrained, small_train, replace(FAST, kind="LP_FT", ft_lr=0.0), 5)
    assert _same_params(_head_params(out), _head_params(plain_lp))
    assert _same_params(out.model.extractor.params(), pretrained.params())


def test_ft_moves_features_but_not_its_input(pretrained, small_train, plain_lp):
    before = plain_lp.model.copy()
    out = P.run_ft(plain_lp.model, small_train, replace(FAST, kind="LP_FT", ft_lr=0.01))
    assert _same_params(plain_lp.model.extractor.params(), before.extractor.params())
    assert _same_params(_head_params(plain_lp), [before.head.weight, before.head.bias])
    assert not _same_params(out.model.extractor.params(), pretrained.params())
    assert out.model.pretrained_snapshot is pretrained


def test_protocol_runs_are_deterministic(pretrained, small_train):
    cfg = replace(FAST, kind="LP_FT", mitigation="UDP", stage="both", lp_epochs=1, ft_epochs=1)
    a = P.run_protocol(pretrained, small_train, cfg, 5)
    b = P.run_protocol(pretrained, small_train, cfg, 5)
    assert _same_params(a.model.graph().params(), b.model.graph().params())


def test_scratch_ft_ignores_pretrained_weights(pretrained, small_train):
    out = P.run_protocol(pretrained, small_train, replace(FAST, kind="FT", init="scratch", ft_epochs=1), 5)
    assert out.model.pretrained_snapshot is pretrained
    assert not np.allclose(out.model.extractor.affines()[0].weight, pretrained.affines()[0].weight, atol=0.05)


@pytest.mark.parametrize("kw", [
    dict(kind="XX"), dict(mitigation="Mixup"), dict(stage="middle"),
    dict(mitigation="Soup", stage="ft"), dict(kind="FT", mitigation="VAT", stage="lp"),
    dict(kind="LP", mitigation="UDP", stage="both"), dict(init="scratch"), dict(lp_lr=-1.0),
    dict(batch_size=0),
])
def test_protocol_config_validation(kw):
    with pytest.raises(ConfigError):
        P.ProtocolConfig(**kw)


def test_display_names():
    assert P.ProtocolConfig("LP_FT", "VAT", "lp").name == "LP(VAT)+FT"
    assert P.ProtocolConfig("LP_FT", "UDP", "ft").name == "LP+FT(UDP)"
    assert P.ProtocolConfig("FT", init="scratch").name == "FT(Scratch)"
    assert P.ProtocolConfig("LP", "Soup", "lp").name == "LP(Soup)"


# ---------------------------------------------------------------------------
# latent perturbations


def _random_head(rng, C, p, scale=1.0):
    return Affine(rng.normal(scale=scale, size=(C, p)), rng.normal(scale=0.3, size=C))


def test_vat_perturbation_has_radius_epsilon(rng):
    head = _random_head(rng, 5, 32)
    d = P.vat_perturbation(head, rng.normal(size=(50, 32)), P.VATConfig(epsilon=0.3), rng)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 0.3, rtol=1e-12)


def test_vat_perturbation_vanishes_for_zero_head(rng):
    head = Affine(np.zeros((5, 8)), np.zeros(5))
    assert np.all(P.vat_perturbation(head, rng.normal(size=(4, 8)), P.VATConfig(), rng) == 0.0)


def _grid_argmax_kl(head, h, eps, n=20000):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    ref = softmax(h @ head.weight.T + head.bias)
    kl = [loss_value((h + eps * d) @ head.weight.T + head.bias, "kl", ref) for d in dirs]
    return dirs[int(np.argmax(kl))]


@pytest.mark.parametrize("seed", range(5))
def test_vat_binary_direction_matches_grid_search(seed):
    # for two classes the local KL Hessian is rank one, so one power step is exact
    rng = np.random.default_rng(seed)
    head = _random_head(rng, 2, 2)
    h = rng.normal(size=(1, 2))
    d = P.vat_perturbation(head, h, P.VATConfig(epsilon=0.01), rng)[0] / 0.01
    best = _grid_argmax_kl(head, h, 0.01)
    assert abs(d @ best) >= 0.999  # KL is even in r to second order


@pytest.mark.parametrize("seed", range(3))
def test_vat_power_iteration_converges_for_three_classes(seed):
    rng = np.random.default_rng(10 + seed)
    head = _random_head(rng, 3, 2)
    h = rng.normal(size=(1, 2))
    d = P.vat_perturbation(head, h, P.VATConfig(epsilon=0.01, power_iters=30), rng)[0] / 0.01
    assert abs(d @ _grid_argmax_kl(head, h, 0.01)) >= 0.999


def test_vat_loss_gradients_match_finite_differences(rng):
    head = _random_head(rng, 4, 6)
    h = rng.normal(size=(5, 6))
    y = rng.integers(0, 4, size=5)
    cfg = P.VATConfig(alpha=0.7)
    delta = P.vat_perturbation(head, h, cfg, rng)
    _, dh, (dW, db) = P.vat_loss(head, h, y, cfg, rng, delta=delta)
    # the clean distribution is a stop-gradient target, so it stays frozen
    ref = softmax(h @ head.weight.T + head.bias)

    def f(hh, w, b):
        return (loss_value(hh @ w.T + b, "ce", y)
                + cfg.alpha * loss_value((hh + delta) @ w.T + b, "kl", ref))

    def central(arr, idx, call, eps=1e-6):
        old = arr[idx]
        arr[idx] = old + eps
        up = call()
        arr[idx] = old - eps
        down = call()
        arr[idx] = old
        return (up - down) / (2 * eps)

    w, b, hh = head.weight.copy(), head.bias.copy(), h.copy()
    call = lambda: f(hh, w, b)
    for idx in [(0, 0), (2, 3), (3, 5)]:
        assert central(w, idx, call) == pytest.approx(dW[idx], rel=1e-5, abs=1e-9)
        assert central(hh, idx, call) == pytest.approx(dh[idx], rel=1e-5, abs=1e-9)
    for j in range(4):
        assert central(b, j, call) == pytest.approx(db[j], rel=1e-5, abs=1e-9)


def test_vat_penalty_is_nonnegative(rng):
    head = _random_head(rng, 5, 8)
    h = rng.normal(size=(20, 8))
    y = rng.integers(0, 5, size=20)
    loss, _, _ = P.vat_loss(head, h, y, P.VATConfig(alpha=1.0, epsilon=0.5), rng)
    ce = loss_value(h @ head.weight.T + head.bias, "ce", y)
    assert loss >= ce


@pytest.mark.parametrize("seed", range(5))
def test_udp_binary_moves_towards_boundary(seed):
    rng = np.random.default_rng(seed)
    head = _random_head(rng, 2, 6)
    h = rng.normal(size=(10, 6))
    delta = P.udp_perturbation(head, h, P.UDPConfig(epsilon=0.05))
    dw = head.weight[1] - head.weight[0]
    margin = h @ dw + head.bias[1] - head.bias[0]
    expected = -np.sign(margin)[:, None] * dw / np.linalg.norm(dw)
    norms = np.linalg.norm(delta, axis=1)
    moved = norms > 0
    assert moved.any()
    cos = np.sum(delta[moved] * expected[moved], axis=1) / norms[moved]
    assert np.all(cos >= 0.99)


def test_udp_never_lowers_entropy_and_respects_radius(rng):
    head = _random_head(rng, 5, 16, scale=2.0)
    h = rng.normal(size=(200, 16))
    cfg = P.UDPConfig(epsilon=0.5, ascent_steps=8)
    delta = P.udp_perturbation(head, h, cfg)
    before = entropy(softmax(h @ head.weight.T + head.bias))
    after = entropy(softmax((h + delta) @ head.weight.T + head.bias))
    assert np.all(after >= before)
    assert np.all(np.linalg.norm(delta, axis=1) <= 0.5 * (1 + 1e-12))
    assert np.mean(after - before) > 0


def test_udp_zero_epsilon_is_zero(rng):
    head = _random_head(rng, 3, 4)
    assert np.all(P.udp_perturbation(head, rng.normal(size=(5, 4)), P.UDPConfig(epsilon=0.0)) == 0.0)


# ---------------------------------------------------------------------------
# soup


def test_soup_masks_sparsity_and_determinism():
    m = P.soup_masks(32, P.SoupConfig(k=4, sparsity=0.5, seed=1))
    assert m.shape == (4, 32)
    assert np.all((32 - m.sum(axis=1)) == 16)
    assert np.array_equal(m, P.soup_masks(32, P.SoupConfig(k=4, sparsity=0.5, seed=1)))


def test_soup_average_hand_example():
    w = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
    b = [np.array([1.0]), np.array([3.0])]
    masks = np.array([[1.0, 0.0], [1.0, 1.0]])
    soup = P.soup_average(w, b, masks)
    assert np.array_equal(soup.weight, np.array([[2.0, 2.0]]))
    assert np.array_equal(soup.bias, np.array([2.0]))


def test_soup_average_order_invariant(rng):
    k = 6
    w = [rng.normal(size=(5, 8)) for _ in range(k)]
    b = [rng.normal(size=5) for _ in range(k)]
    masks = P.soup_masks(8, P.SoupConfig(k=k))
    perm = rng.permutation(k)
    a = P.soup_average(w, b, masks)
    c = P.soup_average([w[i] for i in perm], [b[i] for i in perm], masks[perm])
    np.testing.assert_allclose(a.weight, c.weight, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(a.bias, c.bias, rtol=1e-14, atol=1e-15)


def test_soup_lp_trains_a_usable_head(pretrained, small_train):
    cfg = replace(FAST, mitigation="Soup", soup=P.SoupConfig(k=3), lp_epochs=5)
    out = P.run_lp(pretrained, small_train, cfg, 5)
    pred = np.argmax(model.predict(out.model, small_train.inputs), axis=1)
    assert np.mean(pred == small_train.labels) > 0.9
