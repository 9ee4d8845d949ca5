import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

import oracles as O
from helpers import assert_grad_close
from sketchgan import losses as L

T = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=T)


def apart(rng, shape, gap=0.05):
    """Two arrays whose entrywise difference stays at least ``gap`` from zero."""
    a = rng.normal(size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return a, a + sign * rng.uniform(gap, 1.0, size=shape)


class TinyP(nn.Module):
    """Two-tap float64 extractor small enough for finite differences."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.conv = nn.Conv2d(3, 4, 3, padding=1).double()

    def taps(self, x):
        x = x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x
        h = torch.tanh(self.conv(x))
        return [x, h]


# --------------------------------------------------------------------------
# analytic values


def test_adversarial_equilibrium_values():
    zero = torch.zeros(4, dtype=T)
    assert L.adversarial_loss_D(zero, zero).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert L.adversarial_loss_D(zero, zero).item() == pytest.approx(1.38629, abs=1e-5)
    assert L.adversarial_loss_G(zero).item() == pytest.approx(0.69315, abs=1e-5)
    big = torch.full((4,), 50.0, dtype=T)
    assert L.adversarial_loss_D(big, -big).item() < 1e-20
    assert math.isfinite(L.adversarial_loss_D(torch.tensor([1e4]), torch.tensor([1e4])).item())


def test_contrastive_triple():
    e = t([[0.3, -0.2, 0.5]])
    assert L.contrastive_loss(e, e.clone(), t([0]), margin=1.0).item() == 0.0
    assert L.contrastive_loss(e, e.clone(), t([1]), margin=1.0).item() == pytest.approx(0.5, abs=1e-12)
    far = e + t([[2.0, 0.0, 0.0]])
    assert L.contrastive_loss(e, far, t([1]), margin=1.0).item() == 0.0
    pair = L.ContrastivePair(e, far, t([0]))
    assert L.contrastive_loss(pair).item() == pytest.approx(2.0, abs=1e-12)


def test_contrastive_errors():
    e = t([[0.0, 1.0]])
    with pytest.raises(ValueError):
        L.contrastive_loss(e, e, t([2]))
    with pytest.raises(ValueError):
        L.contrastive_loss(e, e, t([0]), margin=0.0)
    with pytest.raises(ValueError):
        L.contrastive_loss(e, t([[0.0, 1.0, 2.0]]), t([0]))


def test_contrastive_continuous_at_margin():
    a = t([[0.0, 0.0]])
    m = 1.0
    below = L.contrastive_loss(a, t([[m - 1e-6, 0.0]]), t([1]), margin=m).item()
    above = L.contrastive_loss(a, t([[m + 1e-6, 0.0]]), t([1]), margin=m).item()
    assert abs(below - above) < 1e-11


def test_quality_loss_examples():
    a = [torch.zeros(2, 3, 4, 4, dtype=T)]
    b = [torch.full((2, 3, 4, 4), 2.0, dtype=T)]
    assert L.quality_feature_loss(a, b).item() == 4.0
    assert L.quality_feature_loss(a, a).item() == 0.0
    assert L.quality_feature_loss(a, b).item() == L.quality_feature_loss(b, a).item()
    with pytest.raises(ValueError):
        L.quality_feature_loss(a, [torch.zeros(2, 3, 4, 5)])
    with pytest.raises(ValueError):
        L.quality_feature_loss(a, a + a)


def test_content_loss_examples(rng):
    a = t(rng.normal(size=(2, 3, 4, 4)))
    assert L.content_loss([a], [a + 1]).item() == pytest.approx(1.0, abs=1e-12)
    assert L.content_loss([a], [a]).item() == 0.0
    b = t(rng.normal(size=(2, 3, 4, 4)))
    assert L.content_loss([a], [a + 2 * (b - a)]).item() == pytest.approx(2 * L.content_loss([a], [b]).item())
    with pytest.raises(ValueError):
        L.content_loss([a], [a[:, :2]])


def test_gram_examples(rng):
    g = L.gram_matrix(torch.ones(1, 2, 2, dtype=T))
    assert g.tolist() == [[1.0]]
    assert torch.all(L.gram_matrix(torch.zeros(3, 2, 2)) == 0)
    f = rng.normal(size=(4, 3, 5))
    g = L.gram_matrix(t(f))
    assert torch.equal(g, g.T)
    assert torch.linalg.eigvalsh(g).min().item() >= -1e-6
    assert np.allclose(g.numpy(), O.gram_bruteforce(f), atol=1e-12)
    batch = L.gram_matrix(t(rng.normal(size=(2, 4, 3, 3))))
    assert batch.shape == (2, 4, 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-5, 5)), st.randoms())
def test_gram_permutation_properties(f, random):
    g = L.gram_matrix(t(f)).numpy()
    pix = list(range(12))
    random.shuffle(pix)
    shuffled = f.reshape(3, 12)[:, pix].reshape(3, 3, 4)
    assert np.allclose(L.gram_matrix(t(shuffled)).numpy(), g, atol=1e-10)
    ch = [2, 0, 1]
    P = np.eye(3)[ch]
    assert np.allclose(L.gram_matrix(t(f[ch])).numpy(), P @ g @ P.T, atol=1e-12)


def test_style_examples():
    f = t([[[1.0, 2.0], [0.0, 1.0]], [[0.5, -1.0], [3.0, 0.0]]])[None]
    swapped = f[:, [1, 0]]
    ga, gb = O.gram_bruteforce(f[0].numpy()), O.gram_bruteforce(swapped[0].numpy())
    expected = np.abs(ga - gb).mean()
    assert expected > 0
    assert L.style_loss([f], [swapped]).item() == pytest.approx(expected, abs=1e-12)
    shuffled = f.reshape(1, 2, 4)[:, :, [3, 1, 0, 2]].reshape(1, 2, 2, 2)
    assert L.style_loss([f], [shuffled]).item() == pytest.approx(0.0, abs=1e-12)
    assert L.style_loss([f], [f]).item() == 0.0
    with pytest.raises(ValueError):
        L.style_loss([f], [f[:, :1]])


def test_cls_loss_examples():
    big = 40.0
    attrs = [[1, 0, 0, 1, 1], [0, 0, 1, 0, 1]]
    perfect = t([[big, -big, -big, big, big], [-big, -big, big, -big, big]])
    assert L.cls_loss(perfect, attrs).item() < 1e-15
    uniform_hair = perfect.clone()
    uniform_hair[:, :3] = 0
    assert L.cls_loss(uniform_hair, attrs).item() == pytest.approx(math.log(3), abs=1e-6)
    half_young = perfect.clone()
    half_young[:, 3] = 0
    assert L.cls_loss(half_young, attrs).item() == pytest.approx(math.log(2), abs=1e-6)
    assert L.cls_loss_real(perfect, attrs).item() == L.cls_loss_fake(perfect, attrs).item()


def test_cls_fake_scores_rec_as_a_photo():
    logits = t([[40.0, -40, -40, 40, 40]])
    assert L.cls_loss_fake(logits, [[1, 0, 0, 1, 0]]).item() < 1e-15
    assert L.cls_loss_fake(logits, [[1, 0, 0, 1, 0]]).item() == L.cls_loss_fake(logits, [[1, 0, 0, 1, 1]]).item()
    assert L.cls_loss_real(logits, [[1, 0, 0, 1, 0]]).item() > 30


def test_cls_loss_errors():
    with pytest.raises(ValueError):
        L.cls_loss(torch.zeros(2, 4), [[1, 0, 0, 1, 1]] * 2)
    with pytest.raises(ValueError):
        L.cls_loss(torch.zeros(2, 5), [[1, 1, 0, 1, 1]] * 2)
    with pytest.raises(ValueError):
        L.cls_loss(torch.zeros(3, 5), [[1, 0, 0, 1, 1]] * 2)


def test_reconstruction_examples(rng):
    P = TinyP()
    x = t(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    assert L.reconstruction_loss(x, x.clone(), P).item() == 0.0
    y = t(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    assert L.reconstruction_loss(x, y, P).item() == pytest.approx(L.content_loss(P.taps(x), P.taps(y)).item(), abs=1e-15)
    with pytest.raises(ValueError):
        L.reconstruction_loss(x, y[:, :1], P)


def test_reconstruction_zero_under_identity_generators(rng):
    P = TinyP()
    x = t(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    identity = nn.Identity()
    assert L.reconstruction_loss(x, identity(identity(x)), P).item() == 0.0


def test_identity_pairs_labels():
    real = torch.eye(4, dtype=T)
    fake = torch.eye(4, dtype=T) * 2
    pair = L.identity_pairs(real, fake)
    assert pair.Y.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert torch.equal(pair.emb_b[4], fake[1])
    pair = L.identity_pairs(real, fake, subject_ids=[3, 3, 5, 6])
    assert pair.Y.tolist() == [0, 0, 0, 0, 0, 1, 1, 1]


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(lambda3=-1.0)
    with pytest.raises(ValueError):
        L.LossWeights(margin_m=0.0)
    with pytest.raises(ValueError):
        L.LossWeights(pixelnorm_eps=0.0)


def _terms(rng):
    names = ["adv_g", "rec", "cont", "content", "style", "quality", "cls_f", "id_f"]
    return {k: t(rng.uniform(0.1, 2.0)) for k in names}


def test_total_loss_weights(rng):
    terms = _terms(rng)
    zero = L.LossWeights(0, 0, 0, 0, 0, 0)
    assert L.total_loss_G(terms, zero).item() == terms["adv_g"].item()
    w = L.LossWeights()
    doubled = L.LossWeights(lambda1=2 * w.lambda1)
    diff = L.total_loss_G(terms, doubled) - L.total_loss_G(terms, w)
    assert diff.item() == pytest.approx(w.lambda1 * terms["rec"].item(), rel=1e-12)
    d = L.total_loss_D({"adv_d": t(1.5), "cls_r": t(0.25)}, L.LossWeights(lambda5=2.0))
    assert d.item() == 2.0
    assert L.total_loss_G(terms, {"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0, "lambda4": 0.0,
                                  "lambda5": 0.0, "lambda6": 0.0}).item() == terms["adv_g"].item()


def test_total_gradient_is_weighted_sum_of_term_gradients():
    theta = torch.tensor(0.37, dtype=T, requires_grad=True)
    makers = {
        "adv_g": lambda p: L.adversarial_loss_G(p * t([1.0, -2.0])),
        "rec": lambda p: (p - 0.2).abs() * 3,
        "cont": lambda p: L.contrastive_loss(t([[0.0, 0.0]]), torch.stack([p, p * 0]).reshape(1, 2), t([1])),
        "content": lambda p: L.content_loss([p * torch.ones(1, 1, 2, 2, dtype=T)], [torch.zeros(1, 1, 2, 2, dtype=T)]),
        "style": lambda p: L.style_loss([p * torch.ones(1, 1, 2, 2, dtype=T)], [torch.ones(1, 1, 2, 2, dtype=T)]),
        "quality": lambda p: L.quality_feature_loss([p * torch.ones(2, dtype=T)], [torch.zeros(2, dtype=T)]),
        "cls_f": lambda p: L.cls_loss(torch.stack([p, -p, p * 0, p, p]).reshape(1, 5), [[1, 0, 0, 1, 1]]),
        "id_f": lambda p: p**2,
    }
    w = L.LossWeights(10.0, 0.5, 2.0, 3.0, 0.25, 1.5)
    coef = {"adv_g": 1.0, "rec": w.lambda1, "cont": w.lambda2, "content": w.lambda3, "style": w.lambda3,
            "quality": w.lambda4, "cls_f": w.lambda5, "id_f": w.lambda6}
    total = L.total_loss_G({k: f(theta) for k, f in makers.items()}, w)
    (g_total,) = torch.autograd.grad(total, theta)
    g_sum = 0.0
    for k, f in makers.items():
        p = theta.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(f(p), p)
        g_sum += coef[k] * g.item()
    assert g_total.item() == pytest.approx(g_sum, rel=1e-6)

    def total_at(v):
        p = torch.tensor(v, dtype=T)
        return L.total_loss_G({k: f(p) for k, f in makers.items()}, w).item()

    fd = (total_at(0.37 + 1e-3) - total_at(0.37 - 1e-3)) / 2e-3
    assert g_total.item() == pytest.approx(fd, rel=1e-4)


# --------------------------------------------------------------------------
# gradients against central differences (h = 1e-3, relative 1e-4)


def gradient_cases(rng):
    """(name, fn, inputs, wrt) for every loss; inputs at most 2x4x4x4."""
    a, b = apart(rng, (2, 4, 4, 4))
    c, d = apart(rng, (2, 3, 4, 4))
    P = TinyP()
    e1 = rng.normal(size=(4, 6))
    e2 = e1 + rng.normal(scale=0.4, size=(4, 6))
    Y = t([0, 1, 1, 0])
    attrs = [[1, 0, 0, 1, 1], [0, 1, 0, 0, 1]]
    return [
        ("adversarial_D real", lambda r, f: L.adversarial_loss_D(r, f), [rng.normal(size=4), rng.normal(size=4)], 0),
        ("adversarial_D fake", lambda r, f: L.adversarial_loss_D(r, f), [rng.normal(size=4), rng.normal(size=4)], 1),
        ("adversarial_G", L.adversarial_loss_G, [rng.normal(size=4)], 0),
        ("quality", lambda x, y: L.quality_feature_loss([x, x[:, :2] * 2], [y, y[:, :2]]), [a, b], 0),
        ("content", lambda x, y: L.content_loss([x], [y]), [a, b], 0),
        ("gram", lambda x: (L.gram_matrix(x) * t(np.arange(16).reshape(4, 4))).sum(), [a], 0),
        ("style", lambda x, y: L.style_loss([x], [y]), [a, b], 0),
        ("contrastive", lambda x, y: L.contrastive_loss(x, y, Y, margin=1.0), [e1, e2], 0),
        ("cls", lambda z: L.cls_loss(z, attrs), [rng.normal(size=(2, 5))], 0),
        ("reconstruction", lambda x, y: L.reconstruction_loss(x, y, P), [c, d], 1),
    ]


def test_every_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(99)
    for name, fn, inputs, wrt in gradient_cases(rng):
        try:
            assert_grad_close(fn, inputs, wrt)
        except AssertionError as exc:
            raise AssertionError(f"{name}: {exc}") from None
